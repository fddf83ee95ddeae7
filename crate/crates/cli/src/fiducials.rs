//! Fiducial CSV files: one `label,x,y,z` row per point, meters. A header
//! row is allowed and skipped when its coordinates are not numbers.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use twinbridge_core::registration::FiducialSet;
use twinbridge_core::transforms::Vec3;

pub fn read_points(path: &Path) -> Result<Vec<(String, Vec3)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("{}: bad CSV", path.display()))?;
        if row.len() != 4 {
            bail!("{}:{}: expected label,x,y,z", path.display(), i + 1);
        }
        let coords: Result<Vec<f64>, _> = (1..4).map(|k| row[k].parse::<f64>()).collect();
        match coords {
            Ok(c) => out.push((row[0].to_owned(), Vec3::new(c[0], c[1], c[2]))),
            Err(_) if i == 0 => continue,
            Err(e) => bail!("{}:{}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Pairs two labelled point lists by label, in the order of `fixed`.
pub fn pair(
    fixed: Vec<(String, Vec3)>,
    moving: Vec<(String, Vec3)>,
) -> Result<(FiducialSet, FiducialSet)> {
    if fixed.len() != moving.len() {
        bail!(
            "fixed has {} fiducials but moving has {}",
            fixed.len(),
            moving.len()
        );
    }
    let mut by_label: HashMap<String, Vec3> = HashMap::with_capacity(moving.len());
    for (label, p) in moving {
        if by_label.insert(label.clone(), p).is_some() {
            bail!("duplicate moving label '{label}'");
        }
    }
    let mut f = Vec::with_capacity(fixed.len());
    let mut m = Vec::with_capacity(fixed.len());
    for (label, p) in fixed {
        let q = by_label
            .remove(&label)
            .with_context(|| format!("label '{label}' missing from moving set"))?;
        f.push(p);
        m.push(q);
    }
    Ok((FiducialSet::new("fixed", f)?, FiducialSet::new("moving", m)?))
}
