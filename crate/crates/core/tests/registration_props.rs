use proptest::prelude::*;
use rand::{rngs::StdRng, Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use twinbridge_core::registration::{fre, register_rigid, FiducialSet};
use twinbridge_core::transforms::{RigidTransform, UnitQuaternion, Vec3};

/// Mean FRE for 10 fiducials in a 10 cm cube with 1 mm per-axis noise,
/// from a 200k-trial Monte Carlo run with an independent numpy Kabsch.
const MC_MEAN_FRE: f64 = 1.533_852_4e-3;

fn random_rotation(rng: &mut StdRng) -> UnitQuaternion {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    UnitQuaternion::new(q[0], q[1], q[2], q[3]).unwrap()
}

fn random_transform(rng: &mut StdRng) -> RigidTransform {
    RigidTransform::new(
        random_rotation(rng),
        Vec3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        ),
    )
}

fn random_points(rng: &mut StdRng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            )
        })
        .collect()
}

fn make_trial(rng: &mut StdRng, sigma: f64) -> (RigidTransform, FiducialSet, FiducialSet) {
    let fixed = random_points(rng, 10);
    let truth = random_transform(rng);
    let inv = truth.inverse();
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    let moving = fixed
        .iter()
        .map(|p| {
            let q = inv.transform_point(*p);
            if sigma > 0.0 {
                q + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
            } else {
                q
            }
        })
        .collect();
    (
        truth,
        FiducialSet::new("fixed", fixed).unwrap(),
        FiducialSet::new("moving", moving).unwrap(),
    )
}

fn determinant(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[test]
fn noiseless_trials_recover_truth() {
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..100 {
        let (truth, fixed, moving) = make_trial(&mut rng, 0.0);
        let r = register_rigid(&fixed, &moving).unwrap();
        let (ang, dist) = r.transform.distance(&truth);
        assert!(ang <= 1e-9 && dist <= 1e-9, "{ang} rad {dist} m");
        assert!(r.fre <= 1e-9);
    }
}

#[test]
fn noisy_mean_fre_matches_monte_carlo_oracle() {
    let mut rng = StdRng::seed_from_u64(2);
    let trials = 500;
    let mean: f64 = (0..trials)
        .map(|_| {
            let (_, fixed, moving) = make_trial(&mut rng, 1e-3);
            register_rigid(&fixed, &moving).unwrap().fre
        })
        .sum::<f64>()
        / trials as f64;
    let rel = (mean - MC_MEAN_FRE).abs() / MC_MEAN_FRE;
    assert!(rel <= 0.2, "mean FRE {mean} vs oracle {MC_MEAN_FRE}");
}

#[test]
fn optimal_against_random_perturbations() {
    let mut rng = StdRng::seed_from_u64(3);
    let (_, fixed, moving) = make_trial(&mut rng, 0.0);
    let best = register_rigid(&fixed, &moving).unwrap();
    for _ in 0..1000 {
        let axis = Vec3::new(rng.gen(), rng.gen(), rng.gen()) - Vec3::new(0.5, 0.5, 0.5);
        let nudge = RigidTransform::new(
            UnitQuaternion::from_axis_angle(axis, rng.gen_range(-1e-3..1e-3)),
            Vec3::new(
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
            ),
        );
        let perturbed = nudge.compose(&best.transform);
        assert!(best.fre <= fre(&perturbed, &fixed, &moving).unwrap());
    }
}

proptest! {
    #[test]
    fn rotation_is_proper_even_for_near_reflections(seed in any::<u64>(), flip in 0usize..3, sigma in 0.0f64..0.02) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (_, fixed, moving) = make_trial(&mut rng, sigma);
        let mirrored: Vec<Vec3> = moving.points.iter().map(|p| {
            let mut a = p.to_array();
            a[flip] = -a[flip];
            Vec3::from_array(a)
        }).collect();
        let mirrored = FiducialSet::new("mirrored", mirrored).unwrap();
        for m in [&moving, &mirrored] {
            let r = register_rigid(&fixed, m).unwrap();
            prop_assert!((determinant(r.transform.rotation.to_matrix()) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn common_translation_leaves_fre_unchanged(seed in any::<u64>(), offset in prop::array::uniform3(-10.0f64..10.0)) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (_, fixed, moving) = make_trial(&mut rng, 1e-3);
        let shift = |s: &FiducialSet| FiducialSet::new("shifted", s.points.iter().map(|p| *p + Vec3::from_array(offset)).collect()).unwrap();
        let a = register_rigid(&fixed, &moving).unwrap().fre;
        let b = register_rigid(&shift(&fixed), &shift(&moving)).unwrap().fre;
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn fre_matches_definition(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (_, fixed, moving) = make_trial(&mut rng, 2e-3);
        let r = register_rigid(&fixed, &moving).unwrap();
        let m = r.transform.to_matrix4();
        let mut sum = 0.0;
        for (f, p) in fixed.points.iter().zip(&moving.points) {
            let mapped = [0, 1, 2].map(|i| m[i][0] * p.x + m[i][1] * p.y + m[i][2] * p.z + m[i][3]);
            sum += (mapped[0] - f.x).powi(2) + (mapped[1] - f.y).powi(2) + (mapped[2] - f.z).powi(2);
        }
        let expected = (sum / fixed.len() as f64).sqrt();
        prop_assert!((r.fre - expected).abs() <= 1e-12);
    }
}
