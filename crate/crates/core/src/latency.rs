//! Round-trip delay benchmark against an echo responder, plus the
//! statistics and export helpers used to report it.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, DeliveryMode, Node};
use crate::messages::{EchoRequest, Message, TOPIC_RTD_REPLY, TOPIC_RTD_REQUEST};
use crate::timer::StopSignal;
use crate::transforms::{RigidTransform, Timestamp};

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("no samples to summarize")]
    EmptySamples,
    #[error("echo responder unreachable: 0 of {sent} requests answered")]
    Unreachable { sent: u64 },
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtdSample {
    pub seq: u64,
    pub rtd_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_frames: u64,
    pub rate_hz: f64,
    pub timeout: Duration,
    pub hci_threshold_ms: f64,
    /// Identity poses attached to each request so its size resembles a
    /// full transform update.
    pub filler_bodies: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_frames: 1000,
            rate_hz: 50.0,
            timeout: Duration::from_millis(500),
            hci_threshold_ms: 16.0,
            filler_bodies: 25,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), LatencyError> {
        if self.n_frames == 0 {
            return Err(LatencyError::Config("n_frames must be at least 1".into()));
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err(LatencyError::Config(format!(
                "rate must be positive, got {}",
                self.rate_hz
            )));
        }
        if self.timeout.is_zero() {
            return Err(LatencyError::Config("timeout must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOutcome {
    pub samples: Vec<RtdSample>,
    /// Sequence numbers that timed out or were never answered.
    pub dropped: Vec<u64>,
    pub stats: LatencyStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HciAssessment {
    pub one_way_ms: f64,
    pub within_threshold: bool,
}

pub fn compute_stats(samples: &[RtdSample]) -> Result<LatencyStats, LatencyError> {
    let mut v: Vec<f64> = samples.iter().map(|s| s.rtd_ms).collect();
    if v.is_empty() {
        return Err(LatencyError::EmptySamples);
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    let std = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(LatencyStats {
        n,
        mean,
        median,
        std,
        min: v[0],
        max: v[n - 1],
        p95: v[rank - 1],
    })
}

/// One-way latency taken as half the mean round trip.
pub fn assess_hci(stats: &LatencyStats, config: &BenchConfig) -> HciAssessment {
    let one_way_ms = stats.mean / 2.0;
    HciAssessment {
        one_way_ms,
        within_threshold: one_way_ms < config.hci_threshold_ms,
    }
}

fn session_id(node: &Node) -> u64 {
    let t = Timestamp::now().as_nanos();
    (node.publisher_id() << 40) ^ t
}

/// Sends `n_frames` echo requests at `rate_hz` and times each reply on
/// this process's monotonic clock.
pub fn run_rtd_bench(
    node: &Node,
    config: &BenchConfig,
    stop: &StopSignal,
) -> Result<BenchOutcome, LatencyError> {
    config.validate()?;
    let replies = node.subscribe(TOPIC_RTD_REPLY, DeliveryMode::queued())?;
    let session = session_id(node);
    let period = Duration::from_secs_f64(1.0 / config.rate_hz);
    let filler = vec![RigidTransform::IDENTITY; config.filler_bodies];

    let mut outstanding: HashMap<u64, Instant> = HashMap::new();
    let mut samples = Vec::with_capacity(config.n_frames as usize);
    let mut dropped = Vec::new();
    let mut sent = 0u64;
    let start = Instant::now();

    info!(
        "rtd bench: {} frames at {} Hz, session {session:x}",
        config.n_frames, config.rate_hz
    );
    while !stop.is_stopped() && (sent < config.n_frames || !outstanding.is_empty()) {
        let now = Instant::now();
        outstanding.retain(|&seq, &mut at| {
            let alive = now.duration_since(at) < config.timeout;
            if !alive {
                dropped.push(seq);
            }
            alive
        });

        let next_send = (sent < config.n_frames).then(|| start + period * sent as u32);
        if let Some(due) = next_send.filter(|d| *d <= now) {
            let t0 = Instant::now();
            node.publish(
                TOPIC_RTD_REQUEST,
                Message::EchoRequest(EchoRequest {
                    session,
                    seq: sent,
                    t0_nanos: Timestamp::from_instant(t0).as_nanos(),
                    filler: filler.clone(),
                }),
            )?;
            outstanding.insert(sent, t0);
            sent += 1;
            if now.duration_since(due) > period {
                debug!("rtd request {} sent {:?} late", sent - 1, now - due);
            }
            continue;
        }

        let expiry = outstanding.values().min().map(|at| *at + config.timeout);
        let wake = match (next_send, expiry) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => break,
        };
        let wait = wake.saturating_duration_since(now).min(Duration::from_millis(50));
        if let Some(env) = replies.recv(wait)? {
            let received = Instant::now();
            if let Message::EchoReply(r) = env.payload {
                if r.session != session {
                    continue;
                }
                match outstanding.remove(&r.seq) {
                    Some(at) => samples.push(RtdSample {
                        seq: r.seq,
                        rtd_ms: received.duration_since(at).as_secs_f64() * 1e3,
                    }),
                    None => debug!("late or duplicate reply for seq {}", r.seq),
                }
            }
        }
    }
    dropped.extend(outstanding.into_keys());
    dropped.sort_unstable();

    if samples.is_empty() {
        return Err(LatencyError::Unreachable { sent });
    }
    if !dropped.is_empty() {
        warn!("{} of {sent} rtd requests dropped", dropped.len());
    }
    samples.sort_by_key(|s| s.seq);
    let stats = compute_stats(&samples)?;
    Ok(BenchOutcome {
        samples,
        dropped,
        stats,
    })
}

/// Stats sidecar written next to an exported series: `rtd.csv` gets
/// `rtd.stats.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("stats.json")
}

/// Writes `frame,rtd_ms` rows and the stats sidecar.
pub fn export_series(samples: &[RtdSample], path: &Path) -> Result<LatencyStats, LatencyError> {
    let stats = compute_stats(samples)?;
    let write_csv = || -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["frame", "rtd_ms"])?;
        for s in samples {
            w.write_record([s.seq.to_string(), format!("{:.6}", s.rtd_ms)])?;
        }
        w.flush()?;
        Ok(())
    };
    write_csv().map_err(|e| LatencyError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    fs::write(&side, json + "\n").map_err(|source| LatencyError::Io { path: side, source })?;
    Ok(stats)
}

pub fn read_sidecar(path: &Path) -> Result<LatencyStats, LatencyError> {
    let text = fs::read_to_string(path).map_err(|source| LatencyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| LatencyError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })
}
