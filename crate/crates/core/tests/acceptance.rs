//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::{Isometry3, Matrix4, Translation3, Unit, UnitQuaternion as NaQuat, Vector3};
use rand::{rngs::StdRng, Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use twinbridge_core::bus::{Broker, DeliveryMode, Node};
use twinbridge_core::demo::{run_demo, DemoConfig, DemoScript, Sinusoid};
use twinbridge_core::latency::{assess_hci, compute_stats, run_rtd_bench, BenchConfig, LatencyStats, RtdSample};
use twinbridge_core::mirror::{build_from_metadata, run_sync_loop, SyncTimerConfig};
use twinbridge_core::registration::{register_rigid, FiducialSet};
use twinbridge_core::scene::{fixtures, parse_adf, parse_urdf_subset, publish_metadata};
use twinbridge_core::sim::{build_model, SimConfig, Simulator};
use twinbridge_core::tftree::{StampedTransform, TransformBuffer};
use twinbridge_core::timer::StopSignal;
use twinbridge_core::transforms::{RigidTransform, Timestamp, UnitQuaternion, Vec3};

/// Mean FRE for 10 fiducials uniform in a 10 cm cube with sigma = 1 mm
/// per axis, from an independent 200k-trial Monte Carlo run.
const MC_MEAN_FRE: f64 = 1.533_852_4e-3;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn galen() -> twinbridge_core::scene::SceneDescription {
    parse_adf(fixtures::GALEN25_ADF).expect("fixture parses")
}

/// Simulator serving the bus on a loopback TCP port.
fn start_sim(inject_delay: Duration) -> (Broker, twinbridge_core::bus::ServerHandle, StopSignal, thread::JoinHandle<()>) {
    let broker = Broker::new();
    let server = broker.serve("127.0.0.1:0").expect("serve");
    let desc = galen();
    let node = broker.node();
    publish_metadata(&node, &desc).expect("metadata");
    let first = broker.node().subscribe("tf", DeliveryMode::Latest).expect("subscribe");
    let stop = StopSignal::new();
    let s = stop.clone();
    let config = SimConfig {
        inject_delay,
        ..SimConfig::default()
    };
    let handle = thread::spawn(move || {
        Simulator::new(build_model(&desc), config)
            .expect("sim config")
            .run(&node, &s)
            .expect("sim run");
    });
    first.recv(Duration::from_secs(5)).expect("bus").expect("sim never published");
    (broker, server, stop, handle)
}

fn rtd_replication() -> Check {
    let (_broker, server, stop, handle) = start_sim(Duration::from_millis(10));
    let client = Node::connect(server.local_addr()).map_err(|e| e.to_string())?;
    let config = BenchConfig::default();
    let out = run_rtd_bench(&client, &config, &StopSignal::new());
    stop.stop();
    handle.join().map_err(|_| "sim panicked".to_string())?;
    let out = out.map_err(|e| e.to_string())?;
    let s = out.stats;
    ensure(
        s.n == 1000 && (19.0..=22.0).contains(&s.mean) && (s.median - s.mean).abs() <= 1.0,
        format!(
            "n={} dropped={} mean={:.3} median={:.3} std={:.3} p95={:.3} ms",
            s.n,
            out.dropped.len(),
            s.mean,
            s.median,
            s.std,
            s.p95
        ),
    )
}

fn brute_force_stats(v: &[f64]) -> LatencyStats {
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
    // order statistic k: the value with exactly k smaller elements (values are distinct)
    let order = |k: usize| *v.iter().find(|x| v.iter().filter(|y| y < x).count() == k).unwrap();
    let median = if n % 2 == 1 {
        order(n / 2)
    } else {
        (order(n / 2 - 1) + order(n / 2)) / 2.0
    };
    let rank = (0.95 * n as f64).ceil() as usize;
    LatencyStats {
        n,
        mean,
        median,
        std,
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        p95: order(rank - 1),
    }
}

fn stats_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(2024);
    let v: Vec<f64> = (0..10_000).map(|_| rng.gen_range(5.0..45.0)).collect();
    let samples: Vec<RtdSample> = v
        .iter()
        .enumerate()
        .map(|(i, &rtd_ms)| RtdSample { seq: i as u64, rtd_ms })
        .collect();
    let begun = Instant::now();
    let got = compute_stats(&samples).map_err(|e| e.to_string())?;
    let elapsed = begun.elapsed();
    let want = brute_force_stats(&v);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let worst = [
        rel(got.mean, want.mean),
        rel(got.median, want.median),
        rel(got.std, want.std),
        rel(got.min, want.min),
        rel(got.max, want.max),
        rel(got.p95, want.p95),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    ensure(
        got.n == want.n && worst <= 1e-12 && elapsed < Duration::from_secs(1),
        format!("worst relative error {worst:.2e}, compute_stats took {elapsed:?}"),
    )
}

fn sync_fidelity() -> Check {
    let desc = galen();
    let model = build_model(&desc);
    let script = DemoScript::sinusoidal(
        &model,
        &Sinusoid::default(),
        Duration::from_secs(5),
        Duration::from_millis(2500),
    )
    .map_err(|e| e.to_string())?;
    let begun = Instant::now();
    let report = run_demo(&desc, &script, &DemoConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = begun.elapsed();
    ensure(
        report.quiescent
            && report.bodies.len() == 25
            && report.max_settled_m <= 1e-9
            && report.max_settled_rad <= 1e-9
            && report.max_in_motion_rad > 0.0
            && elapsed < Duration::from_secs(15),
        format!(
            "{} bodies, settled error {:.1e} m / {:.1e} rad, in motion up to {:.2e} m / {:.2e} rad, {} commands, {:.1?}",
            report.bodies.len(),
            report.max_settled_m,
            report.max_settled_rad,
            report.max_in_motion_m,
            report.max_in_motion_rad,
            report.messages.commands_applied,
            elapsed
        ),
    )
}

fn timer_contract() -> Check {
    let (broker, _server, sim_stop, handle) = start_sim(Duration::ZERO);
    let node = broker.node();
    let mut scene = build_from_metadata(&node, Duration::from_secs(2)).map_err(|e| e.to_string())?;
    let tf = node.subscribe("tf", DeliveryMode::queued()).map_err(|e| e.to_string())?;
    let stop = StopSignal::new();
    let s = stop.clone();
    let stopper = thread::spawn(move || {
        thread::sleep(Duration::from_secs(5));
        s.stop();
    });
    let mut buffer = TransformBuffer::default();
    let result = run_sync_loop(&mut scene, &mut buffer, &tf, &SyncTimerConfig::default(), &stop, None);
    stopper.join().ok();
    sim_stop.stop();
    handle.join().ok();
    result.map_err(|e| e.to_string())?;
    let st = &scene.stats;
    ensure(
        (980..=1020).contains(&st.ticks) && (4.9..=5.1).contains(&st.interval_mean_ms) && scene.is_synced(),
        format!(
            "{} ticks, mean period {:.4} ms (std {:.4}, max {:.3}), {} missed",
            st.ticks, st.interval_mean_ms, st.interval_std_ms, st.interval_max_ms, st.missed_deadlines
        ),
    )
}

struct Edge {
    start: RigidTransform,
    axis: [f64; 3],
    angle: f64,
    velocity: [f64; 3],
}

impl Edge {
    fn random(rng: &mut StdRng) -> Self {
        let mut axis = [0.0; 3];
        while axis.iter().map(|a| a * a).sum::<f64>() < 1e-2 {
            axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        }
        let start = RigidTransform::new(
            UnitQuaternion::from_axis_angle(
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)),
                rng.gen_range(-3.0..3.0),
            ),
            Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        );
        Self {
            start,
            axis,
            angle: rng.gen_range(-3.0..3.0),
            velocity: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        }
    }

    /// Oracle pose after fraction `s` of the interval: constant rotation
    /// rate about a body-fixed axis, constant linear velocity.
    fn analytic(&self, s: f64) -> Matrix4<f64> {
        let p = self.start.translation;
        let q = self.start.rotation;
        let q0 = NaQuat::from_quaternion(nalgebra::Quaternion::new(q.w(), q.x(), q.y(), q.z()));
        let spin = NaQuat::from_axis_angle(&Unit::new_normalize(Vector3::from(self.axis)), self.angle * s);
        let t = Vector3::new(p.x, p.y, p.z) + Vector3::from(self.velocity) * s;
        Isometry3::from_parts(Translation3::from(t), q0 * spin).to_homogeneous()
    }

    fn sample(&self, end: bool) -> RigidTransform {
        if !end {
            return self.start;
        }
        let spin = UnitQuaternion::from_axis_angle(Vec3::from_array(self.axis), self.angle);
        let v = Vec3::from_array(self.velocity);
        RigidTransform::new(self.start.rotation * spin, self.start.translation + v)
    }
}

fn max_abs_diff(ours: &RigidTransform, m: &Matrix4<f64>) -> f64 {
    let o = ours.to_matrix4();
    let mut worst = 0.0f64;
    for r in 0..4 {
        for c in 0..4 {
            worst = worst.max((o[r][c] - m[(r, c)]).abs());
        }
    }
    worst
}

fn tf_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(5);
    let frames = ["world", "mid", "leaf"];
    let (mut worst_buffered, mut worst_mid) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let edges = [Edge::random(&mut rng), Edge::random(&mut rng)];
        let t0 = rng.gen_range(1_000u64..1_000_000_000);
        let t1 = t0 + 2 * rng.gen_range(1_000u64..500_000_000);
        let mut buf = TransformBuffer::default();
        for (stamp, end) in [(t0, false), (t1, true)] {
            for (i, e) in edges.iter().enumerate() {
                buf.insert(StampedTransform::new(frames[i], frames[i + 1], Timestamp::from_nanos(stamp), e.sample(end)))
                    .map_err(|e| e.to_string())?;
            }
        }
        let world_of = |s: f64| -> [Matrix4<f64>; 3] {
            let a = edges[0].analytic(s);
            [Matrix4::identity(), a, a * edges[1].analytic(s)]
        };
        let (a, b) = (rng.gen_range(0..3), rng.gen_range(0..3));
        let (stamp, s) = if rng.gen_bool(0.5) { (t0, 0.0) } else { (t1, 1.0) };
        let w = world_of(s);
        let got = buf
            .lookup(frames[a], frames[b], Timestamp::from_nanos(stamp))
            .map_err(|e| e.to_string())?;
        worst_buffered = worst_buffered.max(max_abs_diff(&got, &(w[a].try_inverse().unwrap() * w[b])));

        let w = world_of(0.5);
        let got = buf
            .lookup("world", "leaf", Timestamp::from_nanos((t0 + t1) / 2))
            .map_err(|e| e.to_string())?;
        worst_mid = worst_mid.max(max_abs_diff(&got, &w[2]));
    }
    ensure(
        worst_buffered <= 1e-9 && worst_mid <= 1e-9,
        format!("100 chains: buffered-time error {worst_buffered:.1e}, midpoint error {worst_mid:.1e}"),
    )
}

fn random_rotation(rng: &mut StdRng) -> UnitQuaternion {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    UnitQuaternion::new(q[0], q[1], q[2], q[3]).expect("nonzero")
}

fn registration_trial(rng: &mut StdRng, sigma: f64) -> (RigidTransform, FiducialSet, FiducialSet) {
    let fixed: Vec<Vec3> = (0..10)
        .map(|_| Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)))
        .collect();
    let truth = RigidTransform::new(
        random_rotation(rng),
        Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)),
    );
    let inv = truth.inverse();
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma");
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
        FiducialSet::new("fixed", fixed).expect("fixed"),
        FiducialSet::new("moving", moving).expect("moving"),
    )
}

fn registration_recovery() -> Check {
    let begun = Instant::now();
    let mut rng = StdRng::seed_from_u64(6);
    let (mut worst_rad, mut worst_m, mut worst_fre) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (truth, fixed, moving) = registration_trial(&mut rng, 0.0);
        let r = register_rigid(&fixed, &moving).map_err(|e| e.to_string())?;
        let (ang, dist) = r.transform.distance(&truth);
        worst_rad = worst_rad.max(ang);
        worst_m = worst_m.max(dist);
        worst_fre = worst_fre.max(r.fre);
    }
    let mut sum = 0.0;
    for _ in 0..500 {
        let (_, fixed, moving) = registration_trial(&mut rng, 1e-3);
        sum += register_rigid(&fixed, &moving).map_err(|e| e.to_string())?.fre;
    }
    let mean = sum / 500.0;
    let rel = (mean - MC_MEAN_FRE) / MC_MEAN_FRE;
    let elapsed = begun.elapsed();
    ensure(
        worst_rad <= 1e-9 && worst_m <= 1e-9 && worst_fre <= 1e-9 && rel.abs() <= 0.2 && elapsed < Duration::from_secs(5),
        format!(
            "noiseless worst {worst_rad:.1e} rad / {worst_m:.1e} m / FRE {worst_fre:.1e}; noisy mean FRE {:.4} mm vs oracle {:.4} mm ({:+.1}%), {elapsed:.1?}",
            mean * 1e3,
            MC_MEAN_FRE * 1e3,
            rel * 100.0
        ),
    )
}

fn scene_parsing() -> Check {
    let adf = galen();
    let urdf = parse_urdf_subset(fixtures::GALEN25_URDF).map_err(|e| e.to_string())?;
    let broker = Broker::new();
    publish_metadata(&broker.node(), &adf).map_err(|e| e.to_string())?;
    let scene = build_from_metadata(&broker.node(), Duration::from_secs(1)).map_err(|e| e.to_string())?;
    ensure(
        adf == urdf && adf.bodies.len() == 25 && adf.joints.len() == 24 && scene.model_nodes.len() == 25,
        format!(
            "ADF == URDF: {}, {} bodies, {} joints, {} model nodes",
            adf == urdf,
            adf.bodies.len(),
            adf.joints.len(),
            scene.model_nodes.len()
        ),
    )
}

fn hci_assessment() -> Check {
    let stats = LatencyStats {
        n: 1000,
        mean: 19.98,
        median: 18.99,
        std: 4.40,
        min: 19.98,
        max: 19.98,
        p95: 19.98,
    };
    let a = assess_hci(&stats, &BenchConfig::default());
    ensure(
        (a.one_way_ms - 9.99).abs() <= 1e-9 && a.within_threshold,
        format!("one way {:.4} ms, within 16 ms threshold: {}", a.one_way_ms, a.within_threshold),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("controlled RTD replication", rtd_replication),
        ("stats oracle", stats_oracle),
        ("sync fidelity", sync_fidelity),
        ("timer contract", timer_contract),
        ("transform tree oracle", tf_oracle),
        ("registration recovery", registration_recovery),
        ("scene parsing", scene_parsing),
        ("HCI assessment", hci_assessment),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let begun = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {}. {name}: {detail} [{:.1?}]", i + 1, begun.elapsed());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}
