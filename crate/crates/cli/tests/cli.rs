use std::net::TcpListener;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use twinbridge_core::bus::Node;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twinbridge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn free_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: stdout {:?} stderr {:?}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

struct Background(Child);

impl Drop for Background {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn wait_for_bus(endpoint: &str) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while Node::connect(endpoint).is_err() {
        assert!(Instant::now() < deadline, "bus never came up on {endpoint}");
        thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["sim", "mirror", "bench", "register", "demo", "gateway"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let out = run(&["bench", "rtd", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--bus", "--frames", "--rate-hz", "--out"] {
        assert!(text.contains(flag), "{flag} missing");
    }
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["dance"][..], &["demo", "--bogus"], &["register"], &[]] {
        let out = run(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn bench_without_responder_exits_two() {
    let out = run(&["bench", "rtd", "--bus", &free_endpoint(), "--frames", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("unreachable"), "{err}");
}

#[test]
fn register_prints_pose_and_fre() {
    let dir = tempfile::tempdir().unwrap();
    let fixed = dir.path().join("fixed.csv");
    let moving = dir.path().join("moving.csv");
    std::fs::write(
        &fixed,
        "label,x,y,z\nA,0.0,0.0,0.0\nB,0.1,0.0,0.0\nC,0.0,0.05,0.0\nD,0.0,0.0,0.07\n",
    )
    .unwrap();
    // fixed shifted by -0.01 in x, rows shuffled
    std::fs::write(
        &moving,
        "C,-0.01,0.05,0.0\nA,-0.01,0.0,0.0\nD,-0.01,0.0,0.07\nB,0.09,0.0,0.0\n",
    )
    .unwrap();
    let out_path = dir.path().join("result.json");
    let out = run(&[
        "register",
        "--fixed",
        fixed.to_str().unwrap(),
        "--moving",
        moving.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["n"], 4);
    assert!(v["fre_m"].as_f64().unwrap() < 1e-12);
    let pose: Vec<f64> = serde_json::from_value(v["pose"].clone()).unwrap();
    assert_eq!(pose.len(), 7);
    assert!((pose[0] - 0.01).abs() < 1e-12 && pose[1].abs() < 1e-12 && (pose[3] - 1.0).abs() < 1e-12);
    let file: Value = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(file, v);

    std::fs::write(&moving, "A,0,0,0\nB,1,0,0\nX,0,1,0\nD,0,0,1\n").unwrap();
    let out = run(&["register", "--fixed", fixed.to_str().unwrap(), "--moving", moving.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn demo_reports_exact_settled_sync() {
    let out = run(&["demo", "--scene", "galen25.adf", "--duration", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["quiescent"], true);
    assert_eq!(v["bodies"].as_object().unwrap().len(), 25);
    assert!(v["max_settled_m"].as_f64().unwrap() <= 1e-9);
    assert!(v["max_settled_rad"].as_f64().unwrap() <= 1e-9);
    assert!(v["messages"]["commands_applied"].as_u64().unwrap() > 0);

    let out = run(&["demo", "--scene", "galen25.adf", "--duration", "1", "--joints", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn sim_mirror_and_bench_across_processes() {
    let endpoint = free_endpoint();
    let _sim = Background(
        bin()
            .args(["sim", "--scene", "galen25.urdf", "--bus", &endpoint, "--inject-delay-ms", "3"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    wait_for_bus(&endpoint);

    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("mirror.json");
    let out = run(&["mirror", "--bus", &endpoint, "--duration", "1", "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["bodies"], 25);
    assert_eq!(r["synced"], true);
    assert_eq!(r["poses"].as_object().unwrap().len(), 25);

    let csv = dir.path().join("rtd.csv");
    let out = run(&["bench", "rtd", "--bus", &endpoint, "--frames", "25", "--rate-hz", "50", "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["stats"]["n"], 25);
    assert!(v["stats"]["mean"].as_f64().unwrap() >= 6.0);
    assert_eq!(v["within_threshold"], true);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert!(dir.path().join("rtd.stats.json").exists());

    let out = run(&["bench", "rtd", "--bus", &endpoint, "--frames", "10", "--threshold-ms", "1"]);
    assert_eq!(out.status.code(), Some(2));
}
