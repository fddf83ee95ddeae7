//! Argument parsing and subcommand dispatch.

use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;
use twinbridge_core::bus::{Broker, DeliveryMode, Node, DEFAULT_ENDPOINT};
use twinbridge_core::demo::{run_demo, DemoConfig, DemoScript, Sinusoid};
use twinbridge_core::latency::{assess_hci, export_series, run_rtd_bench, BenchConfig, LatencyError};
use twinbridge_core::messages::TOPIC_TF;
use twinbridge_core::mirror::{build_from_metadata, run_sync_loop, SyncTimerConfig};
use twinbridge_core::registration::register_rigid;
use twinbridge_core::scene::{load_scene, publish_metadata, JointKind};
use twinbridge_core::sim::{build_model, SimConfig, Simulator};
use twinbridge_core::tftree::TransformBuffer;
use twinbridge_core::timer::StopSignal;

use crate::fiducials;
use crate::gateway::{run_gateway, GatewayConfig, DEFAULT_PORT};

/// Simulator to navigation-scene synchronization toolkit.
#[derive(Debug, Parser)]
#[command(name = "twinbridge", version, about)]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the kinematic simulator and host the bus.
    Sim(SimArgs),
    /// Mirror the simulator scene into a model/transform scene.
    Mirror(MirrorArgs),
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
    /// Paired-point rigid registration of two fiducial CSV files.
    Register(RegisterArgs),
    /// Bus, simulator and mirror in one process with a scripted motion.
    Demo(DemoArgs),
    /// WebSocket gateway for the operator console.
    Gateway(GatewayArgs),
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Round-trip delay against the simulator's echo responder.
    Rtd(RtdArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scene file (.adf or .urdf). `galen25.adf` / `galen25.urdf` fall back to the bundled fixture.
    #[arg(long)]
    pub scene: String,
    /// Bus endpoint to serve on (or to join with --connect).
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    pub bus: String,
    /// Join an existing broker instead of hosting one.
    #[arg(long)]
    pub connect: bool,
    #[arg(long, default_value_t = 200.0)]
    pub publish_hz: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub step_hz: f64,
    /// Extra one-way delay applied to each leg of echo replies.
    #[arg(long, default_value_t = 0)]
    pub inject_delay_ms: u64,
    /// Default joint speed, rad/s or m/s.
    #[arg(long, default_value_t = 1.0)]
    pub max_speed: f64,
    /// Stop after this many seconds (default: run until Ctrl-C).
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MirrorArgs {
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    pub bus: String,
    #[arg(long, default_value_t = 200.0)]
    pub rate_hz: f64,
    /// Write tick stats and final poses here on exit.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub no_drift_compensation: bool,
    /// Seconds to wait for scene metadata.
    #[arg(long, default_value_t = 5.0)]
    pub wait: f64,
}

#[derive(Debug, Args)]
pub struct RtdArgs {
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    pub bus: String,
    #[arg(long, default_value_t = 1000)]
    pub frames: u64,
    #[arg(long, default_value_t = 50.0)]
    pub rate_hz: f64,
    #[arg(long, default_value_t = 500)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 16.0)]
    pub threshold_ms: f64,
    /// CSV of `frame,rtd_ms`; a `.stats.json` sidecar is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Also write the result JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScriptKind {
    /// No commands; the scene stays at home.
    Idle,
    /// Sinusoidal targets on a few joints, then a hold.
    Sine,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value = "galen25.adf")]
    pub scene: String,
    /// Seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, value_enum, default_value_t = ScriptKind::Sine)]
    pub script: ScriptKind,
    /// Joints to drive (default: the first five movable joints).
    #[arg(long, value_delimiter = ',')]
    pub joints: Vec<String>,
    #[arg(long, default_value_t = 0.4)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.5)]
    pub max_speed: f64,
    #[arg(long, default_value_t = 200.0)]
    pub rate_hz: f64,
    /// Write the report JSON here as well as to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    pub bus: String,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 30.0)]
    pub broadcast_hz: f64,
    #[arg(long, default_value_t = 200.0)]
    pub mirror_rate_hz: f64,
}

/// Parses `argv` and runs. Exit codes: 0 success, 1 usage error, 2 runtime error.
pub fn main_with_args<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    let stop = StopSignal::new();
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || s.stop()) {
        log::debug!("no Ctrl-C handler: {e}");
    }
    match run(cli.command, &stop) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();
}

fn seconds(s: f64, what: &str) -> Result<Duration> {
    Duration::try_from_secs_f64(s).with_context(|| format!("{what} must be a non-negative number of seconds"))
}

/// Raises `stop` after `duration`, if given.
fn stop_after(stop: &StopSignal, duration: Option<f64>) -> Result<()> {
    if let Some(d) = duration {
        let d = seconds(d, "--duration")?;
        let s = stop.clone();
        thread::spawn(move || {
            s.sleep_until(Instant::now() + d);
            s.stop();
        });
    }
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(command: Command, stop: &StopSignal) -> Result<ExitCode> {
    match command {
        Command::Sim(a) => sim(a, stop),
        Command::Mirror(a) => mirror(a, stop),
        Command::Bench {
            which: BenchCommand::Rtd(a),
        } => bench_rtd(a, stop),
        Command::Register(a) => register(a),
        Command::Demo(a) => demo(a),
        Command::Gateway(a) => gateway(a, stop),
    }
}

fn sim(a: SimArgs, stop: &StopSignal) -> Result<ExitCode> {
    let desc = load_scene(&a.scene)?;
    let config = SimConfig {
        step_hz: a.step_hz,
        publish_hz: a.publish_hz,
        inject_delay: Duration::from_millis(a.inject_delay_ms),
        default_max_speed: a.max_speed,
        ..SimConfig::default()
    };
    let mut sim = Simulator::new(build_model(&desc), config)?;
    let broker;
    let _server;
    let node = if a.connect {
        Node::connect(&a.bus).with_context(|| format!("cannot join bus at {}", a.bus))?
    } else {
        broker = Broker::new();
        _server = broker.serve(&a.bus)?;
        info!("bus listening on {}", _server.local_addr());
        broker.node()
    };
    publish_metadata(&node, &desc)?;
    stop_after(stop, a.duration)?;
    eprintln!(
        "sim: scene {} ({} bodies) on {}",
        desc.name,
        desc.bodies.len(),
        a.bus
    );
    let report = sim.run(&node, stop)?;
    print_json(&json!({
        "steps": report.steps,
        "published": report.published,
        "commands_applied": report.commands_applied,
        "command_errors": report.command_errors,
        "echo_replies": report.echo_replies,
        "trajectory_digest": report.trajectory_digest,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn mirror(a: MirrorArgs, stop: &StopSignal) -> Result<ExitCode> {
    let node = Node::connect(&a.bus).with_context(|| format!("cannot join bus at {}", a.bus))?;
    let mut scene = build_from_metadata(&node, seconds(a.wait, "--wait")?)?;
    let tf = node.subscribe(TOPIC_TF, DeliveryMode::queued())?;
    let config = SyncTimerConfig {
        rate_hz: a.rate_hz,
        drift_compensation: !a.no_drift_compensation,
    };
    stop_after(stop, a.duration)?;
    let mut buffer = TransformBuffer::default();
    run_sync_loop(&mut scene, &mut buffer, &tf, &config, stop, None)?;
    let report = scene.report();
    if let Some(path) = &a.report {
        report.write_json(path)?;
    }
    print_json(&json!({
        "scene": report.scene,
        "bodies": report.bodies,
        "synced": report.synced,
        "ticks": report.stats.ticks,
        "achieved_rate_hz": report.achieved_rate_hz,
        "interval_mean_ms": report.stats.interval_mean_ms,
        "missed_deadlines": report.stats.missed_deadlines,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn bench_rtd(a: RtdArgs, stop: &StopSignal) -> Result<ExitCode> {
    let config = BenchConfig {
        n_frames: a.frames,
        rate_hz: a.rate_hz,
        timeout: Duration::from_millis(a.timeout_ms),
        hci_threshold_ms: a.threshold_ms,
        ..BenchConfig::default()
    };
    config.validate()?;
    let node = Node::connect(&a.bus).map_err(|e| {
        anyhow::anyhow!("echo responder unreachable: cannot connect to bus at {}: {e}", a.bus)
    })?;
    let out = match run_rtd_bench(&node, &config, stop) {
        Err(e @ LatencyError::Unreachable { .. }) => bail!(e),
        other => other?,
    };
    if let Some(path) = &a.out {
        export_series(&out.samples, path)?;
    }
    let hci = assess_hci(&out.stats, &config);
    print_json(&json!({
        "stats": out.stats,
        "dropped": out.dropped.len(),
        "one_way_ms": hci.one_way_ms,
        "within_threshold": hci.within_threshold,
        "threshold_ms": config.hci_threshold_ms,
    }))?;
    if hci.within_threshold {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "one-way latency {:.2} ms is not below the {} ms threshold",
            hci.one_way_ms, config.hci_threshold_ms
        );
        Ok(ExitCode::from(2))
    }
}

fn register(a: RegisterArgs) -> Result<ExitCode> {
    let fixed = fiducials::read_points(&a.fixed)?;
    let moving = fiducials::read_points(&a.moving)?;
    let (fixed, moving) = fiducials::pair(fixed, moving)?;
    let result = register_rigid(&fixed, &moving)?;
    let text = serde_json::to_string_pretty(&result)?;
    if let Some(path) = &a.out {
        std::fs::write(path, format!("{text}\n")).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn demo(a: DemoArgs) -> Result<ExitCode> {
    let desc = load_scene(&a.scene)?;
    let duration = seconds(a.duration, "--duration")?;
    if duration.is_zero() {
        bail!("--duration must be positive");
    }
    let script = match a.script {
        ScriptKind::Idle => DemoScript::idle(duration),
        ScriptKind::Sine => {
            let model = build_model(&desc);
            let joints = if a.joints.is_empty() {
                model
                    .joints
                    .iter()
                    .filter(|j| j.kind != JointKind::Fixed)
                    .take(5)
                    .map(|j| j.name.clone())
                    .collect()
            } else {
                a.joints.clone()
            };
            let wave = Sinusoid {
                joints,
                amplitude: a.amplitude,
                max_speed: a.max_speed,
                ..Sinusoid::default()
            };
            // leave time for the joints to reach their last targets
            let hold = (duration / 2).min(Duration::from_secs(3));
            DemoScript::sinusoidal(&model, &wave, duration, hold)?
        }
    };
    let config = DemoConfig {
        sync: SyncTimerConfig {
            rate_hz: a.rate_hz,
            ..SyncTimerConfig::default()
        },
        ..DemoConfig::default()
    };
    let report = run_demo(&desc, &script, &config)?;
    if let Some(path) = &a.report {
        report.write_json(path)?;
    }
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn gateway(a: GatewayArgs, stop: &StopSignal) -> Result<ExitCode> {
    let node = Node::connect(&a.bus).with_context(|| format!("cannot join bus at {}", a.bus))?;
    let config = GatewayConfig {
        host: a.host,
        port: a.port,
        broadcast_hz: a.broadcast_hz,
        sync: SyncTimerConfig {
            rate_hz: a.mirror_rate_hz,
            ..SyncTimerConfig::default()
        },
        ..GatewayConfig::default()
    };
    run_gateway(node, &config, stop)?;
    Ok(ExitCode::SUCCESS)
}
