//! `gondola`: drive a cable-suspended carriage through a motor controller.

mod link;

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gondola_core::config::RigConfig;
use gondola_core::controller::{
    estimate_anchors, parse_observations, parse_trace, run_bridge, write_csv, BridgeOptions, Controller,
    DeviceSource, Instruction, ScriptedDevice, SilentDevice,
};
use gondola_core::evaluation::{emit_report, fit_pileup, run_linear, run_spatial, ExperimentSpec, FitTarget};
use gondola_core::planner::PlanWarning;

use link::Target;

#[derive(Parser)]
#[command(name = "gondola", version, about = "Cable-suspended carriage controller")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a trace against an emulator and write the CSV log.
    Run(RunArgs),
    /// Estimate anchor positions from measured wire lengths.
    Calibrate(CalibrateArgs),
    /// Plan every move of a trace without sending anything.
    Plan(PlanArgs),
    /// Serve the control-panel bridge on a local TCP port.
    Bridge(BridgeArgs),
    /// Positioning-error experiments and the pile-up fit.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Connection {
    /// Emulator address, `host:port`.
    #[arg(long, value_name = "ADDR", conflicts_with = "spawn_emulator")]
    emulator: Option<String>,
    /// Start `gondola-emulator` with the same config and talk over its stdio.
    #[arg(long)]
    spawn_emulator: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long, short)]
    trace: PathBuf,
    #[command(flatten)]
    connection: Connection,
    /// CSV log destination; stdout when omitted.
    #[arg(long, short)]
    log: Option<PathBuf>,
    /// Scripted device lines, one `<ms> <text>` per line.
    #[arg(long)]
    device: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with header `x,y,z,l0,l1,...`.
    observations: PathBuf,
    /// Rig config whose anchors the estimate replaces.
    #[arg(long, short, requires = "write_config")]
    config: Option<PathBuf>,
    /// Where to write the updated rig config.
    #[arg(long, requires = "config")]
    write_config: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long, short)]
    trace: PathBuf,
}

#[derive(Args)]
struct BridgeArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Address the panel connects to.
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Without either option an in-process emulator is used, which also
    /// reports the true carriage pose.
    #[command(flatten)]
    connection: Connection,
    #[arg(long)]
    device: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Linear,
    Spatial,
    Fit,
}

#[derive(Args)]
struct EvalArgs {
    experiment: Experiment,
    /// Experiment spec (TOML); built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Plant pile-up factor for linear and spatial runs.
    #[arg(long)]
    pileup: Option<f64>,
    /// Error table destination; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Fit target: absolute error at the middle linear start, cm.
    #[arg(long, default_value_t = 1.0)]
    reference_cm: f64,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Run(a) => run(a),
        Cmd::Calibrate(a) => calibrate(a).map(|_| ExitCode::SUCCESS),
        Cmd::Plan(a) => plan(a).map(|_| ExitCode::SUCCESS),
        Cmd::Bridge(a) => bridge(a).map(|_| ExitCode::SUCCESS),
        Cmd::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_rig(path: &Path) -> Result<RigConfig> {
    RigConfig::from_toml(&read(path)?).with_context(|| format!("rig config {}", path.display()))
}

fn load_device(path: Option<&Path>) -> Result<Box<dyn DeviceSource + Send>> {
    Ok(match path {
        Some(p) => Box::new(ScriptedDevice::parse(&read(p)?).map_err(anyhow::Error::msg)?),
        None => Box::new(SilentDevice),
    })
}

/// Writes to `path`, or stdout when there is none.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let rig = load_rig(&a.config)?;
    let trace = parse_trace(&read(&a.trace)?).with_context(|| format!("trace {}", a.trace.display()))?;
    let mut session = match (&a.connection.emulator, a.connection.spawn_emulator) {
        (Some(addr), _) => link::open(Target::Tcp(addr))?,
        (None, true) => link::open(Target::Spawn(&a.config))?,
        (None, false) => bail!("give --emulator ADDR or --spawn-emulator"),
    };
    let mut device = load_device(a.device.as_deref())?;
    let mut controller = Controller::new(rig)?;
    controller.connect(session.as_mut())?;
    let outcome = controller.run_trace(session.as_mut(), &trace, device.as_mut(), &mut ());
    write_csv(&outcome.records, output(a.log.as_deref())?)?;
    eprintln!(
        "{} records, {} instructions, {}",
        outcome.records.len(),
        trace.len(),
        if outcome.aborted { "aborted" } else { "completed" }
    );
    Ok(if outcome.aborted { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let observations = parse_observations(&read(&a.observations)?)?;
    let cal = estimate_anchors(&observations)?;
    for (i, (anchor, rms)) in cal.layout.anchors().iter().zip(&cal.rms_cm).enumerate() {
        println!("anchor {i}: {anchor}  rms {rms:.4} cm");
    }
    if let (Some(config), Some(out)) = (a.config, a.write_config) {
        let mut rig = load_rig(&config)?;
        if rig.motors() != cal.layout.len() {
            bail!("config has {} motors, observations have {}", rig.motors(), cal.layout.len());
        }
        rig.layout = cal.layout;
        rig.validate().context("calibrated rig")?;
        fs::write(&out, rig.to_toml()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn plan(a: PlanArgs) -> Result<()> {
    let rig = load_rig(&a.config)?;
    let trace = parse_trace(&read(&a.trace)?).with_context(|| format!("trace {}", a.trace.display()))?;
    let mut controller = Controller::new(rig)?;
    let mut out = io::stdout().lock();
    for (line, instruction) in &trace.steps {
        let (target, speed) = match instruction {
            Instruction::Goto { target, speed_cm_s } => (*target, *speed_cm_s),
            Instruction::Home => (controller.rig().home, None),
            other => {
                writeln!(out, "line {line}: {other}")?;
                continue;
            }
        };
        let from = controller.commanded();
        match controller.plan(target, speed) {
            Ok(schedule) => {
                writeln!(
                    out,
                    "line {line}: {from} -> {target}  {} moves  net steps {:?}  {:.0} ms",
                    schedule.segments.len().max(1),
                    schedule.net_steps(),
                    schedule.duration_ms
                )?;
                for w in &schedule.warnings {
                    match w {
                        PlanWarning::InfeasibleEndpoint(p) => writeln!(out, "  warning: {p} cannot be held")?,
                    }
                }
                let elapsed = Controller::move_durations(&schedule).iter().sum();
                controller.commit(target, &schedule, elapsed);
            }
            Err(e) => {
                writeln!(out, "line {line}: {from} -> {target}  rejected: {e}")?;
                bail!("trace cannot be executed past line {line}");
            }
        }
    }
    Ok(())
}

fn bridge(a: BridgeArgs) -> Result<()> {
    let rig = load_rig(&a.config)?;
    let mut session = match (&a.connection.emulator, a.connection.spawn_emulator) {
        (Some(addr), _) => link::open(Target::Tcp(addr))?,
        (None, true) => link::open(Target::Spawn(&a.config))?,
        (None, false) => link::open(Target::InProcess(&rig))?,
    };
    let mut controller = Controller::new(rig)?;
    controller.connect(session.as_mut())?;
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    println!("bridge listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    let options = BridgeOptions {
        device: load_device(a.device.as_deref())?,
        ..BridgeOptions::default()
    };
    run_bridge(listener, controller, session, options)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let spec = match &a.config {
        Some(p) => ExperimentSpec::from_toml(&read(p)?).with_context(|| format!("experiment spec {}", p.display()))?,
        None => ExperimentSpec::default(),
    };
    let pileup = a.pileup.unwrap_or(spec.spool.pileup);
    let (pileup, records) = match a.experiment {
        Experiment::Linear => (pileup, run_linear(&spec, pileup)?),
        Experiment::Spatial => (pileup, run_spatial(&spec, pileup)?),
        Experiment::Fit => {
            if a.pileup.is_some() {
                bail!("--pileup does not apply to a fit");
            }
            let fit = fit_pileup(&spec, &FitTarget::ReferenceCrossing { reference_cm: a.reference_cm })?;
            eprintln!("fit objective {:.3e}", fit.objective);
            if let Some(w) = &fit.warning {
                eprintln!("warning: {w}");
            }
            (fit.pileup, run_linear(&spec, fit.pileup)?)
        }
    };
    let (csv, summary) = emit_report(&records, &spec);
    output(a.out.as_deref())?.write_all(csv.as_bytes())?;
    eprint!("pileup = {pileup:.6}\n{}", summary.to_text());
    Ok(())
}
