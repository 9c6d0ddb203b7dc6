//! `gondola-emulator`: a simulated motor controller and plant.

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use gondola_core::config::RigConfig;
use gondola_core::protocol::{serve, serve_tcp, Emulator, EmulatorOptions, Endpoint};

#[derive(Parser)]
#[command(name = "gondola-emulator", version, about = "Simulated motor controller for a cable-suspended carriage")]
struct Args {
    /// Rig config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// `stdio` or `host:port`; port 0 picks a free port, printed on stdout.
    #[arg(long, default_value = "stdio")]
    endpoint: Endpoint,
    /// Replace the pile-up factor of every spool.
    #[arg(long)]
    pileup: Option<f64>,
    /// Sleep for each move's duration before acknowledging it.
    #[arg(long)]
    real_time: bool,
    /// Reserved; the plant is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut rig = RigConfig::from_toml(&text).with_context(|| format!("rig config {}", args.config.display()))?;
    if let Some(p) = args.pileup {
        rig = rig.with_pileup(p);
        rig.validate().context("--pileup")?;
    }
    let mut emulator = Emulator::new(
        rig,
        EmulatorOptions {
            pileup_override: None,
            real_time: args.real_time,
            seed: args.seed,
        },
    );
    match &args.endpoint {
        Endpoint::Tcp(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            println!("listening on {}", listener.local_addr()?);
            io::stdout().flush()?;
            serve_tcp(listener, &mut emulator, None)?;
        }
        Endpoint::Stdio => serve(&args.endpoint, &mut emulator)?,
    }
    Ok(())
}
