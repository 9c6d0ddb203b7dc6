//! Motor-controller emulator: executes step commands on a simulated plant.
//!
//! The plant only sees step counts. It spools each wire under its own (true)
//! spool parameters and recovers where the carriage hangs from the resulting
//! wire lengths.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::config::RigConfig;
use crate::kinematics::{distance, hanging_position, AnchorLayout, Point3};
use crate::spool::{SpoolError, SpoolState};

use super::{decode, Command, ErrorCode, Reply};

#[derive(Debug, Clone, Default)]
pub struct EmulatorOptions {
    /// Replaces the pile-up factor of every configured spool.
    pub pileup_override: Option<f64>,
    /// Sleep for each MOVE's duration before acknowledging it.
    pub real_time: bool,
    /// Reserved; the plant is deterministic.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub spools: Vec<SpoolState>,
    pub lengths_cm: Vec<f64>,
    pub position: Point3,
    pub clock_ms: u64,
}

impl PlantState {
    /// Plant hanging at the rig's home position.
    pub fn at_home(rig: &RigConfig) -> Result<Self, String> {
        let spools = rig.home_spools().map_err(|e| e.to_string())?;
        Ok(Self {
            spools,
            lengths_cm: rig.layout.anchors().iter().map(|&a| distance(a, rig.home)).collect(),
            position: rig.home,
            clock_ms: 0,
        })
    }

    pub fn cumulative_steps(&self) -> Vec<i64> {
        self.spools.iter().map(|s| s.cumulative_steps).collect()
    }
}

/// Applies one MOVE to `plant` without mutating it. Either every motor moves
/// or none does. The carriage settles at the lowest point its wires allow,
/// so a wire that ends up longer than needed simply goes slack.
pub fn apply_move(
    layout: &AnchorLayout,
    plant: &PlantState,
    steps: &[i64],
    duration_ms: u64,
) -> Result<PlantState, (ErrorCode, String)> {
    if steps.len() != plant.spools.len() {
        return Err((
            ErrorCode::Config,
            format!("rig has {} motors, MOVE names {}", plant.spools.len(), steps.len()),
        ));
    }
    let mut spools = Vec::with_capacity(steps.len());
    let mut lengths = Vec::with_capacity(steps.len());
    for (motor, (&n, spool)) in steps.iter().zip(&plant.spools).enumerate() {
        let (moved, next) = spool.length_for_steps(n).map_err(|e| match e {
            SpoolError::Unspool { completed, .. } => (
                ErrorCode::Unspool,
                format!("motor {motor} runs empty after {} of {} unspool steps", completed.abs(), n.abs()),
            ),
            other => (ErrorCode::Geom, format!("motor {motor}: {other}")),
        })?;
        let length = plant.lengths_cm[motor] - moved;
        if !(length > 0.0) {
            return Err((ErrorCode::Geom, format!("motor {motor} wire would reach its anchor")));
        }
        spools.push(next);
        lengths.push(length);
    }
    let position = hanging_position(layout, &lengths).map_err(|e| (ErrorCode::Geom, e.to_string()))?;
    Ok(PlantState {
        spools,
        lengths_cm: lengths,
        position,
        clock_ms: plant.clock_ms.saturating_add(duration_ms),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetrySnapshot {
    /// `None` until the first HOME.
    pub position: Option<Point3>,
    pub lengths_cm: Vec<f64>,
    pub steps: Vec<i64>,
    pub clock_ms: u64,
    pub last_move_id: Option<u64>,
}

#[derive(Debug, Default)]
struct TelemetryInner {
    latest: Option<TelemetrySnapshot>,
    subscribers: Vec<Sender<TelemetrySnapshot>>,
}

/// Read-only side channel publishing the plant after every change.
#[derive(Debug, Clone, Default)]
pub struct Telemetry {
    inner: Arc<Mutex<TelemetryInner>>,
}

impl Telemetry {
    pub fn latest(&self) -> Option<TelemetrySnapshot> {
        self.inner.lock().expect("telemetry lock").latest.clone()
    }

    pub fn subscribe(&self) -> Receiver<TelemetrySnapshot> {
        let (tx, rx) = mpsc::channel();
        let mut inner = self.inner.lock().expect("telemetry lock");
        if let Some(s) = &inner.latest {
            let _ = tx.send(s.clone());
        }
        inner.subscribers.push(tx);
        rx
    }

    fn publish(&self, snapshot: TelemetrySnapshot) {
        let mut inner = self.inner.lock().expect("telemetry lock");
        inner.subscribers.retain(|tx| tx.send(snapshot.clone()).is_ok());
        inner.latest = Some(snapshot);
    }
}

/// The motor controller: a strictly serial command loop over a plant.
#[derive(Debug)]
pub struct Emulator {
    rig: RigConfig,
    options: EmulatorOptions,
    plant: Option<PlantState>,
    last_id: Option<u64>,
    telemetry: Telemetry,
}

impl Emulator {
    pub fn new(rig: RigConfig, options: EmulatorOptions) -> Self {
        let rig = match options.pileup_override {
            Some(p) => rig.with_pileup(p),
            None => rig,
        };
        Self {
            rig,
            options,
            plant: None,
            last_id: None,
            telemetry: Telemetry::default(),
        }
    }

    pub fn rig(&self) -> &RigConfig {
        &self.rig
    }

    pub fn plant(&self) -> Option<&PlantState> {
        self.plant.as_ref()
    }

    pub fn telemetry(&self) -> Telemetry {
        self.telemetry.clone()
    }

    /// Decodes and executes one raw line. Malformed input never ends the
    /// session; it produces `ERR id=0 code=BADCMD`.
    pub fn handle_line(&mut self, line: &[u8]) -> Reply {
        match decode(line) {
            Ok(cmd) => self.handle(&cmd),
            Err(e) => Reply::error(0, ErrorCode::BadCmd, e.0),
        }
    }

    pub fn handle(&mut self, cmd: &Command) -> Reply {
        match cmd {
            Command::Ping => Reply::Ack { id: 0 },
            Command::Config {
                steps_per_rev,
                base_radius_centi_um,
            } => match self.check_config(*steps_per_rev, base_radius_centi_um) {
                Ok(()) => Reply::Ack { id: 0 },
                Err(msg) => Reply::error(0, ErrorCode::Config, msg),
            },
            Command::Home => self.home(),
            Command::Status { id } => match &self.plant {
                Some(p) => Reply::State {
                    id: *id,
                    steps: p.cumulative_steps(),
                },
                None => Reply::error(*id, ErrorCode::NoHome, "not homed"),
            },
            Command::Move {
                id,
                steps,
                duration_ms,
            } => self.do_move(*id, steps, *duration_ms),
        }
    }

    fn check_config(&self, spr: u32, radii: &[u64]) -> Result<(), String> {
        if radii.len() != self.rig.motors() {
            return Err(format!("rig has {} motors, CONFIG names {}", self.rig.motors(), radii.len()));
        }
        for (motor, (&r, spool)) in radii.iter().zip(&self.rig.spools).enumerate() {
            let want_spr = spool.steps_per_rev().round() as u32;
            if spr != want_spr {
                return Err(format!("motor {motor} has {want_spr} steps per revolution"));
            }
            let want_r = (spool.base_radius_cm * 1e6).round() as u64;
            if r != want_r {
                return Err(format!("motor {motor} base radius is {want_r}"));
            }
        }
        Ok(())
    }

    fn home(&mut self) -> Reply {
        let plant = match self.plant.take() {
            Some(mut p) => {
                for s in &mut p.spools {
                    s.cumulative_steps = 0;
                }
                p
            }
            None => match PlantState::at_home(&self.rig) {
                Ok(p) => p,
                Err(msg) => return Reply::error(0, ErrorCode::Config, msg),
            },
        };
        self.plant = Some(plant);
        self.last_id = None;
        self.publish();
        Reply::Ack { id: 0 }
    }

    fn do_move(&mut self, id: u64, steps: &[i64], duration_ms: u64) -> Reply {
        let Some(plant) = &self.plant else {
            return Reply::error(id, ErrorCode::NoHome, "not homed");
        };
        if self.last_id.is_some_and(|last| id <= last) {
            return Reply::error(id, ErrorCode::BadId, format!("id must exceed {}", self.last_id.unwrap_or(0)));
        }
        match apply_move(&self.rig.layout, plant, steps, duration_ms) {
            Ok(next) => {
                if self.options.real_time {
                    std::thread::sleep(Duration::from_millis(duration_ms));
                }
                self.plant = Some(next);
                self.last_id = Some(id);
                self.publish();
                Reply::Ack { id }
            }
            Err((code, msg)) => Reply::error(id, code, msg),
        }
    }

    fn publish(&self) {
        if let Some(p) = &self.plant {
            self.telemetry.publish(TelemetrySnapshot {
                position: Some(p.position),
                lengths_cm: p.lengths_cm.clone(),
                steps: p.cumulative_steps(),
                clock_ms: p.clock_ms,
                last_move_id: self.last_id,
            });
        }
    }
}
