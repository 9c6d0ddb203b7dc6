//! Open-loop system controller: turns traces into MOVE commands and logs the
//! experiment.
//!
//! The controller dead-reckons. It never sees the true carriage position; its
//! believed position is where the steps it sent would have put the carriage
//! on a spool without radius build-up.

mod bridge;
mod calibrate;
mod device;
mod trace;

use std::fmt;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

use crate::config::RigConfig;
use crate::kinematics::{forward_kinematics, wire_lengths, Point3};
use crate::planner::{plan_move, MoveRequest, PlanError, PlannerLimits, StepSchedule};
use crate::protocol::{Command, Reply, Session, SessionError};
use crate::spool::SpoolState;

pub use bridge::{parse_bridge_command, run_bridge, BridgeCommand, BridgeOptions};
pub use calibrate::{estimate_anchors, parse_observations, Calibration, CalibrationError, Observation};
pub use device::{DeviceSource, ScriptedDevice, SilentDevice};
pub use trace::{parse_trace, Instruction, Pattern, Trace, TraceError};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("motor controller refused {command}: {reply}")]
    Refused { command: String, reply: String },
    #[error("unexpected reply {reply} to {command}")]
    Unexpected { command: String, reply: String },
    #[error("rig: {0}")]
    Rig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    MoveStart,
    Ack,
    Event,
    Timeout,
    DeviceLine,
    Error,
}

impl RecordKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordKind::MoveStart => "move-start",
            RecordKind::Ack => "ack",
            RecordKind::Event => "event",
            RecordKind::Timeout => "timeout",
            RecordKind::DeviceLine => "device-line",
            RecordKind::Error => "error",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t_ms: u64,
    pub kind: RecordKind,
    pub payload: String,
    pub commanded: Point3,
    pub believed: Point3,
}

pub const CSV_HEADER: [&str; 9] = [
    "t_ms", "kind", "payload", "cmd_x", "cmd_y", "cmd_z", "bel_x", "bel_y", "bel_z",
];

pub fn write_csv<W: io::Write>(records: &[LogRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let c = r.commanded;
        let b = r.believed;
        w.write_record([
            r.t_ms.to_string(),
            r.kind.to_string(),
            r.payload.clone(),
            format!("{:.6}", c.x),
            format!("{:.6}", c.y),
            format!("{:.6}", c.z),
            format!("{:.6}", b.x),
            format!("{:.6}", b.y),
            format!("{:.6}", b.z),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One GOTO after its MOVEs have been acknowledged.
#[derive(Debug, Clone)]
pub struct MoveReport {
    pub schedule: StepSchedule,
    /// `(id, duration_ms)` of every MOVE sent.
    pub moves: Vec<(u64, u64)>,
}

/// Observes a trace run; used by the bridge for streaming and aborts.
pub trait RunObserver {
    fn record(&mut self, _record: &LogRecord) {}
    fn progress(&mut self, _done: usize, _total: usize) {}
    fn should_abort(&mut self) -> bool {
        false
    }
}

impl RunObserver for () {}

impl RunObserver for &AtomicBool {
    fn should_abort(&mut self) -> bool {
        self.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    pub records: Vec<LogRecord>,
    /// Stopped early by an error record or an abort request.
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct Controller {
    rig: RigConfig,
    spools: Vec<SpoolState>,
    believed: Point3,
    commanded: Point3,
    clock_ms: u64,
    next_id: u64,
}

impl Controller {
    pub fn new(rig: RigConfig) -> Result<Self, ControllerError> {
        let spools = rig.controller_spools().map_err(|e| ControllerError::Rig(e.to_string()))?;
        Ok(Self {
            believed: rig.home,
            commanded: rig.home,
            spools,
            rig,
            clock_ms: 0,
            next_id: 1,
        })
    }

    pub fn rig(&self) -> &RigConfig {
        &self.rig
    }

    pub fn believed(&self) -> Point3 {
        self.believed
    }

    pub fn commanded(&self) -> Point3 {
        self.commanded
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn spools(&self) -> &[SpoolState] {
        &self.spools
    }

    pub fn limits(&self) -> PlannerLimits {
        PlannerLimits {
            max_step_rate: self.rig.planner.max_step_rate,
            carriage_mass_g: self.rig.carriage_mass_g,
            wire_rating_g: self.rig.wire_rating_g,
            strict_feasibility: self.rig.planner.strict_feasibility,
        }
    }

    pub fn config_command(&self) -> Command {
        Command::Config {
            steps_per_rev: self.rig.spools[0].steps_per_rev().round() as u32,
            base_radius_centi_um: self
                .rig
                .spools
                .iter()
                .map(|s| (s.base_radius_cm * 1e6).round() as u64)
                .collect(),
        }
    }

    /// Checks the motor controller matches the rig, then homes it.
    pub fn connect(&mut self, session: &mut dyn Session) -> Result<(), ControllerError> {
        let cfg = self.config_command();
        expect_ack(session, &cfg, 0)?;
        expect_ack(session, &Command::Home, 0)?;
        self.next_id = 1;
        Ok(())
    }

    pub fn plan(&self, target: Point3, speed_cm_s: Option<f64>) -> Result<StepSchedule, PlanError> {
        let req = MoveRequest {
            from: self.believed,
            to: target,
            speed_cm_s: speed_cm_s.unwrap_or(self.rig.planner.speed_cm_s),
            max_chord_cm: self.rig.planner.max_chord_cm,
        };
        plan_move(&self.rig.layout, &self.spools, &req, &self.limits())
    }

    /// Whole-millisecond MOVE durations whose running sum tracks the plan.
    pub fn move_durations(schedule: &StepSchedule) -> Vec<u64> {
        let mut prev = 0u64;
        schedule
            .segments
            .iter()
            .map(|s| {
                let end = (s.start_ms + s.duration_ms).round() as u64;
                let d = end - prev;
                prev = end;
                d
            })
            .collect()
    }

    /// Adopts a schedule as done: advances the believed pose and clock
    /// without talking to anything. `plan` dry runs use this directly.
    pub fn commit(&mut self, target: Point3, schedule: &StepSchedule, elapsed_ms: u64) {
        self.spools = schedule.end_states.clone();
        self.commanded = target;
        self.believed = self.landing_point(target, &schedule.residuals_cm);
        self.clock_ms += elapsed_ms;
    }

    /// Where the sent steps leave the carriage under the controller's model:
    /// each wire ends short of its target length by that motor's residual.
    fn landing_point(&self, target: Point3, residuals: &[f64]) -> Point3 {
        if self.rig.motors() < 3 {
            return target;
        }
        let lengths: Vec<f64> = wire_lengths(&self.rig.layout, target)
            .iter()
            .zip(residuals)
            .map(|(l, r)| l + r)
            .collect();
        forward_kinematics(&self.rig.layout, &lengths).unwrap_or(target)
    }

    /// Plans, sends one MOVE per chord, and waits for every ACK. A move that
    /// needs no steps still sends a single all-zero MOVE.
    pub fn goto(
        &mut self,
        session: &mut dyn Session,
        target: Point3,
        speed_cm_s: Option<f64>,
    ) -> Result<MoveReport, ControllerError> {
        let schedule = self.plan(target, speed_cm_s)?;
        self.execute(session, target, schedule)
    }

    /// Sends an already planned schedule.
    pub fn execute(
        &mut self,
        session: &mut dyn Session,
        target: Point3,
        schedule: StepSchedule,
    ) -> Result<MoveReport, ControllerError> {
        let mut batches: Vec<(Vec<i64>, u64)> = schedule
            .segments
            .iter()
            .map(|s| s.steps.clone())
            .zip(Self::move_durations(&schedule))
            .collect();
        if batches.is_empty() {
            batches.push((vec![0; self.rig.motors()], 0));
        }
        let mut moves = Vec::with_capacity(batches.len());
        let mut elapsed = 0;
        for (steps, duration_ms) in batches {
            let id = self.next_id;
            self.next_id += 1;
            let cmd = Command::Move {
                id,
                steps,
                duration_ms,
            };
            expect_ack(session, &cmd, id)?;
            moves.push((id, duration_ms));
            elapsed += duration_ms;
        }
        self.commit(target, &schedule, elapsed);
        Ok(MoveReport { schedule, moves })
    }

    /// Returns to the rig's home position, then re-zeroes the motor
    /// controller's step counters there.
    pub fn home(&mut self, session: &mut dyn Session) -> Result<MoveReport, ControllerError> {
        let report = self.goto(session, self.rig.home, None)?;
        expect_ack(session, &Command::Home, 0)?;
        self.next_id = 1;
        Ok(report)
    }

    pub fn status(&mut self, session: &mut dyn Session) -> Result<Vec<i64>, ControllerError> {
        let id = self.next_id;
        let cmd = Command::Status { id };
        match session.request(&cmd)? {
            Reply::State { id: got, steps } if got == id => Ok(steps),
            other => Err(refusal(&cmd, &other)),
        }
    }

    fn record(&self, kind: RecordKind, t_ms: u64, payload: impl Into<String>) -> LogRecord {
        LogRecord {
            t_ms,
            kind,
            payload: payload.into(),
            commanded: self.commanded,
            believed: self.believed,
        }
    }

    /// Passes every device line emitted up to `until` into the log.
    fn drain_device(&self, device: &mut dyn DeviceSource, until: u64, out: &mut Vec<LogRecord>) {
        while let Some((t, line)) = device.poll(until) {
            out.push(self.record(RecordKind::DeviceLine, t.max(self.clock_ms), line));
        }
    }

    /// Executes `trace` in order on the virtual clock. A protocol error or a
    /// rejected target ends the run with an error record.
    pub fn run_trace(
        &mut self,
        session: &mut dyn Session,
        trace: &Trace,
        device: &mut dyn DeviceSource,
        observer: &mut dyn RunObserver,
    ) -> TraceOutcome {
        let mut records = Vec::new();
        let total = trace.len();
        let mut aborted = false;
        for (done, (line, instruction)) in trace.steps.iter().enumerate() {
            if observer.should_abort() {
                let r = self.record(RecordKind::Error, self.clock_ms, format!("aborted before line {line}"));
                emit(&mut records, observer, r);
                aborted = true;
                break;
            }
            let start = records.len();
            let ok = self.step(session, instruction, *line, device, &mut records);
            for r in &records[start..] {
                observer.record(r);
            }
            observer.progress(done + 1, total);
            if !ok {
                aborted = true;
                break;
            }
        }
        TraceOutcome { records, aborted }
    }

    fn step(
        &mut self,
        session: &mut dyn Session,
        instruction: &Instruction,
        line: usize,
        device: &mut dyn DeviceSource,
        out: &mut Vec<LogRecord>,
    ) -> bool {
        match instruction {
            Instruction::Goto { target, speed_cm_s } => self.traced_goto(session, *target, *speed_cm_s, line, device, out),
            Instruction::Home => {
                let target = self.rig.home;
                if !self.traced_goto(session, target, None, line, device, out) {
                    return false;
                }
                match expect_ack(session, &Command::Home, 0) {
                    Ok(()) => {
                        self.next_id = 1;
                        out.push(self.record(RecordKind::Event, self.clock_ms, "homed"));
                        true
                    }
                    Err(e) => {
                        out.push(self.record(RecordKind::Error, self.clock_ms, format!("line {line}: {e}")));
                        false
                    }
                }
            }
            Instruction::Dwell { ms } => {
                let until = self.clock_ms + ms;
                self.drain_device(device, until, out);
                self.clock_ms = until;
                true
            }
            Instruction::Log { text } => {
                out.push(self.record(RecordKind::Event, self.clock_ms, text.clone()));
                true
            }
            Instruction::Await { pattern, timeout_ms } => {
                let deadline = self.clock_ms + timeout_ms;
                while let Some((t, text)) = device.poll(deadline) {
                    let t = t.max(self.clock_ms);
                    if pattern.matches(&text) {
                        self.clock_ms = t;
                        out.push(self.record(RecordKind::Event, t, format!("matched {pattern}: {text}")));
                        return true;
                    }
                    out.push(self.record(RecordKind::DeviceLine, t, text));
                }
                self.clock_ms = deadline;
                out.push(self.record(
                    RecordKind::Timeout,
                    deadline,
                    format!("no {pattern} within {timeout_ms} ms"),
                ));
                true
            }
        }
    }

    fn traced_goto(
        &mut self,
        session: &mut dyn Session,
        target: Point3,
        speed: Option<f64>,
        line: usize,
        device: &mut dyn DeviceSource,
        out: &mut Vec<LogRecord>,
    ) -> bool {
        // reject unreachable targets before anything is sent
        let schedule = match self.plan(target, speed) {
            Ok(s) => s,
            Err(e) => {
                out.push(self.record(RecordKind::Error, self.clock_ms, format!("line {line}: rejected {target}: {e}")));
                return false;
            }
        };
        let mut start = self.record(
            RecordKind::MoveStart,
            self.clock_ms,
            format!("line {line}: GOTO {target} steps {:?}", schedule.net_steps()),
        );
        start.commanded = target;
        out.push(start);
        let t0 = self.clock_ms;
        match self.execute(session, target, schedule) {
            Ok(report) => {
                let ids: Vec<u64> = report.moves.iter().map(|(id, _)| *id).collect();
                let until = self.clock_ms;
                // device lines that arrived while the carriage moved
                self.clock_ms = t0;
                self.drain_device(device, until, out);
                self.clock_ms = until;
                let (first, last) = (ids[0], ids[ids.len() - 1]);
                out.push(self.record(RecordKind::Ack, self.clock_ms, format!("ACK id={first}..{last}")));
                true
            }
            Err(e) => {
                let mut r = self.record(RecordKind::Error, self.clock_ms, format!("line {line}: {e}"));
                r.commanded = target;
                out.push(r);
                false
            }
        }
    }
}

fn emit(records: &mut Vec<LogRecord>, observer: &mut dyn RunObserver, r: LogRecord) {
    observer.record(&r);
    records.push(r);
}

fn line_of(cmd: &Command) -> String {
    String::from_utf8_lossy(&crate::protocol::encode(cmd)).trim_end().to_string()
}

fn refusal(cmd: &Command, reply: &Reply) -> ControllerError {
    let reply_text = String::from_utf8_lossy(&crate::protocol::encode_reply(reply))
        .trim_end()
        .to_string();
    match reply {
        Reply::Err { .. } => ControllerError::Refused {
            command: line_of(cmd),
            reply: reply_text,
        },
        _ => ControllerError::Unexpected {
            command: line_of(cmd),
            reply: reply_text,
        },
    }
}

fn expect_ack(session: &mut dyn Session, cmd: &Command, id: u64) -> Result<(), ControllerError> {
    match session.request(cmd)? {
        Reply::Ack { id: got } if got == id => Ok(()),
        other => Err(refusal(cmd, &other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::distance;
    use crate::protocol::{Emulator, EmulatorOptions, LocalSession};

    fn rig() -> RigConfig {
        RigConfig::new(
            vec![
                Point3::new(0.0, 0.0, 310.0),
                Point3::new(650.0, 0.0, 310.0),
                Point3::new(325.0, 390.0, 310.0),
            ],
            Point3::new(325.0, 150.0, 150.0),
        )
        .unwrap()
        .with_pileup(0.0)
    }

    fn connected(rig: RigConfig) -> (Controller, LocalSession) {
        let mut session = LocalSession::new(Emulator::new(rig.clone(), EmulatorOptions::default())).recording();
        let mut c = Controller::new(rig).unwrap();
        c.connect(&mut session).unwrap();
        (c, session)
    }

    fn true_position(s: &LocalSession) -> Point3 {
        s.emulator().plant().unwrap().position
    }

    #[test]
    fn goto_home_sends_one_zero_move() {
        let (mut c, mut s) = connected(rig());
        let out = c.run_trace(&mut s, &parse_trace("GOTO 325 150 150").unwrap(), &mut SilentDevice, &mut ());
        assert!(!out.aborted);
        let kinds: Vec<_> = out.records.iter().map(|r| r.kind).collect();
        assert_eq!(kinds, [RecordKind::MoveStart, RecordKind::Ack]);
        assert_eq!(s.transcript().last().unwrap(), "< ACK id=1");
        assert_eq!(s.transcript()[s.transcript().len() - 2], "> MOVE id=1 m0=0 m1=0 m2=0 t=0");
    }

    #[test]
    fn believed_tracks_true_at_zero_pileup() {
        let (mut c, mut s) = connected(rig());
        for target in [
            Point3::new(300.0, 120.0, 160.0),
            Point3::new(360.0, 170.0, 140.0),
            Point3::new(325.0, 150.0, 150.0),
        ] {
            c.goto(&mut s, target, None).unwrap();
            assert!(distance(c.believed(), true_position(&s)) < 1e-6);
            assert!(distance(c.believed(), target) < 0.1);
        }
    }

    #[test]
    fn move_durations_sum_to_rounded_total() {
        let (c, _) = connected(rig());
        let sched = c.plan(Point3::new(331.3, 150.0, 150.0), Some(7.0)).unwrap();
        let d = Controller::move_durations(&sched);
        assert_eq!(d.len(), sched.segments.len());
        assert_eq!(d.iter().sum::<u64>(), sched.duration_ms.round() as u64);
    }

    #[test]
    fn await_match_and_timeout_use_virtual_time() {
        let (mut c, mut s) = connected(rig());
        let trace = parse_trace("AWAIT DONE 100\nAWAIT DONE 50\nLOG after").unwrap();
        let mut dev = ScriptedDevice::new(vec![(3, "noise".into()), (10, "ALL DONE".into())]);
        let out = c.run_trace(&mut s, &trace, &mut dev, &mut ());
        let summary: Vec<_> = out.records.iter().map(|r| (r.t_ms, r.kind)).collect();
        assert_eq!(
            summary,
            [
                (3, RecordKind::DeviceLine),
                (10, RecordKind::Event),
                (60, RecordKind::Timeout),
                (60, RecordKind::Event)
            ]
        );
    }

    #[test]
    fn infeasible_target_is_rejected_before_sending() {
        let (mut c, mut s) = connected(rig());
        let sent = s.transcript().len();
        let out = c.run_trace(&mut s, &parse_trace("GOTO 325 150 400\nLOG never").unwrap(), &mut SilentDevice, &mut ());
        assert!(out.aborted);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].kind, RecordKind::Error);
        assert_eq!(s.transcript().len(), sent);
    }

    #[test]
    fn protocol_error_aborts_with_error_record() {
        // plant spools hold far less wire than the controller assumes
        let mut plant_rig = rig();
        plant_rig.initial_wound_cm = vec![Some(1.0); 3];
        let mut s = LocalSession::new(Emulator::new(plant_rig, EmulatorOptions::default()));
        let mut c = Controller::new(rig()).unwrap();
        c.connect(&mut s).unwrap();
        let trace = parse_trace("GOTO 325 120 120\nLOG never").unwrap();
        let out = c.run_trace(&mut s, &trace, &mut SilentDevice, &mut ());
        assert!(out.aborted);
        let kinds: Vec<_> = out.records.iter().map(|r| r.kind).collect();
        assert_eq!(kinds, [RecordKind::MoveStart, RecordKind::Error]);
        assert!(out.records[1].payload.contains("UNSPOOL"), "{}", out.records[1].payload);
    }

    #[test]
    fn home_returns_and_rezeroes() {
        let (mut c, mut s) = connected(rig());
        let trace = parse_trace("GOTO 300 120 160\nHOME\nGOTO 330 150 150").unwrap();
        let out = c.run_trace(&mut s, &trace, &mut SilentDevice, &mut ());
        assert!(!out.aborted);
        let events: Vec<_> = out.records.iter().filter(|r| r.kind == RecordKind::Event).collect();
        assert_eq!(events.len(), 1);
        assert!(distance(events[0].believed, c.rig().home) < 0.1);
        assert!(s.transcript().iter().any(|l| l == "> HOME"));
        assert_eq!(c.status(&mut s).unwrap(), s.emulator().plant().unwrap().cumulative_steps());
    }

    #[test]
    fn device_lines_during_moves_are_logged_in_order() {
        let (mut c, mut s) = connected(rig());
        let trace = parse_trace("GOTO 325 140 150 10\nDWELL 500").unwrap();
        let mut dev = ScriptedDevice::new(vec![(200, "mid-move".into()), (1200, "dwelling".into())]);
        let out = c.run_trace(&mut s, &trace, &mut dev, &mut ());
        let summary: Vec<_> = out.records.iter().map(|r| (r.t_ms, r.kind)).collect();
        assert_eq!(
            summary,
            [
                (0, RecordKind::MoveStart),
                (200, RecordKind::DeviceLine),
                (1000, RecordKind::Ack),
                (1200, RecordKind::DeviceLine)
            ]
        );
    }

    #[test]
    fn abort_flag_stops_before_next_instruction() {
        let (mut c, mut s) = connected(rig());
        let flag = AtomicBool::new(true);
        let out = c.run_trace(&mut s, &parse_trace("LOG a\nLOG b").unwrap(), &mut SilentDevice, &mut &flag);
        assert!(out.aborted);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].kind, RecordKind::Error);
    }

    #[test]
    fn csv_has_stable_columns() {
        let rec = LogRecord {
            t_ms: 5,
            kind: RecordKind::DeviceLine,
            payload: "T=1, ok".into(),
            commanded: Point3::new(1.0, 2.0, 3.0),
            believed: Point3::new(1.5, 2.0, 3.0),
        };
        let mut out = Vec::new();
        write_csv(&[rec], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "t_ms,kind,payload,cmd_x,cmd_y,cmd_z,bel_x,bel_y,bel_z\n\
             5,device-line,\"T=1, ok\",1.000000,2.000000,3.000000,1.500000,2.000000,3.000000\n"
        );
    }
}
