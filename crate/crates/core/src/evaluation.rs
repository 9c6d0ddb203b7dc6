//! Positioning-error experiments and the pile-up fit.
//!
//! Both experiments run the whole stack: a controller that models a spool
//! without build-up drives an emulated plant whose spools do build up, and
//! the error is read from the plant's true carriage position.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RigConfig};
use crate::controller::{Controller, ControllerError};
use crate::kinematics::{distance, Point3};
use crate::protocol::{Emulator, EmulatorOptions, LocalSession};
use crate::spool::SpoolParams;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rig for position {position}: {source}")]
    Rig { position: usize, source: ConfigError },
    #[error("position {position}: {source}")]
    Run { position: usize, source: ControllerError },
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Linear,
    Spatial,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Linear => "linear",
            Experiment::Spatial => "spatial",
        }
    }
}

/// Experiment geometry. Defaults describe a 650 x 390 x 310 cm room with an
/// anchor in each ceiling corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub room_cm: [f64; 3],
    pub anchors: Vec<Point3>,
    pub spool: SpoolParams,
    /// Wire deployed between motor and carriage at the start of each linear
    /// move, cm.
    pub linear_starts_cm: Vec<f64>,
    /// Total line on the linear spool; wire on the wheel is this minus the
    /// deployed length.
    pub linear_line_cm: f64,
    pub linear_move_cm: f64,
    pub spatial_starts: Vec<Point3>,
    pub spatial_move_cm: f64,
    /// Spatial moves head toward this point; the room centre when unset.
    pub spatial_toward: Option<Point3>,
    pub speed_cm_s: f64,
    pub max_chord_cm: f64,
    pub repetitions: usize,
}

/// Start heights above this are lowered to it so the carriage hangs below
/// the ceiling anchors.
pub const SPATIAL_MAX_START_Z: f64 = 300.0;

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            room_cm: [650.0, 390.0, 310.0],
            anchors: vec![
                Point3::new(0.0, 0.0, 310.0),
                Point3::new(650.0, 0.0, 310.0),
                Point3::new(650.0, 390.0, 310.0),
                Point3::new(0.0, 390.0, 310.0),
            ],
            spool: SpoolParams::default(),
            linear_starts_cm: (1..=13).map(|k| 50.0 * k as f64).collect(),
            linear_line_cm: 700.0,
            linear_move_cm: 25.0,
            spatial_starts: vec![
                Point3::new(355.0, 196.0, 310.0),
                Point3::new(405.0, 86.0, 240.0),
                Point3::new(495.0, 196.0, 240.0),
            ],
            spatial_move_cm: 30.0,
            spatial_toward: None,
            speed_cm_s: 10.0,
            max_chord_cm: 0.5,
            repetitions: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn room_center(&self) -> Point3 {
        Point3::new(self.room_cm[0] / 2.0, self.room_cm[1] / 2.0, self.room_cm[2] / 2.0)
    }

    /// Spatial start points after lowering any that touch the ceiling.
    pub fn spatial_start_points(&self) -> Vec<Point3> {
        self.spatial_starts
            .iter()
            .map(|p| Point3::new(p.x, p.y, p.z.min(SPATIAL_MAX_START_Z)))
            .collect()
    }

    /// Reads a spec from TOML; omitted keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let spec: Self = toml::from_str(text).map_err(|e| EvalError::Invalid(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Invalid(m.to_string()));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if !(self.linear_move_cm > 0.0 && self.spatial_move_cm > 0.0) {
            return bad("move lengths must be positive");
        }
        if self.linear_starts_cm.iter().any(|&x| !(x > 0.0 && x <= self.linear_line_cm)) {
            return bad("linear starts must lie in (0, linear_line_cm]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    pub experiment: Experiment,
    /// 1-based row of the start table.
    pub position_id: usize,
    pub repetition: usize,
    /// Deployed wire (linear) or distance from the room centre (spatial) at
    /// the start, cm.
    pub start_cm: f64,
    pub commanded_cm: f64,
    pub abs_err_cm: f64,
    pub rel_err: f64,
}

impl ErrorRecord {
    fn new(experiment: Experiment, position_id: usize, repetition: usize, start_cm: f64, commanded_cm: f64, abs_err_cm: f64) -> Self {
        Self {
            experiment,
            position_id,
            repetition,
            start_cm,
            commanded_cm,
            abs_err_cm,
            rel_err: abs_err_cm / commanded_cm,
        }
    }
}

fn drive(rig: RigConfig, target: Point3, position: usize) -> Result<Point3, EvalError> {
    let mut session = LocalSession::new(Emulator::new(rig.clone(), EmulatorOptions::default()));
    let mut controller = Controller::new(rig).map_err(|source| EvalError::Run { position, source })?;
    controller
        .connect(&mut session)
        .and_then(|_| controller.goto(&mut session, target, None))
        .map_err(|source| EvalError::Run { position, source })?;
    Ok(session.emulator().plant().expect("homed").position)
}

/// One motor hauls the carriage straight up by `linear_move_cm` from each
/// start; the error is how far the true stop misses the commanded one.
pub fn run_linear(spec: &ExperimentSpec, pileup: f64) -> Result<Vec<ErrorRecord>, EvalError> {
    spec.check()?;
    let mut out = Vec::new();
    for (i, &deployed) in spec.linear_starts_cm.iter().enumerate() {
        let position = i + 1;
        let anchor = Point3::new(0.0, 0.0, spec.linear_line_cm);
        let home = Point3::new(0.0, 0.0, spec.linear_line_cm - deployed);
        let mut rig = RigConfig::new(vec![anchor], home).map_err(|source| EvalError::Rig { position, source })?;
        rig.spools = vec![spec.spool.with_pileup(pileup)];
        rig.initial_wound_cm = vec![Some(spec.linear_line_cm - deployed)];
        rig.planner.speed_cm_s = spec.speed_cm_s;
        rig.planner.max_chord_cm = spec.max_chord_cm;
        let target = home + Point3::new(0.0, 0.0, spec.linear_move_cm);
        let truth = drive(rig, target, position)?;
        let err = distance(truth, target);
        for rep in 1..=spec.repetitions {
            out.push(ErrorRecord::new(Experiment::Linear, position, rep, deployed, spec.linear_move_cm, err));
        }
    }
    Ok(out)
}

/// From each start, `spatial_move_cm` toward the room centre (or
/// `spatial_toward`).
pub fn run_spatial(spec: &ExperimentSpec, pileup: f64) -> Result<Vec<ErrorRecord>, EvalError> {
    spec.check()?;
    let toward = spec.spatial_toward.unwrap_or_else(|| spec.room_center());
    let mut out = Vec::new();
    for (i, start) in spec.spatial_start_points().into_iter().enumerate() {
        let position = i + 1;
        let dir = toward - start;
        let len = dir.norm();
        if !(len > 0.0) {
            return Err(EvalError::Invalid(format!("start {position} is the move's aim point")));
        }
        let target = start + dir * (spec.spatial_move_cm / len);
        let mut rig =
            RigConfig::new(spec.anchors.clone(), start).map_err(|source| EvalError::Rig { position, source })?;
        rig.spools = vec![spec.spool.with_pileup(pileup); spec.anchors.len()];
        rig.planner.speed_cm_s = spec.speed_cm_s;
        rig.planner.max_chord_cm = spec.max_chord_cm;
        let truth = drive(rig, target, position)?;
        let err = distance(truth, target);
        let from_center = distance(start, spec.room_center());
        for rep in 1..=spec.repetitions {
            out.push(ErrorRecord::new(Experiment::Spatial, position, rep, from_center, spec.spatial_move_cm, err));
        }
    }
    Ok(out)
}

/// What the linear errors should look like.
#[derive(Debug, Clone, PartialEq)]
pub enum FitTarget {
    /// Absolute error crosses `reference_cm` at the middle start: shorter
    /// deployed lengths err by more, longer ones by less.
    ReferenceCrossing { reference_cm: f64 },
    /// Relative error per linear start.
    Curve(Vec<f64>),
}

impl Default for FitTarget {
    fn default() -> Self {
        FitTarget::ReferenceCrossing { reference_cm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub pileup: f64,
    pub objective: f64,
    /// Relative linear errors at the fitted value.
    pub rel_errors: Vec<f64>,
    /// Set when no value in [0, 1] reproduces the target's ordering.
    pub warning: Option<String>,
}

const GRID_STEP: f64 = 0.01;
const GOLDEN_TOLERANCE: f64 = 1e-6;

fn rel_errors(spec: &ExperimentSpec, pileup: f64) -> Result<Vec<f64>, EvalError> {
    Ok(run_linear(spec, pileup)?
        .into_iter()
        .filter(|r| r.repetition == 1)
        .map(|r| r.rel_err)
        .collect())
}

/// Fits the pile-up factor by a grid over [0, 1] and golden-section
/// refinement around the best grid point.
pub fn fit_pileup(spec: &ExperimentSpec, target: &FitTarget) -> Result<FitResult, EvalError> {
    let n = spec.linear_starts_cm.len();
    if n == 0 {
        return Err(EvalError::Invalid("no linear starts".into()));
    }
    let objective = |errs: &[f64]| -> f64 {
        match target {
            FitTarget::ReferenceCrossing { reference_cm } => {
                let mid = errs[(n - 1) / 2];
                (mid - reference_cm / spec.linear_move_cm).powi(2)
            }
            FitTarget::Curve(want) => errs.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum(),
        }
    };
    if let FitTarget::Curve(want) = target {
        if want.len() != n {
            return Err(EvalError::Invalid(format!("target has {} values for {n} starts", want.len())));
        }
    }
    let eval = |phi: f64| -> Result<f64, EvalError> { Ok(objective(&rel_errors(spec, phi)?)) };

    let steps = (1.0 / GRID_STEP).round() as usize;
    let mut best = (0.0, f64::INFINITY);
    for k in 0..=steps {
        let phi = k as f64 * GRID_STEP;
        let v = eval(phi)?;
        if v < best.1 {
            best = (phi, v);
        }
    }
    let (mut lo, mut hi) = ((best.0 - GRID_STEP).max(0.0), (best.0 + GRID_STEP).min(1.0));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (eval(a)?, eval(b)?);
    while hi - lo > GOLDEN_TOLERANCE {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = eval(a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = eval(b)?;
        }
    }
    let mut pileup = (lo + hi) / 2.0;
    let mut value = eval(pileup)?;
    if best.1 < value {
        (pileup, value) = best;
    }
    let errs = rel_errors(spec, pileup)?;
    let warning = ordering_violation(spec, target, &errs);
    Ok(FitResult {
        pileup,
        objective: value,
        rel_errors: errs,
        warning,
    })
}

fn ordering_violation(spec: &ExperimentSpec, target: &FitTarget, errs: &[f64]) -> Option<String> {
    match target {
        FitTarget::ReferenceCrossing { reference_cm } => {
            let n = errs.len();
            let mid = (n - 1) / 2;
            let reference = reference_cm / spec.linear_move_cm;
            let bad: Vec<usize> = (0..n)
                .filter(|&i| (i < mid && errs[i] <= reference) || (i > mid && errs[i] >= reference))
                .map(|i| i + 1)
                .collect();
            (!bad.is_empty()).then(|| format!("positions {bad:?} fall on the wrong side of the reference"))
        }
        FitTarget::Curve(want) => {
            for i in 0..want.len() {
                for j in i + 1..want.len() {
                    let t = want[i].partial_cmp(&want[j]);
                    let s = errs[i].partial_cmp(&errs[j]);
                    if want[i] != want[j] && t != s {
                        return Some(format!("fitted errors cannot order positions {} and {} like the target", i + 1, j + 1));
                    }
                }
            }
            None
        }
    }
}

/// Ranks with ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Rank correlation of start length against relative error, per
    /// experiment present.
    pub spearman: Vec<(Experiment, Option<f64>)>,
    pub max_abs_err_cm: f64,
    pub notes: Vec<String>,
}

pub const REPORT_HEADER: [&str; 5] = ["experiment", "position_id", "commanded_cm", "abs_err_cm", "rel_err"];

pub fn emit_report(records: &[ErrorRecord], spec: &ExperimentSpec) -> (String, Summary) {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.experiment.as_str().to_string(),
            r.position_id.to_string(),
            format!("{:.6}", r.commanded_cm),
            format!("{:.6}", r.abs_err_cm),
            format!("{:.6}", r.rel_err),
        ])
        .expect("in-memory write");
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii");

    let mut correlations = Vec::new();
    for exp in [Experiment::Linear, Experiment::Spatial] {
        let (x, y): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter(|r| r.experiment == exp && r.repetition == 1)
            .map(|r| (r.start_cm, r.rel_err))
            .unzip();
        if !x.is_empty() {
            correlations.push((exp, spearman(&x, &y)));
        }
    }
    let mut notes = Vec::new();
    if records.iter().any(|r| r.experiment == Experiment::Spatial) {
        for (i, p) in spec.spatial_starts.iter().enumerate() {
            if p.z > SPATIAL_MAX_START_Z {
                notes.push(format!(
                    "spatial position {} start z lowered from {} to {SPATIAL_MAX_START_Z}",
                    i + 1,
                    p.z
                ));
            }
        }
    }
    let summary = Summary {
        spearman: correlations,
        max_abs_err_cm: records.iter().map(|r| r.abs_err_cm).fold(0.0, f64::max),
        notes,
    };
    (csv, summary)
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (exp, rho) in &self.spearman {
            match rho {
                Some(r) => writeln!(s, "{} spearman(start, rel_err) = {r:.4}", exp.as_str()),
                None => writeln!(s, "{} spearman(start, rel_err) undefined (constant errors)", exp.as_str()),
            }
            .expect("string write");
        }
        writeln!(s, "max abs error = {:.4} cm", self.max_abs_err_cm).expect("string write");
        for n in &self.notes {
            writeln!(s, "note: {n}").expect("string write");
        }
        s
    }
}
