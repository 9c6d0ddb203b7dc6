//! Compiles a straight 3D move into per-motor step streams.
//!
//! The move is cut into short chords. Every chord becomes one block of
//! integer steps per motor, spread evenly over the chord's share of the move
//! time, so wire rates are piecewise constant and the carriage speed stays
//! constant along the line. Quantization leftovers are carried from chord to
//! chord so they never pile up beyond one step per motor. On the last chord
//! each motor rounds up or down, whichever combination puts the endpoint
//! nearest the target.

use thiserror::Error;

use crate::kinematics::{
    distance, forward_kinematics, hanging_position, spool_deltas, tension_feasibility, wire_lengths, AnchorLayout,
    KinematicsError, Point3,
};
use crate::spool::{SpoolError, SpoolState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("invalid move request: {0}")]
    InvalidRequest(&'static str),
    #[error("expected {expected} spool states, got {got}")]
    StateCount { expected: usize, got: usize },
    #[error("motor {motor} needs {rate:.1} steps/s in segment {segment}, limit is {limit}")]
    RateExceeded {
        motor: usize,
        segment: usize,
        rate: f64,
        limit: f64,
    },
    #[error("endpoint {0} cannot be held by gravity-tensioned wires")]
    Infeasible(Point3),
    #[error("motor {motor}: {source}")]
    Spool { motor: usize, source: SpoolError },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveRequest {
    pub from: Point3,
    pub to: Point3,
    pub speed_cm_s: f64,
    pub max_chord_cm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerLimits {
    pub max_step_rate: f64,
    pub carriage_mass_g: f64,
    pub wire_rating_g: f64,
    pub strict_feasibility: bool,
}

impl Default for PlannerLimits {
    fn default() -> Self {
        Self {
            max_step_rate: 1000.0,
            carriage_mass_g: 500.0,
            wire_rating_g: crate::kinematics::DEFAULT_WIRE_RATING_G,
            strict_feasibility: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    /// Milliseconds since the move started.
    pub time_ms: f64,
    /// +1 spools in, -1 spools out.
    pub direction: i8,
}

/// Steps every motor makes during one chord.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub steps: Vec<i64>,
    pub start_ms: f64,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanWarning {
    InfeasibleEndpoint(Point3),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    /// Per motor, time-ordered step events.
    pub motors: Vec<Vec<StepEvent>>,
    pub segments: Vec<Segment>,
    pub duration_ms: f64,
    /// Controller-model spool states after the move.
    pub end_states: Vec<SpoolState>,
    /// Leftover wire per motor (`wanted - stepped`), cm.
    pub residuals_cm: Vec<f64>,
    pub warnings: Vec<PlanWarning>,
}

impl StepSchedule {
    pub fn net_steps(&self) -> Vec<i64> {
        let n = self.motors.len();
        (0..n)
            .map(|m| self.segments.iter().map(|s| s.steps[m]).sum())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Evenly spaced waypoints from `from` to `to`, both included, no two
/// consecutive ones further apart than `max_chord`.
pub fn segmentize(from: Point3, to: Point3, max_chord: f64) -> Vec<Point3> {
    let length = distance(from, to);
    if length == 0.0 {
        return vec![from];
    }
    let count = (length / max_chord).ceil().max(1.0) as usize;
    (0..=count)
        .map(|k| {
            if k == count {
                to
            } else {
                from.lerp(&to, k as f64 / count as f64)
            }
        })
        .collect()
}

pub fn plan_move(
    layout: &AnchorLayout,
    states: &[SpoolState],
    req: &MoveRequest,
    limits: &PlannerLimits,
) -> Result<StepSchedule, PlanError> {
    let motors = layout.len();
    if states.len() != motors {
        return Err(PlanError::StateCount {
            expected: motors,
            got: states.len(),
        });
    }
    if !(req.speed_cm_s > 0.0 && req.speed_cm_s.is_finite()) {
        return Err(PlanError::InvalidRequest("speed must be positive"));
    }
    if !(req.max_chord_cm > 0.0 && req.max_chord_cm.is_finite()) {
        return Err(PlanError::InvalidRequest("max_chord must be positive"));
    }
    if !(limits.max_step_rate > 0.0) {
        return Err(PlanError::InvalidRequest("max_step_rate must be positive"));
    }
    if !req.from.is_finite() || !req.to.is_finite() {
        return Err(KinematicsError::NonFinite.into());
    }

    let mut warnings = Vec::new();
    for endpoint in [req.from, req.to] {
        let held = tension_feasibility(layout, endpoint, limits.carriage_mass_g, limits.wire_rating_g)
            .map(|s| s.feasible)
            .unwrap_or(false);
        if !held {
            if limits.strict_feasibility {
                return Err(PlanError::Infeasible(endpoint));
            }
            warnings.push(PlanWarning::InfeasibleEndpoint(endpoint));
        }
    }

    let waypoints = segmentize(req.from, req.to, req.max_chord_cm);
    let mut states = states.to_vec();
    let mut carry = vec![0.0; motors];
    let mut segments = Vec::with_capacity(waypoints.len().saturating_sub(1));
    let mut start_ms = 0.0;

    for (index, pair) in waypoints.windows(2).enumerate() {
        let duration_ms = distance(pair[0], pair[1]) / req.speed_cm_s * 1000.0;
        let deltas = spool_deltas(layout, pair[0], pair[1]);
        let wanted: Vec<f64> = deltas.iter().zip(&carry).map(|(d, c)| d + c).collect();
        let mut counts: Vec<(i64, f64)> = wanted.iter().zip(&states).map(|(w, s)| s.steps_for_length(*w)).collect();
        if index + 2 == waypoints.len() {
            counts = snap_endpoint(layout, &states, &wanted, counts, req.to);
        }
        let mut steps = Vec::with_capacity(motors);
        for motor in 0..motors {
            let (n, residual) = counts[motor];
            let rate = n.unsigned_abs() as f64 / (duration_ms / 1000.0);
            if rate > limits.max_step_rate {
                return Err(PlanError::RateExceeded {
                    motor,
                    segment: index,
                    rate,
                    limit: limits.max_step_rate,
                });
            }
            let (_, next) = states[motor]
                .length_for_steps(n)
                .map_err(|source| PlanError::Spool { motor, source })?;
            if residual < 0.0 && residual.abs() > next.current_step_length() {
                // nearest count was capped by an empty wheel
                return Err(PlanError::Spool {
                    motor,
                    source: SpoolError::Unspool {
                        requested: n - 1,
                        completed: n,
                    },
                });
            }
            states[motor] = next;
            carry[motor] = residual;
            steps.push(n);
        }
        segments.push(Segment {
            steps,
            start_ms,
            duration_ms,
        });
        start_ms += duration_ms;
    }

    let motor_events = (0..motors)
        .map(|m| {
            let mut events = Vec::new();
            for seg in &segments {
                let n = seg.steps[m];
                let count = n.unsigned_abs();
                let direction = if n > 0 { 1 } else { -1 };
                let spacing = seg.duration_ms / count as f64;
                for k in 0..count {
                    events.push(StepEvent {
                        time_ms: seg.start_ms + (k as f64 + 0.5) * spacing,
                        direction,
                    });
                }
            }
            events
        })
        .collect();

    Ok(StepSchedule {
        motors: motor_events,
        segments,
        duration_ms: start_ms,
        end_states: states,
        residuals_cm: carry,
        warnings,
    })
}

/// Picks, per motor, the step count just below or just above `wanted` so the
/// carriage, hanging from those lengths, comes to rest nearest `target`.
/// Needs three anchors for the wires to fix the position; otherwise the
/// nearest counts are kept.
fn snap_endpoint(
    layout: &AnchorLayout,
    states: &[SpoolState],
    wanted: &[f64],
    nearest: Vec<(i64, f64)>,
    target: Point3,
) -> Vec<(i64, f64)> {
    let motors = layout.len();
    if motors < 3 {
        return nearest;
    }
    let target_lengths = wire_lengths(layout, target);
    // the other side of `wanted` for every motor, when that count exists
    let other: Vec<Option<(i64, f64)>> = nearest
        .iter()
        .zip(states)
        .zip(wanted)
        .map(|((&(n, residual), state), &w)| {
            let alt = if residual > 0.0 { n + 1 } else { n - 1 };
            state.length_for_steps(alt).ok().map(|(moved, _)| (alt, w - moved))
        })
        .collect();
    let landing = |choice: &[(i64, f64)]| -> f64 {
        let lengths: Vec<f64> = target_lengths.iter().zip(choice).map(|(l, (_, r))| l + r).collect();
        hanging_position(layout, &lengths)
            .map(|p| distance(p, target))
            .unwrap_or(f64::INFINITY)
    };
    let mut best = (landing(&nearest), nearest.clone());
    for mask in 1u32..(1 << motors) {
        let choice: Option<Vec<(i64, f64)>> = (0..motors)
            .map(|m| if mask >> m & 1 == 1 { other[m] } else { Some(nearest[m]) })
            .collect();
        if let Some(choice) = choice {
            let d = landing(&choice);
            if d < best.0 {
                best = (d, choice);
            }
        }
    }
    best.1
}

/// Largest sampled distance between the straight move and the path the
/// carriage actually follows when every wire changes linearly within a chord.
pub fn path_deviation_bound(
    layout: &AnchorLayout,
    from: Point3,
    to: Point3,
    max_chord: f64,
) -> Result<f64, KinematicsError> {
    path_deviation_sampled(layout, from, to, max_chord, 10)
}

/// [`path_deviation_bound`] with an explicit number of interior samples per
/// chord.
pub fn path_deviation_sampled(
    layout: &AnchorLayout,
    from: Point3,
    to: Point3,
    max_chord: f64,
    samples_per_chord: usize,
) -> Result<f64, KinematicsError> {
    if layout.len() < 3 {
        if layout.len() == 1 && is_radial(layout.anchors()[0], from, to) {
            return Ok(0.0);
        }
        return Err(KinematicsError::TooFewAnchors {
            needed: 3,
            got: layout.len(),
        });
    }
    let waypoints = segmentize(from, to, max_chord);
    let mut worst = 0.0f64;
    for pair in waypoints.windows(2) {
        let a = wire_lengths(layout, pair[0]);
        let b = wire_lengths(layout, pair[1]);
        for k in 1..=samples_per_chord {
            let s = k as f64 / (samples_per_chord + 1) as f64;
            let lengths: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + (y - x) * s).collect();
            let p = forward_kinematics(layout, &lengths)?;
            worst = worst.max(distance_to_segment(p, from, to));
        }
    }
    Ok(worst)
}

fn is_radial(anchor: Point3, from: Point3, to: Point3) -> bool {
    let u = from - anchor;
    let v = to - anchor;
    let cross = u.to_vector().cross(&v.to_vector()).norm();
    cross <= 1e-9 * (1.0 + u.norm() * v.norm()) && u.dot(&v) >= 0.0
}

fn distance_to_segment(p: Point3, a: Point3, b: Point3) -> f64 {
    let ab = b - a;
    let len_sq = ab.dot(&ab);
    if len_sq == 0.0 {
        return distance(p, a);
    }
    let t = ((p - a).dot(&ab) / len_sq).clamp(0.0, 1.0);
    distance(p, a + ab * t)
}
