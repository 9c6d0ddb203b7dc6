//! Anchor estimation from measured wire lengths at known carriage positions.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::kinematics::{AnchorLayout, KinematicsError, Point3};

const MAX_ITERATIONS: usize = 500;
const STEP_TOLERANCE_CM: f64 = 1e-10;
/// Smallest-to-largest singular value ratio below which the observation
/// points count as coplanar.
const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub point: Point3,
    pub lengths_cm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub layout: AnchorLayout,
    /// Per-motor RMS of `|p - anchor| - length`, cm.
    pub rms_cm: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("need at least 4 observations, got {0}")]
    TooFew(usize),
    #[error("observation points are coplanar; anchors are underdetermined")]
    Coplanar,
    #[error("observation {row} has {got} lengths, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("observation {0} has a non-finite or negative value")]
    BadValue(usize),
    #[error("motor {0}: no convergence within {MAX_ITERATIONS} iterations")]
    Diverged(usize),
    #[error("estimated anchors are invalid: {0}")]
    Layout(#[from] KinematicsError),
    #[error("observations file: {0}")]
    Parse(String),
}

pub fn estimate_anchors(observations: &[Observation]) -> Result<Calibration, CalibrationError> {
    if observations.len() < 4 {
        return Err(CalibrationError::TooFew(observations.len()));
    }
    let motors = observations[0].lengths_cm.len();
    if motors == 0 {
        return Err(CalibrationError::Ragged {
            row: 0,
            expected: 1,
            got: 0,
        });
    }
    for (row, o) in observations.iter().enumerate() {
        if o.lengths_cm.len() != motors {
            return Err(CalibrationError::Ragged {
                row,
                expected: motors,
                got: o.lengths_cm.len(),
            });
        }
        if !o.point.is_finite() || o.lengths_cm.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(CalibrationError::BadValue(row));
        }
    }
    check_spread(observations)?;

    let mut anchors = Vec::with_capacity(motors);
    let mut rms = Vec::with_capacity(motors);
    let mut iterations = Vec::with_capacity(motors);
    for motor in 0..motors {
        let data: Vec<(Vector3<f64>, f64)> = observations
            .iter()
            .map(|o| (o.point.to_vector(), o.lengths_cm[motor]))
            .collect();
        let guess = linear_guess(&data).ok_or(CalibrationError::Coplanar)?;
        let (anchor, iters) = refine(&data, guess).ok_or(CalibrationError::Diverged(motor))?;
        let ss: f64 = data.iter().map(|(p, l)| ((p - anchor).norm() - l).powi(2)).sum();
        rms.push((ss / data.len() as f64).sqrt());
        anchors.push(Point3::from(anchor));
        iterations.push(iters);
    }
    Ok(Calibration {
        layout: AnchorLayout::new(anchors)?,
        rms_cm: rms,
        iterations,
    })
}

fn check_spread(observations: &[Observation]) -> Result<(), CalibrationError> {
    let p0 = observations[0].point.to_vector();
    let mut scatter = Matrix3::zeros();
    for o in &observations[1..] {
        let d = o.point.to_vector() - p0;
        scatter += d * d.transpose();
    }
    let sv = scatter.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if !(max > 0.0) || min / max < RANK_TOLERANCE {
        return Err(CalibrationError::Coplanar);
    }
    Ok(())
}

/// Closed-form start: differences of `|p|^2 - 2 p.M + |M|^2 = L^2` are linear
/// in M.
fn linear_guess(data: &[(Vector3<f64>, f64)]) -> Option<Vector3<f64>> {
    let (p0, l0) = data[0];
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (p, l) in &data[1..] {
        let row = 2.0 * (p - p0);
        let rhs = p.norm_squared() - p0.norm_squared() - l * l + l0 * l0;
        ata += row * row.transpose();
        atb += row * rhs;
    }
    ata.try_inverse().map(|inv| inv * atb)
}

/// Levenberg-Marquardt on the range residuals.
fn refine(data: &[(Vector3<f64>, f64)], start: Vector3<f64>) -> Option<(Vector3<f64>, usize)> {
    let cost = |m: &Vector3<f64>| -> f64 { data.iter().map(|(p, l)| ((m - p).norm() - l).powi(2)).sum() };
    let mut m = start;
    let mut current = cost(&m);
    let mut lambda = 1e-3;
    for iter in 1..=MAX_ITERATIONS {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (p, l) in data {
            let d = m - p;
            let n = d.norm();
            if n == 0.0 {
                continue;
            }
            let j = d / n;
            jtj += j * j.transpose();
            jtr += j * (n - l);
        }
        loop {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let step = damped.try_inverse()? * -jtr;
            let candidate = m + step;
            let c = cost(&candidate);
            if c <= current {
                m = candidate;
                current = c;
                lambda = (lambda / 10.0).max(1e-12);
                if step.norm() < STEP_TOLERANCE_CM {
                    return Some((m, iter));
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                // no descent left: already at the minimum to rounding
                return Some((m, iter));
            }
        }
    }
    None
}

/// Reads CSV with header `x,y,z,l0,l1,...`.
pub fn parse_observations(text: &str) -> Result<Vec<Observation>, CalibrationError> {
    let perr = |m: String| CalibrationError::Parse(m);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| perr(e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let motors = names.len().saturating_sub(3);
    let expected: Vec<String> = ["x", "y", "z"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..motors).map(|i| format!("l{i}")))
        .collect();
    if motors == 0 || names != expected {
        return Err(perr(format!("header must be x,y,z,l0..l{{n-1}}, got {}", names.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| perr(e.to_string()))?;
        let values = row
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| perr(format!("row {}: {e}", i + 1)))?;
        out.push(Observation {
            point: Point3::new(values[0], values[1], values[2]),
            lengths_cm: values[3..].to_vec(),
        });
    }
    Ok(out)
}
