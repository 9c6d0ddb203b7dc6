use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{AnchorLayout, KinematicsError, Point3};

/// Breaking load of the fishing line, grams.
pub const DEFAULT_WIRE_RATING_G: f64 = 7000.0;

/// Relative tolerance on a negative tension, as a fraction of the weight.
const NEGATIVE_TENSION_TOLERANCE: f64 = 1e-9;
/// Relative static-equilibrium residual accepted as balanced.
const EQUILIBRIUM_TOLERANCE: f64 = 1e-6;
const SINGULAR_DETERMINANT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TensionWarning {
    /// Carriage is not strictly below this anchor, so no pure-pull
    /// equilibrium exists.
    NotBelowAnchor { anchor: usize },
    ExceedsWireRating {
        anchor: usize,
        tension_g: f64,
        rating_g: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensionSolution {
    pub feasible: bool,
    /// Gram-force per wire, present iff `feasible`.
    pub tensions: Option<Vec<f64>>,
    pub warnings: Vec<TensionWarning>,
}

impl TensionSolution {
    fn infeasible(warnings: Vec<TensionWarning>) -> Self {
        Self {
            feasible: false,
            tensions: None,
            warnings,
        }
    }

    fn feasible(tensions: Vec<f64>, rating_g: f64) -> Self {
        let warnings = tensions
            .iter()
            .enumerate()
            .filter(|(_, &t)| t > rating_g)
            .map(|(anchor, &t)| TensionWarning::ExceedsWireRating {
                anchor,
                tension_g: t,
                rating_g,
            })
            .collect();
        Self {
            feasible: true,
            tensions: Some(tensions),
            warnings,
        }
    }
}

/// Can gravity alone keep every wire taut at `p`?
///
/// Solves `sum t_i u_i = (0, 0, W)` for wire tensions `t_i >= 0`, where `u_i`
/// points from the carriage to anchor `i` and `W` is the carriage mass in
/// gram-force. Exactly three anchors use a direct 3x3 solve and report a
/// singular direction matrix as an error; any other count goes through
/// nonnegative least squares.
pub fn tension_feasibility(
    layout: &AnchorLayout,
    p: Point3,
    mass_g: f64,
    wire_rating_g: f64,
) -> Result<TensionSolution, KinematicsError> {
    let directions = match prepare(layout, p, mass_g)? {
        Ok(d) => d,
        Err(blocked) => return Ok(blocked),
    };
    if directions.len() != 3 {
        return Ok(solve_nnls(&directions, mass_g, wire_rating_g));
    }

    let u = Matrix3::from_columns(&[directions[0], directions[1], directions[2]]);
    if u.determinant().abs() < SINGULAR_DETERMINANT {
        return Err(KinematicsError::SingularDirections);
    }
    let load = Vector3::new(0.0, 0.0, mass_g);
    let t = u.lu().solve(&load).ok_or(KinematicsError::SingularDirections)?;
    if t.iter().any(|&ti| ti < -NEGATIVE_TENSION_TOLERANCE * mass_g) {
        return Ok(TensionSolution::infeasible(Vec::new()));
    }
    Ok(TensionSolution::feasible(
        t.iter().map(|&ti| ti.max(0.0)).collect(),
        wire_rating_g,
    ))
}

/// The nonnegative-least-squares route for any anchor count, including
/// three. Feasible iff the best nonnegative tensions balance the weight to
/// within `1e-6 W`.
pub fn tension_feasibility_nnls(
    layout: &AnchorLayout,
    p: Point3,
    mass_g: f64,
    wire_rating_g: f64,
) -> Result<TensionSolution, KinematicsError> {
    Ok(match prepare(layout, p, mass_g)? {
        Ok(d) => solve_nnls(&d, mass_g, wire_rating_g),
        Err(blocked) => blocked,
    })
}

/// Unit wire directions, or an already-decided infeasible verdict.
fn prepare(
    layout: &AnchorLayout,
    p: Point3,
    mass_g: f64,
) -> Result<Result<Vec<Vector3<f64>>, TensionSolution>, KinematicsError> {
    if !(mass_g > 0.0 && mass_g.is_finite()) {
        return Err(KinematicsError::InvalidMass(mass_g));
    }
    if !p.is_finite() {
        return Err(KinematicsError::NonFinite);
    }
    let blocked: Vec<_> = layout
        .anchors()
        .iter()
        .enumerate()
        .filter(|(_, a)| p.z >= a.z)
        .map(|(anchor, _)| TensionWarning::NotBelowAnchor { anchor })
        .collect();
    if !blocked.is_empty() {
        return Ok(Err(TensionSolution::infeasible(blocked)));
    }
    Ok(Ok(layout
        .anchors()
        .iter()
        .map(|&a| {
            let v = (a - p).to_vector();
            v / v.norm()
        })
        .collect()))
}

fn solve_nnls(directions: &[Vector3<f64>], mass_g: f64, wire_rating_g: f64) -> TensionSolution {
    let a = DMatrix::from_fn(3, directions.len(), |r, c| directions[c][r]);
    let b = DVector::from_column_slice(&[0.0, 0.0, mass_g]);
    let t = nnls(&a, &b);
    let residual = (&a * &t - &b).norm();
    if residual <= EQUILIBRIUM_TOLERANCE * mass_g {
        TensionSolution::feasible(t.iter().copied().collect(), wire_rating_g)
    } else {
        TensionSolution::infeasible(Vec::new())
    }
}

/// Lawson-Hanson active set: `min |Ax - b|` subject to `x >= 0`.
pub(crate) fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let tol = 1e-12 * (1.0 + b.norm()) * (1.0 + a.norm());
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];

    for _ in 0..3 * n + 3 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(enter) = candidate else {
            break;
        };
        passive[enter] = true;

        for _ in 0..3 * n + 3 {
            let s = passive_solve(a, b, &passive);
            if (0..n).filter(|&j| passive[j]).all(|j| s[j] > 0.0) {
                x = s;
                break;
            }
            let alpha = (0..n)
                .filter(|&j| passive[j] && s[j] <= 0.0)
                .map(|j| x[j] / (x[j] - s[j]))
                .fold(f64::INFINITY, f64::min);
            x += (&s - &x) * alpha;
            for j in 0..n {
                if passive[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    x
}

fn passive_solve(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let mut full = DVector::zeros(passive.len());
    if cols.is_empty() {
        return full;
    }
    let sub = a.select_columns(&cols);
    let sol = sub
        .svd(true, true)
        .solve(b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    for (k, &j) in cols.iter().enumerate() {
        full[j] = sol[k];
    }
    full
}
