use nalgebra::{Matrix3, Vector3};

use super::{distance, AnchorLayout, KinematicsError, Point3};

/// Largest per-wire residual accepted from a set of wire lengths.
pub const CONSISTENCY_TOLERANCE_CM: f64 = 0.1;

const GRADIENT_TOLERANCE: f64 = 1e-10;
const MAX_ITERATIONS: usize = 200;

/// Carriage position from wire lengths.
///
/// Three anchors are solved by sphere intersection, keeping the lower of the
/// two mirror solutions since the carriage hangs under its anchors. With more
/// anchors the three-anchor solution of the first three seeds a damped
/// Gauss-Newton fit of `sum (|p - M_i| - L_i)^2`.
pub fn forward_kinematics(layout: &AnchorLayout, lengths: &[f64]) -> Result<Point3, KinematicsError> {
    let anchors = layout.anchors();
    if anchors.len() < 3 {
        return Err(KinematicsError::TooFewAnchors {
            needed: 3,
            got: anchors.len(),
        });
    }
    if lengths.len() != anchors.len() {
        return Err(KinematicsError::LengthCountMismatch {
            expected: anchors.len(),
            got: lengths.len(),
        });
    }
    if lengths.iter().any(|l| !l.is_finite()) {
        return Err(KinematicsError::NonFinite);
    }
    if let Some(i) = lengths.iter().position(|&l| l <= 0.0) {
        return Err(KinematicsError::NonPositiveLength(i));
    }

    let (seed, seed_residual) = trilaterate(
        [anchors[0], anchors[1], anchors[2]],
        [lengths[0], lengths[1], lengths[2]],
    )?;

    let point = if anchors.len() == 3 {
        if seed_residual > CONSISTENCY_TOLERANCE_CM {
            return Err(KinematicsError::NoIntersection {
                residual_cm: seed_residual,
            });
        }
        polish_exact(anchors, lengths, seed)
    } else {
        if all_collinear(anchors) {
            return Err(KinematicsError::CollinearAnchors);
        }
        least_squares(anchors, lengths, seed)
    };

    let residual = max_residual(anchors, lengths, point);
    if residual > CONSISTENCY_TOLERANCE_CM {
        return Err(KinematicsError::NoIntersection {
            residual_cm: residual,
        });
    }
    Ok(point)
}

fn max_residual(anchors: &[Point3], lengths: &[f64], p: Point3) -> f64 {
    anchors
        .iter()
        .zip(lengths)
        .map(|(&a, &l)| (distance(p, a) - l).abs())
        .fold(0.0, f64::max)
}

fn all_collinear(anchors: &[Point3]) -> bool {
    let base = anchors[0];
    let dir = anchors[1] - base;
    let dir = dir * (1.0 / dir.norm());
    anchors[2..].iter().all(|&a| {
        let v = a - base;
        let off = v - dir * v.dot(&dir);
        off.norm() < 1e-6
    })
}

/// Sphere intersection of three spheres. Returns the lower-z candidate and
/// its max length residual; when the spheres miss each other the candidate
/// is the in-plane closest point and the residual says by how much.
fn trilaterate(m: [Point3; 3], r: [f64; 3]) -> Result<(Point3, f64), KinematicsError> {
    let p1 = m[0].to_vector();
    let d_vec = m[1].to_vector() - p1;
    let d = d_vec.norm();
    let ex = d_vec / d;
    let p13 = m[2].to_vector() - p1;
    let i = ex.dot(&p13);
    let ey_raw = p13 - ex * i;
    let j = ey_raw.norm();
    if j < 1e-6 {
        return Err(KinematicsError::CollinearAnchors);
    }
    let ey = ey_raw / j;
    let ez = ex.cross(&ey);

    let x = (r[0] * r[0] - r[1] * r[1] + d * d) / (2.0 * d);
    let y = (r[0] * r[0] - r[2] * r[2] + i * i + j * j) / (2.0 * j) - i * x / j;
    let z_sq = r[0] * r[0] - x * x - y * y;
    let z = if z_sq > 0.0 { z_sq.sqrt() } else { 0.0 };

    let base = p1 + ex * x + ey * y;
    let up = base + ez * z;
    let down = base - ez * z;
    let pick: Point3 = if down.z <= up.z { down } else { up }.into();
    Ok((pick, max_residual(&m, &r, pick)))
}

/// A few Newton iterations on the square 3x3 system to squeeze out the
/// cancellation error of the closed form.
fn polish_exact(anchors: &[Point3], lengths: &[f64], seed: Point3) -> Point3 {
    let mut best = seed;
    let mut best_res = max_residual(anchors, lengths, seed);
    let side = side_of_plane(anchors, seed);
    for _ in 0..4 {
        let mut jac = Matrix3::zeros();
        let mut f = Vector3::zeros();
        for k in 0..3 {
            let diff = best - anchors[k];
            let n = diff.norm();
            if n == 0.0 {
                return best;
            }
            jac.set_row(k, &(diff.to_vector() / n).transpose());
            f[k] = n - lengths[k];
        }
        let Some(step) = jac.lu().solve(&(-f)) else {
            return best;
        };
        let cand: Point3 = (best.to_vector() + step).into();
        let res = max_residual(anchors, lengths, cand);
        if res < best_res && side_of_plane(anchors, cand) == side {
            best = cand;
            best_res = res;
        } else {
            break;
        }
    }
    best
}

fn side_of_plane(anchors: &[Point3], p: Point3) -> bool {
    let n = (anchors[1] - anchors[0])
        .to_vector()
        .cross(&(anchors[2] - anchors[0]).to_vector());
    n.dot(&(p - anchors[0]).to_vector()) >= 0.0
}

fn cost(anchors: &[Point3], lengths: &[f64], p: Vector3<f64>) -> f64 {
    anchors
        .iter()
        .zip(lengths)
        .map(|(a, l)| {
            let r = (p - a.to_vector()).norm() - l;
            r * r
        })
        .sum()
}

fn least_squares(anchors: &[Point3], lengths: &[f64], seed: Point3) -> Point3 {
    let mut p = seed.to_vector();
    let mut lambda = 1e-3;
    let mut current = cost(anchors, lengths, p);
    for _ in 0..MAX_ITERATIONS {
        let mut jtj = Matrix3::zeros();
        let mut grad = Vector3::zeros();
        for (a, &l) in anchors.iter().zip(lengths) {
            let diff = p - a.to_vector();
            let n = diff.norm();
            if n == 0.0 {
                continue;
            }
            let u = diff / n;
            jtj += u * u.transpose();
            grad += u * (n - l);
        }
        if grad.norm() < GRADIENT_TOLERANCE {
            break;
        }
        let mut damped = jtj;
        for k in 0..3 {
            damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-grad))) else {
            lambda *= 10.0;
            continue;
        };
        let cand = p + step;
        let c = cost(anchors, lengths, cand);
        if c < current {
            p = cand;
            current = c;
            lambda = (lambda * 0.3).max(1e-12);
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if step.norm() < 1e-15 * (1.0 + p.norm()) {
            break;
        }
    }
    p.into()
}

#[cfg(test)]
mod tests {
    use super::super::wire_lengths;
    use super::*;

    fn layout(points: &[[f64; 3]]) -> AnchorLayout {
        AnchorLayout::new(points.iter().map(|&a| a.into()).collect()).unwrap()
    }

    #[test]
    fn three_anchor_round_trip() {
        let l = layout(&[[0.0, 0.0, 310.0], [650.0, 0.0, 310.0], [325.0, 390.0, 310.0]]);
        let p = Point3::new(325.0, 130.0, 150.0);
        let q = forward_kinematics(&l, &wire_lengths(&l, p)).unwrap();
        assert!(distance(p, q) < 1e-9, "{q}");
    }

    #[test]
    fn four_anchor_round_trip() {
        let l = layout(&[
            [0.0, 0.0, 310.0],
            [650.0, 0.0, 310.0],
            [650.0, 390.0, 310.0],
            [0.0, 390.0, 300.0],
        ]);
        let p = Point3::new(100.0, 300.0, 20.0);
        let q = forward_kinematics(&l, &wire_lengths(&l, p)).unwrap();
        assert!(distance(p, q) < 1e-9, "{q}");
    }

    #[test]
    fn equal_lengths_pick_lower_solution() {
        let l = layout(&[[0.0, 0.0, 300.0], [100.0, 0.0, 300.0], [50.0, 100.0, 300.0]]);
        let q = forward_kinematics(&l, &[200.0, 200.0, 200.0]).unwrap();
        // brute-force oracle: scan x,y on a grid, take z from the first wire
        // below the plane, keep the best residual point
        let mut best = (f64::INFINITY, Point3::ORIGIN);
        for ix in 0..=100 {
            for iy in 0..=100 {
                let x = ix as f64;
                let y = iy as f64;
                let z_sq = 200.0f64.powi(2) - x * x - y * y;
                if z_sq < 0.0 {
                    continue;
                }
                let cand = Point3::new(x, y, 300.0 - z_sq.sqrt());
                let r = max_residual(l.anchors(), &[200.0; 3], cand);
                if r < best.0 {
                    best = (r, cand);
                }
            }
        }
        assert!((q.x - 50.0).abs() < 1e-9);
        assert!(q.z < 300.0);
        assert!(distance(q, best.1) < 2.0, "grid {} vs {}", best.1, q);
        assert!(max_residual(l.anchors(), &[200.0; 3], q) < 1e-9);
    }

    #[test]
    fn short_lengths_do_not_intersect() {
        let l = layout(&[[0.0, 0.0, 300.0], [100.0, 0.0, 300.0], [50.0, 100.0, 300.0]]);
        match forward_kinematics(&l, &[1.0, 1.0, 1.0]) {
            Err(KinematicsError::NoIntersection { residual_cm }) => assert!(residual_cm > 40.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_inputs() {
        let two = layout(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(
            forward_kinematics(&two, &[1.0, 1.0]),
            Err(KinematicsError::TooFewAnchors { needed: 3, got: 2 })
        ));
        let line = layout(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(
            forward_kinematics(&line, &[1.0, 1.0, 1.0]),
            Err(KinematicsError::CollinearAnchors)
        );
        let tri = layout(&[[0.0, 0.0, 300.0], [100.0, 0.0, 300.0], [50.0, 100.0, 300.0]]);
        assert_eq!(
            forward_kinematics(&tri, &[1.0, 1.0]),
            Err(KinematicsError::LengthCountMismatch { expected: 3, got: 2 })
        );
        assert_eq!(
            forward_kinematics(&tri, &[1.0, -1.0, 1.0]),
            Err(KinematicsError::NonPositiveLength(1))
        );
    }

    #[test]
    fn slightly_inconsistent_four_anchor_lengths_are_fitted() {
        let l = layout(&[
            [0.0, 0.0, 310.0],
            [650.0, 0.0, 310.0],
            [650.0, 390.0, 310.0],
            [0.0, 390.0, 310.0],
        ]);
        let p = Point3::new(300.0, 200.0, 100.0);
        let mut lengths = wire_lengths(&l, p);
        lengths[3] += 0.05;
        let q = forward_kinematics(&l, &lengths).unwrap();
        assert!(distance(p, q) < 0.2);
        lengths[3] += 5.0;
        assert!(matches!(
            forward_kinematics(&l, &lengths),
            Err(KinematicsError::NoIntersection { .. })
        ));
    }
}
