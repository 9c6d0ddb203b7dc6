//! Where a carriage hangs when its wires may go slack.

use super::{AnchorLayout, KinematicsError, Point3};

/// Relative slack allowed when checking that a candidate is within reach of
/// every wire.
const REACH_TOLERANCE: f64 = 1e-9;

/// Lowest point within reach of every wire: gravity pulls the carriage down
/// until some wires are taut and the rest slack.
///
/// The lowest point of an intersection of balls sits on the boundary of one,
/// two or three of them, so every such boundary candidate is enumerated and
/// the lowest one inside all balls wins. With all wires taut this agrees with
/// [`forward_kinematics`](super::forward_kinematics).
pub fn hanging_position(layout: &AnchorLayout, lengths: &[f64]) -> Result<Point3, KinematicsError> {
    let anchors = layout.anchors();
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

    let n = anchors.len();
    let mut candidates = Vec::new();
    for i in 0..n {
        candidates.push(anchors[i] - Point3::new(0.0, 0.0, lengths[i]));
        for j in i + 1..n {
            candidates.extend(lowest_on_circle(anchors[i], anchors[j], lengths[i], lengths[j]));
            for k in j + 1..n {
                candidates.extend(sphere_triple(
                    [anchors[i], anchors[j], anchors[k]],
                    [lengths[i], lengths[j], lengths[k]],
                ));
            }
        }
    }
    let reachable = |p: &Point3| {
        anchors
            .iter()
            .zip(lengths)
            .all(|(a, l)| (*p - *a).norm() <= l * (1.0 + REACH_TOLERANCE))
    };
    candidates
        .into_iter()
        .filter(|p| p.is_finite() && reachable(p))
        .min_by(|a, b| a.z.total_cmp(&b.z))
        .ok_or(KinematicsError::Unreachable)
}

/// Lowest point of the circle where two spheres meet.
fn lowest_on_circle(a: Point3, b: Point3, la: f64, lb: f64) -> Option<Point3> {
    let d = (b - a).norm();
    let u = (b - a) * (1.0 / d);
    let along = (la * la - lb * lb + d * d) / (2.0 * d);
    let r2 = la * la - along * along;
    if r2 < 0.0 {
        return None;
    }
    let down = Point3::new(0.0, 0.0, -1.0);
    let w = down - u * down.dot(&u);
    let wn = w.norm();
    if wn < 1e-12 {
        // anchors stacked vertically: the circle is horizontal
        return None;
    }
    Some(a + u * along + w * (r2.sqrt() / wn))
}

/// Both intersection points of three spheres.
fn sphere_triple(p: [Point3; 3], l: [f64; 3]) -> Vec<Point3> {
    let ex_raw = p[1] - p[0];
    let d = ex_raw.norm();
    let ex = ex_raw * (1.0 / d);
    let rel = p[2] - p[0];
    let i = ex.dot(&rel);
    let ey_raw = rel - ex * i;
    let j = ey_raw.norm();
    if j < 1e-9 * d {
        return Vec::new();
    }
    let ey = ey_raw * (1.0 / j);
    let ez = Point3::from(ex.to_vector().cross(&ey.to_vector()));
    let x = (l[0] * l[0] - l[1] * l[1] + d * d) / (2.0 * d);
    let y = (l[0] * l[0] - l[2] * l[2] + i * i + j * j) / (2.0 * j) - i * x / j;
    let z2 = l[0] * l[0] - x * x - y * y;
    if z2 < 0.0 {
        return Vec::new();
    }
    let base = p[0] + ex * x + ey * y;
    let z = z2.sqrt();
    vec![base + ez * z, base - ez * z]
}
