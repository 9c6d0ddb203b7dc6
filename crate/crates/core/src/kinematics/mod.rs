//! Wire geometry for a carriage hanging from point anchors.
//!
//! Coordinates are centimetres in a right-handed room frame: origin at a
//! floor corner, z pointing up, floor at `z = 0`. Every anchor is the exit
//! point of its pulley; pulley radius is ignored.

mod hanging;
mod tension;
mod trilateration;

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tension::{
    tension_feasibility, tension_feasibility_nnls, TensionSolution, TensionWarning,
    DEFAULT_WIRE_RATING_G,
};
pub use hanging::hanging_position;
pub use trilateration::{forward_kinematics, CONSISTENCY_TOLERANCE_CM};

/// Two anchors closer than this are considered the same point.
pub const MIN_ANCHOR_SEPARATION_CM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("anchor layout is empty")]
    EmptyLayout,
    #[error("non-finite coordinate or length")]
    NonFinite,
    #[error("anchors {0} and {1} coincide")]
    CoincidentAnchors(usize, usize),
    #[error("need at least {needed} anchors, layout has {got}")]
    TooFewAnchors { needed: usize, got: usize },
    #[error("expected {expected} wire lengths, got {got}")]
    LengthCountMismatch { expected: usize, got: usize },
    #[error("wire length {0} is not positive")]
    NonPositiveLength(usize),
    #[error("anchors are collinear; position is not determined")]
    CollinearAnchors,
    #[error("wire lengths are inconsistent: best residual {residual_cm:.6} cm")]
    NoIntersection { residual_cm: f64 },
    #[error("no point is within reach of every wire")]
    Unreachable,
    #[error("wire directions are coplanar; tension system is singular")]
    SingularDirections,
    #[error("carriage mass must be positive, got {0}")]
    InvalidMass(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Point `fraction` of the way from `self` to `other`.
    pub fn lerp(&self, other: &Point3, fraction: f64) -> Point3 {
        *self + (*other - *self) * fraction
    }
}

impl From<Vector3<f64>> for Point3 {
    fn from(v: Vector3<f64>) -> Self {
        Point3::new(v.x, v.y, v.z)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Euclidean distance in cm.
pub fn distance(a: Point3, b: Point3) -> f64 {
    (a - b).norm()
}

/// Anchor (motor) positions; the index is the motor id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorLayout {
    anchors: Vec<Point3>,
}

impl AnchorLayout {
    pub fn new(anchors: Vec<Point3>) -> Result<Self, KinematicsError> {
        if anchors.is_empty() {
            return Err(KinematicsError::EmptyLayout);
        }
        if anchors.iter().any(|a| !a.is_finite()) {
            return Err(KinematicsError::NonFinite);
        }
        for i in 0..anchors.len() {
            for j in i + 1..anchors.len() {
                if distance(anchors[i], anchors[j]) <= MIN_ANCHOR_SEPARATION_CM {
                    return Err(KinematicsError::CoincidentAnchors(i, j));
                }
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[Point3] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Lowest anchor height; a hanging carriage must stay strictly below it.
    pub fn min_anchor_z(&self) -> f64 {
        self.anchors
            .iter()
            .map(|a| a.z)
            .fold(f64::INFINITY, f64::min)
    }
}

impl<'de> Deserialize<'de> for AnchorLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            anchors: Vec<Point3>,
        }
        let raw = Raw::deserialize(d)?;
        AnchorLayout::new(raw.anchors).map_err(serde::de::Error::custom)
    }
}

/// Straight-line wire length from every anchor to `p`.
pub fn wire_lengths(layout: &AnchorLayout, p: Point3) -> Vec<f64> {
    layout.anchors.iter().map(|&a| distance(p, a)).collect()
}

/// Signed wire change per motor for a move from `a` to `b`.
///
/// Element `i` is `dist(a, M_i) - dist(b, M_i)`: positive means motor `i`
/// spools wire in (its wire gets shorter).
pub fn spool_deltas(layout: &AnchorLayout, a: Point3, b: Point3) -> Vec<f64> {
    layout
        .anchors
        .iter()
        .map(|&m| distance(a, m) - distance(b, m))
        .collect()
}
