//! Rig description shared by the controller and the emulator.
//!
//! On disk this is TOML:
//!
//! ```toml
//! format_version = 1
//! carriage_mass_g = 500.0
//! home = [325.0, 130.0, 150.0]
//!
//! [planner]
//! speed_cm_s = 10.0
//!
//! [spool]            # overrides applied to every motor
//! pileup = 0.28
//!
//! [[motors]]
//! anchor = [0.0, 0.0, 310.0]
//!
//! [[motors]]
//! anchor = [650.0, 0.0, 310.0]
//! spool = { base_radius_cm = 2.05 }
//! initial_wound_cm = 600.0
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    distance, tension_feasibility, AnchorLayout, KinematicsError, Point3, DEFAULT_WIRE_RATING_G,
};
use crate::spool::{SpoolError, SpoolParams, SpoolState};

pub const FORMAT_VERSION: u32 = 1;
/// One motor controller drives at most this many spools.
pub const MAX_MOTORS: usize = 4;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed rig config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("rig needs 1 to {MAX_MOTORS} motors, got {0}")]
    MotorCount(usize),
    #[error("anchor layout: {0}")]
    Layout(#[from] KinematicsError),
    #[error("motor {motor}: {source}")]
    Spool { motor: usize, source: SpoolError },
    #[error("home position {0} is not tension-feasible")]
    InfeasibleHome(Point3),
    #[error("invalid {name}: {value}")]
    Invalid { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerDefaults {
    pub speed_cm_s: f64,
    pub max_chord_cm: f64,
    pub max_step_rate: f64,
    /// Reject moves whose endpoints cannot be held by gravity alone;
    /// `false` downgrades that to a warning.
    pub strict_feasibility: bool,
}

impl Default for PlannerDefaults {
    fn default() -> Self {
        Self {
            speed_cm_s: 10.0,
            max_chord_cm: 0.5,
            max_step_rate: 1000.0,
            strict_feasibility: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigConfig {
    pub layout: AnchorLayout,
    pub spools: Vec<SpoolParams>,
    /// Per-motor wire on the wheel at HOME; `None` uses
    /// `dist(anchor, home) + slack_reserve_cm`.
    pub initial_wound_cm: Vec<Option<f64>>,
    pub carriage_mass_g: f64,
    pub home: Point3,
    pub planner: PlannerDefaults,
    pub wire_rating_g: f64,
    pub slack_reserve_cm: f64,
}

impl RigConfig {
    /// A rig with default spools on every anchor.
    pub fn new(anchors: Vec<Point3>, home: Point3) -> Result<Self, ConfigError> {
        let n = anchors.len();
        let rig = Self {
            layout: AnchorLayout::new(anchors)?,
            spools: vec![SpoolParams::default(); n],
            initial_wound_cm: vec![None; n],
            carriage_mass_g: 500.0,
            home,
            planner: PlannerDefaults::default(),
            wire_rating_g: DEFAULT_WIRE_RATING_G,
            slack_reserve_cm: 50.0,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn motors(&self) -> usize {
        self.layout.len()
    }

    /// Same rig with every spool's pile-up factor replaced.
    pub fn with_pileup(mut self, pileup: f64) -> Self {
        for s in &mut self.spools {
            s.pileup = pileup;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.layout.len();
        if n == 0 || n > MAX_MOTORS {
            return Err(ConfigError::MotorCount(n));
        }
        if self.spools.len() != n || self.initial_wound_cm.len() != n {
            return Err(ConfigError::MotorCount(self.spools.len()));
        }
        for (motor, s) in self.spools.iter().enumerate() {
            s.validate()
                .map_err(|source| ConfigError::Spool { motor, source })?;
        }
        let positive = |name, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid { name, value })
            }
        };
        positive("carriage_mass_g", self.carriage_mass_g)?;
        positive("wire_rating_g", self.wire_rating_g)?;
        positive("planner.speed_cm_s", self.planner.speed_cm_s)?;
        positive("planner.max_chord_cm", self.planner.max_chord_cm)?;
        positive("planner.max_step_rate", self.planner.max_step_rate)?;
        if !(self.slack_reserve_cm >= 0.0) {
            return Err(ConfigError::Invalid {
                name: "slack_reserve_cm",
                value: self.slack_reserve_cm,
            });
        }
        if !self.home.is_finite() {
            return Err(ConfigError::Layout(KinematicsError::NonFinite));
        }
        let sol = tension_feasibility(&self.layout, self.home, self.carriage_mass_g, self.wire_rating_g);
        if !matches!(sol, Ok(ref s) if s.feasible) {
            return Err(ConfigError::InfeasibleHome(self.home));
        }
        Ok(())
    }

    /// Spool states at HOME under the rig's own (true) parameters.
    pub fn home_spools(&self) -> Result<Vec<SpoolState>, ConfigError> {
        self.spools_at_home(None)
    }

    /// Spool states at HOME as the open-loop controller models them: same
    /// geometry, no radius build-up.
    pub fn controller_spools(&self) -> Result<Vec<SpoolState>, ConfigError> {
        self.spools_at_home(Some(0.0))
    }

    fn spools_at_home(&self, pileup: Option<f64>) -> Result<Vec<SpoolState>, ConfigError> {
        self.layout
            .anchors()
            .iter()
            .enumerate()
            .map(|(motor, &anchor)| {
                let wound = self.initial_wound_cm[motor]
                    .unwrap_or_else(|| distance(anchor, self.home) + self.slack_reserve_cm);
                let mut params = self.spools[motor];
                if let Some(p) = pileup {
                    params.pileup = p;
                }
                SpoolState::new(params, wound).map_err(|source| ConfigError::Spool { motor, source })
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: RigFile = toml::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(ConfigError::Version(file.format_version));
        }
        let n = file.motors.len();
        if n == 0 || n > MAX_MOTORS {
            return Err(ConfigError::MotorCount(n));
        }
        let base = file.spool.apply(SpoolParams::default());
        let rig = Self {
            layout: AnchorLayout::new(file.motors.iter().map(|m| m.anchor).collect())?,
            spools: file.motors.iter().map(|m| m.spool.apply(base)).collect(),
            initial_wound_cm: file.motors.iter().map(|m| m.initial_wound_cm).collect(),
            carriage_mass_g: file.carriage_mass_g,
            home: file.home,
            planner: file.planner,
            wire_rating_g: file.wire_rating_g,
            slack_reserve_cm: file.slack_reserve_cm,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn to_toml(&self) -> String {
        let file = RigFile {
            format_version: FORMAT_VERSION,
            carriage_mass_g: self.carriage_mass_g,
            wire_rating_g: self.wire_rating_g,
            slack_reserve_cm: self.slack_reserve_cm,
            home: self.home,
            planner: self.planner,
            spool: SpoolPatch::default(),
            motors: self
                .layout
                .anchors()
                .iter()
                .zip(&self.spools)
                .zip(&self.initial_wound_cm)
                .map(|((&anchor, s), &initial_wound_cm)| MotorEntry {
                    anchor,
                    spool: SpoolPatch::full(s),
                    initial_wound_cm,
                })
                .collect(),
        };
        toml::to_string(&file).expect("rig config serializes")
    }
}

fn default_mass() -> f64 {
    500.0
}
fn default_rating() -> f64 {
    DEFAULT_WIRE_RATING_G
}
fn default_reserve() -> f64 {
    50.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    format_version: u32,
    #[serde(default = "default_mass")]
    carriage_mass_g: f64,
    #[serde(default = "default_rating")]
    wire_rating_g: f64,
    #[serde(default = "default_reserve")]
    slack_reserve_cm: f64,
    home: Point3,
    #[serde(default)]
    planner: PlannerDefaults,
    #[serde(default, skip_serializing_if = "SpoolPatch::is_empty")]
    spool: SpoolPatch,
    motors: Vec<MotorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotorEntry {
    anchor: Point3,
    #[serde(default, skip_serializing_if = "SpoolPatch::is_empty")]
    spool: SpoolPatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_wound_cm: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpoolPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    step_angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_radius_cm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wire_diameter_cm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pileup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spool_width_cm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    holding_torque_gcm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wire_rating_g: Option<f64>,
}

impl SpoolPatch {
    fn is_empty(&self) -> bool {
        self.step_angle_deg.is_none()
            && self.base_radius_cm.is_none()
            && self.wire_diameter_cm.is_none()
            && self.pileup.is_none()
            && self.spool_width_cm.is_none()
            && self.holding_torque_gcm.is_none()
            && self.wire_rating_g.is_none()
    }

    fn full(p: &SpoolParams) -> Self {
        Self {
            step_angle_deg: Some(p.step_angle_deg),
            base_radius_cm: Some(p.base_radius_cm),
            wire_diameter_cm: Some(p.wire_diameter_cm),
            pileup: Some(p.pileup),
            spool_width_cm: Some(p.spool_width_cm),
            holding_torque_gcm: Some(p.holding_torque_gcm),
            wire_rating_g: Some(p.wire_rating_g),
        }
    }

    fn apply(&self, base: SpoolParams) -> SpoolParams {
        SpoolParams {
            step_angle_deg: self.step_angle_deg.unwrap_or(base.step_angle_deg),
            base_radius_cm: self.base_radius_cm.unwrap_or(base.base_radius_cm),
            wire_diameter_cm: self.wire_diameter_cm.unwrap_or(base.wire_diameter_cm),
            pileup: self.pileup.unwrap_or(base.pileup),
            spool_width_cm: self.spool_width_cm.unwrap_or(base.spool_width_cm),
            holding_torque_gcm: self.holding_torque_gcm.unwrap_or(base.holding_torque_gcm),
            wire_rating_g: self.wire_rating_g.unwrap_or(base.wire_rating_g),
        }
    }
}
