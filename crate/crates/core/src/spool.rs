//! Stepper-driven spool: step quantization, radius build-up, holding force.
//!
//! Wire wound onto the wheel stacks up and grows the effective radius. The
//! pile-up factor `pileup` scales how much each completed wrap adds:
//! wrap `k` (0-based) is laid at radius `base + pileup * wire_diameter * k`.
//! `pileup = 0` is an ideal constant-radius spool.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pile-up factor fitted to the linear-rig error curve; the default for every
/// spool. Re-derived by `evaluation::fit_pileup` in tests.
pub const DEFAULT_PILEUP: f64 = 0.2854;

/// Wire allowed to be "unwound" past empty before a step is refused; covers
/// rounding in the running wound length.
const EMPTY_SLACK_CM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpoolError {
    #[error("invalid spool parameter {name}: {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("wound length must be finite and non-negative, got {0}")]
    InvalidWound(f64),
    #[error("spool runs empty after {completed} of {requested} unspool steps")]
    Unspool { requested: i64, completed: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpoolParams {
    /// Degrees per full step.
    pub step_angle_deg: f64,
    /// Radius of the empty wheel, cm.
    pub base_radius_cm: f64,
    pub wire_diameter_cm: f64,
    /// Pile-up factor in `[0, 1]`.
    pub pileup: f64,
    /// Axial width of the wheel, cm. Descriptive only; the pile-up factor
    /// already folds in how wraps stack across the width.
    pub spool_width_cm: f64,
    /// Stall torque, g·cm.
    pub holding_torque_gcm: f64,
    pub wire_rating_g: f64,
}

impl Default for SpoolParams {
    fn default() -> Self {
        Self {
            step_angle_deg: 1.8,
            base_radius_cm: 2.0,
            wire_diameter_cm: 0.01,
            pileup: DEFAULT_PILEUP,
            spool_width_cm: 1.0,
            holding_torque_gcm: 4800.0,
            wire_rating_g: 7000.0,
        }
    }
}

impl SpoolParams {
    pub fn validate(&self) -> Result<(), SpoolError> {
        let check = |ok: bool, name, value| {
            if ok {
                Ok(())
            } else {
                Err(SpoolError::InvalidParam { name, value })
            }
        };
        let a = self.step_angle_deg;
        check(a > 0.0 && a <= 90.0, "step_angle_deg", a)?;
        check(self.base_radius_cm > 0.0 && self.base_radius_cm.is_finite(), "base_radius_cm", self.base_radius_cm)?;
        check(self.wire_diameter_cm >= 0.0 && self.wire_diameter_cm.is_finite(), "wire_diameter_cm", self.wire_diameter_cm)?;
        check((0.0..=1.0).contains(&self.pileup), "pileup", self.pileup)?;
        check(self.spool_width_cm > 0.0 && self.spool_width_cm.is_finite(), "spool_width_cm", self.spool_width_cm)?;
        check(self.holding_torque_gcm >= 0.0 && self.holding_torque_gcm.is_finite(), "holding_torque_gcm", self.holding_torque_gcm)?;
        check(self.wire_rating_g > 0.0, "wire_rating_g", self.wire_rating_g)
    }

    pub fn with_pileup(self, pileup: f64) -> Self {
        Self { pileup, ..self }
    }

    /// Wire moved by one step on the empty wheel, cm.
    pub fn ideal_step_length(&self) -> f64 {
        step_length_at(self, self.base_radius_cm)
    }

    pub fn steps_per_rev(&self) -> f64 {
        360.0 / self.step_angle_deg
    }

    /// Largest wire pull the motor holds on the empty wheel, grams.
    pub fn holding_force(&self) -> Result<f64, SpoolError> {
        if !(self.base_radius_cm > 0.0) {
            return Err(SpoolError::InvalidParam {
                name: "base_radius_cm",
                value: self.base_radius_cm,
            });
        }
        Ok(self.holding_torque_gcm / self.base_radius_cm)
    }

    fn radial_growth(&self) -> f64 {
        self.pileup * self.wire_diameter_cm
    }

    /// Wire needed to complete the first `wraps` wraps.
    fn wound_after(&self, wraps: u64) -> f64 {
        let n = wraps as f64;
        2.0 * PI * (self.base_radius_cm * n + self.radial_growth() * n * (n - 1.0) / 2.0)
    }

    /// Completed wraps for a given wound length.
    fn completed_wraps(&self, wound: f64) -> u64 {
        let b = self.base_radius_cm;
        let c = self.radial_growth() / 2.0;
        let per_turn = wound / (2.0 * PI);
        let estimate = if c == 0.0 {
            per_turn / b
        } else {
            // c n^2 + (b - c) n - per_turn = 0
            let lin = b - c;
            (-lin + (lin * lin + 4.0 * c * per_turn).sqrt()) / (2.0 * c)
        };
        let mut n = estimate.max(0.0).floor() as u64;
        while self.wound_after(n + 1) <= wound {
            n += 1;
        }
        while n > 0 && self.wound_after(n) > wound {
            n -= 1;
        }
        n
    }

    fn radius_for_wraps(&self, wraps: u64) -> f64 {
        self.base_radius_cm + self.radial_growth() * wraps as f64
    }
}

fn step_length_at(params: &SpoolParams, radius: f64) -> f64 {
    2.0 * PI * radius * (params.step_angle_deg / 360.0)
}

/// One motor's spool as a value: parameters, wire on the wheel, and the
/// signed step count since homing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpoolState {
    pub params: SpoolParams,
    pub wound_length_cm: f64,
    pub cumulative_steps: i64,
}

impl SpoolState {
    pub fn new(params: SpoolParams, wound_length_cm: f64) -> Result<Self, SpoolError> {
        params.validate()?;
        if !(wound_length_cm >= 0.0 && wound_length_cm.is_finite()) {
            return Err(SpoolError::InvalidWound(wound_length_cm));
        }
        Ok(Self {
            params,
            wound_length_cm,
            cumulative_steps: 0,
        })
    }

    pub fn completed_wraps(&self) -> u64 {
        self.params.completed_wraps(self.wound_length_cm)
    }

    pub fn effective_radius(&self) -> f64 {
        self.params.radius_for_wraps(self.completed_wraps())
    }

    /// Wire moved by the next step at the current radius, cm.
    pub fn current_step_length(&self) -> f64 {
        step_length_at(&self.params, self.effective_radius())
    }

    /// Holding force at the current effective radius, grams.
    pub fn holding_force(&self) -> f64 {
        self.params.holding_torque_gcm / self.effective_radius()
    }

    /// Runs `steps` full steps (positive spools in) and returns the signed
    /// wire length moved together with the resulting state.
    pub fn length_for_steps(&self, steps: i64) -> Result<(f64, SpoolState), SpoolError> {
        let mut walk = Walker::new(self, steps >= 0);
        for done in 0..steps.unsigned_abs() {
            if !walk.step() {
                return Err(SpoolError::Unspool {
                    requested: steps,
                    completed: -(done as i64),
                });
            }
        }
        let moved = walk.moved();
        let next = SpoolState {
            params: self.params,
            wound_length_cm: walk.wound().max(0.0),
            cumulative_steps: self.cumulative_steps + steps,
        };
        Ok((moved, next))
    }

    /// Step count whose simulated wire length is nearest to `target_cm`,
    /// with the leftover `target - length`.
    pub fn steps_for_length(&self, target_cm: f64) -> (i64, f64) {
        if target_cm == 0.0 || !target_cm.is_finite() {
            return (0, if target_cm.is_finite() { 0.0 } else { target_cm });
        }
        let inward = target_cm > 0.0;
        let goal = target_cm.abs();
        let sign = if inward { 1 } else { -1 };

        if self.params.radial_growth() == 0.0 {
            return self.steps_for_length_constant(target_cm);
        }

        let mut walk = Walker::new(self, inward);
        let mut prev = 0.0;
        let mut count: i64 = 0;
        loop {
            if !walk.step() {
                return (sign * count, target_cm - sign as f64 * prev);
            }
            let here = walk.moved().abs();
            if here >= goal {
                let n = if goal - prev <= here - goal { count } else { count + 1 };
                let length = if n == count { prev } else { here };
                return (sign * n, target_cm - sign as f64 * length);
            }
            prev = here;
            count += 1;
        }
    }

    fn steps_for_length_constant(&self, target_cm: f64) -> (i64, f64) {
        let step = self.params.ideal_step_length();
        let length = |n: i64| n as f64 * step;
        let limit = if target_cm < 0.0 {
            // most steps out before the wheel is empty
            let mut k = ((self.wound_length_cm + EMPTY_SLACK_CM) / step).floor() as i64;
            while k > 0 && self.wound_length_cm - length(k) < -EMPTY_SLACK_CM {
                k -= 1;
            }
            Some(-k)
        } else {
            None
        };
        let guess = (target_cm / step).round() as i64;
        let best = [guess - 1, guess, guess + 1]
            .into_iter()
            .filter(|&n| limit.is_none_or(|l| n >= l))
            .min_by(|&a, &b| {
                (target_cm - length(a))
                    .abs()
                    .total_cmp(&(target_cm - length(b)).abs())
                    .then(a.abs().cmp(&b.abs()))
            })
            .unwrap_or_else(|| limit.unwrap_or(0));
        (best, target_cm - length(best))
    }
}

/// Steps a spool one full step at a time. Steps at a constant radius are
/// batched so the running length is `count * step_length` within a wrap.
struct Walker<'a> {
    params: &'a SpoolParams,
    inward: bool,
    wraps: u64,
    batch_wound: f64,
    batch_moved: f64,
    batch_count: u64,
    step: f64,
}

impl<'a> Walker<'a> {
    fn new(state: &'a SpoolState, inward: bool) -> Self {
        let wraps = state.completed_wraps();
        Self {
            params: &state.params,
            inward,
            wraps,
            batch_wound: state.wound_length_cm,
            batch_moved: 0.0,
            batch_count: 0,
            step: step_length_at(&state.params, state.params.radius_for_wraps(wraps)),
        }
    }

    fn signed_batch(&self) -> f64 {
        let len = self.batch_count as f64 * self.step;
        if self.inward {
            len
        } else {
            -len
        }
    }

    fn wound(&self) -> f64 {
        self.batch_wound + self.signed_batch()
    }

    fn moved(&self) -> f64 {
        self.batch_moved + self.signed_batch()
    }

    fn step(&mut self) -> bool {
        self.batch_count += 1;
        let wound = self.wound();
        if !self.inward && wound < -EMPTY_SLACK_CM {
            self.batch_count -= 1;
            return false;
        }
        let crossed = if self.inward {
            let mut crossed = false;
            while self.params.wound_after(self.wraps + 1) <= wound {
                self.wraps += 1;
                crossed = true;
            }
            crossed
        } else {
            let mut crossed = false;
            while self.wraps > 0 && self.params.wound_after(self.wraps) > wound {
                self.wraps -= 1;
                crossed = true;
            }
            crossed
        };
        if crossed {
            let step = step_length_at(self.params, self.params.radius_for_wraps(self.wraps));
            if step != self.step {
                self.batch_moved = self.moved();
                self.batch_wound = wound;
                self.batch_count = 0;
                self.step = step;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(pileup: f64, wound: f64) -> SpoolState {
        SpoolState::new(SpoolParams::default().with_pileup(pileup), wound).unwrap()
    }

    /// Wraps by summing wrap circumferences one at a time.
    fn wraps_by_summation(p: &SpoolParams, wound: f64) -> u64 {
        let mut acc = 0.0;
        let mut k = 0u64;
        loop {
            let c = 2.0 * PI * (p.base_radius_cm + p.pileup * p.wire_diameter_cm * k as f64);
            if acc + c > wound {
                return k;
            }
            acc += c;
            k += 1;
        }
    }

    #[test]
    fn ideal_step_length_examples() {
        let p = SpoolParams::default();
        assert!((p.ideal_step_length() - 0.06283).abs() < 1e-5);
        assert_eq!(format!("{:.3}", p.ideal_step_length()), "0.063");
        assert!((p.ideal_step_length() * 1000.0).floor() == 62.0);
        let r1 = SpoolParams { base_radius_cm: 1.0, ..p };
        assert!((r1.ideal_step_length() - 0.03142).abs() < 1e-5);
        let half = SpoolParams { step_angle_deg: 0.9, ..p };
        assert!((half.ideal_step_length() - 0.03142).abs() < 1e-5);
    }

    #[test]
    fn holding_force_examples() {
        let p = SpoolParams::default();
        assert_eq!(p.holding_force().unwrap(), 2400.0);
        assert_eq!(SpoolParams { base_radius_cm: 4.0, ..p }.holding_force().unwrap(), 1200.0);
        assert_eq!(SpoolParams { holding_torque_gcm: 0.0, ..p }.holding_force().unwrap(), 0.0);
        assert!(SpoolParams { base_radius_cm: 0.0, ..p }.holding_force().is_err());
        // a fuller wheel holds less
        assert!(state(1.0, 500.0).holding_force() < 2400.0);
    }

    #[test]
    fn effective_radius_examples() {
        assert_eq!(state(1.0, 0.0).effective_radius(), 2.0);
        assert_eq!(state(0.0, 1234.5).effective_radius(), 2.0);
        let ten_ideal_wraps = 10.0 * 2.0 * PI * 2.0;
        let s = state(1.0, ten_ideal_wraps);
        let oracle = wraps_by_summation(&s.params, ten_ideal_wraps);
        assert_eq!(s.completed_wraps(), oracle);
        assert_eq!(oracle, 9);
        assert!((s.effective_radius() - 2.0 - 0.01 * oracle as f64).abs() < 1e-12);
        assert!((s.effective_radius() - 2.1).abs() <= 0.011);
    }

    #[test]
    fn completed_wraps_matches_summation() {
        for &pileup in &[0.0, 0.3, 1.0] {
            let p = SpoolParams::default().with_pileup(pileup);
            for k in 0..400 {
                let wound = k as f64 * 3.7;
                assert_eq!(p.completed_wraps(wound), wraps_by_summation(&p, wound), "{pileup} {wound}");
            }
        }
    }

    #[test]
    fn length_for_steps_examples() {
        let s = state(0.3, 100.0);
        let (moved, next) = s.length_for_steps(0).unwrap();
        assert_eq!(moved, 0.0);
        assert_eq!(next, s);

        let (one, _) = state(0.0, 100.0).length_for_steps(1).unwrap();
        assert!((one - 0.06283).abs() < 1e-5);

        let (many, next) = state(1.0, 0.0).length_for_steps(10_000).unwrap();
        assert!(many > 10_000.0 * SpoolParams::default().ideal_step_length());
        assert_eq!(next.cumulative_steps, 10_000);
        assert!((next.wound_length_cm - many).abs() < 1e-9);

        // per-step oracle with the radius recomputed from scratch every step
        let p = SpoolParams::default().with_pileup(1.0);
        let mut wound = 0.0;
        let mut total = 0.0;
        for _ in 0..10_000 {
            let r = p.base_radius_cm + p.wire_diameter_cm * wraps_by_summation(&p, wound) as f64;
            let l = 2.0 * PI * r * p.step_angle_deg / 360.0;
            wound += l;
            total += l;
        }
        // 200 steps fill a wrap exactly, so wraps end on floating-point ties;
        // the two methods may resolve a tie one step apart
        let wraps = wraps_by_summation(&p, total) as f64;
        let per_tie = 2.0 * PI * p.wire_diameter_cm * p.step_angle_deg / 360.0;
        assert!((total - many).abs() <= wraps * per_tie, "{total} vs {many}");

        // closed-form layer sum: a wrap at radius r takes 200 steps of
        // 2*pi*r/200, so whole wraps move exactly their circumference
        let wraps = wraps_by_summation(&p, total);
        let full: f64 = (0..wraps).map(|k| 2.0 * PI * (2.0 + 0.01 * k as f64)).sum();
        assert!(total >= full);
        assert!(total - full < 2.0 * PI * (2.0 + 0.01 * wraps as f64) + 0.1);
    }

    #[test]
    fn unspooling_past_empty_fails() {
        let s = state(0.0, 1.0);
        let step = SpoolParams::default().ideal_step_length();
        let max_out = (1.0 / step).floor() as i64;
        assert!(s.length_for_steps(-max_out).is_ok());
        assert!(matches!(
            s.length_for_steps(-max_out - 1),
            Err(SpoolError::Unspool { .. })
        ));
        let (n, residual) = s.steps_for_length(-50.0);
        assert_eq!(n, -max_out);
        assert!(residual < -40.0);
    }

    #[test]
    fn steps_for_length_examples() {
        let ideal = state(0.0, 500.0);
        assert_eq!(ideal.steps_for_length(0.0), (0, 0.0));
        let step = SpoolParams::default().ideal_step_length();
        let (n, r) = ideal.steps_for_length(0.06283);
        assert_eq!(n, 1);
        assert!(r.abs() < 1e-5);

        // integer search oracle
        let oracle = (0..1000)
            .min_by(|&a, &b| {
                let la = ideal.length_for_steps(a).unwrap().0;
                let lb = ideal.length_for_steps(b).unwrap().0;
                (la - 25.0).abs().total_cmp(&(lb - 25.0).abs())
            })
            .unwrap();
        let (n, r) = ideal.steps_for_length(25.0);
        assert_eq!(n, oracle);
        assert_eq!(n, 398);
        assert!(r.abs() <= step / 2.0);
        assert!(r.abs() <= 0.0314);
    }

    #[test]
    fn steps_for_length_with_buildup_matches_search() {
        let s = state(1.0, 300.0);
        for &target in &[25.0, -25.0, 3.3, -0.01, 120.0] {
            let (n, r) = s.steps_for_length(target);
            let range = if target > 0.0 { 0..=3000 } else { -3000..=0 };
            let oracle = range
                .min_by(|&a, &b| {
                    let la = s.length_for_steps(a).unwrap().0;
                    let lb = s.length_for_steps(b).unwrap().0;
                    (la - target).abs().total_cmp(&(lb - target).abs())
                })
                .unwrap();
            assert_eq!(n, oracle, "target {target}");
            assert!((s.length_for_steps(n).unwrap().0 + r - target).abs() < 1e-9);
        }
    }

    #[test]
    fn params_validation() {
        let p = SpoolParams::default();
        assert!(p.validate().is_ok());
        assert!(SpoolParams { step_angle_deg: 0.0, ..p }.validate().is_err());
        assert!(SpoolParams { step_angle_deg: 91.0, ..p }.validate().is_err());
        assert!(SpoolParams { pileup: 1.5, ..p }.validate().is_err());
        assert!(SpoolParams { base_radius_cm: -1.0, ..p }.validate().is_err());
        assert!(SpoolState::new(p, -1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn inverse_consistency(pileup in 0.0f64..=1.0, wound in 0.0f64..800.0, n in -3000i64..3000) {
                let s = state(pileup, wound);
                if let Ok((len, _)) = s.length_for_steps(n) {
                    prop_assert_eq!(s.steps_for_length(len).0, n);
                }
            }

            #[test]
            fn monotone_length_and_radius(pileup in 0.0f64..=1.0, wound in 0.0f64..800.0, n in 0i64..2000) {
                let s = state(pileup, wound);
                let a = s.length_for_steps(n).unwrap().0;
                let b = s.length_for_steps(n + 1).unwrap().0;
                prop_assert!(b > a);
                let more = state(pileup, wound + 5.0);
                prop_assert!(more.effective_radius() >= s.effective_radius());
            }

            #[test]
            fn ideal_model_is_linear(wound in 0.0f64..800.0, n in 0i64..10_000) {
                let s = state(0.0, wound);
                let len = s.length_for_steps(n).unwrap().0;
                let expected = n as f64 * s.params.ideal_step_length();
                prop_assert!((len - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }

            #[test]
            fn residual_within_half_step_for_ideal(wound in 0.0f64..800.0, target in 0.0f64..500.0) {
                let s = state(0.0, wound);
                let (_, r) = s.steps_for_length(target);
                prop_assert!(r.abs() <= s.params.ideal_step_length() / 2.0 + 1e-12);
            }
        }
    }
}
