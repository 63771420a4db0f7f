//! Double-integrator vehicle model with exact constant-acceleration updates.

use serde::{Deserialize, Serialize};

/// Longitudinal state on the current road segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Distance from the origin of the current segment (m).
    pub x: f64,
    /// Speed (m/s).
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, v: f64) -> Self {
        Self { x, v }
    }
}

/// Speed, acceleration, and safety-margin limits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Reaction time (s).
    pub phi: f64,
    /// Rear-end safety margin (m).
    pub delta: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            v_min: 5.0,
            v_max: 30.0,
            u_min: -4.0,
            u_max: 4.0,
            phi: 1.8,
            delta: 0.0,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<(), crate::error::Error> {
        if !(self.v_min >= 0.0 && self.v_min < self.v_max) {
            return Err(crate::error::Error::Argument(format!(
                "require 0 <= v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if !(self.u_min < 0.0 && self.u_max > 0.0) {
            return Err(crate::error::Error::Argument(format!(
                "require u_min < 0 < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        if self.phi <= 0.0 || self.delta < 0.0 {
            return Err(crate::error::Error::Argument(
                "require phi > 0 and delta >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn clamp_u(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }
}

/// One step of exact constant-acceleration kinematics.
pub fn step(state: VehicleState, u: f64, td: f64) -> VehicleState {
    debug_assert!(td > 0.0);
    VehicleState {
        x: state.x + state.v * td + 0.5 * u * td * td,
        v: state.v + u * td,
    }
}

/// Horizon trajectory produced by repeated application of [`step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Rolls a control vector out from `state0`. Positions and velocities are
/// affine in the controls, which is what keeps the horizon problem a QP.
pub fn rollout(state0: VehicleState, controls: &[f64], td: f64) -> Trajectory {
    let mut x = Vec::with_capacity(controls.len());
    let mut v = Vec::with_capacity(controls.len());
    let mut s = state0;
    for &u in controls {
        s = step(s, u, td);
        x.push(s.x);
        v.push(s.v);
    }
    Trajectory { x, v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_zero_acceleration() {
        let s = step(VehicleState::new(0.0, 10.0), 0.0, 0.1);
        assert_eq!(s.x, 1.0);
        assert_eq!(s.v, 10.0);
    }

    #[test]
    fn step_from_rest() {
        let s = step(VehicleState::new(0.0, 0.0), 4.0, 1.0);
        assert_eq!(s.x, 2.0);
        assert_eq!(s.v, 4.0);
    }

    #[test]
    fn step_braking() {
        let s = step(VehicleState::new(5.0, 10.0), -4.0, 0.1);
        assert!((s.x - 5.98).abs() < 1e-12);
        assert!((s.v - 9.6).abs() < 1e-12);
    }

    #[test]
    fn rollout_constant_speed() {
        let t = rollout(VehicleState::new(0.0, 10.0), &[0.0; 3], 0.1);
        assert_eq!(t.x, vec![1.0, 2.0, 3.0]);
        assert_eq!(t.v, vec![10.0, 10.0, 10.0]);
    }

    #[test]
    fn rollout_hand_kinematics() {
        let t = rollout(VehicleState::new(0.0, 0.0), &[4.0, 0.0], 1.0);
        assert_eq!(t.x, vec![2.0, 6.0]);
        assert_eq!(t.v, vec![4.0, 4.0]);
    }

    #[test]
    fn rollout_h1_reduces_to_step() {
        let s0 = VehicleState::new(3.0, 7.0);
        let t = rollout(s0, &[1.5], 0.1);
        let s = step(s0, 1.5, 0.1);
        assert_eq!(t.x[0], s.x);
        assert_eq!(t.v[0], s.v);
    }

    proptest! {
        #[test]
        fn rollout_is_affine_in_controls(
            v0 in 0.0..30.0f64,
            ua in proptest::collection::vec(-4.0..4.0f64, 5),
            ub in proptest::collection::vec(-4.0..4.0f64, 5),
        ) {
            let s0 = VehicleState::new(0.0, v0);
            let td = 0.1;
            let sum: Vec<f64> = ua.iter().zip(&ub).map(|(a, b)| a + b).collect();
            let t_sum = rollout(s0, &sum, td);
            let t_a = rollout(s0, &ua, td);
            // rollout(ua + ub) - rollout(ua) must be linear in ub: compare against
            // rollout from rest driven by ub alone.
            let t_b0 = rollout(VehicleState::new(0.0, 0.0), &ub, td);
            for h in 0..5 {
                prop_assert!(((t_sum.x[h] - t_a.x[h]) - t_b0.x[h]).abs() < 1e-12);
                prop_assert!(((t_sum.v[h] - t_a.v[h]) - t_b0.v[h]).abs() < 1e-12);
            }
        }

        #[test]
        fn rollout_composes(u1 in -4.0..4.0f64, u2 in -4.0..4.0f64, v0 in 0.0..30.0f64) {
            let s0 = VehicleState::new(1.0, v0);
            let t = rollout(s0, &[u1, u2], 0.1);
            let s = step(step(s0, u1, 0.1), u2, 0.1);
            prop_assert!((t.x[1] - s.x).abs() < 1e-15);
            prop_assert!((t.v[1] - s.v).abs() < 1e-15);
        }
    }
}
