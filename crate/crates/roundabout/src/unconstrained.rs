//! Closed-form unconstrained optimal trajectory solver.
//!
//! When a CAV has neither a rear-end nor a merging neighbor, the optimal
//! control is linear in time, u(t) = a t + b, with velocity and position the
//! corresponding quadratic and cubic. The coefficients and the terminal time
//! follow from five algebraic boundary conditions; eliminating b, c, d reduces
//! them to a scalar root-find on the trip duration.

use crate::error::Error;

/// Cubic position / quadratic velocity / linear control trajectory in
/// absolute time over [t0, tf].
#[derive(Debug, Clone, Copy)]
pub struct PolyTrajectory {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub t0: f64,
    pub tf: f64,
    pub distance: f64,
    pub beta: f64,
}

impl PolyTrajectory {
    pub fn duration(&self) -> f64 {
        self.tf - self.t0
    }

    /// (u, v, x) at time t within [t0, tf].
    pub fn eval(&self, t: f64) -> Result<(f64, f64, f64), Error> {
        if t < self.t0 - 1e-9 || t > self.tf + 1e-9 {
            return Err(Error::Argument(format!(
                "t={t} outside trajectory range [{}, {}]",
                self.t0, self.tf
            )));
        }
        Ok(self.eval_unchecked(t))
    }

    /// Evaluation without the range check; past tf the trajectory is
    /// extrapolated at constant terminal speed with zero control.
    pub fn eval_clamped(&self, t: f64) -> (f64, f64, f64) {
        if t <= self.tf {
            self.eval_unchecked(t.max(self.t0))
        } else {
            let (_, vf, xf) = self.eval_unchecked(self.tf);
            (0.0, vf, xf + vf * (t - self.tf))
        }
    }

    fn eval_unchecked(&self, t: f64) -> (f64, f64, f64) {
        let u = self.a * t + self.b;
        let v = 0.5 * self.a * t * t + self.b * t + self.c;
        let x = self.a * t * t * t / 6.0 + 0.5 * self.b * t * t + self.c * t + self.d;
        (u, v, x)
    }

    /// Max absolute residual of the five boundary-condition equations.
    pub fn residual(&self) -> f64 {
        let (_, _, x0) = self.eval_unchecked(self.t0);
        let (uf, _, xf) = self.eval_unchecked(self.tf);
        let stationarity =
            self.beta + 0.5 * self.a * self.a * self.tf * self.tf
                + self.a * self.b * self.tf
                + self.a * self.c;
        // The v(t0) = v0 condition holds by construction in expand(); x(t0),
        // x(tf), u(tf), and stationarity are the checked residuals.
        [x0, xf - self.distance, uf, stationarity]
            .iter()
            .fold(0.0f64, |m, r| m.max(r.abs()))
    }
}

/// Solves the five boundary-condition equations for (a, b, c, d, tf).
///
/// Works in the shifted frame tau = t - t0 where b = -a*T, c = v0, d = 0 with
/// T the trip duration, leaving two equations in (a, T); the stationarity
/// condition is root-found on T after eliminating a from the distance
/// equation. Coefficients are then expanded back to absolute time.
pub fn solve_unconstrained(
    t0: f64,
    v0: f64,
    distance: f64,
    beta: f64,
) -> Result<PolyTrajectory, Error> {
    if distance <= 0.0 {
        return Err(Error::Argument(format!("distance must be > 0, got {distance}")));
    }
    if beta < 0.0 {
        return Err(Error::Argument(format!("beta must be >= 0, got {beta}")));
    }
    if v0 <= 0.0 && beta == 0.0 {
        return Err(Error::Argument("need v0 > 0 or beta > 0".into()));
    }

    // beta = 0 forces a = 0: constant-speed coast.
    if beta == 0.0 {
        let duration = distance / v0;
        return Ok(expand(0.0, duration, t0, v0, distance, beta));
    }

    // a(T) from the distance equation, stationarity residual f(T).
    let a_of = |t: f64| 3.0 * (v0 * t - distance) / (t * t * t);
    let f = |t: f64| {
        let a = a_of(t);
        beta - 0.5 * a * a * t * t + a * v0
    };

    // Bracket: acceleration solutions live below the coast duration; for
    // v0 near zero there is no finite coast time, so bound by a floor speed.
    let v_floor = 0.1;
    let hi = if v0 > v_floor { distance / v0 } else { distance / v_floor };
    let mut lo = hi * 1e-6;
    // ensure sign change
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    let mut expand_tries = 0;
    while f_lo > 0.0 && expand_tries < 60 {
        lo *= 0.5;
        f_lo = f(lo);
        expand_tries += 1;
    }
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(Error::Solver(format!(
            "no stationarity root in duration bracket ({lo:.3e}, {hi:.3e}]: f(lo)={f_lo:.3e}, f(hi)={f_hi:.3e}"
        )));
    }

    // Newton with bisection safeguard.
    let mut a_bracket = lo;
    let mut b_bracket = hi;
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let ft = f(t);
        if ft.abs() < 1e-14 * (1.0 + beta) {
            break;
        }
        if ft < 0.0 {
            a_bracket = t;
        } else {
            b_bracket = t;
        }
        let h = 1e-7 * t.max(1e-6);
        let dft = (f(t + h) - f(t - h)) / (2.0 * h);
        let mut next = if dft.abs() > 1e-300 { t - ft / dft } else { t };
        if !(next > a_bracket && next < b_bracket) {
            next = 0.5 * (a_bracket + b_bracket);
        }
        if (next - t).abs() < 1e-15 * t.max(1.0) {
            t = next;
            break;
        }
        t = next;
    }

    let traj = expand(a_of(t), t, t0, v0, distance, beta);
    let res = traj.residual();
    // scale-aware acceptance: short trips produce huge coefficients, so the
    // absolute residual is judged relative to the problem's magnitudes
    let dur = traj.duration();
    let scale = [1.0, distance, beta, traj.a.abs() * dur, traj.a.abs() * dur * dur]
        .iter()
        .fold(0.0f64, |m, &s| m.max(s));
    if res > 1e-8 * scale {
        return Err(Error::Solver(format!(
            "unconstrained solve residual {res:.3e} exceeds 1e-8 (scale {scale:.3e})"
        )));
    }
    Ok(traj)
}

/// Expands shifted-frame coefficients (a, duration) to absolute time.
fn expand(a: f64, duration: f64, t0: f64, v0: f64, distance: f64, beta: f64) -> PolyTrajectory {
    let tf = t0 + duration;
    // shifted frame: u = a*tau + b_s, b_s = -a*duration, c_s = v0, d_s = 0
    let b_s = -a * duration;
    // absolute: u(t) = a(t - t0) + b_s = a t + (b_s - a t0)
    let b = b_s - a * t0;
    let c = v0 - 0.5 * a * t0 * t0 - b * t0;
    let d = -(a * t0 * t0 * t0 / 6.0 + 0.5 * b * t0 * t0 + c * t0);
    PolyTrajectory { a, b, c, d, t0, tf, distance, beta }
}
