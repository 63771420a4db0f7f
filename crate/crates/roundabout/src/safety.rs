//! CBF and CLBF constraint rows, affine in the stacked horizon controls, plus
//! the finite-time-convergence parameter selection for the merging constraint.
//!
//! Row convention: every builder returns a [`QpRow`] meaning `coeffs . u >= rhs`
//! over the stacked control vector `u in R^H`. Barrier values are evaluated at
//! the state holding at the *start* of step h, which is affine in
//! `u_1..u_{h-1}`, while the control entering the Lie derivative is `u_h`.

use crate::dynamics::Limits;
use crate::qp::QpRow;
use serde::{Deserialize, Serialize};

/// Linear class-K coefficients for the four CBF constraints (1/s).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassKConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
}

impl Default for ClassKConfig {
    fn default() -> Self {
        Self { gamma1: 1.0, gamma2: 1.0, gamma3: 1.0, gamma4: 1.0 }
    }
}

/// A scalar affine in the stacked control vector: `coeffs . u + constant`.
#[derive(Debug, Clone)]
pub struct AffineScalar {
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

impl AffineScalar {
    pub fn constant_of(h_len: usize, value: f64) -> Self {
        Self { coeffs: vec![0.0; h_len], constant: value }
    }

    /// The unit selector for control u_h (h is 1-based).
    pub fn control(h_len: usize, h: usize) -> Self {
        let mut coeffs = vec![0.0; h_len];
        coeffs[h - 1] = 1.0;
        Self { coeffs, constant: 0.0 }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
            constant: self.constant * s,
        }
    }

    pub fn plus(&self, other: &AffineScalar) -> Self {
        Self {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
            constant: self.constant + other.constant,
        }
    }

    pub fn plus_const(&self, value: f64) -> Self {
        Self { coeffs: self.coeffs.clone(), constant: self.constant + value }
    }

    pub fn minus(&self, other: &AffineScalar) -> Self {
        self.plus(&other.scaled(-1.0))
    }

    pub fn value_at(&self, u: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().zip(u).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Converts `expr >= 0` into a QP row.
    pub fn geq_zero(self, tag: impl Into<String>) -> QpRow {
        QpRow::new(self.coeffs, -self.constant, tag)
    }
}

/// Speed-limit CBF rows at step h:
/// `-u_h + gamma1 (v_max - v_h) >= 0` and `u_h + gamma2 (v_h - v_min) >= 0`.
pub fn row_vlimits(
    v_h: &AffineScalar,
    h: usize,
    limits: &Limits,
    gammas: &ClassKConfig,
) -> (QpRow, QpRow) {
    let n = v_h.coeffs.len();
    let u_h = AffineScalar::control(n, h);
    let upper = u_h
        .scaled(-1.0)
        .plus(&v_h.scaled(-gammas.gamma1).plus_const(gammas.gamma1 * limits.v_max));
    let lower = u_h.plus(&v_h.scaled(gammas.gamma2).plus_const(-gammas.gamma2 * limits.v_min));
    (
        upper.geq_zero(format!("vmax[h={h}]")),
        lower.geq_zero(format!("vmin[h={h}]")),
    )
}

/// Rear-end CBF row at step h:
/// `v_ip - v_h - phi u_h + gamma3 (x_ip - x_h - phi v_h - delta) >= 0`.
///
/// `x_ip_h` must already include the cross-CZ unrolling (adjusted gap frame).
pub fn row_rear_end(
    v_h: &AffineScalar,
    x_h: &AffineScalar,
    v_ip_h: f64,
    x_ip_h: f64,
    h: usize,
    limits: &Limits,
    gammas: &ClassKConfig,
) -> QpRow {
    let n = v_h.coeffs.len();
    let u_h = AffineScalar::control(n, h);
    let b3 = x_h
        .scaled(-1.0)
        .plus(&v_h.scaled(-limits.phi))
        .plus_const(x_ip_h - limits.delta);
    let expr = v_h
        .scaled(-1.0)
        .plus_const(v_ip_h)
        .plus(&u_h.scaled(-limits.phi))
        .plus(&b3.scaled(gammas.gamma3));
    expr.geq_zero(format!("rear_end[h={h}]"))
}

/// Barrier value of the continuous merging constraint at known neighbor state.
pub fn b4_value(x_i: f64, v_i: f64, x_im: f64, limits: &Limits, seg_len: f64) -> f64 {
    x_im - x_i - limits.phi / seg_len * x_im * v_i - limits.delta
}

/// Drift (control-independent) part of db4/dt, with the merging neighbor's
/// motion treated as exogenous.
pub fn b4_drift(v_i: f64, v_im: f64, x_im: f64, limits: &Limits, seg_len: f64) -> f64 {
    let _ = x_im;
    v_im - v_i - limits.phi / seg_len * v_im * v_i
}

/// db4/dt achievable under maximum braking; its negation is the b-bar term
/// bounding the admissible convergence gain.
pub fn b4_dot_max(v_i: f64, v_im: f64, x_im: f64, limits: &Limits, seg_len: f64) -> f64 {
    b4_drift(v_i, v_im, x_im, limits, seg_len) - limits.phi / seg_len * x_im * limits.u_min
}

/// Merging CBF row at step h (classic form with linear class-K):
/// `v_im - v_h - (phi/L) x_im u_h - (phi/L) v_im v_h + gamma4 b4 >= 0`.
#[allow(clippy::too_many_arguments)]
pub fn row_merge_cbf(
    v_h: &AffineScalar,
    x_h: &AffineScalar,
    v_im_h: f64,
    x_im_h: f64,
    h: usize,
    limits: &Limits,
    seg_len: f64,
    gamma4: f64,
) -> QpRow {
    merge_row_impl(v_h, x_h, v_im_h, x_im_h, h, limits, seg_len, gamma4, None)
}

#[allow(clippy::too_many_arguments)]
fn merge_row_impl(
    v_h: &AffineScalar,
    x_h: &AffineScalar,
    v_im_h: f64,
    x_im_h: f64,
    h: usize,
    limits: &Limits,
    seg_len: f64,
    gain: f64,
    frozen_b4_term: Option<f64>,
) -> QpRow {
    let n = v_h.coeffs.len();
    let u_h = AffineScalar::control(n, h);
    let scale = limits.phi / seg_len;
    let lie = v_h
        .scaled(-1.0 - scale * v_im_h)
        .plus_const(v_im_h)
        .plus(&u_h.scaled(-scale * x_im_h));
    let expr = match frozen_b4_term {
        // nonlinear term frozen at the nominal trajectory keeps the row affine
        Some(term) => lie.plus_const(term),
        None => {
            let b4 = x_h
                .scaled(-1.0)
                .plus(&v_h.scaled(-scale * x_im_h))
                .plus_const(x_im_h - limits.delta);
            lie.plus(&b4.scaled(gain))
        }
    };
    expr.geq_zero(format!("merge[h={h}]"))
}

/// CLBF parameters for the merging constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClbfParams {
    pub p: f64,
    /// 1 inside the safe set, 1/(2n+1) outside.
    pub q: f64,
    /// Required convergence deadline (s).
    pub t_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PqOutcome {
    Feasible(ClbfParams),
    Infeasible,
}

/// Real odd root: w^(1/(2n+1)) with the sign of w.
pub fn odd_root(w: f64, q: f64) -> f64 {
    w.signum() * w.abs().powf(q)
}

/// w^(1-q) under the odd-root convention: (w^(1/(2n+1)))^(2n) >= 0.
pub fn pow_one_minus_q(w: f64, q: f64) -> f64 {
    w.abs().powf(1.0 - q)
}

fn check_q(q: f64) -> Result<(), crate::error::Error> {
    if q == 1.0 {
        return Ok(());
    }
    let inv = 1.0 / q;
    let rounded = inv.round();
    let ok = (inv - rounded).abs() < 1e-9
        && rounded >= 3.0
        && (rounded as i64) % 2 == 1;
    if ok {
        Ok(())
    } else {
        Err(crate::error::Error::Argument(format!(
            "q must be 1 or 1/(2n+1), got {q}"
        )))
    }
}

/// Analytic bound on the time to reach the safe set from b4_0 < 0 under the
/// CLBF condition: t_conv = |b4_0|^(1-q) / (p (1-q)).
pub fn t_conv(b4_0: f64, p: f64, q: f64) -> Result<f64, crate::error::Error> {
    if p <= 0.0 {
        return Err(crate::error::Error::Argument(format!("p must be > 0, got {p}")));
    }
    check_q(q)?;
    if q == 1.0 {
        return Err(crate::error::Error::Argument(
            "t_conv requires q = 1/(2n+1) < 1".into(),
        ));
    }
    Ok(pow_one_minus_q(b4_0, q) / (p * (1.0 - q)))
}

/// Convergence-gain selection for the merging barrier.
///
/// * `b4_0 >= 0`: inside the safe set, classic CBF branch (q = 1).
/// * `b4_0 < 0` and `b4dot_0 < 0`: the sequence is not feasible.
/// * otherwise q = 1/(2n+1) and p is picked inside
///   `[ |b4_0|^(1-q) / ((1-q) t_m),  bbar_0 / b4_0^q ]` (odd-root convention);
///   an empty interval is Infeasible.
pub fn choose_pq(
    b4_0: f64,
    b4dot_0: f64,
    bbar_0: f64,
    t_m: f64,
    n: u32,
    p_default: f64,
) -> Result<PqOutcome, crate::error::Error> {
    if t_m <= 0.0 {
        return Err(crate::error::Error::Argument(format!(
            "t_m must be > 0, got {t_m}"
        )));
    }
    if n == 0 {
        return Err(crate::error::Error::Argument("n must be >= 1".into()));
    }
    if b4_0 >= 0.0 {
        return Ok(PqOutcome::Feasible(ClbfParams { p: p_default, q: 1.0, t_m }));
    }
    if b4dot_0 < 0.0 {
        return Ok(PqOutcome::Infeasible);
    }
    let q = 1.0 / (2.0 * n as f64 + 1.0);
    let lower = pow_one_minus_q(b4_0, q) / ((1.0 - q) * t_m);
    let upper = bbar_0 / odd_root(b4_0, q);
    if upper < lower || upper <= 0.0 {
        return Ok(PqOutcome::Infeasible);
    }
    Ok(PqOutcome::Feasible(ClbfParams { p: 0.5 * (lower + upper), q, t_m }))
}

/// Merging CLBF row at step h. With q = 1 this is identical to
/// [`row_merge_cbf`] with gamma4 = p; otherwise the nonlinear term
/// `p * b4^q` is evaluated at the nominal predicted barrier value so the row
/// stays affine in the controls.
#[allow(clippy::too_many_arguments)]
pub fn row_merge_clbf(
    v_h: &AffineScalar,
    x_h: &AffineScalar,
    v_im_h: f64,
    x_im_h: f64,
    params: &ClbfParams,
    nominal_b4_h: f64,
    h: usize,
    limits: &Limits,
    seg_len: f64,
) -> QpRow {
    if params.q == 1.0 {
        merge_row_impl(v_h, x_h, v_im_h, x_im_h, h, limits, seg_len, params.p, None)
    } else {
        let term = params.p * odd_root(nominal_b4_h, params.q);
        merge_row_impl(v_h, x_h, v_im_h, x_im_h, h, limits, seg_len, params.p, Some(term))
    }
}
