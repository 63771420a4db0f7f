//! Per-CAV receding-horizon planner.
//!
//! Dispatches on the available neighbors: with no neighbors the plan samples
//! the closed-form energy/time-optimal trajectory; otherwise a QP over the
//! stacked horizon controls is assembled from the barrier rows in [`safety`]
//! plus the speed/energy cost, and solved each step with only the first
//! control applied.
//!
//! [`safety`]: crate::safety

use crate::dynamics::{rollout, Limits, VehicleState};
use crate::error::Error;
use crate::qp::{QpProblem, QpStatus};
use crate::safety::{
    b4_dot_max, b4_value, choose_pq, row_merge_clbf, row_rear_end, row_vlimits,
    AffineScalar, ClassKConfig, ClbfParams, PqOutcome,
};
use crate::unconstrained::solve_unconstrained;
use serde::{Deserialize, Serialize};

/// Planner parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    /// Horizon length H (steps).
    pub horizon: usize,
    /// Step length (s).
    pub td: f64,
    /// Speed reward weight in the horizon cost sum(u^2/2 - lambda v).
    pub lambda: f64,
    pub gammas: ClassKConfig,
    /// n in the convergence exponent q = 1/(2n+1).
    pub clbf_n: u32,
    /// Merging gain used on the classic (already-safe) branch.
    pub p_default: f64,
    /// Energy/time trade-off weight of the closed-form free-flow trajectory.
    pub beta: f64,
    /// Extra standstill clearance (m) added to the safety rows during
    /// planning only, so closed-loop trajectories ride the real constraint
    /// boundary with slack instead of grazing it.
    pub safety_margin: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            td: 0.1,
            lambda: 0.5,
            gammas: ClassKConfig::default(),
            clbf_n: 1,
            p_default: 1.0,
            beta: 8.0 / 9.0,
            safety_margin: 0.3,
        }
    }
}

/// Neighbor states over the horizon, at the *start* of each step 1..=H,
/// expressed in the ego segment frame (cross-CZ leaders carry an offset of
/// whole segment lengths).
#[derive(Debug, Clone)]
pub struct HorizonPrediction {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl HorizonPrediction {
    pub fn constant_velocity(state: VehicleState, h: usize, td: f64) -> Self {
        let x = (0..h).map(|k| state.x + state.v * td * k as f64).collect();
        let v = vec![state.v; h];
        Self { x, v }
    }

    /// Builds start-of-step values from a neighbor's post-step plan states:
    /// the start of step h is the state after h-1 steps. Shorter plans are
    /// extended at constant velocity.
    pub fn from_plan(current: VehicleState, plan_x: &[f64], plan_v: &[f64], h: usize, td: f64) -> Self {
        let mut x = Vec::with_capacity(h);
        let mut v = Vec::with_capacity(h);
        x.push(current.x);
        v.push(current.v);
        for k in 0..h.saturating_sub(1) {
            if k < plan_x.len() {
                x.push(plan_x[k]);
                v.push(plan_v[k]);
            } else {
                x.push(x[x.len() - 1] + v[v.len() - 1] * td);
                v.push(v[v.len() - 1]);
            }
        }
        Self { x, v }
    }

    /// Same prediction displaced by `offset` meters (cross-CZ unrolling).
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            x: self.x.iter().map(|x| x + offset).collect(),
            v: self.v.clone(),
        }
    }
}

/// The merging neighbor: horizon prediction, current state, and its remaining
/// time to the shared MP (the required convergence deadline).
#[derive(Debug, Clone)]
pub struct MergeNeighbor {
    pub pred: HorizonPrediction,
    pub state: VehicleState,
    pub t_m: f64,
}

/// Neighbor context for one plan.
#[derive(Debug, Clone, Default)]
pub struct Neighbors {
    pub i_p: Option<HorizonPrediction>,
    pub i_m: Option<MergeNeighbor>,
}

impl Neighbors {
    pub fn none() -> Self {
        Self::default()
    }
}

/// A feasible horizon plan. `x`/`v` are post-step states consistent with
/// rolling `u` out from the planning state.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub cost: f64,
    pub params: Option<ClbfParams>,
}

/// Why a plan was rejected; rejections propagate to sequence rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasibleReason {
    /// Merging barrier and its best-achievable derivative both negative.
    DerivativeGate,
    /// The convergence-parameter interval is empty for the given deadline.
    EmptyInterval,
    /// The assembled QP has no feasible point.
    QpInfeasible,
}

#[derive(Debug, Clone)]
pub enum PlanOutcome {
    Plan(PlanResult),
    Infeasible(InfeasibleReason),
}

impl PlanOutcome {
    pub fn plan(&self) -> Option<&PlanResult> {
        match self {
            PlanOutcome::Plan(p) => Some(p),
            PlanOutcome::Infeasible(_) => None,
        }
    }
}

/// Horizon cost pieces over the stacked controls: diagonal of the quadratic
/// part, linear part, and the control-independent constant.
///
/// sum_h (u_h^2/2 - lambda v_h) with post-step v_h = v0 + Td sum_{j<=h} u_j
/// gives Q = I, c_j = -lambda Td (H - j + 1), constant -lambda H v0.
pub fn objective_terms(h: usize, lambda: f64, td: f64, v0: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let q = vec![1.0; h];
    let c = (1..=h).map(|j| -lambda * td * (h - j + 1) as f64).collect();
    (q, c, -lambda * h as f64 * v0)
}

/// The reported plan cost, evaluated directly on the rolled-out states.
pub fn plan_cost(u: &[f64], v_post: &[f64], lambda: f64) -> f64 {
    u.iter()
        .zip(v_post)
        .map(|(u, v)| 0.5 * u * u - lambda * v)
        .sum()
}

/// Ego state at the start of each step as an affine function of the stacked
/// controls; index h-1 holds the state at the start of step h.
fn affine_prestep_states(
    state: VehicleState,
    h: usize,
    td: f64,
) -> (Vec<AffineScalar>, Vec<AffineScalar>) {
    let mut vs = Vec::with_capacity(h);
    let mut xs = Vec::with_capacity(h);
    for step in 1..=h {
        let k = step - 1; // completed steps
        let mut v_coeffs = vec![0.0; h];
        let mut x_coeffs = vec![0.0; h];
        for j in 1..=k {
            v_coeffs[j - 1] = td;
            x_coeffs[j - 1] = td * td * (k as f64 - j as f64 + 0.5);
        }
        vs.push(AffineScalar { coeffs: v_coeffs, constant: state.v });
        xs.push(AffineScalar {
            coeffs: x_coeffs,
            constant: state.x + k as f64 * td * state.v,
        });
    }
    (vs, xs)
}

/// Plans one CAV over the horizon.
///
/// `remaining_distance` is the distance to the exit MP (used only on the
/// neighbor-free branch); `nominal_u` is the previous plan shifted by one
/// step, used to keep the nonlinear merging term affine.
pub fn plan_cav(
    state: VehicleState,
    remaining_distance: f64,
    neighbors: &Neighbors,
    nominal_u: Option<&[f64]>,
    cfg: &MpcConfig,
    limits: &Limits,
    seg_len: f64,
) -> Result<PlanOutcome, Error> {
    let h = cfg.horizon;
    if h == 0 {
        return Err(Error::Argument("horizon must be >= 1".into()));
    }

    if neighbors.i_p.is_none() && neighbors.i_m.is_none() {
        return free_flow_plan(state, remaining_distance, cfg, limits).map(PlanOutcome::Plan);
    }

    // safety rows see a slightly larger standstill clearance than the
    // monitored constraint, so the closed loop keeps positive margin
    let plan_limits = Limits { delta: limits.delta + cfg.safety_margin, ..*limits };

    // merging branch gate and parameter selection
    let mut params: Option<ClbfParams> = None;
    if let Some(im) = &neighbors.i_m {
        let b4_0 = b4_value(state.x, state.v, im.state.x, &plan_limits, seg_len);
        let gate = b4_dot_max(state.v, im.state.v, im.state.x, &plan_limits, seg_len);
        match choose_pq(b4_0, gate, -gate, im.t_m.max(cfg.td), cfg.clbf_n, cfg.p_default)? {
            PqOutcome::Feasible(p) => params = Some(p),
            PqOutcome::Infeasible => {
                let reason = if b4_0 < 0.0 && gate < 0.0 {
                    InfeasibleReason::DerivativeGate
                } else {
                    InfeasibleReason::EmptyInterval
                };
                return Ok(PlanOutcome::Infeasible(reason));
            }
        }
    }

    let (q, c, _) = objective_terms(h, cfg.lambda, cfg.td, state.v);
    let mut problem = QpProblem::new(h, diag(&q), c)?;
    problem.set_box(vec![limits.u_min; h], vec![limits.u_max; h])?;

    let (v_pre, x_pre) = affine_prestep_states(state, h, cfg.td);

    // nominal ego rollout for the frozen nonlinear merging term
    let zeros = vec![0.0; h];
    let nominal = nominal_u.unwrap_or(&zeros);
    let nom_traj = rollout(state, nominal, cfg.td);

    for step in 1..=h {
        let (upper, lower) = row_vlimits(&v_pre[step - 1], step, limits, &cfg.gammas);
        problem.add_row(upper)?;
        problem.add_row(lower)?;

        if let Some(ip) = &neighbors.i_p {
            problem.add_row(row_rear_end(
                &v_pre[step - 1],
                &x_pre[step - 1],
                ip.v[step - 1],
                ip.x[step - 1],
                step,
                &plan_limits,
                &cfg.gammas,
            ))?;
        }

        if let (Some(im), Some(p)) = (&neighbors.i_m, &params) {
            let (nx, nv) = if step == 1 {
                (state.x, state.v)
            } else {
                (nom_traj.x[step - 2], nom_traj.v[step - 2])
            };
            let nominal_b4 = b4_value(nx, nv, im.pred.x[step - 1], &plan_limits, seg_len);
            problem.add_row(row_merge_clbf(
                &v_pre[step - 1],
                &x_pre[step - 1],
                im.pred.v[step - 1],
                im.pred.x[step - 1],
                p,
                nominal_b4,
                step,
                &plan_limits,
                seg_len,
            ))?;
        }
    }

    let solution = crate::qp::solve(&problem)?;
    match solution.status {
        QpStatus::Optimal => {
            let traj = rollout(state, &solution.x, cfg.td);
            let cost = plan_cost(&solution.x, &traj.v, cfg.lambda);
            Ok(PlanOutcome::Plan(PlanResult {
                u: solution.x,
                x: traj.x,
                v: traj.v,
                cost,
                params,
            }))
        }
        QpStatus::Infeasible => Ok(PlanOutcome::Infeasible(InfeasibleReason::QpInfeasible)),
        QpStatus::MaxIter => Err(Error::Solver(format!(
            "horizon QP did not certify: violation {:.2e}, stationarity {:.2e}",
            solution.max_violation, solution.stationarity
        ))),
    }
}

/// Neighbor-free branch: sample the closed-form energy/time trajectory onto
/// the horizon, clamped to the control and speed limits.
fn free_flow_plan(
    state: VehicleState,
    remaining_distance: f64,
    cfg: &MpcConfig,
    limits: &Limits,
) -> Result<PlanResult, Error> {
    let distance = remaining_distance.max(1e-6);
    let poly = solve_unconstrained(0.0, state.v.max(1e-3), distance, cfg.beta)?;
    let mut u = Vec::with_capacity(cfg.horizon);
    let mut s = state;
    for step in 0..cfg.horizon {
        let t = step as f64 * cfg.td;
        let (u_ref, _, _) = poly.eval_clamped(t);
        let mut u_h = limits.clamp_u(u_ref);
        // keep the sampled plan inside the speed band
        u_h = u_h
            .min((limits.v_max - s.v) / cfg.td)
            .max((limits.v_min - s.v).min(0.0) / cfg.td);
        u_h = limits.clamp_u(u_h);
        s = crate::dynamics::step(s, u_h, cfg.td);
        u.push(u_h);
    }
    let traj = rollout(state, &u, cfg.td);
    let cost = plan_cost(&u, &traj.v, cfg.lambda);
    Ok(PlanResult { u, x: traj.x, v: traj.v, cost, params: None })
}

/// First control applied to the plant, plus the shifted nominal control
/// vector retained for the next step (last entry repeated).
pub fn receding_step(plan: &PlanResult) -> (f64, Vec<f64>) {
    let applied = plan.u[0];
    let mut shifted: Vec<f64> = plan.u[1..].to_vec();
    shifted.push(*plan.u.last().unwrap());
    (applied, shifted)
}

/// Remaining time to the segment MP, read from a plan when available,
/// otherwise from a constant-velocity estimate.
pub fn time_to_mp(state: VehicleState, plan: Option<&PlanResult>, seg_len: f64, td: f64) -> f64 {
    const V_FLOOR: f64 = 0.1;
    if state.x >= seg_len {
        return 0.0;
    }
    if let Some(p) = plan {
        let mut prev_x = state.x;
        for (h, &x) in p.x.iter().enumerate() {
            if x >= seg_len {
                let frac = if x > prev_x { (seg_len - prev_x) / (x - prev_x) } else { 1.0 };
                return td * (h as f64 + frac);
            }
            prev_x = x;
        }
        let v_end = p.v.last().copied().unwrap_or(state.v).max(V_FLOOR);
        return td * p.x.len() as f64 + (seg_len - prev_x) / v_end;
    }
    (seg_len - state.x) / state.v.max(V_FLOOR)
}

fn diag(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut m = vec![0.0; n * n];
    for (i, v) in values.iter().enumerate() {
        m[i * n + i] = *v;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safety::b4_value;

    fn cfg(h: usize) -> MpcConfig {
        MpcConfig { horizon: h, ..MpcConfig::default() }
    }

    const L: f64 = 60.0;

    #[test]
    fn objective_terms_h1_expansion() {
        // H = 1: u^2/2 - lambda (v0 + u Td)
        let (q, c, k) = objective_terms(1, 0.5, 0.1, 10.0);
        assert_eq!(q, vec![1.0]);
        assert!((c[0] - (-0.5 * 0.1)).abs() < 1e-15);
        assert!((k - (-0.5 * 10.0)).abs() < 1e-15);
    }

    #[test]
    fn objective_terms_zero_lambda_is_pure_energy() {
        let (_, c, k) = objective_terms(5, 0.0, 0.1, 10.0);
        assert!(c.iter().all(|&x| x == 0.0));
        assert_eq!(k, 0.0);
    }

    #[test]
    fn objective_terms_match_rollout_cost() {
        let h = 6;
        let (qd, c, k) = objective_terms(h, 0.7, 0.1, 9.0);
        let u: Vec<f64> = (0..h).map(|i| (i as f64 - 2.0) * 0.5).collect();
        let traj = rollout(VehicleState::new(0.0, 9.0), &u, 0.1);
        let direct = plan_cost(&u, &traj.v, 0.7);
        let quad: f64 = u.iter().zip(&qd).map(|(u, q)| 0.5 * q * u * u).sum();
        let lin: f64 = u.iter().zip(&c).map(|(u, c)| u * c).sum();
        assert!((direct - (quad + lin + k)).abs() < 1e-9);
    }

    #[test]
    fn free_flow_coast_when_beta_zero() {
        let mut c = cfg(5);
        c.beta = 0.0;
        let out = plan_cav(
            VehicleState::new(0.0, 10.0),
            1000.0,
            &Neighbors::none(),
            None,
            &c,
            &Limits::default(),
            L,
        )
        .unwrap();
        let plan = out.plan().expect("free flow is always feasible");
        assert!(plan.u.iter().all(|&u| u.abs() < 1e-9));
        assert!((plan.cost - (-0.5 * 10.0 * 5.0)).abs() < 1e-6);
    }

    #[test]
    fn free_flow_samples_accelerating_profile() {
        let c = cfg(10);
        let out = plan_cav(
            VehicleState::new(0.0, 10.0),
            120.0,
            &Neighbors::none(),
            None,
            &c,
            &Limits::default(),
            L,
        )
        .unwrap();
        let plan = out.plan().unwrap();
        // energy/time trade-off accelerates a slow vehicle, decreasingly
        assert!(plan.u[0] > 0.0);
        for w in plan.u.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn free_flow_respects_speed_cap() {
        let c = cfg(40);
        let out = plan_cav(
            VehicleState::new(0.0, 29.5),
            500.0,
            &Neighbors::none(),
            None,
            &c,
            &Limits::default(),
            L,
        )
        .unwrap();
        let plan = out.plan().unwrap();
        for &v in &plan.v {
            assert!(v <= 30.0 + 1e-9);
        }
    }

    #[test]
    fn leader_only_branch_keeps_rear_end_barrier() {
        let limits = Limits::default();
        let c = cfg(10);
        let ego = VehicleState::new(0.0, 10.0);
        let lead = VehicleState::new(25.0, 8.0);
        let nb = Neighbors {
            i_p: Some(HorizonPrediction::constant_velocity(lead, 10, c.td)),
            i_m: None,
        };
        let plan = plan_cav(ego, L, &nb, None, &c, &limits, L)
            .unwrap()
            .plan()
            .cloned()
            .expect("feasible");
        // b3 = x_ip - x - phi v - delta stays nonnegative along the rollout
        let mut s = ego;
        for (h, &u) in plan.u.iter().enumerate() {
            s = crate::dynamics::step(s, u, c.td);
            let x_ip = lead.x + lead.v * c.td * (h as f64 + 1.0);
            let b3 = x_ip - s.x - limits.phi * s.v - limits.delta;
            assert!(b3 > -1e-6, "b3 = {b3} at step {}", h + 1);
        }
    }

    #[test]
    fn speed_rides_toward_vmax_with_slack_constraints() {
        let limits = Limits::default();
        let mut c = cfg(30);
        c.lambda = 2.0;
        let ego = VehicleState::new(0.0, 28.0);
        let lead = VehicleState::new(500.0, 30.0);
        let nb = Neighbors {
            i_p: Some(HorizonPrediction::constant_velocity(lead, 30, c.td)),
            i_m: None,
        };
        let plan = plan_cav(ego, L, &nb, None, &c, &limits, L)
            .unwrap()
            .plan()
            .cloned()
            .unwrap();
        assert!(plan.v.iter().all(|&v| v <= 30.0 + 1e-6));
        assert!(*plan.v.last().unwrap() > 29.5, "v_end = {}", plan.v.last().unwrap());
        for w in plan.v.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn plans_respect_control_bounds() {
        let limits = Limits::default();
        let c = cfg(10);
        let ego = VehicleState::new(0.0, 10.0);
        let lead = VehicleState::new(20.0, 5.0);
        let nb = Neighbors {
            i_p: Some(HorizonPrediction::constant_velocity(lead, 10, c.td)),
            i_m: None,
        };
        let plan = plan_cav(ego, L, &nb, None, &c, &limits, L)
            .unwrap()
            .plan()
            .cloned()
            .unwrap();
        for &u in &plan.u {
            assert!(u >= limits.u_min - 1e-9 && u <= limits.u_max + 1e-9);
        }
        // rollout consistency
        let traj = rollout(ego, &plan.u, c.td);
        for h in 0..plan.u.len() {
            assert!((traj.x[h] - plan.x[h]).abs() < 1e-10);
            assert!((traj.v[h] - plan.v[h]).abs() < 1e-10);
        }
        // reported cost equals the objective at u
        assert!((plan.cost - plan_cost(&plan.u, &plan.v, c.lambda)).abs() < 1e-9);
    }

    #[test]
    fn derivative_gate_rejects_plan() {
        // b4_0 = -1 with best-achievable derivative still negative
        let limits = Limits::default();
        let c = cfg(10);
        let im_state = VehicleState::new(5.0, 2.0);
        let ego = VehicleState::new(4.5, 10.0);
        let b4_0 = b4_value(ego.x, ego.v, im_state.x, &limits, L);
        assert!((b4_0 - (-1.0)).abs() < 1e-12);
        let nb = Neighbors {
            i_p: None,
            i_m: Some(MergeNeighbor {
                pred: HorizonPrediction::constant_velocity(im_state, 10, c.td),
                state: im_state,
                t_m: (L - im_state.x) / im_state.v,
            }),
        };
        match plan_cav(ego, L, &nb, None, &c, &limits, L).unwrap() {
            PlanOutcome::Infeasible(InfeasibleReason::DerivativeGate) => {}
            other => panic!("expected derivative gate, got {other:?}"),
        }
    }

    #[test]
    fn empty_interval_rejects_plan() {
        // lower bound 0.6 exceeds the achievable upper bound
        let limits = Limits::default();
        let c = cfg(10);
        let im_state = VehicleState::new(40.0, 2.0);
        let ego = VehicleState::new(40.8, 6.0);
        let b4_0 = b4_value(ego.x, ego.v, im_state.x, &limits, L);
        assert!((b4_0 - (-8.0)).abs() < 1e-12);
        let nb = Neighbors {
            i_p: None,
            i_m: Some(MergeNeighbor {
                pred: HorizonPrediction::constant_velocity(im_state, 10, c.td),
                state: im_state,
                t_m: 10.0,
            }),
        };
        match plan_cav(ego, L, &nb, None, &c, &limits, L).unwrap() {
            PlanOutcome::Infeasible(InfeasibleReason::EmptyInterval) => {}
            other => panic!("expected empty interval, got {other:?}"),
        }
    }

    #[test]
    fn safe_merge_uses_classic_branch() {
        let limits = Limits::default();
        let c = cfg(10);
        let im_state = VehicleState::new(50.0, 10.0);
        let ego = VehicleState::new(10.0, 10.0); // b4 = 50 - 10 - 15 = 25 > 0
        let nb = Neighbors {
            i_p: None,
            i_m: Some(MergeNeighbor {
                pred: HorizonPrediction::constant_velocity(im_state, 10, c.td),
                state: im_state,
                t_m: 1.0,
            }),
        };
        let plan = plan_cav(ego, L, &nb, None, &c, &limits, L)
            .unwrap()
            .plan()
            .cloned()
            .unwrap();
        let p = plan.params.expect("merging branch records params");
        assert_eq!(p.q, 1.0);
        assert_eq!(p.p, c.p_default);
    }

    #[test]
    fn conflicting_rows_report_qp_infeasible() {
        // leader so close and slow that the rear-end row demands braking
        // beyond u_min while b3 < 0 already
        let limits = Limits::default();
        let c = cfg(3);
        let ego = VehicleState::new(0.0, 10.0);
        let lead = VehicleState::new(5.0, 0.0);
        let nb = Neighbors {
            i_p: Some(HorizonPrediction::constant_velocity(lead, 3, c.td)),
            i_m: None,
        };
        match plan_cav(ego, L, &nb, None, &c, &limits, L).unwrap() {
            PlanOutcome::Infeasible(InfeasibleReason::QpInfeasible) => {}
            other => panic!("expected QP infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn receding_step_shifts_nominal() {
        let plan = PlanResult {
            u: vec![1.0, 2.0, 3.0],
            x: vec![],
            v: vec![],
            cost: 0.0,
            params: None,
        };
        let (applied, shifted) = receding_step(&plan);
        assert_eq!(applied, 1.0);
        assert_eq!(shifted, vec![2.0, 3.0, 3.0]);
    }

    #[test]
    fn time_to_mp_constant_velocity_estimate() {
        let t = time_to_mp(VehicleState::new(50.0, 10.0), None, 60.0, 0.1);
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_to_mp_reads_plan_crossing() {
        let plan = PlanResult {
            u: vec![0.0; 3],
            x: vec![55.0, 58.0, 61.0],
            v: vec![30.0; 3],
            cost: 0.0,
            params: None,
        };
        // crossing between steps 2 and 3: t = 0.2 + 0.1 * (60-58)/(61-58)
        let t = time_to_mp(VehicleState::new(52.0, 30.0), Some(&plan), 60.0, 0.1);
        assert!((t - (0.2 + 0.1 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn closed_loop_merge_converges_before_deadline() {
        // Drift-favorable construction: fast merging neighbor, b4_0 = -2,
        // deadline 2.5 s. Replay the receding-horizon loop and check the
        // barrier is nonnegative at the deadline.
        let limits = Limits::default();
        let c = cfg(10);
        let mut ego = VehicleState::new(10.5, 5.0);
        let mut im = VehicleState::new(10.0, 20.0);
        let b4_0 = b4_value(ego.x, ego.v, im.x, &limits, L);
        assert!((b4_0 - (-2.0)).abs() < 1e-12);
        let t_m = (L - im.x) / im.v;
        assert!((t_m - 2.5).abs() < 1e-12);

        let steps = (t_m / c.td).round() as usize;
        let mut nominal: Option<Vec<f64>> = None;
        let mut b4_final = b4_0;
        for _ in 0..steps {
            let nb = Neighbors {
                i_p: None,
                i_m: Some(MergeNeighbor {
                    pred: HorizonPrediction::constant_velocity(im, c.horizon, c.td),
                    state: im,
                    t_m: (L - im.x) / im.v,
                }),
            };
            let out = plan_cav(ego, L, &nb, nominal.as_deref(), &c, &limits, L).unwrap();
            let plan = out.plan().expect("merge stays feasible");
            let (u, shifted) = receding_step(plan);
            nominal = Some(shifted);
            ego = crate::dynamics::step(ego, u, c.td);
            im = crate::dynamics::step(im, 0.0, c.td);
            b4_final = b4_value(ego.x, ego.v, im.x, &limits, L);
        }
        assert!(b4_final >= -1e-6, "b4 at deadline = {b4_final}");
    }
}
