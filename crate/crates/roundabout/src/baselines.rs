//! Comparison controllers: one-step barrier-constrained tracking of the
//! closed-form reference (OCBF) with FIFO or shortest-time-to-MP sequencing,
//! and an intelligent-driver car-following law with an MP yield rule standing
//! in for a human-driven baseline.

use crate::coordinator::{CavRecord, CoordinatorTables};
use crate::dynamics::Limits;
use crate::error::Error;
use crate::mpc::Neighbors;
use crate::qp::{QpProblem, QpStatus};
use crate::safety::{row_merge_cbf, row_rear_end, row_vlimits, ClassKConfig};
use crate::topology::CzIndex;
use crate::unconstrained::PolyTrajectory;
use serde::{Deserialize, Serialize};

/// Tracking weights for the one-step reference-following QP.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcbfConfig {
    /// Weight on squared speed deviation (control deviation has weight 1).
    pub w_speed: f64,
    pub gammas: ClassKConfig,
}

impl Default for OcbfConfig {
    fn default() -> Self {
        Self { w_speed: 1.0, gammas: ClassKConfig::default() }
    }
}

/// One step of reference tracking under the barrier rows:
/// min (u - u_ref)^2 + w (v_next - v_ref)^2 subject to the h = 1 rows.
///
/// `t` is the time since the reference's start. Returns the applied control
/// and whether the QP was infeasible (maximum braking fallback applied).
#[allow(clippy::too_many_arguments)]
pub fn ocbf_step(
    state: crate::dynamics::VehicleState,
    reference: &PolyTrajectory,
    t: f64,
    neighbors: &Neighbors,
    cfg: &OcbfConfig,
    limits: &Limits,
    seg_len: f64,
    td: f64,
) -> Result<(f64, bool), Error> {
    let (u_ref, v_ref, _) = reference.eval_clamped(reference.t0 + t);

    // (u - u_ref)^2 + w (v + u td - v_ref)^2 expanded over the scalar u
    let w = cfg.w_speed;
    let q = 2.0 * (1.0 + w * td * td);
    let c = -2.0 * (u_ref + w * td * (v_ref - state.v));
    let mut problem = QpProblem::new(1, vec![q], vec![c])?;
    problem.set_box(vec![limits.u_min], vec![limits.u_max])?;

    let v1 = crate::safety::AffineScalar::constant_of(1, state.v);
    let x1 = crate::safety::AffineScalar::constant_of(1, state.x);
    let (upper, lower) = row_vlimits(&v1, 1, limits, &cfg.gammas);
    problem.add_row(upper)?;
    problem.add_row(lower)?;
    if let Some(ip) = &neighbors.i_p {
        problem.add_row(row_rear_end(&v1, &x1, ip.v[0], ip.x[0], 1, limits, &cfg.gammas))?;
    }
    if let Some(im) = &neighbors.i_m {
        problem.add_row(row_merge_cbf(
            &v1,
            &x1,
            im.pred.v[0],
            im.pred.x[0],
            1,
            limits,
            seg_len,
            cfg.gammas.gamma4,
        ))?;
    }

    let solution = crate::qp::solve(&problem)?;
    match solution.status {
        QpStatus::Optimal => Ok((solution.x[0], false)),
        // strongest braking that does not cross the speed floor in one step,
        // so an isolated infeasible step cannot cascade
        QpStatus::Infeasible => {
            Ok((((limits.v_min - state.v) / td).clamp(limits.u_min, limits.u_max), true))
        }
        QpStatus::MaxIter => Err(Error::Solver(
            "one-step tracking QP did not certify".into(),
        )),
    }
}

/// Crossing order by roundabout entry: ascending global index.
pub fn fifo_order(tables: &CoordinatorTables, cz: CzIndex) -> Vec<usize> {
    let mut order: Vec<usize> = tables.table(cz).iter().map(|r| r.idx).collect();
    order.sort_unstable();
    order
}

/// Ranking key for shortest-time-to-MP sequencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdfKey {
    /// (L - x) / v: smaller remaining distance and higher speed rank earlier.
    TimeToMp,
    /// L - x only.
    Distance,
}

/// Crossing order by ascending key, never reordering CAVs within a segment;
/// the two per-class subsequences are merged by comparing their heads (ties
/// toward the smaller index).
pub fn sdf_order(tables: &CoordinatorTables, cz: CzIndex, key: SdfKey) -> Vec<usize> {
    let seg_len = tables.topology().segment_length();
    let score = |r: &CavRecord| match key {
        SdfKey::TimeToMp => (seg_len - r.state.x) / r.state.v.max(0.1),
        SdfKey::Distance => seg_len - r.state.x,
    };
    let (f0, f1) = crate::sequencing::class_subsequences(tables, cz);
    let key_of = |idx: usize| score(tables.find(idx).expect("live idx"));

    let mut out = Vec::with_capacity(f0.len() + f1.len());
    let (mut i, mut j) = (0, 0);
    while i < f0.len() && j < f1.len() {
        let (a, b) = (f0[i], f1[j]);
        let (ka, kb) = (key_of(a), key_of(b));
        let take_a = ka < kb || (ka == kb && a < b);
        if take_a {
            out.push(a);
            i += 1;
        } else {
            out.push(b);
            j += 1;
        }
    }
    out.extend_from_slice(&f0[i..]);
    out.extend_from_slice(&f1[j..]);
    out
}

/// Intelligent-driver parameters for the car-following baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfParams {
    /// Maximum comfortable acceleration (m/s^2).
    pub a_max: f64,
    /// Comfortable braking (m/s^2, positive).
    pub b_comf: f64,
    /// Desired speed (m/s).
    pub v_desired: f64,
    /// Standstill gap (m).
    pub s0: f64,
    /// Desired time headway (s).
    pub t_headway: f64,
    /// Free-acceleration exponent.
    pub exponent: f64,
    /// A conflicting vehicle reaching the MP within this time forces a yield (s).
    pub critical_gap: f64,
    /// Stop-line distance short of the MP when yielding (m).
    pub stop_margin: f64,
}

impl Default for CfParams {
    fn default() -> Self {
        Self {
            a_max: 2.0,
            b_comf: 2.5,
            v_desired: 15.0,
            s0: 2.0,
            t_headway: 1.8,
            exponent: 4.0,
            critical_gap: 4.0,
            stop_margin: 3.0,
        }
    }
}

/// Intelligent-driver acceleration toward a leader `(gap, v_lead)` if any.
pub fn idm_accel(v: f64, leader: Option<(f64, f64)>, p: &CfParams) -> f64 {
    let free = 1.0 - (v.max(0.0) / p.v_desired).powf(p.exponent);
    let interaction = match leader {
        Some((gap, v_lead)) => {
            let dv = v - v_lead;
            let s_star =
                p.s0 + (v * p.t_headway + v * dv / (2.0 * (p.a_max * p.b_comf).sqrt())).max(0.0);
            let s = gap.max(1e-3);
            (s_star / s).powi(2)
        }
        None => 0.0,
    };
    p.a_max * (free - interaction)
}

/// Whether a conflicting vehicle's remaining time to the shared MP is inside
/// the critical gap.
pub fn conflict_within_gap(opp_time_to_mp: f64, p: &CfParams) -> bool {
    opp_time_to_mp >= 0.0 && opp_time_to_mp <= p.critical_gap
}

/// One car-following step: intelligent-driver law toward the leader, with a
/// virtual stopped leader at the MP stop line when yielding.
pub fn car_following_step(
    v: f64,
    dist_to_mp: f64,
    leader: Option<(f64, f64)>,
    must_yield: bool,
    p: &CfParams,
    limits: &Limits,
) -> f64 {
    let mut a = idm_accel(v, leader, p);
    if must_yield {
        let stop_gap = (dist_to_mp - p.stop_margin).max(0.05);
        a = a.min(idm_accel(v, Some((stop_gap, 0.0)), p));
    }
    // never drive backwards
    if v <= 0.0 && a < 0.0 {
        a = 0.0;
    }
    limits.clamp_u(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::five_cav_fixture;
    use crate::dynamics::VehicleState;
    use crate::mpc::HorizonPrediction;
    use crate::topology::{RoundaboutTopology, SegmentClass};
    use crate::unconstrained::solve_unconstrained;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const L: f64 = 60.0;

    fn reference() -> PolyTrajectory {
        solve_unconstrained(0.0, 10.0, 60.0, 8.0 / 9.0).unwrap()
    }

    #[test]
    fn ocbf_tracks_reference_without_neighbors() {
        let r = reference();
        let (u_ref, v_ref, _) = r.eval_clamped(0.0);
        let state = VehicleState::new(0.0, v_ref);
        let (u, fallback) = ocbf_step(
            state,
            &r,
            0.0,
            &Neighbors::none(),
            &OcbfConfig::default(),
            &Limits::default(),
            L,
            0.1,
        )
        .unwrap();
        assert!(!fallback);
        // on-reference: the only pull away from u_ref is the one-step speed
        // tracking term, which vanishes as w td^2 does
        assert!((u - u_ref).abs() < 0.05, "u={u} u_ref={u_ref}");
    }

    #[test]
    fn ocbf_exact_when_speed_term_disabled() {
        let r = reference();
        let (u_ref, v_ref, _) = r.eval_clamped(0.0);
        let cfg = OcbfConfig { w_speed: 0.0, ..OcbfConfig::default() };
        let (u, _) = ocbf_step(
            VehicleState::new(0.0, v_ref),
            &r,
            0.0,
            &Neighbors::none(),
            &cfg,
            &Limits::default(),
            L,
            0.1,
        )
        .unwrap();
        assert!((u - u_ref).abs() < 1e-9);
    }

    #[test]
    fn ocbf_rear_end_row_caps_the_control() {
        // leader at exactly the safe distance with equal speed: the rear-end
        // row reduces to u <= 0 while the reference asks to accelerate
        let r = reference();
        let limits = Limits::default();
        let state = VehicleState::new(0.0, 10.0);
        let lead = VehicleState::new(18.0, 10.0);
        let nb = Neighbors {
            i_p: Some(HorizonPrediction::constant_velocity(lead, 1, 0.1)),
            i_m: None,
        };
        let (u_ref, _, _) = r.eval_clamped(0.0);
        assert!(u_ref > 0.1);
        let (u, fallback) =
            ocbf_step(state, &r, 0.0, &nb, &OcbfConfig::default(), &limits, L, 0.1).unwrap();
        assert!(!fallback);
        assert!(u < u_ref);
        assert!(u.abs() < 1e-7, "row should be tight at u = 0, got {u}");
    }

    #[test]
    fn ocbf_tracks_terminal_speed_past_reference_end() {
        let r = reference();
        let t_past = r.duration() + 5.0;
        let (_, vf, _) = r.eval_clamped(r.tf);
        let (u, _) = ocbf_step(
            VehicleState::new(55.0, vf),
            &r,
            t_past,
            &Neighbors::none(),
            &OcbfConfig::default(),
            &Limits::default(),
            L,
            0.1,
        )
        .unwrap();
        assert!(u.abs() < 1e-9, "terminal tracking should coast, got {u}");
    }

    #[test]
    fn ocbf_infeasible_applies_max_braking() {
        // stopped leader far inside the unsafe distance makes the rear-end
        // row unsatisfiable within the control bounds
        let limits = Limits::default();
        let r = reference();
        let lead = VehicleState::new(5.0, 0.0);
        let nb = Neighbors {
            i_p: Some(HorizonPrediction::constant_velocity(lead, 1, 0.1)),
            i_m: None,
        };
        let (u, fallback) = ocbf_step(
            VehicleState::new(0.0, 10.0),
            &r,
            0.0,
            &nb,
            &OcbfConfig::default(),
            &limits,
            L,
            0.1,
        )
        .unwrap();
        assert!(fallback);
        assert_eq!(u, limits.u_min);
    }

    #[test]
    fn fifo_is_index_order() {
        let tables = five_cav_fixture();
        assert_eq!(fifo_order(&tables, 1), vec![0, 1, 4]);
        assert_eq!(fifo_order(&tables, 2), vec![2, 3]);
        let empty = CoordinatorTables::new(RoundaboutTopology::new(3, 60.0).unwrap());
        assert!(fifo_order(&empty, 1).is_empty());
    }

    #[test]
    fn fifo_order_survives_exit_renumbering() {
        let mut tables = five_cav_fixture();
        let before = fifo_order(&tables, 1); // [0, 1, 4]
        tables.on_exit(0).unwrap();
        let after = fifo_order(&tables, 1); // [0, 3] (old 1 and 4)
        // relative order of survivors is unchanged
        let survivors: Vec<usize> = before[1..].iter().map(|&i| i - 1).collect();
        assert_eq!(after, survivors);
    }

    #[test]
    fn sdf_prefers_smaller_distance() {
        let mut tables = CoordinatorTables::new(RoundaboutTopology::new(3, 60.0).unwrap());
        tables
            .insert_record(0, VehicleState::new(10.0, 10.0), 3, 2, 1, SegmentClass::Inner, 0.0)
            .unwrap();
        tables
            .insert_record(1, VehicleState::new(50.0, 10.0), 1, 2, 1, SegmentClass::Entry, 0.1)
            .unwrap();
        assert_eq!(sdf_order(&tables, 1, SdfKey::TimeToMp), vec![1, 0]);
    }

    #[test]
    fn sdf_prefers_faster_at_equal_distance() {
        let mut tables = CoordinatorTables::new(RoundaboutTopology::new(3, 60.0).unwrap());
        tables
            .insert_record(0, VehicleState::new(30.0, 10.0), 3, 2, 1, SegmentClass::Inner, 0.0)
            .unwrap();
        tables
            .insert_record(1, VehicleState::new(30.0, 20.0), 1, 2, 1, SegmentClass::Entry, 0.1)
            .unwrap();
        assert_eq!(sdf_order(&tables, 1, SdfKey::TimeToMp), vec![1, 0]);
        // pure-distance keying ties instead, resolved toward the smaller idx
        assert_eq!(sdf_order(&tables, 1, SdfKey::Distance), vec![0, 1]);
    }

    #[test]
    fn sdf_never_reorders_within_a_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut tables = CoordinatorTables::new(RoundaboutTopology::new(3, 60.0).unwrap());
            let n0 = rng.gen_range(0..4usize);
            let n1 = rng.gen_range(0..4usize);
            let mut idx = 0;
            for _ in 0..n0 {
                tables
                    .insert_record(
                        idx,
                        VehicleState::new(rng.gen_range(0.0..60.0), rng.gen_range(5.0..30.0)),
                        3,
                        2,
                        1,
                        SegmentClass::Inner,
                        0.0,
                    )
                    .unwrap();
                idx += 1;
            }
            for _ in 0..n1 {
                tables
                    .insert_record(
                        idx,
                        VehicleState::new(rng.gen_range(0.0..60.0), rng.gen_range(5.0..30.0)),
                        1,
                        2,
                        1,
                        SegmentClass::Entry,
                        0.0,
                    )
                    .unwrap();
                idx += 1;
            }
            let order = sdf_order(&tables, 1, SdfKey::TimeToMp);
            let (f0, f1) = crate::sequencing::class_subsequences(&tables, 1);
            let sub0: Vec<usize> =
                order.iter().copied().filter(|i| f0.contains(i)).collect();
            let sub1: Vec<usize> =
                order.iter().copied().filter(|i| f1.contains(i)).collect();
            assert_eq!(sub0, f0);
            assert_eq!(sub1, f1);
        }
    }

    #[test]
    fn idm_accelerates_on_free_road() {
        let p = CfParams::default();
        let a = idm_accel(5.0, None, &p);
        assert!(a > 0.5);
        // equilibrium at desired speed
        assert!(idm_accel(p.v_desired, None, &p).abs() < 1e-12);
    }

    #[test]
    fn idm_never_collides_with_stopped_leader() {
        let p = CfParams::default();
        let limits = Limits { v_min: 0.0, ..Limits::default() };
        let mut x = 0.0;
        let mut v = 14.0;
        let lead_x = 120.0;
        for _ in 0..1000 {
            let gap = lead_x - x;
            let u = car_following_step(v, f64::INFINITY, Some((gap, 0.0)), false, &p, &limits);
            let s = crate::dynamics::step(VehicleState::new(x, v), u, 0.1);
            x = s.x;
            v = s.v.max(0.0);
            assert!(lead_x - x > 0.0, "gap went nonpositive");
        }
        assert!(v < 0.2, "should be (nearly) stopped behind the leader");
    }

    #[test]
    fn yield_rule_brakes_toward_stop_line() {
        let p = CfParams::default();
        let limits = Limits { v_min: 0.0, ..Limits::default() };
        assert!(conflict_within_gap(2.0, &p));
        assert!(!conflict_within_gap(10.0, &p));
        let free = car_following_step(10.0, 20.0, None, false, &p, &limits);
        let yielding = car_following_step(10.0, 20.0, None, true, &p, &limits);
        assert!(yielding < free);
        assert!(yielding < 0.0);
    }
}
