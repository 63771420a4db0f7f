//! Crossing-sequence enumeration and optimal selection for one CZ.
//!
//! A sequence is the projected MP-crossing order of the CAVs in one CZ's
//! table. Overtaking within a segment is excluded, so the candidates are
//! exactly the interleavings of the ring-segment and entry-segment
//! subsequences taken in on-road order. Each candidate is costed by planning
//! its CAVs in order with the horizon planner and summing their costs.

use crate::coordinator::{CavRecord, CoordinatorTables, NeighborAssignment};
use crate::dynamics::Limits;
use crate::error::Error;
use crate::mpc::{
    plan_cav, time_to_mp, HorizonPrediction, InfeasibleReason, MergeNeighbor, MpcConfig,
    Neighbors, PlanOutcome, PlanResult,
};
use crate::topology::CzIndex;
use std::collections::BTreeMap;

/// Cost comparisons within this tolerance count as ties, resolved toward the
/// lexicographically smallest index list.
pub const COST_TIE_TOL: f64 = 1e-9;

/// A fully costed candidate sequence.
#[derive(Debug, Clone)]
pub struct SequenceEvaluation {
    pub sequence: Vec<usize>,
    pub total_cost: f64,
    /// Plans in sequence order, keyed by CAV index.
    pub plans: Vec<(usize, PlanResult)>,
    /// The neighbor assignment the plans were built against.
    pub assignments: Vec<NeighborAssignment>,
}

/// Result of optimal selection over all candidates.
#[derive(Debug, Clone)]
pub enum SelectOutcome {
    Selected(SequenceEvaluation),
    /// Every candidate was rejected; carries one rejection per candidate.
    AllInfeasible(Vec<(Vec<usize>, usize, InfeasibleReason)>),
}

/// Shared planning inputs.
pub struct PlanContext<'a> {
    pub cfg: &'a MpcConfig,
    pub limits: &'a Limits,
    /// Retained shifted nominal controls per CAV, for the frozen merging term.
    pub nominals: &'a BTreeMap<usize, Vec<f64>>,
}

/// All interleavings of two subsequences, each preserving internal order.
pub fn interleavings(f0: &[usize], f1: &[usize]) -> Vec<Vec<usize>> {
    fn rec(f0: &[usize], f1: &[usize], acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if f0.is_empty() && f1.is_empty() {
            out.push(acc.clone());
            return;
        }
        if let Some((&head, rest)) = f0.split_first() {
            acc.push(head);
            rec(rest, f1, acc, out);
            acc.pop();
        }
        if let Some((&head, rest)) = f1.split_first() {
            acc.push(head);
            rec(f0, rest, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    rec(f0, f1, &mut Vec::new(), &mut out);
    out
}

/// The per-class subsequences of a CZ table in on-road order (closest to the
/// MP first; ties toward the smaller index).
pub fn class_subsequences(tables: &CoordinatorTables, cz: CzIndex) -> (Vec<usize>, Vec<usize>) {
    let mut split: [Vec<&CavRecord>; 2] = [Vec::new(), Vec::new()];
    for r in tables.table(cz) {
        split[r.class.as_u8() as usize].push(r);
    }
    for part in &mut split {
        part.sort_by(|a, b| {
            b.state
                .x
                .partial_cmp(&a.state.x)
                .unwrap()
                .then(a.idx.cmp(&b.idx))
        });
    }
    let [inner, entry] = split;
    (
        inner.iter().map(|r| r.idx).collect(),
        entry.iter().map(|r| r.idx).collect(),
    )
}

/// All candidate crossing sequences for one CZ. An empty table yields the
/// single empty sequence.
pub fn enumerate_feasible(tables: &CoordinatorTables, cz: CzIndex) -> Vec<Vec<usize>> {
    let (f0, f1) = class_subsequences(tables, cz);
    interleavings(&f0, &f1)
}

/// Builds the neighbor context for one CAV given the plans already computed
/// in this sequence evaluation (or, between events, in this simulation step).
pub fn build_neighbors(
    tables: &CoordinatorTables,
    rec: &CavRecord,
    assignment: &NeighborAssignment,
    plans: &BTreeMap<usize, PlanResult>,
    ctx: &PlanContext,
) -> Neighbors {
    let h = ctx.cfg.horizon;
    let td = ctx.cfg.td;
    let seg_len = tables.topology().segment_length();

    let i_p = assignment.i_p.map(|ip| {
        let ip_rec = tables.find(ip).expect("assignment references live CAV");
        if ip_rec.current_cz == rec.current_cz {
            match plans.get(&ip) {
                Some(p) => HorizonPrediction::from_plan(ip_rec.state, &p.x, &p.v, h, td),
                None => HorizonPrediction::constant_velocity(ip_rec.state, h, td),
            }
        } else {
            // cross-CZ leader: unroll into the ego segment frame
            let offset = tables
                .topology()
                .cz_offset(rec.current_cz, ip_rec.current_cz)
                .expect("valid CZs") as f64;
            HorizonPrediction::constant_velocity(ip_rec.state, h, td).shifted(offset * seg_len)
        }
    });

    let i_m = assignment.i_m.map(|im| {
        let im_rec = tables.find(im).expect("assignment references live CAV");
        let plan = plans.get(&im);
        let pred = match plan {
            Some(p) => HorizonPrediction::from_plan(im_rec.state, &p.x, &p.v, h, td),
            None => HorizonPrediction::constant_velocity(im_rec.state, h, td),
        };
        MergeNeighbor {
            pred,
            state: im_rec.state,
            t_m: time_to_mp(im_rec.state, plan, seg_len, td),
        }
    });

    Neighbors { i_p, i_m }
}

/// Plans every CAV of `sequence` in order and sums the costs. A single
/// rejection rejects the whole sequence, reported as (CAV index, reason).
pub fn evaluate_sequence(
    tables: &CoordinatorTables,
    cz: CzIndex,
    sequence: &[usize],
    ctx: &PlanContext,
) -> Result<Result<SequenceEvaluation, (usize, InfeasibleReason)>, Error> {
    let assignments = tables.assign_neighbors(cz, sequence)?;
    let seg_len = tables.topology().segment_length();
    let mut plans: BTreeMap<usize, PlanResult> = BTreeMap::new();
    let mut ordered = Vec::with_capacity(sequence.len());
    let mut total = 0.0;

    for (pos, &idx) in sequence.iter().enumerate() {
        let rec = tables.find(idx).expect("sequence references live CAV");
        let neighbors = build_neighbors(tables, rec, &assignments[pos], &plans, ctx);
        let nominal = ctx.nominals.get(&idx).map(Vec::as_slice);
        let outcome = plan_cav(
            rec.state,
            rec.remaining_distance(seg_len),
            &neighbors,
            nominal,
            ctx.cfg,
            ctx.limits,
            seg_len,
        )?;
        match outcome {
            PlanOutcome::Plan(plan) => {
                total += plan.cost;
                ordered.push((idx, plan.clone()));
                plans.insert(idx, plan);
            }
            PlanOutcome::Infeasible(reason) => return Ok(Err((idx, reason))),
        }
    }

    Ok(Ok(SequenceEvaluation {
        sequence: sequence.to_vec(),
        total_cost: total,
        plans: ordered,
        assignments,
    }))
}

/// Evaluates every candidate sequence and returns the feasible one with the
/// least total cost (ties toward the lexicographically smallest index list).
pub fn select_optimal(
    tables: &CoordinatorTables,
    cz: CzIndex,
    ctx: &PlanContext,
) -> Result<SelectOutcome, Error> {
    let candidates = enumerate_feasible(tables, cz);
    let mut best: Option<SequenceEvaluation> = None;
    let mut rejections = Vec::new();

    for f in candidates {
        match evaluate_sequence(tables, cz, &f, ctx)? {
            Ok(eval) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        eval.total_cost < b.total_cost - COST_TIE_TOL
                            || ((eval.total_cost - b.total_cost).abs() <= COST_TIE_TOL
                                && eval.sequence < b.sequence)
                    }
                };
                if better {
                    best = Some(eval);
                }
            }
            Err((idx, reason)) => rejections.push((f, idx, reason)),
        }
    }

    Ok(match best {
        Some(eval) => SelectOutcome::Selected(eval),
        None => SelectOutcome::AllInfeasible(rejections),
    })
}
