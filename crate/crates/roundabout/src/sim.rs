//! Closed-loop simulation: seeded Poisson arrivals, per-step control and
//! integration, event-driven resequencing, and metrics accumulation.
//!
//! The engine is single-threaded and fully deterministic given the seed: all
//! per-step iteration is in ascending index order and all containers are
//! ordered.

use crate::baselines::{car_following_step, conflict_within_gap, fifo_order, ocbf_step, sdf_order};
use crate::config::{Controller, ScenarioConfig};
use crate::coordinator::{CoordinatorTables, NeighborAssignment};
use crate::dynamics::VehicleState;
use crate::error::Error;
use crate::metrics::{record_energy, MetricsSummary, TripRecord};
use crate::mpc::{plan_cav, receding_step, MpcConfig, PlanOutcome, PlanResult};
use crate::sequencing::{build_neighbors, select_optimal, PlanContext, SelectOutcome};
use crate::topology::{RoundaboutTopology, SegmentClass};
use crate::unconstrained::{solve_unconstrained, PolyTrajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

/// One scheduled roundabout entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub t: f64,
    pub entry_cz: usize,
    pub exit_cz: usize,
}

/// Seeded Poisson arrival schedule: independent exponential interarrivals per
/// origin, destinations uniform over the admissible exits.
pub fn generate_arrivals(cfg: &ScenarioConfig) -> Vec<Arrival> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    for origin in 1..=cfg.n_cz {
        let rate = cfg.arrival_rates[origin - 1] / 3600.0;
        if rate <= 0.0 {
            continue;
        }
        let exits: Vec<usize> = (1..=cfg.n_cz)
            .filter(|&e| cfg.allow_full_loop || e != origin)
            .collect();
        let mut t = 0.0;
        loop {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            t += -u.ln() / rate;
            if t >= cfg.duration {
                break;
            }
            let exit_cz = exits[rng.gen_range(0..exits.len())];
            trace.push(Arrival { t, entry_cz: origin, exit_cz });
        }
    }
    trace.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap().then(a.entry_cz.cmp(&b.entry_cz)));
    trace
}

/// FNV-1a hash of the canonical trace text, for cross-run comparison.
pub fn trace_hash(trace: &[Arrival]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for a in trace {
        for b in format!("{:.6};{};{}\n", a.t, a.entry_cz, a.exit_cz).bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// One CAV-step of the trajectory log. State is at the step start, the
/// control is what was applied over the step, and `unsafe_flag` reports a
/// rear-end margin violation at the step end.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub t: f64,
    pub cav: u64,
    pub cz: usize,
    pub class: u8,
    pub x: f64,
    pub v: f64,
    pub u: f64,
    pub seq_id: u64,
    pub unsafe_flag: bool,
    pub fallback: bool,
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: MetricsSummary,
    pub log: Vec<LogRow>,
    pub trips: Vec<TripRecord>,
    pub trace: Vec<Arrival>,
}

/// Runs the scenario with a freshly generated arrival schedule.
pub fn run(cfg: &ScenarioConfig) -> Result<RunResult, Error> {
    let trace = generate_arrivals(cfg);
    run_with_trace(cfg, &trace)
}

/// Runs the scenario against a fixed arrival schedule (shared across
/// controllers for like-for-like comparisons).
pub fn run_with_trace(cfg: &ScenarioConfig, trace: &[Arrival]) -> Result<RunResult, Error> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg.clone(), trace.to_vec())?;
    sim.run()?;
    Ok(sim.finish())
}

struct Sim {
    cfg: ScenarioConfig,
    mpc: MpcConfig,
    tables: CoordinatorTables,
    trace: Vec<Arrival>,
    trace_pos: usize,
    queues: Vec<VecDeque<Arrival>>,
    /// Stable id of the CAV currently holding each dense index.
    uids: Vec<u64>,
    next_uid: u64,
    trips: BTreeMap<u64, TripRecord>,
    /// Actual roundabout entry time per live CAV (reference clock).
    ref_start: BTreeMap<u64, f64>,
    references: BTreeMap<u64, PolyTrajectory>,
    nominals: BTreeMap<u64, Vec<f64>>,
    seq: Vec<Vec<usize>>,
    seq_id: Vec<u64>,
    time: f64,
    events_pending: bool,
    infeasible_count: usize,
    unsafe_count: usize,
    fallback_steps: usize,
    qp_nanos: u128,
    qp_solves: u64,
    log: Vec<LogRow>,
}

impl Sim {
    fn new(cfg: ScenarioConfig, trace: Vec<Arrival>) -> Result<Self, Error> {
        let topo = RoundaboutTopology::new(cfg.n_cz, cfg.segment_length)?;
        let mpc = cfg.mpc_config();
        let n = cfg.n_cz;
        Ok(Self {
            cfg,
            mpc,
            tables: CoordinatorTables::new(topo),
            trace,
            trace_pos: 0,
            queues: vec![VecDeque::new(); n],
            uids: Vec::new(),
            next_uid: 0,
            trips: BTreeMap::new(),
            ref_start: BTreeMap::new(),
            references: BTreeMap::new(),
            nominals: BTreeMap::new(),
            seq: vec![Vec::new(); n],
            seq_id: vec![0; n],
            time: 0.0,
            events_pending: false,
            infeasible_count: 0,
            unsafe_count: 0,
            fallback_steps: 0,
            qp_nanos: 0,
            qp_solves: 0,
            log: Vec::new(),
        })
    }

    fn uid_of(&self, idx: usize) -> u64 {
        self.uids[idx]
    }

    fn run(&mut self) -> Result<(), Error> {
        let steps = (self.cfg.duration / self.cfg.td).round() as usize;
        for _ in 0..steps {
            self.admit_arrivals();
            self.refresh_sequences()?;
            let controls = self.compute_controls()?;
            self.integrate_and_log(&controls);
            self.check_unsafe();
            self.dispatch_events()?;
            self.time += self.cfg.td;
        }
        Ok(())
    }

    /// Moves due arrivals into the origin queues and admits queue heads while
    /// the entry gap condition holds.
    fn admit_arrivals(&mut self) {
        while self.trace_pos < self.trace.len() && self.trace[self.trace_pos].t <= self.time + 1e-9 {
            let a = self.trace[self.trace_pos];
            self.queues[a.entry_cz - 1].push_back(a);
            self.trace_pos += 1;
        }
        for origin in 1..=self.cfg.n_cz {
            while let Some(&head) = self.queues[origin - 1].front() {
                if !self.tables.can_spawn(origin, self.cfg.v_init, &self.cfg.limits) {
                    break;
                }
                self.queues[origin - 1].pop_front();
                let state = VehicleState::new(0.0, self.cfg.v_init);
                let idx = self
                    .tables
                    .on_arrival(origin, head.exit_cz, state, self.time)
                    .expect("arrival at x = 0");
                debug_assert_eq!(idx, self.uids.len());
                let uid = self.next_uid;
                self.next_uid += 1;
                self.uids.push(uid);
                let entry_time = if self.cfg.count_queue_delay { head.t } else { self.time };
                self.trips.insert(
                    uid,
                    TripRecord {
                        cav: uid,
                        entry_cz: origin,
                        exit_cz: head.exit_cz,
                        entry_time,
                        exit_time: None,
                        energy: 0.0,
                    },
                );
                self.ref_start.insert(uid, self.time);
                self.events_pending = true;
            }
        }
    }

    /// Event-driven sequence maintenance. The joint controller reselects via
    /// exhaustive evaluation; the baselines reorder every step by their rule.
    fn refresh_sequences(&mut self) -> Result<(), Error> {
        match self.cfg.controller {
            Controller::MpcClbf => {
                if !self.events_pending {
                    return Ok(());
                }
                self.events_pending = false;
                let nominals_by_idx = self.nominals_by_idx();
                for cz in 1..=self.cfg.n_cz {
                    let ctx = PlanContext {
                        cfg: &self.mpc,
                        limits: &self.cfg.limits,
                        nominals: &nominals_by_idx,
                    };
                    let started = Instant::now();
                    let outcome = match select_optimal(&self.tables, cz, &ctx) {
                        Ok(o) => o,
                        Err(e) => {
                            // solver anomaly: keep the previous order rather
                            // than aborting the run
                            log::warn!(
                                "t={:.1}: sequence selection failed for CZ {cz}: {e}",
                                self.time
                            );
                            SelectOutcome::AllInfeasible(Vec::new())
                        }
                    };
                    self.qp_nanos += started.elapsed().as_nanos();
                    match outcome {
                        SelectOutcome::Selected(eval) => {
                            self.qp_solves += eval.plans.len().max(1) as u64;
                            self.tables.commit_neighbors(cz, &eval.assignments);
                            if self.seq[cz - 1] != eval.sequence {
                                self.seq[cz - 1] = eval.sequence;
                                self.seq_id[cz - 1] += 1;
                            }
                        }
                        SelectOutcome::AllInfeasible(rejections) => {
                            self.infeasible_count += 1;
                            self.qp_solves += rejections.len().max(1) as u64;
                            log::warn!(
                                "t={:.1}: no feasible sequence for CZ {cz}; retaining previous order",
                                self.time
                            );
                            let fallback = self.fallback_sequence(cz);
                            let assignments = self.tables.assign_neighbors(cz, &fallback)?;
                            self.tables.commit_neighbors(cz, &assignments);
                            if self.seq[cz - 1] != fallback {
                                self.seq[cz - 1] = fallback;
                                self.seq_id[cz - 1] += 1;
                            }
                        }
                    }
                }
            }
            Controller::OcbfFifo | Controller::CfBaseline => {
                self.events_pending = false;
                for cz in 1..=self.cfg.n_cz {
                    let order = fifo_order(&self.tables, cz);
                    self.install_sequence(cz, order)?;
                }
            }
            Controller::OcbfSdf => {
                self.events_pending = false;
                for cz in 1..=self.cfg.n_cz {
                    let order = sdf_order(&self.tables, cz, self.cfg.sdf_key);
                    self.install_sequence(cz, order)?;
                }
            }
        }
        Ok(())
    }

    fn install_sequence(&mut self, cz: usize, order: Vec<usize>) -> Result<(), Error> {
        let assignments = self.tables.assign_neighbors(cz, &order)?;
        self.tables.commit_neighbors(cz, &assignments);
        if self.seq[cz - 1] != order {
            self.seq[cz - 1] = order;
            self.seq_id[cz - 1] += 1;
        }
        Ok(())
    }

    /// Previous order restricted to the CZ's live indices, with newcomers
    /// appended in index order.
    fn fallback_sequence(&self, cz: usize) -> Vec<usize> {
        let live: Vec<usize> = self.tables.table(cz).iter().map(|r| r.idx).collect();
        let mut seq: Vec<usize> =
            self.seq[cz - 1].iter().copied().filter(|i| live.contains(i)).collect();
        let mut rest: Vec<usize> =
            live.into_iter().filter(|i| !seq.contains(i)).collect();
        rest.sort_unstable();
        seq.extend(rest);
        seq
    }

    fn nominals_by_idx(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut map = BTreeMap::new();
        for (idx, uid) in self.uids.iter().enumerate() {
            if let Some(n) = self.nominals.get(uid) {
                map.insert(idx, n.clone());
            }
        }
        map
    }

    /// Per-CAV applied controls for this step: (idx, u, fallback flag).
    fn compute_controls(&mut self) -> Result<Vec<(usize, f64, bool)>, Error> {
        match self.cfg.controller {
            Controller::MpcClbf => self.mpc_controls(),
            Controller::OcbfFifo | Controller::OcbfSdf => self.ocbf_controls(),
            Controller::CfBaseline => Ok(self.cf_controls()),
        }
    }

    /// Replans every CAV in sequence order with the sequence held fixed;
    /// later CAVs consume the fresh plans of earlier ones.
    fn mpc_controls(&mut self) -> Result<Vec<(usize, f64, bool)>, Error> {
        let seg_len = self.cfg.segment_length;
        let nominals_by_idx = self.nominals_by_idx();
        let mut fresh: BTreeMap<usize, PlanResult> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.uids.len());
        for cz in 1..=self.cfg.n_cz {
            for pos in 0..self.seq[cz - 1].len() {
                let idx = self.seq[cz - 1][pos];
                let rec = self.tables.find(idx).expect("sequence indices are live");
                let assignment = NeighborAssignment { idx, i_p: rec.i_p, i_m: rec.i_m };
                let ctx = PlanContext {
                    cfg: &self.mpc,
                    limits: &self.cfg.limits,
                    nominals: &nominals_by_idx,
                };
                let neighbors = build_neighbors(&self.tables, rec, &assignment, &fresh, &ctx);
                let uid = self.uid_of(idx);
                let nominal = nominals_by_idx.get(&idx).map(Vec::as_slice);
                let started = Instant::now();
                let outcome = plan_cav(
                    rec.state,
                    rec.remaining_distance(seg_len),
                    &neighbors,
                    nominal,
                    &self.mpc,
                    &self.cfg.limits,
                    seg_len,
                );
                self.qp_nanos += started.elapsed().as_nanos();
                self.qp_solves += 1;
                match outcome {
                    Ok(PlanOutcome::Plan(plan)) => {
                        let (u, shifted) = receding_step(&plan);
                        self.nominals.insert(uid, shifted);
                        fresh.insert(idx, plan);
                        out.push((idx, u, false));
                    }
                    Ok(PlanOutcome::Infeasible(reason)) => {
                        log::debug!(
                            "t={:.1}: CAV {uid} plan infeasible ({reason:?}); braking fallback",
                            self.time
                        );
                        let u = self.braking_fallback(rec.state.v);
                        self.nominals.remove(&uid);
                        self.fallback_steps += 1;
                        out.push((idx, u, true));
                    }
                    Err(e) => {
                        log::warn!("t={:.1}: CAV {uid} solver anomaly: {e}", self.time);
                        let u = self.braking_fallback(rec.state.v);
                        self.nominals.remove(&uid);
                        self.fallback_steps += 1;
                        out.push((idx, u, true));
                    }
                }
            }
        }
        out.sort_by_key(|&(idx, _, _)| idx);
        Ok(out)
    }

    /// Strongest braking that does not cross the speed floor within one step.
    fn braking_fallback(&self, v: f64) -> f64 {
        let l = &self.cfg.limits;
        ((l.v_min - v) / self.cfg.td).clamp(l.u_min, l.u_max)
    }

    fn ocbf_controls(&mut self) -> Result<Vec<(usize, f64, bool)>, Error> {
        let seg_len = self.cfg.segment_length;
        let one_step = MpcConfig { horizon: 1, ..self.mpc };
        let empty_plans: BTreeMap<usize, PlanResult> = BTreeMap::new();
        let empty_nominals: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.uids.len());
        for cz in 1..=self.cfg.n_cz {
            for pos in 0..self.seq[cz - 1].len() {
                let idx = self.seq[cz - 1][pos];
                let rec = self.tables.find(idx).expect("sequence indices are live");
                let uid = self.uid_of(idx);
                let assignment = NeighborAssignment { idx, i_p: rec.i_p, i_m: rec.i_m };
                let ctx = PlanContext {
                    cfg: &one_step,
                    limits: &self.cfg.limits,
                    nominals: &empty_nominals,
                };
                let neighbors =
                    build_neighbors(&self.tables, rec, &assignment, &empty_plans, &ctx);
                let state = rec.state;
                let route_len = rec.route.len();
                let reference = self.reference_for(uid, state.v, route_len)?;
                let t_ref = self.time - self.ref_start[&uid];
                let started = Instant::now();
                let result = ocbf_step(
                    state,
                    &reference,
                    t_ref,
                    &neighbors,
                    &self.cfg.ocbf,
                    &self.cfg.limits,
                    seg_len,
                    self.cfg.td,
                );
                self.qp_nanos += started.elapsed().as_nanos();
                self.qp_solves += 1;
                match result {
                    Ok((u, fallback)) => {
                        if fallback {
                            self.fallback_steps += 1;
                        }
                        out.push((idx, u, fallback));
                    }
                    Err(e) => {
                        log::warn!("t={:.1}: CAV {uid} solver anomaly: {e}", self.time);
                        self.fallback_steps += 1;
                        out.push((idx, self.braking_fallback(state.v), true));
                    }
                }
            }
        }
        out.sort_by_key(|&(idx, _, _)| idx);
        Ok(out)
    }

    fn reference_for(&mut self, uid: u64, v_now: f64, route_len: usize) -> Result<PolyTrajectory, Error> {
        if let Some(r) = self.references.get(&uid) {
            return Ok(*r);
        }
        let distance = route_len as f64 * self.cfg.segment_length;
        let r = solve_unconstrained(0.0, v_now.max(1e-3), distance, self.cfg.beta())?;
        self.references.insert(uid, r);
        Ok(r)
    }

    fn cf_controls(&mut self) -> Vec<(usize, f64, bool)> {
        let seg_len = self.cfg.segment_length;
        let topo = self.tables.topology().clone();
        let mut out = Vec::with_capacity(self.uids.len());
        for rec in self.tables.iter_live() {
            let leader = rec.i_p.and_then(|ip| self.tables.find(ip)).map(|lead| {
                let offset = if lead.current_cz == rec.current_cz {
                    0.0
                } else {
                    topo.cz_offset(rec.current_cz, lead.current_cz).unwrap_or(0) as f64
                };
                (lead.state.x + offset * seg_len - rec.state.x, lead.state.v)
            });
            // ring traffic has priority: an entering vehicle yields when a
            // ring vehicle in the same CZ is about to reach the shared MP
            let must_yield = rec.class == SegmentClass::Entry
                && self.tables.table(rec.current_cz).iter().any(|other| {
                    other.class == SegmentClass::Inner
                        && conflict_within_gap(
                            (seg_len - other.state.x) / other.state.v.max(0.1),
                            &self.cfg.cf,
                        )
                });
            let u = car_following_step(
                rec.state.v,
                seg_len - rec.state.x,
                leader,
                must_yield,
                &self.cfg.cf,
                &self.cfg.limits,
            );
            out.push((rec.idx, u, false));
        }
        out
    }

    /// Applies the controls, accumulates energy, and logs one row per CAV.
    fn integrate_and_log(&mut self, controls: &[(usize, f64, bool)]) {
        for &(idx, u, fallback) in controls {
            let uid = self.uid_of(idx);
            let cz;
            let class;
            let pre;
            {
                let rec = self.tables.find(idx).expect("control for live CAV");
                cz = rec.current_cz;
                class = rec.class;
                pre = rec.state;
            }
            self.log.push(LogRow {
                t: self.time,
                cav: uid,
                cz,
                class: class.as_u8(),
                x: pre.x,
                v: pre.v,
                u,
                seq_id: self.seq_id[cz - 1],
                unsafe_flag: false,
                fallback,
            });
            let mut next = crate::dynamics::step(pre, u, self.cfg.td);
            if next.v < 0.0 {
                // exact stop within the step (car-following near stop lines)
                next.v = 0.0;
                next.x = pre.x + pre.v * pre.v / (2.0 * u.abs().max(1e-9));
            }
            self.tables.find_mut(idx).unwrap().state = next;
            if let Some(trip) = self.trips.get_mut(&uid) {
                trip.energy += record_energy(u, self.cfg.td);
            }
        }
    }

    /// Per-step rear-end margin check against the committed i_p column,
    /// evaluated on the post-integration states.
    fn check_unsafe(&mut self) {
        let seg_len = self.cfg.segment_length;
        let l = &self.cfg.limits;
        let mut flagged = Vec::new();
        for rec in self.tables.iter_live() {
            let Some(ip) = rec.i_p else { continue };
            let Some(lead) = self.tables.find(ip) else { continue };
            let offset = if lead.current_cz == rec.current_cz {
                0
            } else {
                self.tables
                    .topology()
                    .cz_offset(rec.current_cz, lead.current_cz)
                    .unwrap_or(0)
            };
            let z = lead.state.x + offset as f64 * seg_len - rec.state.x;
            if z < l.phi * rec.state.v + l.delta - 1e-9 {
                self.unsafe_count += 1;
                flagged.push(self.uid_of(rec.idx));
            }
        }
        if !flagged.is_empty() {
            let n = self.tables.n_live();
            for row in self.log.iter_mut().rev().take(n) {
                if row.t == self.time && flagged.contains(&row.cav) {
                    row.unsafe_flag = true;
                }
            }
        }
    }

    /// End-of-step MP crossings: exits first, then CZ transitions, both in
    /// ascending index order.
    fn dispatch_events(&mut self) -> Result<(), Error> {
        let seg_len = self.cfg.segment_length;
        loop {
            let exit_idx = self
                .tables
                .iter_live()
                .filter(|r| r.state.x >= seg_len && r.at_final_cz())
                .map(|r| r.idx)
                .next();
            let Some(idx) = exit_idx else { break };
            let uid = self.uids.remove(idx);
            self.tables.on_exit(idx)?;
            self.remap_sequences_after_exit(idx);
            let exit_time = self.time + self.cfg.td;
            if let Some(trip) = self.trips.get_mut(&uid) {
                trip.exit_time = Some(exit_time);
            }
            self.references.remove(&uid);
            self.ref_start.remove(&uid);
            self.nominals.remove(&uid);
            self.events_pending = true;
        }

        let transitions: Vec<(usize, f64)> = self
            .tables
            .iter_live()
            .filter(|r| r.state.x >= seg_len && !r.at_final_cz())
            .map(|r| (r.idx, r.state.x - seg_len))
            .collect();
        for (idx, overshoot) in transitions {
            self.tables.on_cz_transition(idx, overshoot)?;
            self.events_pending = true;
        }
        if self.events_pending {
            // transitions and exits invalidate committed orders; the next
            // refresh rebuilds them from live tables
            for cz in 1..=self.cfg.n_cz {
                let live: Vec<usize> = self.tables.table(cz).iter().map(|r| r.idx).collect();
                self.seq[cz - 1].retain(|i| live.contains(i));
            }
        }
        Ok(())
    }

    fn remap_sequences_after_exit(&mut self, removed: usize) {
        for seq in &mut self.seq {
            seq.retain(|&i| i != removed);
            for i in seq.iter_mut() {
                if *i > removed {
                    *i -= 1;
                }
            }
        }
    }

    fn finish(self) -> RunResult {
        let trips: Vec<TripRecord> = self.trips.into_values().collect();
        let queued: usize = self.queues.iter().map(VecDeque::len).sum::<usize>()
            + (self.trace.len() - self.trace_pos);
        let avg_qp_ms = if self.qp_solves > 0 {
            self.qp_nanos as f64 / self.qp_solves as f64 / 1e6
        } else {
            0.0
        };
        let summary = MetricsSummary::from_trips(
            self.cfg.controller.name(),
            self.cfg.horizon,
            self.cfg.seed,
            self.cfg.duration,
            self.cfg.beta(),
            &trips,
            queued,
            self.infeasible_count,
            self.unsafe_count,
            self.fallback_steps,
            trace_hash(&self.trace),
            avg_qp_ms,
        );
        RunResult { summary, log: self.log, trips, trace: self.trace }
    }
}
