//! Per-CZ coordinator tables and the event-driven update protocol.
//!
//! Indices are global and 0-based: a new arrival gets index `N(t)` (the live
//! count), and every exit renumbers all larger indices down by one, in every
//! table and in the neighbor columns.

use crate::dynamics::{Limits, VehicleState};
use crate::error::Error;
use crate::topology::{make_route, CzIndex, RoundaboutTopology, Route, SegmentClass};

/// One coordinator-table row.
#[derive(Debug, Clone)]
pub struct CavRecord {
    pub idx: usize,
    pub state: VehicleState,
    pub initial_cz: CzIndex,
    pub final_cz: CzIndex,
    pub current_cz: CzIndex,
    pub class: SegmentClass,
    pub i_p: Option<usize>,
    pub i_m: Option<usize>,
    /// Full CZ visit list from entry to exit.
    pub route: Route,
    /// Position within the route (0 = entry segment).
    pub visit: usize,
    /// Roundabout entry time (s).
    pub entry_time: f64,
}

impl CavRecord {
    pub fn at_final_cz(&self) -> bool {
        self.visit + 1 == self.route.len()
    }

    /// Length remaining to the exit MP, from the current position.
    pub fn remaining_distance(&self, seg_len: f64) -> f64 {
        let segments_left = self.route.len() - self.visit - 1;
        (seg_len - self.state.x) + seg_len * segments_left as f64
    }
}

/// Neighbor assignment for one CAV under a candidate sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborAssignment {
    pub idx: usize,
    pub i_p: Option<usize>,
    pub i_m: Option<usize>,
}

/// The per-CZ tables S_1..S_N plus the shared index space.
#[derive(Debug, Clone)]
pub struct CoordinatorTables {
    topology: RoundaboutTopology,
    tables: Vec<Vec<CavRecord>>,
}

impl CoordinatorTables {
    pub fn new(topology: RoundaboutTopology) -> Self {
        let n = topology.n_cz();
        Self { topology, tables: vec![Vec::new(); n] }
    }

    pub fn topology(&self) -> &RoundaboutTopology {
        &self.topology
    }

    pub fn n_live(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }

    pub fn table(&self, cz: CzIndex) -> &[CavRecord] {
        &self.tables[cz - 1]
    }

    pub fn find(&self, idx: usize) -> Option<&CavRecord> {
        self.tables.iter().flatten().find(|r| r.idx == idx)
    }

    pub fn find_mut(&mut self, idx: usize) -> Option<&mut CavRecord> {
        self.tables.iter_mut().flatten().find(|r| r.idx == idx)
    }

    /// All live records in ascending index order.
    pub fn iter_live(&self) -> impl Iterator<Item = &CavRecord> {
        let mut all: Vec<&CavRecord> = self.tables.iter().flatten().collect();
        all.sort_by_key(|r| r.idx);
        all.into_iter()
    }

    /// Whether a new arrival at x = 0 on the entry segment of `entry_cz`
    /// satisfies the rear-end constraint against the last CAV already there.
    pub fn can_spawn(&self, entry_cz: CzIndex, v0: f64, limits: &Limits) -> bool {
        self.tables[entry_cz - 1]
            .iter()
            .filter(|r| r.class == SegmentClass::Entry)
            .map(|r| r.state.x)
            .fold(f64::INFINITY, f64::min)
            >= limits.phi * v0 + limits.delta
    }

    /// New CAV enters the roundabout; appended to the bottom of its table.
    pub fn on_arrival(
        &mut self,
        entry_cz: CzIndex,
        exit_cz: CzIndex,
        state0: VehicleState,
        entry_time: f64,
    ) -> Result<usize, Error> {
        if state0.x != 0.0 {
            return Err(Error::Protocol(format!(
                "arrival must start at x = 0, got {}",
                state0.x
            )));
        }
        let route = make_route(entry_cz, exit_cz, &self.topology)?;
        let idx = self.n_live();
        self.tables[entry_cz - 1].push(CavRecord {
            idx,
            state: state0,
            initial_cz: entry_cz,
            final_cz: exit_cz,
            current_cz: entry_cz,
            class: SegmentClass::Entry,
            i_p: None,
            i_m: None,
            route,
            visit: 0,
            entry_time,
        });
        Ok(idx)
    }

    /// CAV exits the roundabout: remove its row and renumber larger indices
    /// down by one everywhere, including the neighbor columns. Dangling
    /// neighbor references to the removed CAV are cleared.
    pub fn on_exit(&mut self, idx: usize) -> Result<CavRecord, Error> {
        let (ti, pos) = self.locate(idx)?;
        if !self.tables[ti][pos].at_final_cz() {
            return Err(Error::Protocol(format!(
                "CAV {idx} is not at its final CZ"
            )));
        }
        let removed = self.tables[ti].remove(pos);
        for table in &mut self.tables {
            for r in table.iter_mut() {
                if r.idx > idx {
                    r.idx -= 1;
                }
                for nb in [&mut r.i_p, &mut r.i_m] {
                    match *nb {
                        Some(j) if j == idx => *nb = None,
                        Some(j) if j > idx => *nb = Some(j - 1),
                        _ => {}
                    }
                }
            }
        }
        Ok(removed)
    }

    /// CAV crosses its MP into the next CZ; `overshoot` is the distance
    /// already travelled past the MP within this step.
    pub fn on_cz_transition(&mut self, idx: usize, overshoot: f64) -> Result<(), Error> {
        let (ti, pos) = self.locate(idx)?;
        if self.tables[ti][pos].at_final_cz() {
            return Err(Error::Protocol(format!(
                "CAV {idx} is at its final CZ; expected an exit event"
            )));
        }
        let mut rec = self.tables[ti].remove(pos);
        rec.visit += 1;
        rec.current_cz = rec.route.czs()[rec.visit];
        rec.class = SegmentClass::Inner;
        rec.state.x = overshoot;
        rec.i_p = None;
        rec.i_m = None;
        let target = rec.current_cz - 1;
        self.tables[target].push(rec);
        // keep on-road order within the segment: larger x first
        self.tables[target].sort_by(|a, b| {
            (b.class == SegmentClass::Inner, b.state.x, a.idx)
                .partial_cmp(&(a.class == SegmentClass::Inner, a.state.x, b.idx))
                .unwrap()
        });
        Ok(())
    }

    /// i_p / i_m assignment for a candidate sequence over CZ k.
    ///
    /// The sequence is partitioned by segment class preserving order; i_m is
    /// the nearest predecessor from the opposite subsequence, i_p the
    /// predecessor within the own subsequence, with a cross-CZ scan for
    /// subsequence heads that are not at their final CZ.
    pub fn assign_neighbors(
        &self,
        cz: CzIndex,
        sequence: &[usize],
    ) -> Result<Vec<NeighborAssignment>, Error> {
        let table = &self.tables[cz - 1];
        let mut in_table: Vec<usize> = table.iter().map(|r| r.idx).collect();
        let mut in_seq: Vec<usize> = sequence.to_vec();
        in_table.sort_unstable();
        in_seq.sort_unstable();
        if in_table != in_seq {
            return Err(Error::Argument(format!(
                "sequence {sequence:?} is not a permutation of CZ {cz}'s indices"
            )));
        }

        let class_of = |idx: usize| {
            table.iter().find(|r| r.idx == idx).map(|r| r.class).unwrap()
        };

        let mut out = Vec::with_capacity(sequence.len());
        for (pos, &idx) in sequence.iter().enumerate() {
            let my_class = class_of(idx);
            let mut i_m = None;
            let mut own_prev = None;
            for &prev in sequence[..pos].iter().rev() {
                let pc = class_of(prev);
                if pc != my_class && i_m.is_none() {
                    i_m = Some(prev);
                }
                if pc == my_class && own_prev.is_none() {
                    own_prev = Some(prev);
                }
                if i_m.is_some() && own_prev.is_some() {
                    break;
                }
            }
            let rec = table.iter().find(|r| r.idx == idx).unwrap();
            let i_p = match own_prev {
                Some(p) => Some(p),
                None if rec.at_final_cz() => None,
                None => self.cross_cz_leader(cz),
            };
            out.push(NeighborAssignment { idx, i_p, i_m });
        }
        Ok(out)
    }

    /// Scans CZ k+, k++, ... for the last CAV on a ring segment (the inner
    /// CAV that is no one's rear-end leader, i.e. the one with smallest x).
    fn cross_cz_leader(&self, cz: CzIndex) -> Option<usize> {
        let n = self.topology.n_cz();
        let mut k = cz;
        for _ in 0..n - 1 {
            k = self.topology.next_cz(k);
            let candidate = self.tables[k - 1]
                .iter()
                .filter(|r| r.class == SegmentClass::Inner)
                .min_by(|a, b| a.state.x.partial_cmp(&b.state.x).unwrap());
            if let Some(c) = candidate {
                return Some(c.idx);
            }
        }
        None
    }

    /// Writes an assignment into the table columns.
    pub fn commit_neighbors(&mut self, cz: CzIndex, assignments: &[NeighborAssignment]) {
        for a in assignments {
            if let Some(rec) = self.tables[cz - 1].iter_mut().find(|r| r.idx == a.idx) {
                rec.i_p = a.i_p;
                rec.i_m = a.i_m;
            }
        }
    }

    /// One record per line, for golden-file tests and debugging.
    pub fn snapshot_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (k, table) in self.tables.iter().enumerate() {
            for r in table {
                writeln!(
                    s,
                    "S{} idx={} x={:.3} v={:.3} init={} final={} cur={} c={} ip={} im={}",
                    k + 1,
                    r.idx,
                    r.state.x,
                    r.state.v,
                    r.initial_cz,
                    r.final_cz,
                    r.current_cz,
                    r.class.as_u8(),
                    r.i_p.map_or("-".into(), |v| v.to_string()),
                    r.i_m.map_or("-".into(), |v| v.to_string()),
                )
                .unwrap();
            }
        }
        s
    }

    /// Direct record insertion for constructed scenarios and tests. The
    /// caller is responsible for on-road ordering within each segment.
    #[allow(clippy::too_many_arguments)]
    pub fn insert_record(
        &mut self,
        idx: usize,
        state: VehicleState,
        initial_cz: CzIndex,
        final_cz: CzIndex,
        current_cz: CzIndex,
        class: SegmentClass,
        entry_time: f64,
    ) -> Result<(), Error> {
        let route = make_route(initial_cz, final_cz, &self.topology)?;
        let visit = route
            .czs()
            .iter()
            .position(|&c| c == current_cz)
            .ok_or_else(|| Error::Argument(format!("CZ {current_cz} not on route")))?;
        let visit = if class == SegmentClass::Entry {
            if visit != 0 {
                return Err(Error::Argument("entry class only at route start".into()));
            }
            0
        } else if visit == 0 {
            // full-loop route revisits the entry CZ on its inner segment
            route
                .czs()
                .iter()
                .rposition(|&c| c == current_cz)
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Argument("inner visit not on route".into()))?
        } else {
            visit
        };
        self.tables[current_cz - 1].push(CavRecord {
            idx,
            state,
            initial_cz,
            final_cz,
            current_cz,
            class,
            i_p: None,
            i_m: None,
            route,
            visit,
            entry_time,
        });
        Ok(())
    }

    fn locate(&self, idx: usize) -> Result<(usize, usize), Error> {
        for (ti, table) in self.tables.iter().enumerate() {
            if let Some(pos) = table.iter().position(|r| r.idx == idx) {
                return Ok((ti, pos));
            }
        }
        Err(Error::Protocol(format!("unknown CAV index {idx}")))
    }
}

/// Builds a five-CAV snapshot: CZ1 holds idx 0 (ring, exiting), idx 1 (ring,
/// heading to CZ2) and idx 4 (entry road), while CZ2 holds idx 2 (entry) and
/// idx 3 (last on its ring segment).
#[cfg(test)]
pub(crate) fn five_cav_fixture() -> CoordinatorTables {
    let topo = RoundaboutTopology::new(3, 60.0).unwrap();
    let mut t = CoordinatorTables::new(topo);
    use SegmentClass::*;
    t.insert_record(0, VehicleState::new(50.0, 10.0), 3, 1, 1, Inner, 0.0).unwrap();
    t.insert_record(1, VehicleState::new(30.0, 10.0), 3, 2, 1, Inner, 0.1).unwrap();
    t.insert_record(4, VehicleState::new(40.0, 10.0), 1, 2, 1, Entry, 0.4).unwrap();
    t.insert_record(2, VehicleState::new(35.0, 10.0), 2, 3, 2, Entry, 0.2).unwrap();
    t.insert_record(3, VehicleState::new(20.0, 10.0), 1, 3, 2, Inner, 0.3).unwrap();
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> RoundaboutTopology {
        RoundaboutTopology::new(3, 60.0).unwrap()
    }

    #[test]
    fn arrival_into_empty_roundabout() {
        let mut t = CoordinatorTables::new(topo());
        let idx = t
            .on_arrival(1, 2, VehicleState::new(0.0, 10.0), 0.0)
            .unwrap();
        assert_eq!(idx, 0);
        assert_eq!(t.table(1).len(), 1);
        assert_eq!(t.table(1)[0].class, SegmentClass::Entry);
    }

    #[test]
    fn arrival_appends_below_existing_rows() {
        let mut t = five_cav_fixture();
        let idx = t
            .on_arrival(1, 2, VehicleState::new(0.0, 10.0), 1.0)
            .unwrap();
        assert_eq!(idx, 5);
        let last = t.table(1).last().unwrap();
        assert_eq!(last.idx, 5);
    }

    #[test]
    fn arrival_rejects_nonzero_position() {
        let mut t = CoordinatorTables::new(topo());
        assert!(t.on_arrival(1, 2, VehicleState::new(5.0, 10.0), 0.0).is_err());
    }

    #[test]
    fn spawn_gate_blocks_coincident_arrivals() {
        let mut t = CoordinatorTables::new(topo());
        let limits = Limits::default();
        assert!(t.can_spawn(1, 10.0, &limits));
        t.on_arrival(1, 2, VehicleState::new(0.0, 10.0), 0.0).unwrap();
        // z = 0 < phi v + delta
        assert!(!t.can_spawn(1, 10.0, &limits));
    }

    #[test]
    fn exit_renumbers_larger_indices() {
        // {S_1:[2], S_2:[1,3]}, exit of 1 -> {S_1:[1], S_2:[2]}
        let mut t = CoordinatorTables::new(topo());
        use SegmentClass::*;
        t.insert_record(2, VehicleState::new(10.0, 10.0), 3, 1, 1, Inner, 0.0).unwrap();
        t.insert_record(1, VehicleState::new(55.0, 10.0), 1, 2, 2, Inner, 0.0).unwrap();
        t.insert_record(3, VehicleState::new(20.0, 10.0), 1, 2, 2, Inner, 0.0).unwrap();
        t.on_exit(1).unwrap();
        let s1: Vec<usize> = t.table(1).iter().map(|r| r.idx).collect();
        let s2: Vec<usize> = t.table(2).iter().map(|r| r.idx).collect();
        assert_eq!(s1, vec![1]);
        assert_eq!(s2, vec![2]);
    }

    #[test]
    fn exit_of_only_cav_empties_tables() {
        let mut t = CoordinatorTables::new(topo());
        t.insert_record(0, VehicleState::new(59.0, 10.0), 3, 1, 1, SegmentClass::Inner, 0.0)
            .unwrap();
        t.on_exit(0).unwrap();
        assert_eq!(t.n_live(), 0);
    }

    #[test]
    fn exit_of_highest_idx_leaves_others_untouched() {
        let mut t = five_cav_fixture();
        // make idx 4's current CZ final so it can exit
        t.find_mut(4).unwrap().final_cz = 1;
        let rec = t.find_mut(4).unwrap();
        rec.route = make_route(1, 1, &topo()).unwrap();
        // final CZ via full loop is not what we want; rebuild as entry->exit at CZ1
        // by treating the fixture record directly:
        rec.visit = rec.route.len() - 1;
        rec.class = SegmentClass::Inner;
        t.on_exit(4).unwrap();
        let ids: Vec<usize> = t.iter_live().map(|r| r.idx).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn exit_clears_dangling_neighbor_references() {
        let mut t = five_cav_fixture();
        t.find_mut(1).unwrap().i_p = Some(0);
        t.find_mut(0).unwrap().visit = 1; // at final CZ already by fixture
        t.on_exit(0).unwrap();
        let r = t.find(0).unwrap(); // old idx 1 renumbered
        assert_eq!(r.i_p, None);
    }

    #[test]
    fn exit_rejects_unknown_index() {
        let mut t = CoordinatorTables::new(topo());
        assert!(t.on_exit(7).is_err());
    }

    #[test]
    fn transition_moves_record_to_next_cz() {
        let mut t = CoordinatorTables::new(topo());
        t.insert_record(0, VehicleState::new(60.0, 12.0), 1, 2, 1, SegmentClass::Entry, 0.0)
            .unwrap();
        t.on_cz_transition(0, 0.5).unwrap();
        let r = t.find(0).unwrap();
        assert_eq!(r.current_cz, 2);
        assert_eq!(r.class, SegmentClass::Inner);
        assert!((r.state.x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn transition_from_final_cz_is_a_protocol_error() {
        let mut t = CoordinatorTables::new(topo());
        t.insert_record(0, VehicleState::new(60.0, 12.0), 3, 1, 1, SegmentClass::Inner, 0.0)
            .unwrap();
        assert!(t.on_cz_transition(0, 0.0).is_err());
    }

    #[test]
    fn simultaneous_transitions_are_order_independent() {
        let build = || {
            let mut t = CoordinatorTables::new(topo());
            t.insert_record(0, VehicleState::new(60.0, 10.0), 1, 3, 1, SegmentClass::Entry, 0.0)
                .unwrap();
            t.insert_record(1, VehicleState::new(60.0, 11.0), 2, 1, 2, SegmentClass::Entry, 0.0)
                .unwrap();
            t
        };
        let mut a = build();
        a.on_cz_transition(0, 0.0).unwrap();
        a.on_cz_transition(1, 0.0).unwrap();
        let mut b = build();
        b.on_cz_transition(1, 0.0).unwrap();
        b.on_cz_transition(0, 0.0).unwrap();
        assert_eq!(a.snapshot_text(), b.snapshot_text());
    }

    #[test]
    fn neighbors_five_cav_example() {
        // f = [0,4,1]: f_0 = [0,1], f_1 = [4]; 1_m = 4, 1_p = 0, 4_p = 3
        let t = five_cav_fixture();
        let a = t.assign_neighbors(1, &[0, 4, 1]).unwrap();
        let get = |idx: usize| a.iter().find(|x| x.idx == idx).copied().unwrap();
        assert_eq!(get(0).i_p, None); // final CZ, ranks first
        assert_eq!(get(0).i_m, None);
        assert_eq!(get(1).i_p, Some(0));
        assert_eq!(get(1).i_m, Some(4));
        assert_eq!(get(4).i_p, Some(3)); // cross-CZ: CAV 3 on CZ2's ring segment
        assert_eq!(get(4).i_m, Some(0));
    }

    #[test]
    fn neighbors_alternative_sequence() {
        // f = [0,1,4]: 4_m = 1, 1_p = 0, 1_m absent
        let t = five_cav_fixture();
        let a = t.assign_neighbors(1, &[0, 1, 4]).unwrap();
        let get = |idx: usize| a.iter().find(|x| x.idx == idx).copied().unwrap();
        assert_eq!(get(4).i_m, Some(1));
        assert_eq!(get(1).i_p, Some(0));
        assert_eq!(get(1).i_m, None);
    }

    #[test]
    fn single_cav_has_no_i_m() {
        let mut t = CoordinatorTables::new(topo());
        t.insert_record(0, VehicleState::new(10.0, 10.0), 1, 2, 1, SegmentClass::Entry, 0.0)
            .unwrap();
        let a = t.assign_neighbors(1, &[0]).unwrap();
        assert_eq!(a[0].i_m, None);
        // empty downstream: no cross-CZ leader either
        assert_eq!(a[0].i_p, None);
    }

    #[test]
    fn rejects_non_permutation_sequence() {
        let t = five_cav_fixture();
        assert!(t.assign_neighbors(1, &[0, 1]).is_err());
        assert!(t.assign_neighbors(1, &[0, 1, 2]).is_err());
    }

    #[test]
    fn neighbor_classes_are_consistent() {
        let t = five_cav_fixture();
        for f in [[0, 4, 1], [0, 1, 4], [4, 0, 1]] {
            let a = t.assign_neighbors(1, &f).unwrap();
            for nb in &a {
                let me = t.find(nb.idx).unwrap();
                if let Some(im) = nb.i_m {
                    let other = t.find(im).unwrap();
                    assert_ne!(me.class, other.class);
                    assert_eq!(me.current_cz, other.current_cz);
                }
                // within-CZ i_p shares the class
                if let Some(ip) = nb.i_p {
                    let other = t.find(ip).unwrap();
                    if other.current_cz == me.current_cz {
                        assert_eq!(me.class, other.class);
                    }
                }
            }
        }
    }

    #[test]
    fn referential_integrity_after_events() {
        let mut t = five_cav_fixture();
        let a = t.assign_neighbors(1, &[0, 4, 1]).unwrap();
        t.commit_neighbors(1, &a);
        t.find_mut(0).unwrap().state.x = 60.0;
        t.on_exit(0).unwrap();
        for r in t.iter_live() {
            for nb in [r.i_p, r.i_m].into_iter().flatten() {
                assert!(t.find(nb).is_some(), "dangling reference {nb}");
            }
        }
    }

    #[test]
    fn column_refresh_is_idempotent() {
        let mut t = five_cav_fixture();
        let a = t.assign_neighbors(1, &[0, 4, 1]).unwrap();
        t.commit_neighbors(1, &a);
        let snap1 = t.snapshot_text();
        let b = t.assign_neighbors(1, &[0, 4, 1]).unwrap();
        t.commit_neighbors(1, &b);
        assert_eq!(snap1, t.snapshot_text());
    }
}
