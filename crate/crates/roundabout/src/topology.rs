//! Roundabout geometry: control zones, routes, and cross-zone distance accounting.
//!
//! The roundabout is a ring of `n_cz` control zones (CZs) traversed
//! counterclockwise. Each CZ is centered at a merging point (MP) and has two
//! inbound road segments of length `L`: the entry road (segment class 1) and
//! the segment within the ring (class 0).

use crate::error::Error;

/// 1-based control zone index.
pub type CzIndex = usize;

/// Road segment classification within a CZ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SegmentClass {
    /// Segment within the ring.
    Inner = 0,
    /// Entry road.
    Entry = 1,
}

impl SegmentClass {
    pub fn as_u8(self) -> u8 {
        match self {
            SegmentClass::Inner => 0,
            SegmentClass::Entry => 1,
        }
    }
}

/// Static roundabout geometry. Immutable after construction.
#[derive(Debug, Clone)]
pub struct RoundaboutTopology {
    n_cz: usize,
    segment_length: f64,
}

impl RoundaboutTopology {
    pub fn new(n_cz: usize, segment_length: f64) -> Result<Self, Error> {
        if n_cz < 2 {
            return Err(Error::Argument(format!("n_cz must be >= 2, got {n_cz}")));
        }
        if segment_length <= 0.0 {
            return Err(Error::Argument(format!(
                "segment length must be positive, got {segment_length}"
            )));
        }
        Ok(Self { n_cz, segment_length })
    }

    pub fn n_cz(&self) -> usize {
        self.n_cz
    }

    pub fn segment_length(&self) -> f64 {
        self.segment_length
    }

    /// Successor CZ counterclockwise.
    pub fn next_cz(&self, cz: CzIndex) -> CzIndex {
        cz % self.n_cz + 1
    }

    /// Counterclockwise CZ count from `cz_from`'s frame to `cz_to`.
    pub fn cz_offset(&self, cz_from: CzIndex, cz_to: CzIndex) -> Result<usize, Error> {
        self.check_cz(cz_from)?;
        self.check_cz(cz_to)?;
        Ok((cz_to + self.n_cz - cz_from) % self.n_cz)
    }

    /// Gap from a follower to a leader `offset` CZs downstream, both measured
    /// from their own segment origins and unrolled onto one axis.
    pub fn adjusted_gap(&self, x_follower: f64, x_leader: f64, offset: usize) -> f64 {
        x_leader + self.segment_length * offset as f64 - x_follower
    }

    fn check_cz(&self, cz: CzIndex) -> Result<(), Error> {
        if cz == 0 || cz > self.n_cz {
            return Err(Error::Argument(format!(
                "CZ index {cz} out of range 1..={}",
                self.n_cz
            )));
        }
        Ok(())
    }
}

/// A CAV's route: ordered CZ visits from entry to exit.
///
/// The first visit is on the entry segment of `entry_cz`; every later visit is
/// on the inner segment of that CZ. The CAV exits at the MP of the last CZ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    czs: Vec<CzIndex>,
}

impl Route {
    pub fn entry_cz(&self) -> CzIndex {
        self.czs[0]
    }

    pub fn exit_cz(&self) -> CzIndex {
        *self.czs.last().unwrap()
    }

    pub fn czs(&self) -> &[CzIndex] {
        &self.czs
    }

    /// Number of segments traversed (entry segment plus inner segments).
    pub fn len(&self) -> usize {
        self.czs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Segment class at the given visit index.
    pub fn class_at(&self, visit: usize) -> SegmentClass {
        if visit == 0 {
            SegmentClass::Entry
        } else {
            SegmentClass::Inner
        }
    }
}

/// Builds the CZ visit list from entry to exit, counterclockwise.
///
/// `entry_cz == exit_cz` means a full loop: the entry segment followed by one
/// inner segment in every CZ around the ring.
pub fn make_route(
    entry_cz: CzIndex,
    exit_cz: CzIndex,
    topology: &RoundaboutTopology,
) -> Result<Route, Error> {
    topology.check_cz(entry_cz)?;
    topology.check_cz(exit_cz)?;
    let mut czs = vec![entry_cz];
    let mut cz = entry_cz;
    loop {
        cz = topology.next_cz(cz);
        czs.push(cz);
        if cz == exit_cz {
            break;
        }
    }
    Ok(Route { czs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn topo3() -> RoundaboutTopology {
        RoundaboutTopology::new(3, 60.0).unwrap()
    }

    #[test]
    fn cz_offset_same_cz() {
        assert_eq!(topo3().cz_offset(1, 1).unwrap(), 0);
    }

    #[test]
    fn cz_offset_adjacent() {
        assert_eq!(topo3().cz_offset(1, 2).unwrap(), 1);
    }

    #[test]
    fn cz_offset_wraps() {
        // Enumerating the 3-cycle, (k, k+1 mod 3) is always 1.
        let t = topo3();
        for k in 1..=3 {
            assert_eq!(t.cz_offset(k, t.next_cz(k)).unwrap(), 1);
        }
        assert_eq!(t.cz_offset(3, 1).unwrap(), 1);
    }

    #[test]
    fn cz_offset_rejects_out_of_range() {
        assert!(topo3().cz_offset(0, 1).is_err());
        assert!(topo3().cz_offset(1, 4).is_err());
    }

    #[test]
    fn adjusted_gap_same_segment() {
        assert_eq!(topo3().adjusted_gap(10.0, 40.0, 0), 30.0);
    }

    #[test]
    fn adjusted_gap_across_segments() {
        // Unrolling the two segments onto one axis: 5 + 60 - 50.
        assert_eq!(topo3().adjusted_gap(50.0, 5.0, 1), 15.0);
    }

    #[test]
    fn adjusted_gap_coincident_origin() {
        assert_eq!(topo3().adjusted_gap(0.0, 0.0, 0), 0.0);
    }

    #[test]
    fn route_table_i_rows() {
        let t = topo3();
        assert_eq!(make_route(3, 1, &t).unwrap().czs(), &[3, 1]);
        assert_eq!(make_route(1, 2, &t).unwrap().czs(), &[1, 2]);
    }

    #[test]
    fn route_full_loop() {
        let t = topo3();
        assert_eq!(make_route(2, 2, &t).unwrap().czs(), &[2, 3, 1, 2]);
    }

    #[test]
    fn route_classes() {
        let r = make_route(2, 2, &topo3()).unwrap();
        assert_eq!(r.class_at(0), SegmentClass::Entry);
        for v in 1..r.len() {
            assert_eq!(r.class_at(v), SegmentClass::Inner);
        }
    }

    proptest! {
        #[test]
        fn route_length_bounds(n_cz in 2usize..6, entry in 1usize..6, exit in 1usize..6) {
            prop_assume!(entry <= n_cz && exit <= n_cz);
            let t = RoundaboutTopology::new(n_cz, 60.0).unwrap();
            let r = make_route(entry, exit, &t).unwrap();
            prop_assert!(r.len() >= 2 && r.len() <= n_cz + 1);
            prop_assert_eq!(r.entry_cz(), entry);
            prop_assert_eq!(r.exit_cz(), exit);
            // consecutive visits follow the ring
            for w in r.czs().windows(2) {
                prop_assert_eq!(w[1], t.next_cz(w[0]));
            }
        }

        #[test]
        fn gap_antisymmetric_only_same_segment(x1 in 0.0..60.0, x2 in 0.0..60.0) {
            let t = topo3();
            let g = t.adjusted_gap(x1, x2, 0);
            prop_assert!((g + t.adjusted_gap(x2, x1, 0)).abs() < 1e-12);
        }
    }
}
