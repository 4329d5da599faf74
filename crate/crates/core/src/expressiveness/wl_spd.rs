use crate::graph::{spd_multiset_signature, wl1_equivalent, Graph};

/// Outcome of comparing two graphs by 1-WL and by SPD multisets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairComparison {
    pub wl_equal: bool,
    pub spd_equal: bool,
}

impl PairComparison {
    pub fn of(a: &Graph, b: &Graph) -> Self {
        Self { wl_equal: wl1_equivalent(a, b), spd_equal: spd_multiset_signature(a) == spd_multiset_signature(b) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WlSpdReport {
    /// The 6-cycle against two disjoint triangles.
    pub canonical: PairComparison,
    /// Sorted SPD row of every node of the 6-cycle.
    pub c6_rows: Vec<Vec<i32>>,
    /// The 6-cycle against a relabeled copy.
    pub isomorphic: PairComparison,
    /// The 6-cycle against the 6-node path.
    pub path_control: PairComparison,
}

pub const C6_ROW: [i32; 6] = [0, 1, 1, 2, 2, 3];

impl WlSpdReport {
    pub fn passed(&self) -> bool {
        self.canonical.wl_equal
            && !self.canonical.spd_equal
            && self.c6_rows.iter().all(|r| r == &C6_ROW)
            && self.isomorphic.wl_equal
            && self.isomorphic.spd_equal
            && !self.path_control.wl_equal
    }
}

pub fn run_wl_vs_spd_experiment() -> WlSpdReport {
    let c6 = Graph::cycle(6);
    let triangles = Graph::cycle(3).disjoint_union(&Graph::cycle(3)).expect("disjoint union of simple graphs");
    let relabeled = c6.permute(&[3, 0, 5, 1, 4, 2]).expect("valid permutation");
    WlSpdReport {
        canonical: PairComparison::of(&c6, &triangles),
        c6_rows: spd_multiset_signature(&c6),
        isomorphic: PairComparison::of(&c6, &relabeled),
        path_control: PairComparison::of(&c6, &Graph::path(6)),
    }
}
