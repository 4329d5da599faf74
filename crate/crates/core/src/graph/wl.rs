//! 1-WL color refinement and SPD-multiset signatures.
//!
//! Colors are 64-bit digests of the refinement history, computed with a
//! fixed mixing function, so they depend only on structure and never on
//! node order or hash-map iteration. Two graphs refined for the same number
//! of rounds therefore produce directly comparable histograms.

use std::collections::BTreeMap;

use super::{shortest_path_distances, Graph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WlColoring {
    pub colors: Vec<u64>,
    /// Rounds until the partition stopped refining (or `max_rounds`).
    pub rounds: usize,
}

impl WlColoring {
    /// Sorted `(color, count)` pairs.
    pub fn histogram(&self) -> Vec<(u64, usize)> {
        let mut hist = BTreeMap::new();
        for &c in &self.colors {
            *hist.entry(c).or_insert(0) += 1;
        }
        hist.into_iter().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.histogram().len()
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn digest(items: impl IntoIterator<Item = u64>) -> u64 {
    items.into_iter().fold(0x5157_4C31_u64, |acc, x| mix(acc ^ mix(x)))
}

fn initial_colors(g: &Graph) -> Vec<u64> {
    g.node_feats()
        .iter()
        .map(|f| digest(std::iter::once(f.len() as u64).chain(f.iter().map(|&x| x as u64))))
        .collect()
}

fn refine_once(adj: &[Vec<(usize, usize)>], colors: &[u64]) -> Vec<u64> {
    let mut neigh = Vec::new();
    adj.iter()
        .enumerate()
        .map(|(v, list)| {
            neigh.clear();
            neigh.extend(list.iter().map(|&(u, _)| colors[u]));
            neigh.sort_unstable();
            digest(std::iter::once(colors[v]).chain(std::iter::once(neigh.len() as u64)).chain(neigh.iter().copied()))
        })
        .collect()
}

fn class_count(colors: &[u64]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

fn refine_fixed(g: &Graph, rounds: usize) -> Vec<u64> {
    let adj = g.adjacency();
    let mut colors = initial_colors(g);
    for _ in 0..rounds {
        colors = refine_once(&adj, &colors);
    }
    colors
}

/// Refine until the color partition stops splitting or `max_rounds` is hit.
/// Directed graphs are refined over their out-neighborhoods.
pub fn wl1_refinement(g: &Graph, max_rounds: usize) -> WlColoring {
    let adj = g.adjacency();
    let mut colors = initial_colors(g);
    let mut classes = class_count(&colors);
    let mut rounds = 0;
    while rounds < max_rounds {
        let next = refine_once(&adj, &colors);
        let next_classes = class_count(&next);
        if next_classes == classes {
            break;
        }
        colors = next;
        classes = next_classes;
        rounds += 1;
    }
    WlColoring { colors, rounds }
}

/// 1-WL test on a pair: both graphs are refined for the same number of
/// rounds (enough for either to stabilize) and histograms compared at every
/// round along the way.
pub fn wl1_equivalent(a: &Graph, b: &Graph) -> bool {
    if a.num_nodes() != b.num_nodes() {
        return false;
    }
    let rounds = a.num_nodes().max(1);
    let (adj_a, adj_b) = (a.adjacency(), b.adjacency());
    let mut ca = initial_colors(a);
    let mut cb = initial_colors(b);
    for round in 0..=rounds {
        let ha = WlColoring { colors: ca.clone(), rounds: round }.histogram();
        let hb = WlColoring { colors: cb.clone(), rounds: round }.histogram();
        if ha != hb {
            return false;
        }
        if round < rounds {
            ca = refine_once(&adj_a, &ca);
            cb = refine_once(&adj_b, &cb);
        }
    }
    true
}

/// Histogram after exactly `rounds` refinement steps.
pub fn wl1_histogram(g: &Graph, rounds: usize) -> Vec<(u64, usize)> {
    WlColoring { colors: refine_fixed(g, rounds), rounds }.histogram()
}

/// Per-node sorted SPD rows, collected and sorted. Unreachable pairs keep
/// their `-1` sentinel.
pub fn spd_multiset_signature(g: &Graph) -> Vec<Vec<i32>> {
    let spd = shortest_path_distances(g);
    let mut sig: Vec<Vec<i32>> = (0..spd.len())
        .map(|i| {
            let mut row = spd.row(i).to_vec();
            row.sort_unstable();
            row
        })
        .collect();
    sig.sort();
    sig
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> Graph {
        Graph::cycle(3).disjoint_union(&Graph::cycle(3)).unwrap()
    }

    #[test]
    fn c6_and_two_triangles_share_wl_histogram() {
        let a = wl1_refinement(&Graph::cycle(6), 10);
        let b = wl1_refinement(&two_triangles(), 10);
        assert_eq!(a.num_classes(), 1);
        assert_eq!(a.histogram(), b.histogram());
        assert!(wl1_equivalent(&Graph::cycle(6), &two_triangles()));
    }

    #[test]
    fn path_endpoints_differ_from_middle() {
        let c = wl1_refinement(&Graph::path(3), 10);
        assert_eq!(c.colors[0], c.colors[2]);
        assert_ne!(c.colors[0], c.colors[1]);
        assert!(c.rounds <= 3);
    }

    #[test]
    fn c6_vs_p6_differs() {
        assert!(!wl1_equivalent(&Graph::cycle(6), &Graph::path(6)));
    }

    #[test]
    fn signatures() {
        let c6 = spd_multiset_signature(&Graph::cycle(6));
        assert_eq!(c6, vec![vec![0, 1, 1, 2, 2, 3]; 6]);
        let tt = spd_multiset_signature(&two_triangles());
        assert_eq!(tt, vec![vec![-1, -1, -1, 0, 1, 1]; 6]);
        assert_ne!(c6, tt);
    }

    #[test]
    fn labels_split_classes() {
        let g = Graph::with_features(3, false, vec![(0, 1), (1, 2)], vec![vec![0], vec![0], vec![1]], vec![vec![], vec![]])
            .unwrap();
        let c = wl1_refinement(&g, 10);
        assert_ne!(c.colors[0], c.colors[2]);
    }
}
