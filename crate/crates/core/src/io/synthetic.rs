use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{shortest_path_distances, Graph, Target, Vocab};
use crate::model::Task;

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Longest shortest-path distance.
    Diameter,
    /// Mean shortest-path distance over ordered pairs of distinct nodes.
    AvgSpd,
    TriangleCount,
}

impl SyntheticTask {
    pub fn target(self, g: &Graph) -> f64 {
        match self {
            SyntheticTask::Diameter => diameter(g) as f64,
            SyntheticTask::AvgSpd => average_spd(g),
            SyntheticTask::TriangleCount => triangle_count(g) as f64,
        }
    }
}

/// Largest finite distance (0 for graphs with fewer than two nodes).
pub fn diameter(g: &Graph) -> usize {
    shortest_path_distances(g).as_slice().iter().filter(|&&d| d >= 0).max().map_or(0, |&d| d as usize)
}

/// Mean over reachable ordered pairs `i != j`.
pub fn average_spd(g: &Graph) -> f64 {
    let spd = shortest_path_distances(g);
    let (sum, count) = spd
        .as_slice()
        .iter()
        .filter(|&&d| d > 0)
        .fold((0u64, 0u64), |(s, c), &d| (s + d as u64, c + 1));
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}

/// Number of node triples that are pairwise adjacent (edge direction ignored).
pub fn triangle_count(g: &Graph) -> usize {
    let n = g.num_nodes();
    let mut adj = vec![false; n * n];
    for &(s, d) in g.edges() {
        adj[s * n + d] = true;
        adj[d * n + s] = true;
    }
    let mut count = 0;
    for a in 0..n {
        for b in a + 1..n {
            if !adj[a * n + b] {
                continue;
            }
            for c in b + 1..n {
                if adj[a * n + c] && adj[b * n + c] {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub num_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Expected degree of the Erdős–Rényi draw before the connectivity check.
    pub mean_degree: f64,
    /// Cardinality of the single node feature slot; features are uniform.
    pub node_types: usize,
    /// Cardinality of the single edge feature slot.
    pub edge_types: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task: SyntheticTask::Diameter,
            num_graphs: 1000,
            min_nodes: 8,
            max_nodes: 16,
            mean_degree: 2.5,
            node_types: 1,
            edge_types: 1,
            seed: 0,
        }
    }
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return true;
    }
    let mut adj = vec![Vec::new(); n];
    for &(s, d) in edges {
        adj[s].push(d);
        adj[d].push(s);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &u in &adj[v] {
            if !seen[u] {
                seen[u] = true;
                count += 1;
                stack.push(u);
            }
        }
    }
    count == n
}

/// Connected undirected G(n, p) sample, redrawn until connected.
pub fn connected_erdos_renyi<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<(usize, usize)> {
    loop {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((a, b));
                }
            }
        }
        if is_connected(n, &edges) {
            return edges;
        }
    }
}

/// Deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let node_types = spec.node_types.max(1);
    let edge_types = spec.edge_types.max(1);
    let lo = spec.min_nodes.max(1);
    let hi = spec.max_nodes.max(lo);
    let graphs = (0..spec.num_graphs)
        .map(|_| {
            let n = rng.random_range(lo..=hi);
            let p = if n > 1 { (spec.mean_degree / (n - 1) as f64).min(1.0) } else { 0.0 };
            let edges = connected_erdos_renyi(n, p, &mut rng);
            let nodes = (0..n).map(|_| vec![rng.random_range(0..node_types)]).collect();
            let efeats = (0..edges.len()).map(|_| vec![rng.random_range(0..edge_types)]).collect();
            let g = Graph::with_features(n, false, edges, nodes, efeats).expect("generated graph is simple");
            let t = spec.task.target(&g);
            g.with_target(Target::Regression(t))
        })
        .collect();
    Dataset { vocab: Vocab::new(vec![node_types], vec![edge_types]), task: Task::Regression, graphs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_targets() {
        assert_eq!(diameter(&Graph::cycle(6)), 3);
        assert_eq!(diameter(&Graph::path(5)), 4);
        assert_eq!(triangle_count(&Graph::cycle(3)), 1);
        assert_eq!(triangle_count(&Graph::cycle(6)), 0);
        // path P3: pairs at distance 1,1,2 in each direction
        assert!((average_spd(&Graph::path(3)) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_triangles_joined_by_a_bridge() {
        let g = Graph::new(6, false, vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3)]).unwrap();
        // trace(A^3) / 6 as an independent count
        let n = 6;
        let mut a = vec![0i64; n * n];
        for &(s, d) in g.edges() {
            a[s * n + d] = 1;
            a[d * n + s] = 1;
        }
        let mul = |x: &[i64], y: &[i64]| {
            let mut z = vec![0i64; n * n];
            for i in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        z[i * n + j] += x[i * n + k] * y[k * n + j];
                    }
                }
            }
            z
        };
        let a3 = mul(&mul(&a, &a), &a);
        let trace: i64 = (0..n).map(|i| a3[i * n + i]).sum();
        assert_eq!(triangle_count(&g) as i64, trace / 6);
        assert_eq!(triangle_count(&g), 2);
    }

    #[test]
    fn deterministic_and_connected() {
        let spec = SyntheticSpec { num_graphs: 30, seed: 5, edge_types: 3, ..SyntheticSpec::default() };
        let a = generate_synthetic(&spec);
        assert_eq!(a, generate_synthetic(&spec));
        for g in &a.graphs {
            assert!((8..=16).contains(&g.num_nodes()));
            assert!(is_connected(g.num_nodes(), g.edges()));
            assert_eq!(g.target.unwrap().value(), diameter(g) as f64);
            g.validate(&a.vocab).unwrap();
        }
        assert_ne!(a, generate_synthetic(&SyntheticSpec { seed: 6, ..spec }));
    }
}
