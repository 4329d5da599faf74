//! Brute-force message passing used as an oracle for the attention
//! constructions.

use crate::graph::Graph;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Sum,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutKind {
    Mean,
    Sum,
}

/// `combine(own, aggregated) -> new representation`.
pub type Combine = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

pub struct ReferenceGnn {
    pub aggregation: Aggregation,
    pub combine: Combine,
    pub readout: ReadoutKind,
}

impl ReferenceGnn {
    /// Aggregate-only network: the combine step returns the aggregate.
    pub fn aggregate_only(aggregation: Aggregation, readout: ReadoutKind) -> Self {
        Self { aggregation, combine: Box::new(|_, a| a.to_vec()), readout }
    }

    pub fn step(&self, g: &Graph, h: &Tensor) -> Tensor {
        reference_gnn_step(g, h, self.aggregation, &*self.combine)
    }

    pub fn graph_readout(&self, h: &Tensor, num_real: usize) -> Vec<f64> {
        reference_readout(h, self.readout, num_real)
    }
}

/// Per-dimension aggregation over the out-neighbors of each node. Nodes
/// without neighbors aggregate to the zero vector.
pub fn aggregate(g: &Graph, h: &Tensor, kind: Aggregation) -> Tensor {
    let n = g.num_nodes();
    let d = h.last_dim();
    assert_eq!(h.shape(), [n, d], "one row per node");
    let mut out = Tensor::zeros(&[n, d]);
    for (v, nbrs) in g.adjacency().iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let row = &mut out.data_mut()[v * d..(v + 1) * d];
        for c in 0..d {
            let vals = nbrs.iter().map(|&(u, _)| h.at(&[u, c]));
            row[c] = match kind {
                Aggregation::Sum => vals.sum(),
                Aggregation::Mean => vals.sum::<f64>() / nbrs.len() as f64,
                Aggregation::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            };
        }
    }
    out
}

/// One AGGREGATE + COMBINE step.
pub fn reference_gnn_step(
    g: &Graph,
    h: &Tensor,
    kind: Aggregation,
    combine: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Tensor {
    let agg = aggregate(g, h, kind);
    let rows: Vec<Vec<f64>> = h.rows().zip(agg.rows()).map(|(own, a)| combine(own, a)).collect();
    Tensor::from_rows(&rows).expect("combine keeps a fixed width")
}

/// Column mean or sum over the first `num_real` rows.
pub fn reference_readout(h: &Tensor, kind: ReadoutKind, num_real: usize) -> Vec<f64> {
    let d = h.last_dim();
    let mut acc = vec![0.0; d];
    for row in h.rows().take(num_real) {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    if kind == ReadoutKind::Mean && num_real > 0 {
        for a in &mut acc {
            *a /= num_real as f64;
        }
    }
    acc
}
