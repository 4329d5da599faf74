//! Graph representation and structural preprocessing.
//!
//! A [`Graph`] stores categorical node/edge features plus an edge list.
//! Undirected graphs store every edge once; [`Graph::adjacency`] exposes
//! both directions. [`StructuralFeatures`] carries everything the
//! attention biases need: shortest-path distances, one canonical shortest
//! path per ordered pair, and degrees.

mod structure;
mod wl;

pub use structure::{
    attach_virtual_node, compute_degrees, shortest_path_distances, shortest_path_edges, PathEdges,
    SpdMatrix, StructuralFeatures, UNREACHABLE, VNODE_CODE,
};
pub use wl::{spd_multiset_signature, wl1_equivalent, wl1_histogram, wl1_refinement, WlColoring};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cardinalities of the categorical feature slots.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocab {
    pub node: Vec<usize>,
    pub edge: Vec<usize>,
}

impl Vocab {
    pub fn new(node: Vec<usize>, edge: Vec<usize>) -> Self {
        Self { node, edge }
    }

    /// Total rows of a flat node embedding table (all slots stacked).
    pub fn node_rows(&self) -> usize {
        self.node.iter().sum()
    }

    pub fn edge_rows(&self) -> usize {
        self.edge.iter().sum()
    }

    /// Row offset of each node slot inside the flat table.
    pub fn node_offsets(&self) -> Vec<usize> {
        offsets(&self.node)
    }

    pub fn edge_offsets(&self) -> Vec<usize> {
        offsets(&self.edge)
    }
}

fn offsets(cards: &[usize]) -> Vec<usize> {
    cards
        .iter()
        .scan(0, |acc, &c| {
            let start = *acc;
            *acc += c;
            Some(start)
        })
        .collect()
}

/// Graph-level label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Regression(f64),
    Binary(bool),
}

impl Target {
    pub fn value(self) -> f64 {
        match self {
            Target::Regression(v) => v,
            Target::Binary(b) => f64::from(u8::from(b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    directed: bool,
    edges: Vec<(usize, usize)>,
    node_feats: Vec<Vec<usize>>,
    edge_feats: Vec<Vec<usize>>,
    pub target: Option<Target>,
}

impl Graph {
    /// Unlabeled graph: every node and edge has an empty feature list.
    pub fn new(num_nodes: usize, directed: bool, edges: Vec<(usize, usize)>) -> Result<Self> {
        let m = edges.len();
        Self::with_features(num_nodes, directed, edges, vec![Vec::new(); num_nodes], vec![Vec::new(); m])
    }

    pub fn with_features(
        num_nodes: usize,
        directed: bool,
        edges: Vec<(usize, usize)>,
        node_feats: Vec<Vec<usize>>,
        edge_feats: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if node_feats.len() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} node feature rows for {num_nodes} nodes",
                node_feats.len()
            )));
        }
        if edge_feats.len() != edges.len() {
            return Err(Error::InvalidGraph(format!(
                "{} edge feature rows for {} edges",
                edge_feats.len(),
                edges.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (k, &(s, d)) in edges.iter().enumerate() {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge {k} = ({s}, {d}) references a node >= {num_nodes}"
                )));
            }
            if s == d {
                return Err(Error::InvalidGraph(format!("edge {k} is a self-loop on node {s}")));
            }
            let key = if directed { (s, d) } else { (s.min(d), s.max(d)) };
            if !seen.insert(key) {
                return Err(Error::InvalidGraph(format!("edge {k} = ({s}, {d}) is duplicated")));
            }
        }
        Ok(Self { num_nodes, directed, edges, node_feats, edge_feats, target: None })
    }

    pub fn with_target(mut self, target: Target) -> Self {
        self.target = Some(target);
        self
    }

    /// Undirected cycle on `n` nodes.
    pub fn cycle(n: usize) -> Self {
        let edges = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::new(n, false, edges).expect("cycle is a valid graph")
    }

    /// Undirected path on `n` nodes.
    pub fn path(n: usize) -> Self {
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, false, edges).expect("path is a valid graph")
    }

    /// Disjoint union, nodes of `other` shifted after ours.
    pub fn disjoint_union(&self, other: &Graph) -> Result<Self> {
        if self.directed != other.directed {
            return Err(Error::InvalidGraph("union of directed and undirected graphs".into()));
        }
        let shift = self.num_nodes;
        let edges = self
            .edges
            .iter()
            .copied()
            .chain(other.edges.iter().map(|&(s, d)| (s + shift, d + shift)))
            .collect();
        let node_feats = self.node_feats.iter().chain(&other.node_feats).cloned().collect();
        let edge_feats = self.edge_feats.iter().chain(&other.edge_feats).cloned().collect();
        Self::with_features(shift + other.num_nodes, self.directed, edges, node_feats, edge_feats)
    }

    /// Relabel nodes: node `v` becomes `perm[v]`. Edge order is preserved.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::InvalidGraph("permutation length differs from node count".into()));
        }
        let mut node_feats = vec![Vec::new(); self.num_nodes];
        for (v, &p) in perm.iter().enumerate() {
            node_feats[p] = self.node_feats[v].clone();
        }
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        let mut g = Self::with_features(
            self.num_nodes,
            self.directed,
            edges,
            node_feats,
            self.edge_feats.clone(),
        )?;
        g.target = self.target;
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_feats(&self) -> &[Vec<usize>] {
        &self.node_feats
    }

    pub fn edge_feats(&self) -> &[Vec<usize>] {
        &self.edge_feats
    }

    /// Outgoing adjacency as `(neighbor, edge index)` pairs sorted by
    /// neighbor. Undirected edges appear in both endpoint lists.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for (k, &(s, d)) in self.edges.iter().enumerate() {
            adj[s].push((d, k));
            if !self.directed {
                adj[d].push((s, k));
            }
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Incoming adjacency, same layout as [`Graph::adjacency`].
    pub fn reverse_adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        if !self.directed {
            return self.adjacency();
        }
        let mut adj = vec![Vec::new(); self.num_nodes];
        for (k, &(s, d)) in self.edges.iter().enumerate() {
            adj[d].push((s, k));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Check every feature index against the vocabulary.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for (v, feats) in self.node_feats.iter().enumerate() {
            check_slots("node", v, feats, &vocab.node)?;
        }
        for (e, feats) in self.edge_feats.iter().enumerate() {
            check_slots("edge", e, feats, &vocab.edge)?;
        }
        Ok(())
    }
}

fn check_slots(kind: &str, item: usize, feats: &[usize], cards: &[usize]) -> Result<()> {
    if feats.len() != cards.len() {
        return Err(Error::InvalidGraph(format!(
            "{kind} {item} has {} feature slots, vocabulary has {}",
            feats.len(),
            cards.len()
        )));
    }
    for (slot, (&f, &card)) in feats.iter().zip(cards).enumerate() {
        if f >= card {
            return Err(Error::InvalidGraph(format!(
                "{kind} {item} slot {slot}: index {f} outside vocabulary of size {card}"
            )));
        }
    }
    Ok(())
}
