use std::rc::Rc;

use crate::encoding::{centrality_index, edge_feature_index, edge_path_index, padding_bias, spatial_index};
use crate::error::{Error, Result};
use crate::graph::{attach_virtual_node, Graph, StructuralFeatures, Vocab};
use crate::numerics::{RowGather, Tensor};

use super::ModelConfig;

/// A graph with its structural features computed and the virtual node
/// attached (as the last node of `sf`). `graph` is the original graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    pub graph: Graph,
    pub sf: StructuralFeatures,
}

impl PreparedGraph {
    pub fn new(graph: Graph, max_path_len: usize) -> Result<Self> {
        let sf = StructuralFeatures::compute(&graph, max_path_len);
        Self::from_parts(graph, sf)
    }

    /// `sf` must describe `graph` without the virtual node.
    pub fn from_parts(graph: Graph, sf: StructuralFeatures) -> Result<Self> {
        let (_, sf) = attach_virtual_node(&graph, &sf)?;
        Ok(Self { graph, sf })
    }

    /// Node count including the virtual node.
    pub fn num_nodes(&self) -> usize {
        self.sf.num_nodes()
    }

    pub fn vnode(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// Padded, index-compiled batch for one model configuration.
#[derive(Debug, Clone)]
pub struct Batch {
    pub num_graphs: usize,
    /// Padded node count per graph (virtual node included).
    pub n_pad: usize,
    pub heads: usize,
    pub num_edges: usize,
    /// Real node count per graph, virtual node included.
    pub node_counts: Vec<usize>,
    pub node_embed: Rc<RowGather>,
    pub z_in: Rc<RowGather>,
    pub z_out: Rc<RowGather>,
    pub spatial: Rc<RowGather>,
    pub edge_feats: Rc<RowGather>,
    pub edge_paths: Rc<RowGather>,
    pub readout: Rc<RowGather>,
    /// `[graphs * heads, n_pad, n_pad]` padding mask.
    pub pad_bias: Tensor,
    /// Per-graph target; `NaN` when the graph is unlabeled.
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(graphs: &[&PreparedGraph], cfg: &ModelConfig, vocab: &Vocab) -> Result<Self> {
        let n_pad = graphs.iter().map(|g| g.num_nodes()).max().unwrap_or(0);
        Self::padded(graphs, cfg, vocab, n_pad)
    }

    /// Like [`Batch::new`] but pads every graph to `n_pad` nodes.
    pub fn padded(graphs: &[&PreparedGraph], cfg: &ModelConfig, vocab: &Vocab, n_pad: usize) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::EmptyDataset("batch"));
        }
        let heads = cfg.num_heads;
        let node_counts: Vec<usize> = graphs.iter().map(|g| g.num_nodes()).collect();
        if let Some(&big) = node_counts.iter().find(|&&n| n > n_pad) {
            return Err(Error::Shape { op: "batch", detail: format!("graph of {big} nodes padded to {n_pad}") });
        }
        for g in graphs {
            g.graph.validate(vocab)?;
            if !g.sf.has_vnode {
                return Err(Error::InvalidGraph("batch graph lacks a virtual node".into()));
            }
        }
        let sfs: Vec<&StructuralFeatures> = graphs.iter().map(|g| &g.sf).collect();

        let node_offsets = vocab.node_offsets();
        let vnode_row = vocab.node_rows();
        let mut node_embed = RowGather::with_capacity(graphs.len() * n_pad, 0);
        for g in graphs {
            for v in 0..n_pad {
                if v < g.vnode() {
                    for (&f, &o) in g.graph.node_feats()[v].iter().zip(&node_offsets) {
                        node_embed.push(o + f, 1.0);
                    }
                } else if v == g.vnode() {
                    node_embed.push(vnode_row, 1.0);
                }
                node_embed.finish_group();
            }
        }

        let (z_in, z_out) = centrality_index(&sfs, n_pad, cfg.max_deg);
        let spatial = spatial_index(&sfs, n_pad, heads, cfg.max_spd);

        let mut edge_base = Vec::with_capacity(graphs.len());
        let mut num_edges = 0;
        for g in graphs {
            edge_base.push(num_edges);
            num_edges += g.graph.num_edges();
        }
        let edge_feats = edge_feature_index(
            graphs.iter().flat_map(|g| g.graph.edge_feats().iter().map(Vec::as_slice)),
            vocab,
        );
        let edge_paths = edge_path_index(&sfs, &edge_base, n_pad, heads, cfg.max_path_len);

        let readout = RowGather::from_indices(
            &graphs.iter().enumerate().map(|(b, g)| b * n_pad + g.vnode()).collect::<Vec<_>>(),
        );
        let targets = graphs.iter().map(|g| g.graph.target.map_or(f64::NAN, |t| t.value())).collect();

        Ok(Self {
            num_graphs: graphs.len(),
            n_pad,
            heads,
            num_edges,
            pad_bias: padding_bias(&node_counts, n_pad, heads),
            node_counts,
            node_embed: Rc::new(node_embed),
            z_in: Rc::new(z_in),
            z_out: Rc::new(z_out),
            spatial: Rc::new(spatial),
            edge_feats: Rc::new(edge_feats),
            edge_paths: Rc::new(edge_paths),
            readout: Rc::new(readout),
            targets,
        })
    }
}
