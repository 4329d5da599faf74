//! Structural encodings: degree-indexed centrality embeddings added to the
//! node inputs, an SPD-indexed scalar attention bias, and the edge bias that
//! averages edge-feature/weight dot products along a shortest path.
//!
//! All three are expressed as weighted row gathers over learnable tables,
//! so a batch of padded graphs is handled by the same code as one graph.
//! Table sizes determine the clamp limits:
//!
//! * `z_in`, `z_out`: `[max_deg + 2, d]`; row `max_deg + 1` is the virtual node.
//! * `b_spatial`: `[heads, max_spd + 3]`; columns `0..=max_spd` are distances,
//!   then the unreachable sentinel, then the virtual-node code.
//! * `w_edge`: `[heads, max_path_len, d_e]`.
//! * `edge_embed`: `[sum of edge vocab sizes, d_e]`.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{StructuralFeatures, Vocab, UNREACHABLE, VNODE_CODE};
use crate::numerics::{RowGather, Tape, Tensor, Var, NEG_INF_BIAS};

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingTables<T> {
    pub z_in: T,
    pub z_out: T,
    pub b_spatial: T,
    pub w_edge: T,
    pub edge_embed: T,
}

/// Sizes implied by a set of tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingDims {
    pub hidden: usize,
    pub heads: usize,
    pub max_deg: usize,
    pub max_spd: usize,
    pub max_path_len: usize,
    pub edge_dim: usize,
}

impl<T> EncodingTables<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncodingTables<U> {
        EncodingTables {
            z_in: f(&self.z_in),
            z_out: f(&self.z_out),
            b_spatial: f(&self.b_spatial),
            w_edge: f(&self.w_edge),
            edge_embed: f(&self.edge_embed),
        }
    }

    pub fn named(&self) -> [(&'static str, &T); 5] {
        [
            ("z_in", &self.z_in),
            ("z_out", &self.z_out),
            ("b_spatial", &self.b_spatial),
            ("w_edge", &self.w_edge),
            ("edge_embed", &self.edge_embed),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut T); 5] {
        [
            ("z_in", &mut self.z_in),
            ("z_out", &mut self.z_out),
            ("b_spatial", &mut self.b_spatial),
            ("w_edge", &mut self.w_edge),
            ("edge_embed", &mut self.edge_embed),
        ]
    }
}

impl EncodingTables<Tensor> {
    pub fn zeros(dims: EncodingDims, edge_rows: usize) -> Self {
        let EncodingDims { hidden, heads, max_deg, max_spd, max_path_len, edge_dim } = dims;
        Self {
            z_in: Tensor::zeros(&[max_deg + 2, hidden]),
            z_out: Tensor::zeros(&[max_deg + 2, hidden]),
            b_spatial: Tensor::zeros(&[heads, max_spd + 3]),
            w_edge: Tensor::zeros(&[heads, max_path_len, edge_dim]),
            edge_embed: Tensor::zeros(&[edge_rows, edge_dim]),
        }
    }

    /// Truncated-normal (std 0.02) tables.
    pub fn init<R: Rng + ?Sized>(dims: EncodingDims, edge_rows: usize, rng: &mut R) -> Self {
        let z = Self::zeros(dims, edge_rows);
        z.map(|t| Tensor::trunc_normal(t.shape(), 0.02, rng))
    }

    pub fn dims(&self) -> EncodingDims {
        dims_of(&self.z_in, &self.b_spatial, &self.w_edge)
    }
}

impl EncodingTables<Var> {
    pub fn dims(&self, tape: &Tape) -> EncodingDims {
        dims_of(tape.value(self.z_in), tape.value(self.b_spatial), tape.value(self.w_edge))
    }
}

fn dims_of(z_in: &Tensor, b_spatial: &Tensor, w_edge: &Tensor) -> EncodingDims {
    EncodingDims {
        hidden: z_in.shape()[1],
        heads: b_spatial.shape()[0],
        max_deg: z_in.shape()[0] - 2,
        max_spd: b_spatial.shape()[1] - 3,
        max_path_len: w_edge.shape()[1],
        edge_dim: w_edge.shape()[2],
    }
}

/// Column of `b_spatial` for a stored distance value.
pub fn spatial_code(spd: i32, max_spd: usize) -> usize {
    match spd {
        VNODE_CODE => max_spd + 2,
        UNREACHABLE => max_spd + 1,
        d if d >= 0 => (d as usize).min(max_spd),
        other => panic!("invalid stored distance {other}"),
    }
}

/// Row of `z_in`/`z_out` for a degree; the virtual node has its own row.
pub fn degree_row(degree: usize, is_vnode: bool, max_deg: usize) -> usize {
    if is_vnode {
        max_deg + 1
    } else {
        degree.min(max_deg)
    }
}

/// Gather indices for the in/out-degree tables over a padded batch.
/// Padding rows get empty groups (zero contribution).
pub fn centrality_index(graphs: &[&StructuralFeatures], n_pad: usize, max_deg: usize) -> (RowGather, RowGather) {
    let mut zin = RowGather::with_capacity(graphs.len() * n_pad, graphs.len() * n_pad);
    let mut zout = RowGather::with_capacity(graphs.len() * n_pad, graphs.len() * n_pad);
    for sf in graphs {
        let n = sf.num_nodes();
        for v in 0..n_pad {
            if v < n {
                let vn = sf.is_vnode(v);
                zin.push(degree_row(sf.indeg[v], vn, max_deg), 1.0);
                zout.push(degree_row(sf.outdeg[v], vn, max_deg), 1.0);
            }
            zin.finish_group();
            zout.finish_group();
        }
    }
    (zin, zout)
}

/// Gather index over `b_spatial` flattened to `[heads * (max_spd + 3), 1]`.
/// Groups are ordered `(graph, head, i, j)`.
pub fn spatial_index(graphs: &[&StructuralFeatures], n_pad: usize, heads: usize, max_spd: usize) -> RowGather {
    let codes = max_spd + 3;
    let mut idx = RowGather::with_capacity(graphs.len() * heads * n_pad * n_pad, 0);
    for sf in graphs {
        let n = sf.num_nodes();
        for h in 0..heads {
            for i in 0..n_pad {
                for j in 0..n_pad {
                    if i < n && j < n {
                        idx.push(h * codes + spatial_code(sf.spd.get(i, j), max_spd), 1.0);
                    }
                    idx.finish_group();
                }
            }
        }
    }
    idx
}

/// Gather index over the per-edge dot products `D[e, h, k] = <x_e, w_edge[h][k]>`
/// flattened to `[edges * heads * max_path_len, 1]`. `edge_base[b]` is the
/// global index of graph `b`'s first edge. Each group averages over the
/// recorded path; empty paths give an empty group.
pub fn edge_path_index(
    graphs: &[&StructuralFeatures],
    edge_base: &[usize],
    n_pad: usize,
    heads: usize,
    max_path_len: usize,
) -> RowGather {
    let mut idx = RowGather::with_capacity(graphs.len() * heads * n_pad * n_pad, 0);
    for (sf, &base) in graphs.iter().zip(edge_base) {
        let n = sf.num_nodes();
        for h in 0..heads {
            for i in 0..n_pad {
                for j in 0..n_pad {
                    if i < n && j < n {
                        let path = sf.path_edges.get(i, j);
                        let path = &path[..path.len().min(max_path_len)];
                        let w = 1.0 / path.len().max(1) as f64;
                        for (k, &e) in path.iter().enumerate() {
                            idx.push(((base + e as usize) * heads + h) * max_path_len + k, w);
                        }
                    }
                    idx.finish_group();
                }
            }
        }
    }
    idx
}

/// Sum of per-slot embedding rows for every edge, in order.
pub fn edge_feature_index<'a>(edge_feats: impl IntoIterator<Item = &'a [usize]>, vocab: &Vocab) -> RowGather {
    let offsets = vocab.edge_offsets();
    let mut idx = RowGather::new();
    for feats in edge_feats {
        idx.push_group(feats.iter().zip(&offsets).map(|(&f, &o)| (o + f, 1.0)));
    }
    idx
}

/// `[graphs * heads, n_pad, n_pad]` with [`NEG_INF_BIAS`] in every column
/// past a graph's real node count and zero elsewhere.
pub fn padding_bias(node_counts: &[usize], n_pad: usize, heads: usize) -> Tensor {
    let mut t = Tensor::zeros(&[node_counts.len() * heads, n_pad, n_pad]);
    let data = t.data_mut();
    for (b, &n) in node_counts.iter().enumerate() {
        for h in 0..heads {
            let base = (b * heads + h) * n_pad * n_pad;
            for i in 0..n_pad {
                for j in n..n_pad {
                    data[base + i * n_pad + j] = NEG_INF_BIAS;
                }
            }
        }
    }
    t
}

/// Batched spatial bias from a prebuilt [`spatial_index`].
pub fn spatial_bias_from_index(
    tape: &mut Tape,
    b_spatial: Var,
    index: Rc<RowGather>,
    out_shape: &[usize],
) -> Result<Var> {
    let s = tape.value(b_spatial).shape().to_vec();
    let flat = tape.reshape(b_spatial, &[s.iter().product(), 1])?;
    tape.gather_rows(flat, index, out_shape)
}

/// Batched edge bias: `edge_vectors` is `[edges, d_e]` for the whole batch.
pub fn edge_bias_from_index(
    tape: &mut Tape,
    edge_vectors: Var,
    w_edge: Var,
    index: Rc<RowGather>,
    out_shape: &[usize],
) -> Result<Var> {
    let ws = tape.value(w_edge).shape().to_vec();
    let (heads, len, de) = (ws[0], ws[1], ws[2]);
    let xs = tape.value(edge_vectors).shape().to_vec();
    if xs.len() != 2 || xs[1] != de {
        return Err(Error::Shape { op: "edge_bias", detail: format!("edge vectors {xs:?} vs w_edge {ws:?}") });
    }
    let w = tape.reshape(w_edge, &[heads * len, de])?;
    let dots = tape.matmul_t(edge_vectors, w)?; // [edges, heads * len]
    let flat = tape.reshape(dots, &[xs[0] * heads * len, 1])?;
    tape.gather_rows(flat, index, out_shape)
}

/// Adds `z_in[deg_in] + z_out[deg_out]` to each node row. Undirected graphs
/// carry the same degree in both vectors; the virtual node uses its
/// reserved row.
pub fn centrality_encode(
    tape: &mut Tape,
    node_embed: Var,
    sf: &StructuralFeatures,
    tables: &EncodingTables<Var>,
) -> Result<Var> {
    let dims = tables.dims(tape);
    let n = sf.num_nodes();
    let shape = tape.value(node_embed).shape().to_vec();
    if shape != [n, dims.hidden] {
        return Err(Error::Shape { op: "centrality_encode", detail: format!("{shape:?} for {n} nodes") });
    }
    let (zin, zout) = centrality_index(&[sf], n, dims.max_deg);
    let a = tape.gather_rows(tables.z_in, Rc::new(zin), &shape)?;
    let b = tape.gather_rows(tables.z_out, Rc::new(zout), &shape)?;
    let x = tape.add(node_embed, a)?;
    tape.add(x, b)
}

/// `[heads, n, n]` spatial bias of one graph.
pub fn spatial_bias(tape: &mut Tape, sf: &StructuralFeatures, tables: &EncodingTables<Var>) -> Result<Var> {
    let dims = tables.dims(tape);
    let n = sf.num_nodes();
    let idx = spatial_index(&[sf], n, dims.heads, dims.max_spd);
    spatial_bias_from_index(tape, tables.b_spatial, Rc::new(idx), &[dims.heads, n, n])
}

/// `[heads, n, n]` edge bias of one graph; `edge_vectors` is `[m, d_e]`.
pub fn edge_bias(
    tape: &mut Tape,
    sf: &StructuralFeatures,
    edge_vectors: Var,
    tables: &EncodingTables<Var>,
) -> Result<Var> {
    let dims = tables.dims(tape);
    let n = sf.num_nodes();
    let idx = edge_path_index(&[sf], &[0], n, dims.heads, dims.max_path_len);
    edge_bias_from_index(tape, edge_vectors, tables.w_edge, Rc::new(idx), &[dims.heads, n, n])
}

/// Sum of the available bias terms with padded positions (nonzero entries
/// of `pad_mask`, as built by [`padding_bias`]) forced to the mask value.
/// Any of the terms may be absent (ablations).
pub fn assemble_attention_bias(
    tape: &mut Tape,
    spatial: Option<Var>,
    edge: Option<Var>,
    pad_mask: &Tensor,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for term in [spatial, edge].into_iter().flatten() {
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let pad = tape.constant(pad_mask.clone());
    let Some(sum) = acc else { return Ok(pad) };
    if pad_mask.data().iter().all(|&v| v == 0.0) {
        return tape.add(sum, pad);
    }
    let keep = tape.constant(pad_mask.map(|v| if v == 0.0 { 1.0 } else { 0.0 }));
    let kept = tape.mul(sum, keep)?;
    tape.add(kept, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{attach_virtual_node, Graph};

    fn dims(heads: usize, hidden: usize) -> EncodingDims {
        EncodingDims { hidden, heads, max_deg: 64, max_spd: 20, max_path_len: 20, edge_dim: 3 }
    }

    fn bind(tape: &mut Tape, t: &EncodingTables<Tensor>) -> EncodingTables<Var> {
        t.map(|x| tape.param(x.clone()))
    }

    #[test]
    fn zero_tables_are_identity() {
        let g = Graph::cycle(5);
        let sf = StructuralFeatures::compute(&g, 20);
        let tables = EncodingTables::zeros(dims(2, 4), 1);
        let mut tape = Tape::new();
        let tv = bind(&mut tape, &tables);
        let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rand::rng());
        let xv = tape.constant(x.clone());
        let y = centrality_encode(&mut tape, xv, &sf, &tv).unwrap();
        assert_eq!(tape.value(y), &x);
        let s = spatial_bias(&mut tape, &sf, &tv).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        let ev = tape.constant(Tensor::full(&[5, 3], 1.0));
        let e = edge_bias(&mut tape, &sf, ev, &tv).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn directed_centrality_rows() {
        let g = Graph::new(2, true, vec![(0, 1)]).unwrap();
        let sf = StructuralFeatures::compute(&g, 20);
        let d = EncodingDims { hidden: 4, heads: 1, max_deg: 2, max_spd: 3, max_path_len: 2, edge_dim: 1 };
        let mut tables = EncodingTables::zeros(d, 1);
        // one-hot rows: z_in[k] = e_k, z_out[k] = 10 e_k
        for k in 0..4 {
            tables.z_in.data_mut()[k * 4 + k] = 1.0;
            tables.z_out.data_mut()[k * 4 + k] = 10.0;
        }
        let mut tape = Tape::new();
        let tv = bind(&mut tape, &tables);
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let y = centrality_encode(&mut tape, x, &sf, &tv).unwrap();
        // node 0: indeg 0, outdeg 1 -> z_in[0] + z_out[1]
        assert_eq!(tape.value(y).row(0), &[1.0, 10.0, 0.0, 0.0]);
        // node 1: indeg 1, outdeg 0 -> z_in[1] + z_out[0]
        assert_eq!(tape.value(y).row(1), &[10.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn degree_clamps() {
        assert_eq!(degree_row(100, false, 64), 64);
        assert_eq!(degree_row(3, false, 64), 3);
        assert_eq!(degree_row(3, true, 64), 65);
        assert_eq!(spatial_code(25, 20), 20);
        assert_eq!(spatial_code(UNREACHABLE, 20), 21);
        assert_eq!(spatial_code(VNODE_CODE, 20), 22);
    }

    #[test]
    fn vnode_uses_reserved_rows_and_code() {
        let g = Graph::path(3);
        let sf = StructuralFeatures::compute(&g, 20);
        let (_, sf) = attach_virtual_node(&g, &sf).unwrap();
        let d = dims(1, 2);
        let mut tables = EncodingTables::zeros(d, 1);
        tables.b_spatial.data_mut()[22] = 7.0; // vnode code
        tables.b_spatial.data_mut()[0] = -3.0; // self distance
        tables.z_in.data_mut()[65 * 2] = 5.0; // reserved degree row
        let mut tape = Tape::new();
        let tv = bind(&mut tape, &tables);
        let s = spatial_bias(&mut tape, &sf, &tv).unwrap();
        let s = tape.value(s);
        for j in 0..3 {
            assert_eq!(s.at(&[0, 3, j]), 7.0);
            assert_eq!(s.at(&[0, j, 3]), 7.0);
        }
        assert_eq!(s.at(&[0, 3, 3]), -3.0);
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        let y = centrality_encode(&mut tape, x, &sf, &tv).unwrap();
        assert_eq!(tape.value(y).row(3), &[5.0, 0.0]);
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0]);
    }

    #[test]
    fn neighbor_mask_table() {
        let g = Graph::path(3);
        let sf = StructuralFeatures::compute(&g, 20);
        let mut tables = EncodingTables::zeros(dims(1, 2), 1);
        tables.b_spatial.data_mut().fill(NEG_INF_BIAS);
        tables.b_spatial.data_mut()[1] = 0.0;
        let mut tape = Tape::new();
        let tv = bind(&mut tape, &tables);
        let s = spatial_bias(&mut tape, &sf, &tv).unwrap();
        let s = tape.value(s);
        for i in 0..3 {
            for j in 0..3 {
                let adjacent = usize::abs_diff(i, j) == 1;
                assert_eq!(s.at(&[0, i, j]), if adjacent { 0.0 } else { NEG_INF_BIAS });
            }
        }
    }

    #[test]
    fn edge_bias_single_and_two_edge_paths() {
        let g = Graph::path(3);
        let sf = StructuralFeatures::compute(&g, 20);
        let d = EncodingDims { hidden: 2, heads: 1, max_deg: 4, max_spd: 4, max_path_len: 4, edge_dim: 2 };
        let mut tables = EncodingTables::zeros(d, 1);
        // w[0] = e0, w[1] = e1
        tables.w_edge.data_mut()[0] = 1.0;
        tables.w_edge.data_mut()[3] = 1.0;
        let mut tape = Tape::new();
        let tv = bind(&mut tape, &tables);
        // x_e0 = (1, 0) -> <x_e0, w0> = 1; x_e1 = (0, 3) -> <x_e1, w1> = 3
        let ev = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let c = edge_bias(&mut tape, &sf, ev, &tv).unwrap();
        let c = tape.value(c);
        assert_eq!(c.at(&[0, 0, 1]), 1.0);
        assert_eq!(c.at(&[0, 0, 2]), 2.0);
        assert_eq!(c.at(&[0, 1, 1]), 0.0);
    }

    #[test]
    fn c6_spatial_bias_symmetric() {
        let sf = StructuralFeatures::compute(&Graph::cycle(6), 20);
        let tables = EncodingTables::init(dims(3, 4), 1, &mut rand::rng());
        let mut tape = Tape::new();
        let tv = bind(&mut tape, &tables);
        let s = spatial_bias(&mut tape, &sf, &tv).unwrap();
        let s = tape.value(s);
        for h in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(s.at(&[h, i, j]), s.at(&[h, j, i]));
                }
            }
        }
    }

    #[test]
    fn assembly_masks_padding() {
        let mut tape = Tape::new();
        let pad = padding_bias(&[2], 3, 2);
        let sp = tape.constant(Tensor::full(&[2, 3, 3], 0.5));
        let ed = tape.constant(Tensor::full(&[2, 3, 3], 0.25));
        let zero = assemble_attention_bias(&mut tape, None, None, &padding_bias(&[3], 3, 2)).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
        let a = assemble_attention_bias(&mut tape, Some(sp), Some(ed), &pad).unwrap();
        let a = tape.value(a);
        for h in 0..2 {
            for i in 0..3 {
                assert_eq!(a.at(&[h, i, 2]), NEG_INF_BIAS);
                for j in 0..2 {
                    assert_eq!(a.at(&[h, i, j]), 0.75);
                }
            }
        }
    }
}
