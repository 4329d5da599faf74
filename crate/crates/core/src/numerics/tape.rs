//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`] holding its output value
//! and whatever the backward rule needs. Inputs always precede outputs, so
//! walking node ids downwards from the loss is a reverse topological order
//! and each node is visited exactly once.

use std::rc::Rc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Weighted row gather in CSR layout: output row `r` is
/// `sum_k weights[k] * src[rows[k]]` for `k` in `offsets[r]..offsets[r + 1]`.
/// An empty group yields a zero row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGather {
    offsets: Vec<usize>,
    rows: Vec<usize>,
    weights: Vec<f64>,
}

impl Default for RowGather {
    fn default() -> Self {
        Self::new()
    }
}

impl RowGather {
    pub fn new() -> Self {
        Self { offsets: vec![0], rows: Vec::new(), weights: Vec::new() }
    }

    pub fn with_capacity(groups: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(groups + 1);
        offsets.push(0);
        Self { offsets, rows: Vec::with_capacity(entries), weights: Vec::with_capacity(entries) }
    }

    /// One unit-weight entry per output row.
    pub fn from_indices(indices: &[usize]) -> Self {
        Self {
            offsets: (0..=indices.len()).collect(),
            rows: indices.to_vec(),
            weights: vec![1.0; indices.len()],
        }
    }

    /// Add an entry to the group currently being built.
    pub fn push(&mut self, row: usize, weight: f64) {
        self.rows.push(row);
        self.weights.push(weight);
    }

    /// Close the current group.
    pub fn finish_group(&mut self) {
        self.offsets.push(self.rows.len());
    }

    pub fn push_group(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (r, w) in entries {
            self.push(r, w);
        }
        self.finish_group();
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        self.rows.len()
    }

    fn group(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.rows[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, dims: MatDims },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Softmax { logits: Var, bias: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Gather { src: Var, index: Rc<RowGather> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L1 { pred: Var, target: Vec<f64> },
    Bce { pred: Var, target: Vec<f64> },
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    shared_b: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access into a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x[..., c] + bias[c]`, broadcasting over leading dimensions.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.last_dim();
        if vb.len() != c {
            return Err(shape_err("add_row", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// `a[..., m, k] @ b`, where `b` is either a shared `[k, n]` matrix or
    /// carries the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] @ b^T` with `b` shaped `[n, k]` or `[..., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let mismatch = || shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b = {trans_b})"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && &sb[..sb.len() - 2] != lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            gemm(batch * m, k, n, va.data(), (k, 1), vb.data(), (rsb, csb), 0.0, &mut out);
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..],
                    (k, 1),
                    &vb.data()[bi * k * n..],
                    (rsb, csb),
                    0.0,
                    &mut out[bi * m * n..],
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let dims = MatDims { batch, m, k, n, trans_b, shared_b };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, dims }, ng))
    }

    /// `[b, n, heads * dh] -> [b * heads, n, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(shape_err("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut out = vec![0.0; vx.len()];
        let src = vx.data();
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let o = ((bi * heads + h) * n + i) * dh;
                    let x0 = (bi * n + i) * d + h * dh;
                    out[o..o + dh].copy_from_slice(&src[x0..x0 + dh]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![b * heads, n, dh], out)?, Op::SplitHeads { x, heads }, ng))
    }

    /// Inverse of [`Tape::split_heads`]: `[b * heads, n, dh] -> [b, n, heads * dh]`.
    pub fn concat_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(shape_err("concat_heads", format!("{s:?} from {heads} heads")));
        }
        let (b, n, dh) = (s[0] / heads, s[1], s[2]);
        let d = heads * dh;
        let mut out = vec![0.0; vx.len()];
        let src = vx.data();
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let x0 = ((bi * heads + h) * n + i) * dh;
                    let o = (bi * n + i) * d + h * dh;
                    out[o..o + dh].copy_from_slice(&src[x0..x0 + dh]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![b, n, d], out)?, Op::MergeHeads { x, heads }, ng))
    }

    /// Row-wise softmax over `logits + bias` along the trailing dimension.
    /// Entries with `mask[k] == false` are treated as `-inf`.
    pub fn biased_masked_softmax(&mut self, logits: Var, bias: Option<Var>, mask: Option<&[bool]>) -> Result<Var> {
        let vl = self.value(logits);
        if let Some(b) = bias {
            if self.value(b).shape() != vl.shape() {
                return Err(shape_err(
                    "softmax",
                    format!("bias {:?} vs logits {:?}", self.value(b).shape(), vl.shape()),
                ));
            }
        }
        if let Some(m) = mask {
            if m.len() != vl.len() {
                return Err(shape_err("softmax", format!("mask of {} for {} logits", m.len(), vl.len())));
            }
        }
        let c = vl.last_dim();
        let mut z = vl.data().to_vec();
        if let Some(b) = bias {
            for (zi, bi) in z.iter_mut().zip(self.value(b).data()) {
                *zi += bi;
            }
        }
        for (r, row) in z.chunks_mut(c.max(1)).enumerate() {
            let live = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if live(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if live(j) { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(vl.shape().to_vec(), z)?;
        let ng = self.needs(logits) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Softmax { logits, bias }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if d == 0 || vx.shape().is_empty() {
            return Err(shape_err("layer_norm", "empty feature dimension".into()));
        }
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.len() != d || vb.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Inverted dropout. Identity (no node recorded) when not training or
    /// when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Var {
        if !training || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout rate must be below 1");
        let keep = 1.0 / (1.0 - p);
        let vx = self.value(x);
        let mask: Vec<f64> = (0..vx.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same length");
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Weighted row gather from `src` viewed as `[rows, src.last_dim()]`.
    /// `out_shape` must hold `index.num_groups() * src.last_dim()` values.
    pub fn gather_rows(&mut self, src: Var, index: Rc<RowGather>, out_shape: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        let c = vs.last_dim();
        let rows = vs.len().checked_div(c).unwrap_or(0);
        let total: usize = out_shape.iter().product();
        if total != index.num_groups() * c {
            return Err(shape_err(
                "gather_rows",
                format!("{} groups of width {c} into {out_shape:?}", index.num_groups()),
            ));
        }
        if let Some(&bad) = index.rows.iter().find(|&&r| r >= rows) {
            return Err(Error::IndexOutOfRange { index: bad, rows });
        }
        let mut out = vec![0.0; total];
        for (g, dst) in out.chunks_mut(c.max(1)).enumerate() {
            for (r, w) in index.group(g) {
                for (o, s) in dst.iter_mut().zip(&vs.data()[r * c..(r + 1) * c]) {
                    *o += w * s;
                }
            }
        }
        let ng = self.needs(src);
        Ok(self.push(Tensor::new(out_shape.to_vec(), out)?, Op::Gather { src, index }, ng))
    }

    /// Rows of `table` selected by `indices`, shaped `[indices.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(table).last_dim();
        self.gather_rows(table, Rc::new(RowGather::from_indices(indices)), &[indices.len(), d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean absolute error against fixed targets.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let vp = self.value(pred);
        if vp.len() != target.len() || target.is_empty() {
            return Err(shape_err("l1_loss", format!("{} predictions, {} targets", vp.len(), target.len())));
        }
        let l = vp.data().iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len() as f64;
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(l), Op::L1 { pred, target: target.to_vec() }, ng))
    }

    /// Mean binary cross-entropy on logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let vp = self.value(pred);
        if vp.len() != target.len() || target.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{} predictions, {} targets", vp.len(), target.len())));
        }
        let l = vp
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / target.len() as f64;
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(l), Op::Bce { pred, target: target.to_vec() }, ng))
    }

    /// Back-propagate from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss of shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                acc(*bias, &mut |buf| {
                    let c = buf.len();
                    for row in g.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(o, gi)| *o += gi);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += s * gi)),
            Op::MatMul { a, b, dims } => {
                let MatDims { batch, m, k, n, trans_b, shared_b } = *dims;
                let (va, vb) = (val(*a), val(*b));
                // (op B)^T as a strided view of b
                let bt = if trans_b { (k, 1) } else { (1, n) };
                acc(*a, &mut |buf| {
                    if shared_b {
                        gemm(batch * m, n, k, g, (n, 1), vb, bt, 1.0, buf);
                    } else {
                        for bi in 0..batch {
                            gemm(m, n, k, &g[bi * m * n..], (n, 1), &vb[bi * k * n..], bt, 1.0, &mut buf[bi * m * k..]);
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    let (rows, per_b) = if shared_b { (batch * m, 1) } else { (m, batch) };
                    for bi in 0..per_b {
                        let (ga, aa) = (&g[bi * m * n..], &va[bi * m * k..]);
                        let dst = &mut buf[bi * k * n..];
                        if trans_b {
                            gemm(n, rows, k, ga, (1, n), aa, (k, 1), 1.0, dst);
                        } else {
                            gemm(k, rows, n, aa, (1, k), ga, (n, 1), 1.0, dst);
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                acc(*x, &mut |buf| {
                    for bi in 0..b {
                        for i in 0..n {
                            for h in 0..*heads {
                                let o = ((bi * heads + h) * n + i) * dh;
                                let x0 = (bi * n + i) * d + h * dh;
                                buf[x0..x0 + dh].iter_mut().zip(&g[o..o + dh]).for_each(|(p, q)| *p += q);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let (b, n, dh) = (s[0] / heads, s[1], s[2]);
                let d = heads * dh;
                acc(*x, &mut |buf| {
                    for bi in 0..b {
                        for i in 0..n {
                            for h in 0..*heads {
                                let x0 = ((bi * heads + h) * n + i) * dh;
                                let o = (bi * n + i) * d + h * dh;
                                buf[x0..x0 + dh].iter_mut().zip(&g[o..o + dh]).for_each(|(p, q)| *p += q);
                            }
                        }
                    }
                });
            }
            Op::Softmax { logits, bias } => {
                let p = node.value.data();
                let c = node.value.last_dim().max(1);
                let mut dz = vec![0.0; p.len()];
                for ((dzr, pr), gr) in dz.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &pi), &gi) in dzr.iter_mut().zip(pr).zip(gr) {
                        *d = pi * (gi - dot);
                    }
                }
                acc(*logits, &mut |buf| buf.iter_mut().zip(&dz).for_each(|(o, d)| *o += d));
                if let Some(b) = bias {
                    acc(*b, &mut |buf| buf.iter_mut().zip(&dz).for_each(|(o, d)| *o += d));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let vg = val(*gamma);
                let d = vg.len();
                acc(*gamma, &mut |buf| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for gr in g.chunks(d) {
                        buf.iter_mut().zip(gr).for_each(|(o, gi)| *o += gi);
                    }
                });
                acc(*x, &mut |buf| {
                    let df = d as f64;
                    for (r, ((br, gr), hr)) in buf.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * vg[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * vg[j];
                            br[j] += inv_std[r] * (dh - s1 / df - hr[j] * s2 / df);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &mut |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(vx) {
                        *o += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |buf| {
                for ((o, gi), mi) in buf.iter_mut().zip(g).zip(mask) {
                    *o += gi * mi;
                }
            }),
            Op::Gather { src, index } => {
                let c = nodes[src.0].value.last_dim().max(1);
                acc(*src, &mut |buf| {
                    for (gi, grow) in g.chunks(c).enumerate() {
                        for (r, w) in index.group(gi) {
                            for (o, q) in buf[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                *o += w * q;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi)),
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => acc(*x, &mut |buf| {
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|o| *o += s);
            }),
            Op::L1 { pred, target } => {
                let vp = val(*pred);
                let s = g[0] / target.len() as f64;
                acc(*pred, &mut |buf| {
                    for ((o, p), t) in buf.iter_mut().zip(vp).zip(target) {
                        let diff: f64 = p - t;
                        if diff != 0.0 {
                            *o += s * diff.signum();
                        }
                    }
                });
            }
            Op::Bce { pred, target } => {
                let vp = val(*pred);
                let s = g[0] / target.len() as f64;
                acc(*pred, &mut |buf| {
                    for ((o, &z), &t) in buf.iter_mut().zip(vp).zip(target) {
                        let sig = 1.0 / (1.0 + (-z).exp());
                        *o += s * (sig - t);
                    }
                });
            }
        }
    }
}
