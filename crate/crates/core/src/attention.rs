//! Biased multi-head self-attention and the pre-LN Graphormer layer.
//!
//! Activations are `[batch, n, d]`; a plain `[n, d]` input is treated as a
//! batch of one. Attention biases are `[batch * heads, n, n]`.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, LN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    /// Additive query bias; absent in trained models.
    pub q_bias: Option<T>,
    /// Additive key bias; absent in trained models.
    pub k_bias: Option<T>,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            q_bias: self.q_bias.as_ref().map(&mut f),
            k_bias: self.k_bias.as_ref().map(&mut f),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
        }
    }

    /// Parameters in a fixed order with stable names. Optional biases are
    /// listed only when present.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut out = vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)];
        if let Some(b) = &self.q_bias {
            out.push(("q_bias", b));
        }
        if let Some(b) = &self.k_bias {
            out.push(("k_bias", b));
        }
        out.extend([
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        let mut out = vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ];
        if let Some(b) = &mut self.q_bias {
            out.push(("q_bias", b));
        }
        if let Some(b) = &mut self.k_bias {
            out.push(("k_bias", b));
        }
        out.extend([
            ("ffn_w1", &mut self.ffn_w1),
            ("ffn_b1", &mut self.ffn_b1),
            ("ffn_w2", &mut self.ffn_w2),
            ("ffn_b2", &mut self.ffn_b2),
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
        ]);
        out
    }
}

impl LayerParams<Tensor> {
    /// All projections zero, LN at identity.
    pub fn zeros(d: usize) -> Self {
        Self {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            q_bias: None,
            k_bias: None,
            ffn_w1: Tensor::zeros(&[d, d]),
            ffn_b1: Tensor::zeros(&[d]),
            ffn_w2: Tensor::zeros(&[d, d]),
            ffn_b2: Tensor::zeros(&[d]),
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    /// Truncated normal (std 0.02) projections, zero biases, unit LN.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut w = || Tensor::trunc_normal(&[d, d], 0.02, rng);
        Self {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            ffn_w1: w(),
            ffn_w2: w(),
            ..Self::zeros(d)
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Dropout rates and the randomness source for one forward pass.
pub struct Mode<'a> {
    pub training: bool,
    pub attention_dropout: f64,
    pub dropout: f64,
    pub rng: &'a mut dyn RngCore,
}

impl<'a> Mode<'a> {
    /// Evaluation mode: no dropout, the rng is never consulted.
    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        Self { training: false, attention_dropout: 0.0, dropout: 0.0, rng }
    }
}

/// Output of [`multi_head_attention_with_weights`].
pub struct Attention {
    pub output: Var,
    /// Softmax weights `[batch * heads, n, n]` before attention dropout.
    pub weights: Var,
}

/// Lift `[n, d]` to `[1, n, d]`, remembering whether to undo it.
fn as_batched(tape: &mut Tape, h: Var, op: &'static str) -> Result<(Var, bool)> {
    let s = tape.value(h).shape().to_vec();
    match s.len() {
        3 => Ok((h, false)),
        2 => Ok((tape.reshape(h, &[1, s[0], s[1]])?, true)),
        _ => Err(Error::Shape { op, detail: format!("activations {s:?}") }),
    }
}

fn unbatch(tape: &mut Tape, x: Var, squeeze: bool) -> Result<Var> {
    if !squeeze {
        return Ok(x);
    }
    let s = tape.value(x).shape().to_vec();
    tape.reshape(x, &s[1..])
}

fn project(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

pub fn multi_head_attention_with_weights(
    tape: &mut Tape,
    h: Var,
    bias: Option<Var>,
    p: &LayerParams<Var>,
    heads: usize,
    mode: &mut Mode<'_>,
) -> Result<Attention> {
    let (x, squeeze) = as_batched(tape, h, "multi_head_attention")?;
    let s = tape.value(x).shape().to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape { op: "multi_head_attention", detail: format!("d = {d} with {heads} heads") });
    }
    if let Some(bias) = bias {
        let bs = tape.value(bias).shape();
        if bs != [b * heads, n, n] {
            return Err(Error::Shape {
                op: "multi_head_attention",
                detail: format!("bias {bs:?} for activations {s:?} and {heads} heads"),
            });
        }
    }
    let dh = d / heads;
    let q = project(tape, x, p.w_q, p.q_bias)?;
    let k = project(tape, x, p.w_k, p.k_bias)?;
    let v = project(tape, x, p.w_v, None)?;
    let q = tape.split_heads(q, heads)?;
    let k = tape.split_heads(k, heads)?;
    let v = tape.split_heads(v, heads)?;
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let weights = tape.biased_masked_softmax(logits, bias, None)?;
    let dropped = tape.dropout(weights, mode.attention_dropout, mode.training, &mut *mode.rng);
    let ctx = tape.matmul(dropped, v)?;
    let ctx = tape.concat_heads(ctx, heads)?;
    let out = tape.matmul(ctx, p.w_o)?;
    Ok(Attention { output: unbatch(tape, out, squeeze)?, weights })
}

/// Per head `softmax(Q K^T / sqrt(d_head) + bias) V`, heads concatenated and
/// projected by `W_O`.
pub fn multi_head_attention(
    tape: &mut Tape,
    h: Var,
    bias: Option<Var>,
    p: &LayerParams<Var>,
    heads: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    Ok(multi_head_attention_with_weights(tape, h, bias, p, heads, mode)?.output)
}

/// `W2 gelu(W1 x + b1) + b2`.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &LayerParams<Var>) -> Result<Var> {
    let a = project(tape, x, p.ffn_w1, Some(p.ffn_b1))?;
    let a = tape.gelu(a);
    project(tape, a, p.ffn_w2, Some(p.ffn_b2))
}

/// `h' = MHA(LN(h)) + h`, then `FFN(LN(h')) + h'`, with dropout on both
/// branch outputs while training.
pub fn graphormer_layer(
    tape: &mut Tape,
    h: Var,
    bias: Option<Var>,
    p: &LayerParams<Var>,
    heads: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let a = tape.layer_norm(h, p.ln1_gamma, p.ln1_beta, LN_EPS)?;
    let a = multi_head_attention(tape, a, bias, p, heads, mode)?;
    let a = tape.dropout(a, mode.dropout, mode.training, &mut *mode.rng);
    let h = tape.add(h, a)?;
    let f = tape.layer_norm(h, p.ln2_gamma, p.ln2_beta, LN_EPS)?;
    let f = feed_forward(tape, f, p)?;
    let f = tape.dropout(f, mode.dropout, mode.training, &mut *mode.rng);
    tape.add(h, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{spatial_bias, EncodingDims, EncodingTables};
    use crate::graph::{Graph, StructuralFeatures};
    use crate::numerics::{finite_difference_check, NEG_INF_BIAS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn identity_v(d: usize) -> LayerParams<Tensor> {
        LayerParams { w_v: Tensor::eye(d), w_o: Tensor::eye(d), ..LayerParams::zeros(d) }
    }

    fn run_mha(h: &Tensor, bias: Option<&Tensor>, p: &LayerParams<Tensor>, heads: usize) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let bv = bias.map(|b| tape.constant(b.clone()));
        let pv = p.map(|t| tape.constant(t.clone()));
        let mut r = rng(0);
        let att = multi_head_attention_with_weights(&mut tape, hv, bv, &pv, heads, &mut Mode::eval(&mut r)).unwrap();
        (tape.value(att.output).clone(), tape.value(att.weights).clone())
    }

    #[test]
    fn uniform_attention_gives_column_mean() {
        let h = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(1));
        let (out, _) = run_mha(&h, None, &identity_v(4), 1);
        for i in 0..3 {
            for c in 0..4 {
                let mean = (0..3).map(|r| h.at(&[r, c])).sum::<f64>() / 3.0;
                assert!((out.at(&[i, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn neighbor_mask_on_path() {
        let h = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng(2));
        let mut bias = Tensor::full(&[1, 3, 3], NEG_INF_BIAS);
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            bias.data_mut()[i * 3 + j] = 0.0;
        }
        let (out, _) = run_mha(&h, Some(&bias), &identity_v(2), 1);
        assert_eq!(out.row(0), h.row(1));
        for c in 0..2 {
            assert!((out.at(&[1, c]) - 0.5 * (h.at(&[0, c]) + h.at(&[2, c]))).abs() < 1e-15);
        }
    }

    #[test]
    fn outputs_are_convex_combinations_of_values() {
        let d = 6;
        let heads = 3;
        let mut r = rng(3);
        let p = LayerParams { w_o: Tensor::eye(d), ..LayerParams::init(d, &mut r) };
        let p = LayerParams { w_q: p.w_q.map(|x| x * 50.0), ..p };
        let h = Tensor::uniform(&[5, d], -1.0, 1.0, &mut r);
        let bias = Tensor::uniform(&[heads, 5, 5], -2.0, 2.0, &mut r);
        let (out, w) = run_mha(&h, Some(&bias), &p, heads);
        for row in w.rows() {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Independent oracle: V = H W_V, output[i, head cols] = sum_j w[h,i,j] V[j, head cols].
        let dh = d / heads;
        for i in 0..5 {
            for hd in 0..heads {
                for c in hd * dh..(hd + 1) * dh {
                    let mut acc = 0.0;
                    for j in 0..5 {
                        let v: f64 = (0..d).map(|t| h.at(&[j, t]) * p.w_v.at(&[t, c])).sum();
                        acc += w.at(&[hd, i, j]) * v;
                    }
                    assert!((out.at(&[i, c]) - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_branches_are_identity() {
        let d = 4;
        let p = LayerParams {
            ln1_gamma: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::zeros(&[d]),
            ..LayerParams::zeros(d)
        };
        let h = Tensor::uniform(&[2, 5, d], -3.0, 3.0, &mut rng(4));
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let pv = p.map(|t| tape.constant(t.clone()));
        let mut r = rng(0);
        let out = graphormer_layer(&mut tape, hv, None, &pv, 2, &mut Mode::eval(&mut r)).unwrap();
        assert_eq!(tape.value(out), &h);
    }

    #[test]
    fn layer_gradient_check() {
        let d = 4;
        let heads = 2;
        let mut r = rng(5);
        let p = LayerParams::init(d, &mut r).map(|t| t.map(|x| x * 25.0));
        let p = LayerParams {
            ffn_b1: Tensor::uniform(&[d], -0.5, 0.5, &mut r),
            ln1_gamma: Tensor::uniform(&[d], 0.5, 1.5, &mut r),
            ln2_beta: Tensor::uniform(&[d], -0.5, 0.5, &mut r),
            q_bias: Some(Tensor::uniform(&[d], -0.5, 0.5, &mut r)),
            ..p
        };
        let h = Tensor::uniform(&[5, d], -1.0, 1.0, &mut r);
        let bias = Tensor::uniform(&[heads, 5, 5], -1.0, 1.0, &mut r);
        let weights = Tensor::uniform(&[5, d], -1.0, 1.0, &mut r);
        let mut inputs = vec![h, bias];
        let names: Vec<&str> = p.named().iter().map(|(n, _)| *n).collect();
        inputs.extend(p.named().into_iter().map(|(_, t)| t.clone()));
        let err = finite_difference_check(
            |tape, v| {
                let mut it = v[2..].iter().copied();
                let mut next = || it.next().unwrap();
                let pv = LayerParams {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                    q_bias: Some(next()),
                    k_bias: None,
                    ffn_w1: next(),
                    ffn_b1: next(),
                    ffn_w2: next(),
                    ffn_b2: next(),
                    ln1_gamma: next(),
                    ln1_beta: next(),
                    ln2_gamma: next(),
                    ln2_beta: next(),
                };
                let mut r = rng(0);
                let out = graphormer_layer(tape, v[0], Some(v[1]), &pv, heads, &mut Mode::eval(&mut r))?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(out, w)?;
                Ok(tape.sum(prod))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert_eq!(names[4], "q_bias");
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn deep_stack_stays_bounded() {
        let d = 16;
        let heads = 4;
        let mut r = rng(6);
        let g = Graph::cycle(10);
        let sf = StructuralFeatures::compute(&g, 20);
        let dims = EncodingDims { hidden: d, heads, max_deg: 64, max_spd: 20, max_path_len: 20, edge_dim: 4 };
        let tables = EncodingTables::init(dims, 1, &mut r);
        let layers: Vec<_> = (0..12).map(|_| LayerParams::init(d, &mut r)).collect();
        let h = Tensor::uniform(&[10, d], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let tv = tables.map(|t| tape.constant(t.clone()));
        let bias = spatial_bias(&mut tape, &sf, &tv).unwrap();
        let mut x = tape.constant(h.clone());
        let mut er = rng(0);
        for p in &layers {
            let pv = p.map(|t| tape.constant(t.clone()));
            x = graphormer_layer(&mut tape, x, Some(bias), &pv, heads, &mut Mode::eval(&mut er)).unwrap();
        }
        let out = tape.value(x);
        assert!(out.is_finite());
        assert!(out.norm_sq().sqrt() < 10.0 * h.norm_sq().sqrt());
    }

    #[test]
    fn permutation_equivariance() {
        let d = 8;
        let heads = 2;
        let mut r = rng(7);
        let g = Graph::new(6, false, vec![(0, 1), (1, 2), (2, 3), (1, 4), (4, 5)]).unwrap();
        let perm = [3, 0, 5, 1, 2, 4];
        let pg = g.permute(&perm).unwrap();
        let dims = EncodingDims { hidden: d, heads, max_deg: 8, max_spd: 8, max_path_len: 8, edge_dim: 2 };
        let tables = EncodingTables::init(dims, 1, &mut r);
        let p = LayerParams::init(d, &mut r).map(|t| t.map(|x| x * 20.0));
        let h = Tensor::uniform(&[6, d], -1.0, 1.0, &mut r);
        let mut ph = Tensor::zeros(&[6, d]);
        for v in 0..6 {
            ph.data_mut()[perm[v] * d..(perm[v] + 1) * d].copy_from_slice(h.row(v));
        }
        let run = |g: &Graph, h: &Tensor| {
            let sf = StructuralFeatures::compute(g, 8);
            let mut tape = Tape::new();
            let tv = tables.map(|t| tape.constant(t.clone()));
            let bias = spatial_bias(&mut tape, &sf, &tv).unwrap();
            let hv = tape.constant(h.clone());
            let pv = p.map(|t| tape.constant(t.clone()));
            let mut er = rng(0);
            let out = graphormer_layer(&mut tape, hv, Some(bias), &pv, heads, &mut Mode::eval(&mut er)).unwrap();
            tape.value(out).clone()
        };
        let a = run(&g, &h);
        let b = run(&pg, &ph);
        for v in 0..6 {
            for c in 0..d {
                assert!((a.at(&[v, c]) - b.at(&[perm[v], c])).abs() < 1e-10);
            }
        }
    }
}
