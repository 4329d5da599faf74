//! The full network: categorical node embeddings plus centrality encoding,
//! a stack of biased attention layers, virtual-node readout and a scalar
//! head. [`reference`] holds the message-passing oracle.

mod batch;
pub mod reference;

pub use batch::{Batch, PreparedGraph};
pub use reference::{aggregate, reference_gnn_step, reference_readout, Aggregation, ReadoutKind, ReferenceGnn};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{graphormer_layer, LayerParams, Mode};
use crate::encoding::{
    assemble_attention_bias, edge_bias_from_index, spatial_bias_from_index, EncodingDims, EncodingTables,
};
use crate::error::{Error, Result};
use crate::graph::Vocab;
use crate::numerics::{finite_difference_check, Tape, Tensor, Var, LN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub edge_dim: usize,
    pub max_deg: usize,
    pub max_spd: usize,
    pub max_path_len: usize,
    /// Dropout on the attention and FFN branch outputs.
    pub dropout: f64,
    pub attention_dropout: f64,
    pub embedding_dropout: f64,
    pub task: Task,
    pub use_spatial: bool,
    pub use_centrality: bool,
    pub use_edge: bool,
    pub final_ln: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            num_heads: 8,
            edge_dim: 16,
            max_deg: 64,
            max_spd: 20,
            max_path_len: 20,
            dropout: 0.0,
            attention_dropout: 0.1,
            embedding_dropout: 0.0,
            task: Task::Regression,
            use_spatial: true,
            use_centrality: true,
            use_edge: true,
            final_ln: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.num_heads == 0 {
            return bad("hidden and num_heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return bad(format!("hidden {} is not divisible by num_heads {}", self.hidden, self.num_heads));
        }
        if self.max_path_len == 0 {
            return bad("max_path_len must be at least 1".into());
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("embedding_dropout", self.embedding_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn encoding_dims(&self) -> EncodingDims {
        EncodingDims {
            hidden: self.hidden,
            heads: self.num_heads,
            max_deg: self.max_deg,
            max_spd: self.max_spd,
            max_path_len: self.max_path_len,
            edge_dim: self.edge_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `[node vocab rows + 1, d]`; the last row is the virtual node's feature.
    pub node_embed: T,
    pub tables: EncodingTables<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_ln_gamma: T,
    pub final_ln_beta: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            node_embed: f(&self.node_embed),
            tables: self.tables.map(&mut f),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            final_ln_gamma: f(&self.final_ln_gamma),
            final_ln_beta: f(&self.final_ln_beta),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("node_embed".to_string(), &self.node_embed)];
        out.extend(self.tables.named().into_iter().map(|(n, t)| (n.to_string(), t)));
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.extend([
            ("final_ln_gamma".to_string(), &self.final_ln_gamma),
            ("final_ln_beta".to_string(), &self.final_ln_beta),
            ("head_w".to_string(), &self.head_w),
            ("head_b".to_string(), &self.head_b),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("node_embed".to_string(), &mut self.node_embed)];
        out.extend(self.tables.named_mut().into_iter().map(|(n, t)| (n.to_string(), t)));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.extend([
            ("final_ln_gamma".to_string(), &mut self.final_ln_gamma),
            ("final_ln_beta".to_string(), &mut self.final_ln_beta),
            ("head_w".to_string(), &mut self.head_w),
            ("head_b".to_string(), &mut self.head_b),
        ]);
        out
    }
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, vocab: &Vocab, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        Ok(Self {
            node_embed: Tensor::trunc_normal(&[vocab.node_rows() + 1, d], 0.02, rng),
            tables: EncodingTables::init(cfg.encoding_dims(), vocab.edge_rows(), rng),
            layers: (0..cfg.num_layers).map(|_| LayerParams::init(d, rng)).collect(),
            final_ln_gamma: Tensor::full(&[d], 1.0),
            final_ln_beta: Tensor::zeros(&[d]),
            head_w: Tensor::trunc_normal(&[d, 1], 0.02, rng),
            head_b: Tensor::zeros(&[1]),
        })
    }

    /// Record every tensor on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Shapes must agree with what `init` would produce for this setup.
    pub fn check_compatible(&self, cfg: &ModelConfig, vocab: &Vocab) -> Result<()> {
        cfg.validate()?;
        let expect = ModelParams::zeros(cfg, vocab);
        let (a, b) = (self.named(), expect.named());
        if a.len() != b.len() {
            return Err(Error::Config(format!("{} parameter tensors, expected {}", a.len(), b.len())));
        }
        for ((na, ta), (_, tb)) in a.iter().zip(&b) {
            if ta.shape() != tb.shape() {
                return Err(Error::Config(format!("{na}: shape {:?}, expected {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    pub fn zeros(cfg: &ModelConfig, vocab: &Vocab) -> Self {
        let d = cfg.hidden;
        Self {
            node_embed: Tensor::zeros(&[vocab.node_rows() + 1, d]),
            tables: EncodingTables::zeros(cfg.encoding_dims(), vocab.edge_rows()),
            layers: (0..cfg.num_layers).map(|_| LayerParams::zeros(d)).collect(),
            final_ln_gamma: Tensor::zeros(&[d]),
            final_ln_beta: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, 1]),
            head_b: Tensor::zeros(&[1]),
        }
    }
}

/// Input representation `h0` (`[graphs, n_pad, d]`): summed categorical
/// embeddings plus the centrality encoding.
pub fn embed_nodes(tape: &mut Tape, cfg: &ModelConfig, p: &ModelParams<Var>, batch: &Batch) -> Result<Var> {
    let d = cfg.hidden;
    let shape = [batch.num_graphs * batch.n_pad, d];
    let mut x = tape.gather_rows(p.node_embed, batch.node_embed.clone(), &shape)?;
    if cfg.use_centrality {
        let zin = tape.gather_rows(p.tables.z_in, batch.z_in.clone(), &shape)?;
        let zout = tape.gather_rows(p.tables.z_out, batch.z_out.clone(), &shape)?;
        x = tape.add(x, zin)?;
        x = tape.add(x, zout)?;
    }
    tape.reshape(x, &[batch.num_graphs, batch.n_pad, d])
}

/// Per-head attention bias `[graphs * heads, n_pad, n_pad]`, shared by all layers.
pub fn attention_bias(tape: &mut Tape, cfg: &ModelConfig, p: &ModelParams<Var>, batch: &Batch) -> Result<Var> {
    if batch.heads != cfg.num_heads {
        return Err(Error::Config(format!("batch built for {} heads, model has {}", batch.heads, cfg.num_heads)));
    }
    let shape = [batch.num_graphs * batch.heads, batch.n_pad, batch.n_pad];
    let spatial = if cfg.use_spatial {
        Some(spatial_bias_from_index(tape, p.tables.b_spatial, batch.spatial.clone(), &shape)?)
    } else {
        None
    };
    let edge = if cfg.use_edge {
        let xe = tape.gather_rows(p.tables.edge_embed, batch.edge_feats.clone(), &[batch.num_edges, cfg.edge_dim])?;
        Some(edge_bias_from_index(tape, xe, p.tables.w_edge, batch.edge_paths.clone(), &shape)?)
    } else {
        None
    };
    assemble_attention_bias(tape, spatial, edge, &batch.pad_bias)
}

/// One scalar per graph (`[graphs]`). `delta`, when given, is added to the
/// input representation before embedding dropout.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    batch: &Batch,
    mode: &mut Mode<'_>,
    delta: Option<Var>,
) -> Result<Var> {
    if p.layers.len() != cfg.num_layers {
        return Err(Error::Config(format!("{} layers of parameters for {} configured", p.layers.len(), cfg.num_layers)));
    }
    let mut h = embed_nodes(tape, cfg, p, batch)?;
    if let Some(delta) = delta {
        h = tape.add(h, delta)?;
    }
    h = tape.dropout(h, cfg.embedding_dropout, mode.training, &mut *mode.rng);
    let bias = attention_bias(tape, cfg, p, batch)?;
    for layer in &p.layers {
        h = graphormer_layer(tape, h, Some(bias), layer, cfg.num_heads, mode)?;
    }
    let flat = tape.reshape(h, &[batch.num_graphs * batch.n_pad, cfg.hidden])?;
    let mut r = tape.gather_rows(flat, batch.readout.clone(), &[batch.num_graphs, cfg.hidden])?;
    if cfg.final_ln {
        r = tape.layer_norm(r, p.final_ln_gamma, p.final_ln_beta, LN_EPS)?;
    }
    let out = tape.matmul(r, p.head_w)?;
    let out = tape.add_row(out, p.head_b)?;
    tape.reshape(out, &[batch.num_graphs])
}

/// Mean L1 for regression, mean BCE-with-logits for binary targets.
pub fn loss(tape: &mut Tape, pred: Var, targets: &[f64], task: Task) -> Result<Var> {
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::InvalidGraph(format!("graph {i} of the batch has no usable target")));
    }
    match task {
        Task::Regression => tape.l1_loss(pred, targets),
        Task::Binary => tape.bce_with_logits(pred, targets),
    }
}

/// Configuration, vocabulary and parameters of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, &vocab, rng)?;
        Ok(Self { config, vocab, params })
    }

    pub fn batch(&self, graphs: &[&PreparedGraph]) -> Result<Batch> {
        Batch::new(graphs, &self.config, &self.vocab)
    }

    pub fn prepare(&self, graph: crate::graph::Graph) -> Result<PreparedGraph> {
        PreparedGraph::new(graph, self.config.max_path_len)
    }

    /// Evaluation-mode predictions (no dropout, nothing differentiable).
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut rng = NoRng;
        let out = forward(&mut tape, &self.config, &p, batch, &mut Mode::eval(&mut rng), None)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Largest relative disagreement between tape gradients of the loss on
    /// `batch` and central differences with step `h`, over every parameter.
    pub fn gradient_check(&self, batch: &Batch, h: f64) -> Result<f64> {
        let params: Vec<Tensor> = self.params.named().into_iter().map(|(_, t)| t.clone()).collect();
        finite_difference_check(
            |tape, vars| {
                let mut it = vars.iter().copied();
                let p = self.params.map(|_| it.next().expect("one var per parameter"));
                let mut rng = NoRng;
                let pred = forward(tape, &self.config, &p, batch, &mut Mode::eval(&mut rng), None)?;
                loss(tape, pred, &batch.targets, self.config.task)
            },
            &params,
            h,
        )
    }

    /// Predictions for any number of graphs, `batch_size` at a time.
    pub fn predict_all(&self, graphs: &[PreparedGraph], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(batch_size.max(1)) {
            let refs: Vec<&PreparedGraph> = chunk.iter().collect();
            out.extend(self.predict(&self.batch(&refs)?)?);
        }
        Ok(out)
    }
}

/// Randomness source for evaluation passes, which never draw.
pub(crate) struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode does not sample")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation mode does not sample")
    }
}
