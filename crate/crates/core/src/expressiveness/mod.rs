//! Explicit weight settings that make a single Graphormer layer reproduce
//! the message-passing steps of a classic GNN, plus the WL-vs-SPD
//! discrimination experiment.
//!
//! A construction is evaluated on the attention sub-block (and, where the
//! step needs a nonlinearity, the feed-forward sub-block) without the
//! surrounding layer norms and residuals. Wherever a bias must be `-inf`
//! the table holds [`NEG_INF_BIAS`].

mod check;
mod fit;
mod wl_spd;

pub use check::{random_connected_graphs, run_express_checks, CheckRow, ExpressReport, MAX_TEMPERATURES};
pub use fit::{fit_pair_ffn, PairFit, PAIR_UNITS};
pub use wl_spd::{run_wl_vs_spd_experiment, PairComparison, WlSpdReport, C6_ROW};

use std::fmt;

use crate::attention::{feed_forward, multi_head_attention, LayerParams, Mode};
use crate::encoding::{centrality_encode, spatial_bias, EncodingDims, EncodingTables};
use crate::error::{Error, Result};
use crate::graph::{Graph, StructuralFeatures};
use crate::model::NoRng;
use crate::numerics::{Tape, Tensor, NEG_INF_BIAS};

/// Largest degree covered by the degree channel and the multiply fit.
pub const SUM_MAX_DEGREE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstructionKind {
    MeanAggregate,
    SumAggregate,
    MaxAggregate,
    Combine,
    MeanReadout,
}

impl fmt::Display for ConstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstructionKind::MeanAggregate => "MEAN_AGG",
            ConstructionKind::SumAggregate => "SUM_AGG",
            ConstructionKind::MaxAggregate => "MAX_AGG",
            ConstructionKind::Combine => "COMBINE",
            ConstructionKind::MeanReadout => "MEAN_READOUT",
        })
    }
}

/// Layer parameters and encoding tables realizing one step on inputs of
/// width `input_dim`. The model width may be larger; extra columns start
/// at zero and only the first `input_dim` output columns are meaningful.
#[derive(Debug, Clone)]
pub struct Construction {
    pub kind: ConstructionKind,
    pub temperature: f64,
    pub input_dim: usize,
    pub heads: usize,
    pub layer: LayerParams<Tensor>,
    pub tables: EncodingTables<Tensor>,
    pub use_spatial: bool,
    pub use_centrality: bool,
    pub use_ffn: bool,
    /// Max absolute error of the fitted feed-forward map on its grid.
    pub fit_residual: Option<f64>,
}

fn tables_for(hidden: usize, heads: usize, max_deg: usize) -> EncodingTables<Tensor> {
    let dims = EncodingDims { hidden, heads, max_deg, max_spd: 2, max_path_len: 1, edge_dim: 1 };
    EncodingTables::zeros(dims, 1)
}

/// Every head attends only to nodes at distance `allowed`.
fn distance_mask(tables: &mut EncodingTables<Tensor>, head: usize, allowed: usize) {
    let codes = tables.b_spatial.shape()[1];
    for code in 0..codes {
        tables.b_spatial.data_mut()[head * codes + code] = if code == allowed { 0.0 } else { NEG_INF_BIAS };
    }
}

fn set(t: &mut Tensor, r: usize, c: usize, v: f64) {
    let cols = t.last_dim();
    t.data_mut()[r * cols + c] = v;
}

fn add(t: &mut Tensor, r: usize, c: usize, v: f64) {
    let cols = t.last_dim();
    t.data_mut()[r * cols + c] += v;
}

/// Smallest even width holding both attention layouts and the fit units.
fn pair_width(d: usize, min_half: usize) -> usize {
    let w = (2 * min_half).max(d * PAIR_UNITS);
    w + w % 2
}

/// Write the fitted two-input map into the FFN, one block of units per
/// output coordinate. `x_col(c)` and `y_col(c)` name the FFN input columns
/// feeding coordinate `c`.
fn install_pair_fit(
    layer: &mut LayerParams<Tensor>,
    d: usize,
    fit: &PairFit,
    x_col: impl Fn(usize) -> usize,
    y_col: impl Fn(usize) -> usize,
) {
    for c in 0..d {
        for (u, &(ax, ay)) in fit.units.iter().enumerate() {
            let unit = c * PAIR_UNITS + u;
            let (xc, yc) = (x_col(c), y_col(c));
            add(&mut layer.ffn_w1, xc, unit, ax);
            add(&mut layer.ffn_w1, yc, unit, ay);
            set(&mut layer.ffn_w2, unit, c, fit.weights[u]);
        }
        layer.ffn_b2.data_mut()[c] = fit.bias;
    }
}

/// One head, no query/key signal, identity values and a bias table that
/// keeps only distance-one nodes: row `i` becomes the mean over `N(i)`.
/// A node without out-neighbors has a fully masked row and receives the
/// mean over all nodes instead.
pub fn build_mean_aggregate(d: usize) -> Construction {
    let mut tables = tables_for(d, 1, 1);
    distance_mask(&mut tables, 0, 1);
    Construction {
        kind: ConstructionKind::MeanAggregate,
        temperature: 0.0,
        input_dim: d,
        heads: 1,
        layer: LayerParams { w_v: Tensor::eye(d), w_o: Tensor::eye(d), ..LayerParams::zeros(d) },
        tables,
        use_spatial: true,
        use_centrality: false,
        use_ffn: false,
        fit_residual: None,
    }
}

/// Mean head plus a self-only head that reads the degree, which the
/// centrality table writes into column `d`. The FFN multiplies the two.
pub fn build_sum_aggregate(d: usize) -> Construction {
    let width = pair_width(d, d + 1);
    let half = width / 2;
    let mut tables = tables_for(width, 2, SUM_MAX_DEGREE);
    distance_mask(&mut tables, 0, 1);
    distance_mask(&mut tables, 1, 0);
    // out-degree, since the mask follows out-edges
    for k in 0..=SUM_MAX_DEGREE {
        set(&mut tables.z_out, k, d, k as f64);
    }
    let mut layer = LayerParams { w_o: Tensor::eye(width), ..LayerParams::zeros(width) };
    for c in 0..d {
        set(&mut layer.w_v, c, c, 1.0);
    }
    set(&mut layer.w_v, d, half, 1.0);

    let xs = linspace(-1.0, 1.0, 41);
    let ys: Vec<f64> = (0..=SUM_MAX_DEGREE).map(|k| k as f64).collect();
    let fit = fit_pair_ffn(|x, y| x * y, &xs, &ys);
    install_pair_fit(&mut layer, d, &fit, |c| c, |_| half);
    Construction {
        kind: ConstructionKind::SumAggregate,
        temperature: 0.0,
        input_dim: d,
        heads: 2,
        layer,
        tables,
        use_spatial: true,
        use_centrality: true,
        use_ffn: true,
        fit_residual: Some(fit.residual),
    }
}

/// One head per coordinate. Head `t` keys on coordinate `t` with a constant
/// query `T`, so its softmax over the neighbors concentrates on the largest
/// value as `T` grows.
pub fn build_max_aggregate(d: usize, temperature: f64) -> Construction {
    let mut tables = tables_for(d, d, 1);
    for t in 0..d {
        distance_mask(&mut tables, t, 1);
    }
    Construction {
        kind: ConstructionKind::MaxAggregate,
        temperature,
        input_dim: d,
        heads: d,
        layer: LayerParams {
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
            w_o: Tensor::eye(d),
            q_bias: Some(Tensor::full(&[d], temperature)),
            ..LayerParams::zeros(d)
        },
        tables,
        use_spatial: true,
        use_centrality: false,
        use_ffn: false,
        fit_residual: None,
    }
}

/// `combine(h, a) = h + 2a` with `a` the mean aggregate. Head 0 averages
/// the neighbors into the first half of the width, head 1 attends only to
/// the node itself and copies `h` into the second half; the FFN combines.
pub fn build_combine(d: usize) -> Construction {
    let width = pair_width(d, d);
    let half = width / 2;
    let mut tables = tables_for(width, 2, 1);
    distance_mask(&mut tables, 0, 1);
    distance_mask(&mut tables, 1, 0);
    let mut layer = LayerParams { w_o: Tensor::eye(width), ..LayerParams::zeros(width) };
    for c in 0..d {
        set(&mut layer.w_v, c, c, 1.0);
        set(&mut layer.w_v, c, half + c, 1.0);
    }
    let grid = linspace(-1.0, 1.0, 41);
    let fit = fit_pair_ffn(|h, a| h + 2.0 * a, &grid, &grid);
    install_pair_fit(&mut layer, d, &fit, |c| half + c, |c| c);
    Construction {
        kind: ConstructionKind::Combine,
        temperature: 0.0,
        input_dim: d,
        heads: 2,
        layer,
        tables,
        use_spatial: true,
        use_centrality: false,
        use_ffn: true,
        fit_residual: Some(fit.residual),
    }
}

/// Equal query and key biases `T` make every logit the same, so each row
/// is the column mean. No structural bias is applied.
pub fn build_mean_readout(d: usize, temperature: f64) -> Construction {
    Construction {
        kind: ConstructionKind::MeanReadout,
        temperature,
        input_dim: d,
        heads: 1,
        layer: LayerParams {
            w_v: Tensor::eye(d),
            w_o: Tensor::eye(d),
            q_bias: Some(Tensor::full(&[d], temperature)),
            k_bias: Some(Tensor::full(&[d], temperature)),
            ..LayerParams::zeros(d)
        },
        tables: tables_for(d, 1, 1),
        use_spatial: false,
        use_centrality: false,
        use_ffn: false,
        fit_residual: None,
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl Construction {
    pub fn width(&self) -> usize {
        self.layer.hidden()
    }

    pub fn is_finite(&self) -> bool {
        self.layer.named().iter().all(|(_, t)| t.is_finite()) && self.tables.named().iter().all(|(_, t)| t.is_finite())
    }

    fn check_input(&self, g: &Graph, h: &Tensor) -> Result<()> {
        if h.shape() != [g.num_nodes(), self.input_dim] {
            return Err(Error::Shape {
                op: "construction",
                detail: format!("{:?} for {} nodes and width {}", h.shape(), g.num_nodes(), self.input_dim),
            });
        }
        Ok(())
    }

    fn run(&self, g: &Graph, h: &Tensor, with_ffn: bool) -> Result<Tensor> {
        self.check_input(g, h)?;
        let (n, d, width) = (g.num_nodes(), self.input_dim, self.width());
        let mut padded = Tensor::zeros(&[n, width]);
        for i in 0..n {
            padded.data_mut()[i * width..i * width + d].copy_from_slice(h.row(i));
        }
        let sf = StructuralFeatures::compute(g, 1);
        let mut tape = Tape::new();
        let tables = self.tables.map(|t| tape.constant(t.clone()));
        let layer = self.layer.map(|t| tape.constant(t.clone()));
        let mut x = tape.constant(padded);
        if self.use_centrality {
            x = centrality_encode(&mut tape, x, &sf, &tables)?;
        }
        let bias = if self.use_spatial { Some(spatial_bias(&mut tape, &sf, &tables)?) } else { None };
        let mut rng = NoRng;
        let mut out = multi_head_attention(&mut tape, x, bias, &layer, self.heads, &mut Mode::eval(&mut rng))?;
        if with_ffn && self.use_ffn {
            out = feed_forward(&mut tape, out, &layer)?;
        }
        Ok(tape.value(out).clone())
    }

    /// Full-width attention sub-block output.
    pub fn attention_output(&self, g: &Graph, h: &Tensor) -> Result<Tensor> {
        self.run(g, h, false)
    }

    /// The realized step, restricted to the first `input_dim` columns.
    pub fn apply(&self, g: &Graph, h: &Tensor) -> Result<Tensor> {
        let full = self.run(g, h, true)?;
        let (n, d) = (g.num_nodes(), self.input_dim);
        let rows: Vec<f64> = full.rows().flat_map(|r| r[..d].to_vec()).collect();
        Tensor::new(vec![n, d], rows)
    }
}
