use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::io::connected_erdos_renyi;
use crate::model::{aggregate, reference_gnn_step, reference_readout, Aggregation, ReadoutKind};
use crate::numerics::Tensor;

use super::{
    build_combine, build_max_aggregate, build_mean_aggregate, build_mean_readout, build_sum_aggregate,
    run_wl_vs_spd_experiment, Construction,
};

/// Connected undirected graphs with 2 to `max_nodes` nodes and varied
/// density, so no node is isolated.
pub fn random_connected_graphs(count: usize, max_nodes: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(2..=max_nodes.max(2));
            let p = rng.random_range(0.15..0.8);
            let edges = connected_erdos_renyi(n, p, &mut rng);
            Graph::new(n, false, edges).expect("generated graph is simple")
        })
        .collect()
}

/// One line of the express-check table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressReport {
    pub rows: Vec<CheckRow>,
}

impl ExpressReport {
    pub fn passed_count(&self) -> usize {
        self.rows.iter().filter(|r| r.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.passed_count() == self.rows.len()
    }
}

impl fmt::Display for ExpressReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>12} {:>10}  result  detail", "check", "error", "tolerance")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:>12.3e} {:>10.0e}  {:<6}  {}",
                r.name,
                r.error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" },
                r.detail
            )?;
        }
        write!(f, "{}/{} passed", self.passed_count(), self.rows.len())
    }
}

fn random_features<R: Rng>(n: usize, d: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(&[n, d], lo, hi, rng)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Worst-case error of a construction against an oracle over graphs with
/// random widths in `1..=8`. Constructions are built once per width.
fn sweep(
    graphs: &[Graph],
    seed: u64,
    range: (f64, f64),
    mut build: impl FnMut(usize) -> Construction,
    oracle: impl Fn(&Graph, &Tensor) -> Tensor,
) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<usize, Construction> = HashMap::new();
    let mut errors = Vec::with_capacity(graphs.len());
    let mut residual = 0.0f64;
    for g in graphs {
        let d = rng.random_range(1..=8);
        let c = cache.entry(d).or_insert_with(|| build(d));
        residual = residual.max(c.fit_residual.unwrap_or(0.0));
        let h = random_features(g.num_nodes(), d, range.0, range.1, &mut rng);
        errors.push(c.apply(g, &h)?.max_abs_diff(&oracle(g, &h)));
    }
    Ok((errors, residual))
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(0.0, f64::max)
}

pub const MAX_TEMPERATURES: [f64; 4] = [10.0, 20.0, 50.0, 100.0];

/// Run all five constructions against the brute-force oracles plus the
/// WL-vs-SPD experiment.
pub fn run_express_checks(seed: u64) -> Result<ExpressReport> {
    let mut rows = Vec::new();

    let graphs = random_connected_graphs(100, 12, seed);
    let (errs, _) = sweep(&graphs, seed ^ 1, (-1.0, 1.0), build_mean_aggregate, |g, h| {
        aggregate(g, h, Aggregation::Mean)
    })?;
    let err = max_of(&errs);
    rows.push(CheckRow {
        name: "MEAN_AGG".into(),
        error: err,
        tolerance: 1e-6,
        passed: err < 1e-6,
        detail: format!("max over {} graphs", errs.len()),
    });

    let graphs50 = &graphs[..50];
    let (errs, residual) =
        sweep(graphs50, seed ^ 2, (-1.0, 1.0), build_sum_aggregate, |g, h| aggregate(g, h, Aggregation::Sum))?;
    let err = max_of(&errs);
    rows.push(CheckRow {
        name: "SUM_AGG".into(),
        error: err,
        tolerance: 1e-2,
        passed: err < 1e-2 && residual < 5e-3,
        detail: format!("max over {} graphs, fit residual {residual:.2e}", errs.len()),
    });

    let mut medians = Vec::new();
    for &t in &MAX_TEMPERATURES {
        let (errs, _) = sweep(graphs50, seed ^ 3, (0.0, 1.0), |d| build_max_aggregate(d, t), |g, h| {
            aggregate(g, h, Aggregation::Max)
        })?;
        medians.push(median(errs));
    }
    let at50 = medians[2];
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    rows.push(CheckRow {
        name: "MAX_AGG".into(),
        error: at50,
        tolerance: 1e-2,
        passed: at50 < 1e-2 && monotone,
        detail: format!(
            "median at T=50; T sweep {}",
            MAX_TEMPERATURES
                .iter()
                .zip(&medians)
                .map(|(t, m)| format!("{t}:{m:.1e}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    });

    let combine = |own: &[f64], a: &[f64]| own.iter().zip(a).map(|(h, a)| h + 2.0 * a).collect::<Vec<_>>();
    let (errs, residual) = sweep(graphs50, seed ^ 4, (-1.0, 1.0), build_combine, |g, h| {
        reference_gnn_step(g, h, Aggregation::Mean, &combine)
    })?;
    let err = max_of(&errs);
    rows.push(CheckRow {
        name: "COMBINE".into(),
        error: err,
        tolerance: 1e-2,
        passed: err < 1e-2 && residual < 5e-3,
        detail: format!("h + 2a, max over {} graphs, fit residual {residual:.2e}", errs.len()),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let (mut to_mean, mut spread) = (0.0f64, 0.0f64);
    for n in 1..=12 {
        let d = rng.random_range(1..=8);
        let h = random_features(n, d, -1.0, 1.0, &mut rng);
        let out = build_mean_readout(d, 10.0).apply(&Graph::new(n, false, vec![])?, &h)?;
        let mean = reference_readout(&h, ReadoutKind::Mean, n);
        for row in out.rows() {
            for (a, b) in row.iter().zip(&mean) {
                to_mean = to_mean.max((a - b).abs());
            }
            for (a, b) in row.iter().zip(out.row(0)) {
                spread = spread.max((a - b).abs());
            }
        }
    }
    rows.push(CheckRow {
        name: "MEAN_READOUT".into(),
        error: to_mean,
        tolerance: 1e-10,
        passed: to_mean < 1e-10 && spread < 1e-12,
        detail: format!("rows agree within {spread:.1e}"),
    });

    let wl = run_wl_vs_spd_experiment();
    rows.push(CheckRow {
        name: "WL_VS_SPD".into(),
        error: 0.0,
        tolerance: 0.0,
        passed: wl.passed(),
        detail: format!(
            "C6 vs 2xC3: WL equal {}, SPD equal {}",
            wl.canonical.wl_equal, wl.canonical.spd_equal
        ),
    });

    Ok(ExpressReport { rows })
}
