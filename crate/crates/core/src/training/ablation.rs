//! Encoding ablation: the same model trained with structural encodings
//! switched on one at a time, compared by validation MAE across seeds.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{generate_synthetic, prepare_dataset, SyntheticSpec};
use crate::model::{Model, ModelConfig};

use super::{train, OptimConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub use_spatial: bool,
    pub use_centrality: bool,
    pub use_edge: bool,
}

/// Ordered from fewest to most encodings; the names sort the same way.
pub const VARIANTS: [Variant; 4] = [
    Variant { name: "none", use_spatial: false, use_centrality: false, use_edge: false },
    Variant { name: "spatial", use_spatial: true, use_centrality: false, use_edge: false },
    Variant { name: "spatial+centrality", use_spatial: true, use_centrality: true, use_edge: false },
    Variant { name: "spatial+centrality+edge", use_spatial: true, use_centrality: true, use_edge: true },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Encoding flags are overridden per variant.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    /// Leading graphs used for training; the rest are validation.
    pub num_train: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let steps = 5000;
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                batch_size: 16,
                steps,
                eval_every: steps,
                optim: OptimConfig { peak_lr: 1e-3, warmup_steps: 300, total_steps: steps, ..OptimConfig::default() },
                ..TrainConfig::default()
            },
            data: SyntheticSpec { num_graphs: 2500, seed: 100, ..SyntheticSpec::default() },
            num_train: 2000,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Final validation MAE per seed, in `seeds` order.
    pub seed_mae: Vec<f64>,
    pub median: f64,
    /// Median absolute deviation from the median.
    pub mad: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

/// Train every variant for every seed. Runs are independent and execute
/// on the rayon pool; `progress` is called after each run.
pub fn run_ablation(cfg: &AblationConfig, progress: &(dyn Fn(&str, u64, f64) + Sync)) -> Result<Vec<AblationRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let data = generate_synthetic(&cfg.data);
    if cfg.num_train == 0 || cfg.num_train >= data.graphs.len() {
        return Err(Error::Config(format!(
            "num_train = {} leaves no training or validation graphs out of {}",
            cfg.num_train,
            data.graphs.len()
        )));
    }
    let prepared = prepare_dataset(&data, cfg.model.max_path_len)?;
    let (train_set, valid_set) = prepared.split_at(cfg.num_train);

    let jobs: Vec<(Variant, u64)> = VARIANTS.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let maes = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let model_cfg = ModelConfig {
                use_spatial: v.use_spatial,
                use_centrality: v.use_centrality,
                use_edge: v.use_edge,
                ..cfg.model.clone()
            };
            let model = Model::new(model_cfg, data.vocab.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let mae = train(model, train_set, valid_set, &tc, None)?.final_valid;
            progress(v.name, seed, mae);
            Ok(mae)
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(VARIANTS
        .iter()
        .zip(maes.chunks(cfg.seeds.len()))
        .map(|(&variant, seed_mae)| AblationRow {
            variant,
            seed_mae: seed_mae.to_vec(),
            median: median(seed_mae),
            mad: mad(seed_mae),
        })
        .collect())
}

/// Each variant's median must be below the previous one by more than the
/// larger of their MADs. Returns one message per adjacent pair.
pub fn check_ordering(rows: &[AblationRow]) -> (bool, Vec<String>) {
    let mut ok = true;
    let mut notes = Vec::new();
    for w in rows.windows(2) {
        let gap = w[0].median - w[1].median;
        let spread = w[0].mad.max(w[1].mad);
        let pass = gap > spread;
        ok &= pass;
        notes.push(format!(
            "{} -> {}: gap {gap:.4} vs MAD {spread:.4} {}",
            w[0].variant.name,
            w[1].variant.name,
            if pass { "ok" } else { "FAIL" }
        ));
    }
    (ok, notes)
}

pub fn ablation_csv(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut s = String::from("config,use_spatial,use_centrality,use_edge,valid_mae,mad");
    for seed in seeds {
        let _ = write!(s, ",seed_{seed}");
    }
    s.push('\n');
    for r in rows {
        let v = r.variant;
        let _ = write!(s, "{},{},{},{},{},{}", v.name, v.use_spatial, v.use_centrality, v.use_edge, r.median, r.mad);
        for m in &r.seed_mae {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
    }
    s
}
