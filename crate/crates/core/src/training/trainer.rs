use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, PreparedGraph, Task};

use super::{adamw_step, clip_gradients, flag_augment, loss_and_gradients, lr_at, Checkpoint, FlagConfig, OptimConfig, OptimState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_HEADER: &str = "step,lr,train_loss,valid_metric";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Optimizer updates to run.
    pub steps: u64,
    /// Validation (and checkpoint) interval in updates; the last update is
    /// always evaluated.
    pub eval_every: u64,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub flag: Option<FlagConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 5000,
            eval_every: 500,
            eval_batch_size: 128,
            seed: 0,
            optim: OptimConfig::default(),
            flag: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch sizes and eval_every must be positive".into()));
        }
        self.optim.validate()?;
        if let Some(f) = &self.flag {
            f.validate()?;
        }
        Ok(())
    }
}

/// One line of the metrics file. `valid_metric` is set on evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_metric: Option<f64>,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        match self.valid_metric {
            Some(v) => format!("{},{},{},{}", self.step, self.lr, self.train_loss, v),
            None => format!("{},{},{},", self.step, self.lr, self.train_loss),
        }
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        let step = it.next()?.parse().ok()?;
        let lr = it.next()?.parse().ok()?;
        let train_loss = it.next()?.parse().ok()?;
        let v = it.next()?;
        let valid_metric = if v.is_empty() { None } else { Some(v.parse().ok()?) };
        it.next().is_none().then_some(Self { step, lr, train_loss, valid_metric })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<MetricRow>,
    /// Validation metric after the final update.
    pub final_valid: f64,
    pub best_valid: f64,
    pub best_step: u64,
}

/// Mean absolute error (regression) or mean BCE (binary) in eval mode.
/// `NaN` for an empty set.
pub fn evaluate(model: &Model, graphs: &[PreparedGraph], batch_size: usize) -> Result<f64> {
    if graphs.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = model.predict_all(graphs, batch_size)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(graphs) {
        let t = g.graph.target.ok_or_else(|| Error::InvalidGraph("evaluation graph has no target".into()))?.value();
        total += match model.config.task {
            Task::Regression => (p - t).abs(),
            Task::Binary => p.max(0.0) - p * t + (-p.abs()).exp().ln_1p(),
        };
    }
    Ok(total / graphs.len() as f64)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, purpose, index)`.
fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(purpose)) ^ index))
}

const SHUFFLE: u64 = 1;
const STEP: u64 = 2;

/// Hash binding a checkpoint to the model setup and training settings.
pub fn config_hash(model: &Model, cfg: &TrainConfig) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    for part in [
        serde_json::to_vec(&model.config),
        serde_json::to_vec(&model.vocab),
        serde_json::to_vec(cfg),
    ] {
        let bytes = part.map_err(|e| Error::Config(e.to_string()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(h.finalize().into())
}

struct Run<'a> {
    train: &'a [PreparedGraph],
    valid: &'a [PreparedGraph],
    cfg: &'a TrainConfig,
    out: Option<&'a Path>,
    hash: [u8; 32],
}

/// Train from the current parameters of `model`. With `out`, writes
/// `metrics.csv`, `best.ckpt` and `last.ckpt` there.
pub fn train(
    model: Model,
    train: &[PreparedGraph],
    valid: &[PreparedGraph],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let hash = config_hash(&model, cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), format!("{METRICS_HEADER}\n"))?;
    }
    let optim = OptimState::new(model.params.named().into_iter().map(|(_, t)| t));
    let run = Run { train, valid, cfg, out, hash };
    run.go(model, optim, 0, f64::INFINITY, 0, Vec::new())
}

/// Continue a run from `out/last.ckpt`, discarding metric rows written
/// after that checkpoint.
pub fn resume(train: &[PreparedGraph], valid: &[PreparedGraph], cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(&out.join(LAST_CHECKPOINT))?;
    let hash = config_hash(&ck.model, cfg)?;
    if hash != ck.config_hash {
        return Err(Error::Checkpoint("checkpoint was written with a different configuration".into()));
    }
    let optim = ck.optim.ok_or_else(|| Error::Checkpoint("checkpoint lacks optimizer state".into()))?;
    let metrics = out.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics)?;
    let history: Vec<MetricRow> = text
        .lines()
        .skip(1)
        .map(|l| MetricRow::parse(l).ok_or_else(|| Error::Checkpoint(format!("bad metrics row {l:?}"))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|r| r.step <= ck.step)
        .collect();
    let mut csv = format!("{METRICS_HEADER}\n");
    for r in &history {
        let _ = writeln!(csv, "{}", r.to_csv());
    }
    fs::write(&metrics, csv)?;
    let best_step = history
        .iter()
        .filter(|r| r.valid_metric == Some(ck.best_valid))
        .map(|r| r.step)
        .next()
        .unwrap_or(0);
    let run = Run { train, valid, cfg, out: Some(out), hash };
    run.go(ck.model, optim, ck.step, ck.best_valid, best_step, history)
}

impl Run<'_> {
    fn go(
        &self,
        mut model: Model,
        mut optim: OptimState,
        start: u64,
        mut best: f64,
        mut best_step: u64,
        mut history: Vec<MetricRow>,
    ) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let n = self.train.len();
        let per_epoch = n.div_ceil(cfg.batch_size) as u64;
        let mut order: Vec<usize> = Vec::new();
        let mut order_epoch = u64::MAX;
        let mut final_valid = f64::NAN;
        let mut metrics_file = match self.out {
            Some(dir) => Some(fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?),
            None => None,
        };

        for step in start + 1..=cfg.steps {
            let idx = step - 1;
            let epoch = idx / per_epoch;
            if epoch != order_epoch {
                order = (0..n).collect();
                order.shuffle(&mut stream(cfg.seed, SHUFFLE, epoch));
                order_epoch = epoch;
            }
            let lo = (idx % per_epoch) as usize * cfg.batch_size;
            let members: Vec<&PreparedGraph> = order[lo..(lo + cfg.batch_size).min(n)].iter().map(|&i| &self.train[i]).collect();
            let batch = model.batch(&members)?;

            let mut rng = stream(cfg.seed, STEP, step);
            let mut out = match &cfg.flag {
                Some(f) => flag_augment(&model, &batch, f, &mut rng)?,
                None => loss_and_gradients(&model, &batch, true, &mut rng)?,
            };
            if !out.loss.is_finite() {
                return Err(Error::Diverged { step, loss: out.loss });
            }
            for ((name, _), g) in model.params.named().iter().zip(&out.grads) {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { param: name.clone(), step });
                }
            }
            clip_gradients(&mut out.grads, cfg.optim.clip_norm);
            let lr = lr_at(step, &cfg.optim);
            {
                let mut params: Vec<_> = model.params.named_mut().into_iter().map(|(_, t)| t).collect();
                adamw_step(&mut params, &out.grads, &mut optim, &cfg.optim, lr)?;
            }

            let mut row = MetricRow { step, lr, train_loss: out.loss, valid_metric: None };
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let v = evaluate(&model, self.valid, cfg.eval_batch_size)?;
                row.valid_metric = Some(v);
                final_valid = v;
                let improved = v < best;
                if improved {
                    best = v;
                    best_step = step;
                }
                if let Some(dir) = self.out {
                    let ck = |optim: Option<OptimState>| Checkpoint {
                        config_hash: self.hash,
                        step,
                        valid_metric: v,
                        best_valid: best,
                        model: model.clone(),
                        optim,
                    };
                    if improved {
                        ck(None).save(&dir.join(BEST_CHECKPOINT))?;
                    }
                    ck(Some(optim.clone())).save(&dir.join(LAST_CHECKPOINT))?;
                }
            }
            if let Some(f) = metrics_file.as_mut() {
                use std::io::Write;
                writeln!(f, "{}", row.to_csv())?;
            }
            history.push(row);
        }
        Ok(TrainOutcome { model, history, final_valid, best_valid: best, best_step })
    }
}

/// Paths of the files a run writes into `dir`.
pub fn run_files(dir: &Path) -> [PathBuf; 3] {
    [dir.join(METRICS_FILE), dir.join(BEST_CHECKPOINT), dir.join(LAST_CHECKPOINT)]
}
