use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};
use crate::training::{FlagConfig, OptimConfig, TrainConfig};

/// Flat run configuration, read from TOML. Unknown keys are rejected.
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Separate validation file; otherwise the tail of `dataset` is held out.
    pub valid_dataset: Option<PathBuf>,
    pub valid_fraction: f64,
    pub out: Option<PathBuf>,

    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub edge_dim: usize,
    pub max_deg: usize,
    pub max_spd: usize,
    pub max_path_len: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub embedding_dropout: f64,
    pub use_spatial: bool,
    pub use_centrality: bool,
    pub use_edge: bool,
    pub final_ln: bool,

    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub peak_lr: f64,
    /// Defaults to 6% of `steps`.
    pub warmup_steps: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,

    /// Zero disables the perturbation.
    pub flag_steps: usize,
    pub flag_alpha: f64,
    pub flag_epsilon: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let o = OptimConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            dataset: None,
            valid_dataset: None,
            valid_fraction: 0.2,
            out: None,
            num_layers: m.num_layers,
            hidden: m.hidden,
            num_heads: m.num_heads,
            edge_dim: m.edge_dim,
            max_deg: m.max_deg,
            max_spd: m.max_spd,
            max_path_len: m.max_path_len,
            dropout: m.dropout,
            attention_dropout: m.attention_dropout,
            embedding_dropout: m.embedding_dropout,
            use_spatial: m.use_spatial,
            use_centrality: m.use_centrality,
            use_edge: m.use_edge,
            final_ln: m.final_ln,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            steps: t.steps,
            eval_every: t.eval_every,
            peak_lr: o.peak_lr,
            warmup_steps: None,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.eps,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            flag_steps: 0,
            flag_alpha: 1e-3,
            flag_epsilon: 0.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.valid_dataset, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!("valid_fraction = {} is outside [0, 1)", self.valid_fraction)));
        }
        self.model(Task::Regression).validate()?;
        self.train().validate()
    }

    pub fn model(&self, task: Task) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            num_heads: self.num_heads,
            edge_dim: self.edge_dim,
            max_deg: self.max_deg,
            max_spd: self.max_spd,
            max_path_len: self.max_path_len,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            embedding_dropout: self.embedding_dropout,
            task,
            use_spatial: self.use_spatial,
            use_centrality: self.use_centrality,
            use_edge: self.use_edge,
            final_ln: self.final_ln,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            eval_every: self.eval_every,
            eval_batch_size: self.eval_batch_size,
            seed: self.seed,
            optim: OptimConfig {
                peak_lr: self.peak_lr,
                warmup_steps: self.warmup_steps.unwrap_or((self.steps as f64 * 0.06).round() as u64),
                total_steps: self.steps,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
                clip_norm: self.clip_norm,
            },
            flag: (self.flag_steps > 0).then_some(FlagConfig {
                alpha: self.flag_alpha,
                steps: self.flag_steps,
                epsilon: self.flag_epsilon,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.train().optim.warmup_steps, 300);
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        assert!(RunConfig::from_toml("hiden = 3").is_err());
        assert!(RunConfig::from_toml("hidden = \"big\"").is_err());
        assert!(RunConfig::from_toml("hidden = 30\nnum_heads = 4").is_err());
    }

    #[test]
    fn partial_file_overrides() {
        let c = RunConfig::from_toml("hidden = 32\nnum_heads = 4\nflag_steps = 3\nseed = 7").unwrap();
        assert_eq!(c.model(Task::Regression).hidden, 32);
        assert_eq!(c.train().flag.unwrap().steps, 3);
        assert_eq!(c.train().seed, 7);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dataset = \"data.jsonl\"\nout = \"/abs/out\"").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.dataset.unwrap(), dir.path().join("data.jsonl"));
        assert_eq!(c.out.unwrap(), PathBuf::from("/abs/out"));
    }
}
