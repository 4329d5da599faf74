use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::Mode;
use crate::error::{Error, Result};
use crate::model::{forward, loss, Batch, Model};
use crate::numerics::{Tape, Tensor};

/// Adversarial perturbation of the input node representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagConfig {
    /// Ascent step size; also the half-width of the initial noise.
    pub alpha: f64,
    /// Number of ascent steps per update.
    pub steps: usize,
    /// Max-norm radius of the perturbation; 0 disables the projection.
    pub epsilon: f64,
}

impl FlagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.steps == 0 || self.epsilon < 0.0 {
            return Err(Error::Config(format!("invalid perturbation settings {self:?}")));
        }
        Ok(())
    }
}

/// Loss and parameter gradients (in `ModelParams::named` order) of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Largest `|delta|` after each ascent step; empty without perturbation.
    pub delta_max_abs: Vec<f64>,
}

fn mode<'a>(model: &Model, training: bool, rng: &'a mut dyn RngCore) -> Mode<'a> {
    Mode {
        training,
        attention_dropout: model.config.attention_dropout,
        dropout: model.config.dropout,
        rng,
    }
}

/// Mean loss over the batch and its gradients.
pub fn loss_and_gradients(model: &Model, batch: &Batch, training: bool, rng: &mut dyn RngCore) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let pred = forward(&mut tape, &model.config, &p, batch, &mut mode(model, training, rng), None)?;
    let l = loss(&mut tape, pred, &batch.targets, model.config.task)?;
    let g = tape.backward(l)?;
    let grads = p.named().into_iter().zip(model.params.named()).map(|((_, &v), (_, t))| g.get_or_zeros(v, t)).collect();
    Ok(StepOutput { loss: tape.value(l).item(), grads, delta_max_abs: Vec::new() })
}

/// Gradients accumulated over `cfg.steps` ascent steps on a perturbation
/// `delta` of the input node representations. Each step contributes
/// `1 / steps` of its loss gradient; `delta` starts uniform in
/// `[-alpha, alpha]`, moves by `alpha * g / |g|_2`, and is clamped to
/// `[-epsilon, epsilon]` when `epsilon > 0`.
pub fn flag_augment(model: &Model, batch: &Batch, cfg: &FlagConfig, rng: &mut dyn RngCore) -> Result<StepOutput> {
    cfg.validate()?;
    let shape = [batch.num_graphs, batch.n_pad, model.config.hidden];
    let mut delta = Tensor::uniform(&shape, -cfg.alpha, cfg.alpha, rng);
    let project = |d: &mut Tensor| {
        if cfg.epsilon > 0.0 {
            d.data_mut().iter_mut().for_each(|x| *x = x.clamp(-cfg.epsilon, cfg.epsilon));
        }
    };
    project(&mut delta);
    let mut acc: Vec<Tensor> = model.params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    let mut trace = Vec::with_capacity(cfg.steps);
    let inv = 1.0 / cfg.steps as f64;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let dv = tape.param(delta.clone());
        let pred = forward(&mut tape, &model.config, &p, batch, &mut mode(model, true, rng), Some(dv))?;
        let l = loss(&mut tape, pred, &batch.targets, model.config.task)?;
        total += tape.value(l).item() * inv;
        let l = tape.scale(l, inv);
        let g = tape.backward(l)?;
        for (a, (_, &v)) in acc.iter_mut().zip(p.named()) {
            if let Some(gv) = g.get(v) {
                a.data_mut().iter_mut().zip(gv.data()).for_each(|(x, y)| *x += y);
            }
        }
        let gd = g.get_or_zeros(dv, &delta);
        let norm = gd.norm_sq().sqrt();
        if norm > 0.0 {
            let step = cfg.alpha / norm;
            delta.data_mut().iter_mut().zip(gd.data()).for_each(|(x, y)| *x += step * y);
        }
        project(&mut delta);
        trace.push(delta.max_abs());
    }
    Ok(StepOutput { loss: total, grads: acc, delta_max_abs: trace })
}
