use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 gradient clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            warmup_steps: 300,
            total_steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.warmup_steps <= self.total_steps;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let remaining = (cfg.total_steps - step) as f64;
    cfg.peak_lr * remaining / (cfg.total_steps - cfg.warmup_steps) as f64
}

/// Adam moments for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One AdamW update with bias correction and decoupled weight decay, at
/// learning rate `lr`.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimState, cfg: &OptimConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { param: format!("#{i}"), step: state.step + 1 });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(Error::Shape { op: "adamw_step", detail: format!("{:?} vs {:?}", p.shape(), g.shape()) });
        }
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((w, &gi), (mi, vi)) in it {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimConfig {
        OptimConfig { peak_lr: 1e-3, warmup_steps: 10, total_steps: 110, ..OptimConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(5, &c), 5e-4);
        assert_eq!(lr_at(10, &c), 1e-3);
        assert!((lr_at(60, &c) - 5e-4).abs() < 1e-18);
        assert!(lr_at(110, &c).abs() < 1e-12);
        assert_eq!(lr_at(500, &c), 0.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut s = OptimState::new([&p]);
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut s, &cfg(), 1e-3).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn decoupled_decay_on_zero_gradient() {
        let c = OptimConfig { weight_decay: 0.01, ..cfg() };
        let mut p = Tensor::from_vec(vec![3.0]);
        let mut s = OptimState::new([&p]);
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[1])], &mut s, &c, 0.1).unwrap();
        assert!((p.item() - (3.0 - 0.1 * 0.01 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_formula() {
        let c = OptimConfig { weight_decay: 0.05, ..cfg() };
        let lr = 2e-3;
        let grads = [0.7, -0.3, 1.9];
        let mut p = Tensor::from_vec(vec![0.5]);
        let mut s = OptimState::new([&p]);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            adamw_step(&mut [&mut p], &[Tensor::from_vec(vec![g])], &mut s, &c, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (k + 1) as i32;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * (mh / (vh.sqrt() + 1e-8) + 0.05 * w);
            assert!((p.item() - w).abs() < 1e-10);
        }
        // first step is lr * sign(g) up to eps and decay
        let mut q = Tensor::from_vec(vec![0.0]);
        let mut s = OptimState::new([&q]);
        adamw_step(&mut [&mut q], &[Tensor::from_vec(vec![4.0])], &mut s, &cfg(), 1e-3).unwrap();
        assert!((q.item() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn rejects_nan() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut s = OptimState::new([&p]);
        let err = adamw_step(&mut [&mut p], &[Tensor::from_vec(vec![f64::NAN])], &mut s, &cfg(), 1e-3);
        assert!(matches!(err, Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(vec![3.0]), Tensor::zeros(&[2])];
        assert_eq!(clip_gradients(&mut g, 5.0), 3.0);
        assert_eq!(g[0].item(), 3.0);
        let mut g = vec![Tensor::from_vec(vec![6.0]), Tensor::from_vec(vec![8.0, 0.0])];
        assert_eq!(clip_gradients(&mut g, 5.0), 10.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-10);
        assert_eq!(g[0].item(), 3.0);
        let mut z = vec![Tensor::zeros(&[3])];
        clip_gradients(&mut z, 5.0);
        assert_eq!(z[0].data(), &[0.0; 3]);
    }
}
