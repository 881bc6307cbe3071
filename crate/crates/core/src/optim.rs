//! AdamW with decoupled weight decay, EMA shadow parameters and the
//! learning-rate schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::stack::StackState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrMode {
    /// Constant learning rate.
    Ddpm,
    /// Linear warmup over `warmup_images`.
    Edm,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_ema() -> f64 {
    0.9999
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub warmup_images: u64,
    pub batch_size: usize,
    pub total_images: u64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            warmup_images: 10_000,
            batch_size: 64,
            total_images: 64_000,
            ema_decay: default_ema(),
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::param("ema_decay", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if self.total_images < self.batch_size as u64 {
            return Err(Error::param("total_images", "must be at least one batch"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::param("adam_eps/weight_decay", "adam_eps > 0 and weight_decay >= 0"));
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.total_images / self.batch_size as u64
    }
}

pub fn lr_at(images_seen: u64, tc: &TrainConfig, mode: LrMode) -> f64 {
    match mode {
        LrMode::Ddpm => tc.lr,
        LrMode::Edm => {
            if tc.warmup_images == 0 {
                tc.lr
            } else {
                tc.lr * (images_seen as f64 / tc.warmup_images as f64).min(1.0)
            }
        }
    }
}

fn check_same_names<F: Real>(a: &StackState<F>, b: &StackState<F>, what: &str) -> Result<()> {
    let na: Vec<(String, usize)> = a.named_tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let nb: Vec<(String, usize)> = b.named_tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    if na != nb {
        let diff = na
            .iter()
            .zip(&nb)
            .find(|(x, y)| x != y)
            .map(|(x, y)| format!("{} vs {}", x.0, y.0))
            .unwrap_or_else(|| format!("{} vs {} tensors", na.len(), nb.len()));
        return Err(Error::Structure(format!("{what}: tensor sets differ ({diff})")));
    }
    Ok(())
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update<F: Real>(shadow: &mut StackState<F>, params: &StackState<F>, decay: f64) -> Result<()> {
    check_same_names(shadow, params, "ema")?;
    let src = params.named_tensors();
    let (a, b) = (F::of(decay), F::of(1.0 - decay));
    for ((_, dst), (_, s)) in shadow.named_tensors_mut().into_iter().zip(src) {
        for (x, y) in dst.data.iter_mut().zip(&s.data) {
            *x = a * *x + b * *y;
        }
    }
    Ok(())
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: StackState<F>,
    pub v: StackState<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &StackState<F>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update at learning rate `lr`. Tensors owned by frozen bricks are
/// left untouched.
pub fn adamw_step<F: Real>(
    params: &mut StackState<F>,
    grads: &StackState<F>,
    opt: &mut AdamState<F>,
    tc: &TrainConfig,
    lr: f64,
) -> Result<()> {
    check_same_names(params, grads, "gradients")?;
    check_same_names(params, &opt.m, "optimizer moments")?;
    opt.step += 1;
    let bc1 = 1.0 - libm::pow(tc.beta1, opt.step as f64);
    let bc2 = 1.0 - libm::pow(tc.beta2, opt.step as f64);
    let (b1, b2) = (F::of(tc.beta1), F::of(tc.beta2));
    let (ob1, ob2) = (F::of(1.0 - tc.beta1), F::of(1.0 - tc.beta2));
    let step = F::of(lr / bc1);
    let inv_bc2 = F::of(1.0 / bc2);
    let eps = F::of(tc.adam_eps);
    let decay = F::of(1.0 - lr * tc.weight_decay);
    let frozen = params.frozen.clone();
    let g = grads.named_tensors();
    let m = opt.m.named_tensors_mut();
    let v = opt.v.named_tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_tensors_mut().into_iter().zip(g).zip(m).zip(v) {
        if StackState::<F>::owner(&name).is_some_and(|k| frozen.get(k).copied().unwrap_or(false)) {
            continue;
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + ob1 * gi;
            v.data[i] = b2 * v.data[i] + ob2 * gi * gi;
            let denom = (v.data[i] * inv_bc2).sqrt() + eps;
            p.data[i] = p.data[i] * decay - step * m.data[i] / denom;
        }
    }
    Ok(())
}
