//! Momentum SGD with a linear-warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(
                "warmup_epochs",
                format!("{} must be below epochs ({})", self.warmup_epochs, self.epochs),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate at `t` fractional epochs into the run: linear ramp from 0
    /// over the warmup, then half-cosine decay to 0 at `epochs`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let warmup = self.warmup_epochs as f64;
        let total = self.epochs as f64;
        let t = t.clamp(0.0, total);
        if t < warmup {
            self.base_lr * t / warmup
        } else {
            let phase = (t - warmup) / (total - warmup);
            self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
        }
    }
}

/// Momentum buffers for one parameter list.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// One update at `epoch_progress` in [0, 1] of the run. Parameters whose
    /// `trainable` flag is false are skipped (their gradients are ignored).
    /// Returns the learning rate used.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], trainable: &[bool], epoch_progress: f64) -> f64 {
        let lr = self.config.lr_at(epoch_progress * self.config.epochs as f64);
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let mu = self.config.momentum;
        for ((p, v), &on) in params.iter_mut().zip(&mut self.velocity).zip(trainable) {
            if !on {
                continue;
            }
            let (data, grad) = p.data_and_grad_mut();
            for ((w, g), vel) in data.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                *vel = mu * *vel + g.to_f64();
                *w = T::from_f64(w.to_f64() - lr * *vel);
            }
        }
        lr
    }
}

/// Single update of `params` given `grads`; stateless convenience wrapper
/// (momentum buffers start at zero).
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], config: &SgdConfig, epoch_progress: f64) -> Result<f64> {
    let mut opt = Sgd::new(config.clone())?;
    let trainable = vec![true; params.len()];
    Ok(opt.step(params, &trainable, epoch_progress))
}
