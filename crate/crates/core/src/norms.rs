//! Batch, instance, group and layer normalization.
//!
//! All four kinds share the same affine form `(x - E) / sqrt(V + eps) * gamma + beta`
//! with per-channel `gamma`/`beta`; they differ only in which elements a
//! statistic is pooled over:
//!
//! | kind     | one statistic per   | pooled over            |
//! |----------|---------------------|------------------------|
//! | batch    | channel             | (N, H, W)              |
//! | instance | (sample, channel)   | (H, W)                 |
//! | group    | (sample, group)     | (channels in group, H, W) |
//! | layer    | sample              | (C, H, W)              |
//!
//! Batch normalization alone keeps running statistics and switches to them
//! in eval mode. Variances use the population convention (divide by count).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const MAX_DEFAULT_GROUPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
    Group,
    Layer,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
            NormKind::Group => "group",
            NormKind::Layer => "layer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "batch" => Some(NormKind::Batch),
            "instance" => Some(NormKind::Instance),
            "group" => Some(NormKind::Group),
            "layer" => Some(NormKind::Layer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `min(32, channels)`.
pub fn default_groups(channels: usize) -> usize {
    channels.min(MAX_DEFAULT_GROUPS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct NormLayer<T: Scalar = f32> {
    kind: NormKind,
    channels: usize,
    groups: usize,
    momentum: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running: Option<RunningStats<T>>,
    /// Skip running-statistics updates in train mode (ablation switch).
    pub freeze_stats: bool,
}

/// Saved forward state needed by [`NormLayer::backward`].
#[derive(Clone, Debug)]
pub struct NormCache<T: Scalar> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    /// Statistics were constants (batch kind in eval mode).
    fixed_stats: bool,
}

/// Per-channel batch statistics produced by a train-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl<T: Scalar> NormLayer<T> {
    pub fn new(kind: NormKind, channels: usize, groups: Option<usize>, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Spec("norm layer needs at least one channel".into()));
        }
        let groups = match kind {
            NormKind::Group => groups.unwrap_or_else(|| default_groups(channels)),
            _ => 1,
        };
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Spec(format!(
                "group norm: {channels} channels not divisible by {groups} groups"
            )));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Spec(format!("norm momentum {momentum} outside (0, 1]")));
        }
        Ok(Self {
            kind,
            channels,
            groups,
            momentum,
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running: None,
            freeze_stats: false,
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn running(&self) -> Option<&RunningStats<T>> {
        self.running.as_ref()
    }

    pub fn set_running(&mut self, stats: Option<RunningStats<T>>) -> Result<()> {
        if let Some(s) = &stats {
            if self.kind != NormKind::Batch {
                return Err(Error::Spec(format!(
                    "{} norm has no running statistics",
                    self.kind.name()
                )));
            }
            if s.mean.len() != self.channels || s.var.len() != self.channels {
                return Err(Error::Shape("running statistics length != channels".into()));
            }
            if s.var.iter().any(|v| v.to_f64() < 0.0) {
                return Err(Error::Domain("negative running variance".into()));
            }
        }
        self.running = stats;
        Ok(())
    }

    /// Statistics region that the (sample, channel) block belongs to.
    fn region(&self, n: usize, c: usize) -> usize {
        match self.kind {
            NormKind::Batch => c,
            NormKind::Instance => n * self.channels + c,
            NormKind::Group => n * self.groups + c / (self.channels / self.groups),
            NormKind::Layer => n,
        }
    }

    fn num_regions(&self, batch: usize) -> usize {
        match self.kind {
            NormKind::Batch => self.channels,
            NormKind::Instance => batch * self.channels,
            NormKind::Group => batch * self.groups,
            NormKind::Layer => batch,
        }
    }

    fn dims(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let (n, c, spatial) = match shape {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            _ => {
                return Err(Error::Shape(format!(
                    "norm expects [N,C] or [N,C,H,W], got {shape:?}"
                )))
            }
        };
        if c != self.channels {
            return Err(Error::Shape(format!(
                "norm configured for {} channels, input has {c}",
                self.channels
            )));
        }
        Ok((n, spatial))
    }

    /// Forward pass. Returns the output, the backward cache, and (batch kind in
    /// train mode only) the batch statistics to fold into the running stats.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NormCache<T>, Option<BatchStats>)> {
        let (n, spatial) = self.dims(x.shape())?;
        let c = self.channels;
        let data = x.data();
        let gamma = self.gamma.data();
        let beta = self.beta.data();

        let use_running = self.kind == NormKind::Batch && mode == Mode::Eval;
        let regions = self.num_regions(n);
        let (mean, var) = if use_running {
            let rs = self.running.as_ref().ok_or(Error::UninitializedStats)?;
            (
                rs.mean.iter().map(|v| v.to_f64()).collect::<Vec<_>>(),
                rs.var.iter().map(|v| v.to_f64()).collect::<Vec<_>>(),
            )
        } else {
            let mut sum = vec![0.0f64; regions];
            let mut count = vec![0usize; regions];
            for ni in 0..n {
                for ci in 0..c {
                    let r = self.region(ni, ci);
                    let block = &data[(ni * c + ci) * spatial..(ni * c + ci + 1) * spatial];
                    sum[r] += block.iter().map(|v| v.to_f64()).sum::<f64>();
                    count[r] += spatial;
                }
            }
            let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
            let mut sq = vec![0.0f64; regions];
            for ni in 0..n {
                for ci in 0..c {
                    let r = self.region(ni, ci);
                    let mu = mean[r];
                    let block = &data[(ni * c + ci) * spatial..(ni * c + ci + 1) * spatial];
                    sq[r] += block
                        .iter()
                        .map(|v| {
                            let d = v.to_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
            }
            let var = sq.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
            (mean, var)
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![T::ZERO; data.len()];
        let mut out = vec![T::ZERO; data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = self.region(ni, ci);
                let (mu, is) = (mean[r], inv_std[r]);
                let (g, b) = (gamma[ci].to_f64(), beta[ci].to_f64());
                let base = (ni * c + ci) * spatial;
                for i in base..base + spatial {
                    let h = (data[i].to_f64() - mu) * is;
                    xhat[i] = T::from_f64(h);
                    out[i] = T::from_f64(h * g + b);
                }
            }
        }

        let batch_stats = (self.kind == NormKind::Batch && mode == Mode::Train).then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let cache = NormCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            fixed_stats: use_running,
        };
        Ok((Tensor::from_vec(x.shape(), out)?, cache, batch_stats))
    }

    /// Fold batch statistics into the running estimates:
    /// `running <- (1 - m) * running + m * batch`. The first update
    /// initializes the running statistics to the batch statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        if self.freeze_stats || self.kind != NormKind::Batch {
            return;
        }
        let m = self.momentum;
        match self.running.as_mut() {
            None => {
                self.running = Some(RunningStats {
                    mean: stats.mean.iter().map(|&v| T::from_f64(v)).collect(),
                    var: stats.var.iter().map(|&v| T::from_f64(v)).collect(),
                })
            }
            Some(rs) => {
                for (r, &b) in rs.mean.iter_mut().zip(&stats.mean) {
                    *r = T::from_f64((1.0 - m) * r.to_f64() + m * b);
                }
                for (r, &b) in rs.var.iter_mut().zip(&stats.var) {
                    *r = T::from_f64(((1.0 - m) * r.to_f64() + m * b).max(0.0));
                }
            }
        }
    }

    /// Backward pass: accumulates into `gamma`/`beta` gradients and returns the
    /// input gradient.
    pub fn backward(&mut self, cache: &NormCache<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        if upstream.shape() != cache.shape.as_slice() {
            return Err(Error::Shape(format!(
                "norm backward: upstream {:?} vs cached {:?}",
                upstream.shape(),
                cache.shape
            )));
        }
        let (n, spatial) = self.dims(&cache.shape)?;
        let c = self.channels;
        let dy = upstream.data();
        let xhat = &cache.xhat;
        let gamma: Vec<f64> = self.gamma.data().iter().map(|v| v.to_f64()).collect();

        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                for i in base..base + spatial {
                    let d = dy[i].to_f64();
                    dgamma[ci] += d * xhat[i].to_f64();
                    dbeta[ci] += d;
                }
            }
        }

        let mut dx = vec![T::ZERO; dy.len()];
        if cache.fixed_stats {
            for ni in 0..n {
                for ci in 0..c {
                    let scale = gamma[ci] * cache.inv_std[self.region(ni, ci)];
                    let base = (ni * c + ci) * spatial;
                    for i in base..base + spatial {
                        dx[i] = T::from_f64(dy[i].to_f64() * scale);
                    }
                }
            }
        } else {
            let regions = self.num_regions(n);
            let mut sum_d = vec![0.0f64; regions];
            let mut sum_dx = vec![0.0f64; regions];
            let mut count = vec![0usize; regions];
            for ni in 0..n {
                for ci in 0..c {
                    let r = self.region(ni, ci);
                    let base = (ni * c + ci) * spatial;
                    for i in base..base + spatial {
                        let dh = dy[i].to_f64() * gamma[ci];
                        sum_d[r] += dh;
                        sum_dx[r] += dh * xhat[i].to_f64();
                    }
                    count[r] += spatial;
                }
            }
            for ni in 0..n {
                for ci in 0..c {
                    let r = self.region(ni, ci);
                    let m = count[r] as f64;
                    let (md, mdx, is) = (sum_d[r] / m, sum_dx[r] / m, cache.inv_std[r]);
                    let base = (ni * c + ci) * spatial;
                    for i in base..base + spatial {
                        let dh = dy[i].to_f64() * gamma[ci];
                        dx[i] = T::from_f64(is * (dh - md - xhat[i].to_f64() * mdx));
                    }
                }
            }
        }

        for (g, d) in self.gamma.grad_mut().iter_mut().zip(&dgamma) {
            *g += T::from_f64(*d);
        }
        for (g, d) in self.beta.grad_mut().iter_mut().zip(&dbeta) {
            *g += T::from_f64(*d);
        }
        Tensor::from_vec(&cache.shape, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const KINDS: [NormKind; 4] = [NormKind::Batch, NormKind::Instance, NormKind::Group, NormKind::Layer];

    fn random_input(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0) * scale + 0.3).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn layer(kind: NormKind, c: usize, groups: Option<usize>) -> NormLayer<f64> {
        NormLayer::new(kind, c, groups, DEFAULT_MOMENTUM).unwrap()
    }

    #[test]
    fn constant_input_maps_to_beta() {
        for kind in KINDS {
            let mut l = layer(kind, 4, Some(2));
            l.beta = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
            let x = Tensor::full(&[2, 4, 3, 3], 7.25);
            let (y, _, _) = l.forward(&x, Mode::Train).unwrap();
            for (i, v) in y.data().iter().enumerate() {
                let ch = (i / 9) % 4;
                assert!((v - l.beta.data()[ch]).abs() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn group_degenerates_to_instance_and_layer() {
        let x = random_input(&[3, 6, 4, 4], 1, 2.0);
        let inst = layer(NormKind::Instance, 6, None).forward(&x, Mode::Train).unwrap().0;
        let lay = layer(NormKind::Layer, 6, None).forward(&x, Mode::Train).unwrap().0;
        let g_c = layer(NormKind::Group, 6, Some(6)).forward(&x, Mode::Train).unwrap().0;
        let g_1 = layer(NormKind::Group, 6, Some(1)).forward(&x, Mode::Train).unwrap().0;
        assert_eq!(inst.data(), g_c.data());
        assert_eq!(lay.data(), g_1.data());
    }

    #[test]
    fn batch_running_stats_population_convention() {
        let mut l = NormLayer::<f64>::new(NormKind::Batch, 1, None, 1.0).unwrap();
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (_, _, stats) = l.forward(&x, Mode::Train).unwrap();
        l.update_running(&stats.unwrap());
        let rs = l.running().unwrap();
        assert_eq!(rs.mean, vec![2.0]);
        assert_eq!(rs.var, vec![1.0]);
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut l = NormLayer::<f64>::new(NormKind::Batch, 1, None, 0.1).unwrap();
        l.set_running(Some(RunningStats { mean: vec![0.0], var: vec![1.0] })).unwrap();
        l.update_running(&BatchStats { mean: vec![10.0], var: vec![3.0] });
        let rs = l.running().unwrap();
        assert!((rs.mean[0] - 1.0).abs() < 1e-12);
        assert!((rs.var[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn frozen_stats_do_not_move() {
        let mut l = NormLayer::<f64>::new(NormKind::Batch, 1, None, 0.1).unwrap();
        l.set_running(Some(RunningStats { mean: vec![0.0], var: vec![1.0] })).unwrap();
        l.freeze_stats = true;
        l.update_running(&BatchStats { mean: vec![10.0], var: vec![3.0] });
        assert_eq!(l.running().unwrap().mean, vec![0.0]);
    }

    #[test]
    fn eval_batch_norm_requires_stats() {
        let l = layer(NormKind::Batch, 2, None);
        let x = random_input(&[2, 2, 2, 2], 3, 1.0);
        assert!(matches!(l.forward(&x, Mode::Eval), Err(Error::UninitializedStats)));
        for kind in [NormKind::Instance, NormKind::Group, NormKind::Layer] {
            let l = layer(kind, 2, None);
            let a = l.forward(&x, Mode::Eval).unwrap().0;
            let b = l.forward(&x, Mode::Train).unwrap().0;
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn group_requires_divisible_channels() {
        assert!(NormLayer::<f32>::new(NormKind::Group, 6, Some(4), 0.1).is_err());
        assert_eq!(layer(NormKind::Group, 8, None).groups(), 8);
        assert_eq!(layer(NormKind::Group, 64, None).groups(), 32);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let l = layer(NormKind::Layer, 3, None);
        assert!(l.forward(&Tensor::zeros(&[1, 4, 2, 2]), Mode::Train).is_err());
    }

    #[test]
    fn train_output_is_standardized_per_region() {
        // gamma = 1, beta = 0 so the output is the normalized input itself.
        let x = random_input(&[4, 8, 5, 5], 7, 3.0);
        let (n, c, s) = (4usize, 8usize, 25usize);
        for kind in KINDS {
            let l = layer(kind, c, Some(4));
            let y = l.forward(&x, Mode::Train).unwrap().0;
            let regions = l.num_regions(n);
            let mut vals = vec![Vec::new(); regions];
            for ni in 0..n {
                for ci in 0..c {
                    let r = l.region(ni, ci);
                    let base = (ni * c + ci) * s;
                    vals[r].extend_from_slice(&y.data()[base..base + s]);
                }
            }
            for v in vals {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
                assert!(m.abs() < 1e-5, "{kind:?} mean {m}");
                assert!((var - 1.0).abs() < 1e-3, "{kind:?} var {var}");
            }
        }
    }

    #[test]
    fn beta_grad_is_upstream_sum_and_input_grad_sums_to_zero() {
        let x = random_input(&[2, 4, 3, 3], 11, 1.5);
        let up = random_input(&[2, 4, 3, 3], 12, 1.0);
        for kind in KINDS {
            let mut l = layer(kind, 4, Some(2));
            l.gamma = random_input(&[4], 13, 0.5);
            let (_, cache, _) = l.forward(&x, Mode::Train).unwrap();
            let dx = l.backward(&cache, &up).unwrap();
            for ci in 0..4 {
                let expect: f64 = (0..2)
                    .flat_map(|ni| (0..9).map(move |s| (ni * 4 + ci) * 9 + s))
                    .map(|i| up.data()[i])
                    .sum();
                assert!((l.beta.grad().unwrap()[ci] - expect).abs() < 1e-10);
            }
            if kind != NormKind::Batch {
                let mut sums = vec![0.0; l.num_regions(2)];
                for ni in 0..2 {
                    for ci in 0..4 {
                        let base = (ni * 4 + ci) * 9;
                        sums[l.region(ni, ci)] += dx.data()[base..base + 9].iter().sum::<f64>();
                    }
                }
                assert!(sums.iter().all(|s| s.abs() < 1e-10), "{kind:?} {sums:?}");
            }
        }
    }

    fn weighted_loss(l: &NormLayer<f64>, x: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        let y = l.forward(x, Mode::Train).unwrap().0;
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-3;
        for kind in KINDS {
            let x = random_input(&[3, 4, 2, 3], 21, 1.0);
            let w = random_input(&[3, 4, 2, 3], 22, 1.0);
            let mut l = layer(kind, 4, Some(2));
            l.gamma = random_input(&[4], 23, 0.5);
            l.beta = random_input(&[4], 24, 0.5);
            let (_, cache, _) = l.forward(&x, Mode::Train).unwrap();
            let dx = l.backward(&cache, &w).unwrap();

            let check = |analytic: f64, numeric: f64, what: &str| {
                let denom = analytic.abs().max(numeric.abs()).max(1e-2);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{kind:?} {what}: {analytic} vs {numeric}"
                );
            };
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let num = (weighted_loss(&l, &xp, &w) - weighted_loss(&l, &xm, &w)) / (2.0 * h);
                check(dx.data()[i], num, "input");
            }
            for ci in 0..4 {
                let mut lp = l.clone();
                lp.gamma.data_mut()[ci] += h;
                let mut lm = l.clone();
                lm.gamma.data_mut()[ci] -= h;
                let num = (weighted_loss(&lp, &x, &w) - weighted_loss(&lm, &x, &w)) / (2.0 * h);
                check(l.gamma.grad().unwrap()[ci], num, "gamma");
            }
        }
    }

    #[test]
    fn only_batch_norm_eval_depends_on_training_history() {
        let probe = random_input(&[1, 4, 3, 3], 31, 1.0);
        let shifted = {
            let mut t = random_input(&[8, 4, 3, 3], 32, 2.0);
            t.data_mut().iter_mut().for_each(|v| *v += 5.0);
            t
        };
        let warmup = random_input(&[8, 4, 3, 3], 33, 1.0);
        for kind in KINDS {
            let mut l = layer(kind, 4, Some(2));
            if let (_, _, Some(s)) = l.forward(&warmup, Mode::Train).unwrap() {
                l.update_running(&s);
            }
            let before = l.forward(&probe, Mode::Eval).unwrap().0;
            if let (_, _, Some(s)) = l.forward(&shifted, Mode::Train).unwrap() {
                l.update_running(&s);
            }
            let after = l.forward(&probe, Mode::Eval).unwrap().0;
            if kind == NormKind::Batch {
                assert_ne!(before.data(), after.data());
            } else {
                assert_eq!(before.data(), after.data());
            }
        }
    }

    #[test]
    fn affine_parameter_count_is_two_per_channel() {
        for kind in KINDS {
            let l = layer(kind, 16, Some(4));
            assert_eq!(l.gamma.len() + l.beta.len(), 32);
        }
    }
}
