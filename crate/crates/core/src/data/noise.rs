//! Mixed-noise sampling: each sample independently draws a noise level from
//! a weighted set (which may include 0) and receives `N(0, σ²I)` noise.
//! Results are not clamped to [0, 1].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    sigmas: Vec<f64>,
    weights: Vec<f64>,
    pub seed: u64,
    /// One σ for the whole batch instead of one per sample.
    pub per_batch: bool,
}

impl NoiseSpec {
    /// Uniform weights when `weights` is `None`; given weights are normalized.
    pub fn new(sigmas: Vec<f64>, weights: Option<Vec<f64>>, seed: u64) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::invalid("sigmas", "must contain at least one sigma"));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("sigmas", format!("must be finite and >= 0, got {s}")));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; sigmas.len()]);
        if weights.len() != sigmas.len() {
            return Err(Error::invalid("weights", format!("{} weights for {} sigmas", weights.len(), sigmas.len())));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("weights", "must be positive"));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            sigmas,
            weights: weights.iter().map(|w| w / total).collect(),
            seed,
            per_batch: false,
        })
    }

    /// The single-level set `{0}`: clean images only.
    pub fn clean(seed: u64) -> Self {
        Self {
            sigmas: vec![0.0],
            weights: vec![1.0],
            seed,
            per_batch: false,
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_clean(&self) -> bool {
        self.sigmas.iter().all(|&s| s == 0.0)
    }

    /// Index into `sigmas` chosen by `u` in [0, 1).
    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }
}

/// A noisy batch plus the noise level each sample received.
#[derive(Clone, Debug)]
pub struct NoisyBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub sigmas: Vec<f64>,
}

/// `x + δ` for each listed sample, `δ ~ N(0, σ²I)` with σ drawn from `spec`.
/// Sample `i` of `epoch` always receives the same σ and δ; with
/// `per_batch` the σ is drawn once, keyed by the batch's first index.
pub fn sample_noisy_batch(dataset: &Dataset, indices: &[usize], spec: &NoiseSpec, epoch: u64) -> Result<NoisyBatch> {
    let mut images = dataset.images.gather_outer(indices)?;
    let d = dataset.sample_len();
    let mut sigmas = Vec::with_capacity(indices.len());
    let batch_sigma = match (spec.per_batch, indices.first()) {
        (true, Some(&first)) => {
            let mut rng = rng::stream(spec.seed, &[rng::NS_NOISE, epoch, u64::MAX, first as u64]);
            Some(spec.sigmas[spec.pick(rng.random::<f64>())])
        }
        _ => None,
    };
    for (row, &idx) in images.data_mut().chunks_mut(d).zip(indices) {
        let mut rng = rng::stream(spec.seed, &[rng::NS_NOISE, epoch, idx as u64]);
        let drawn = spec.sigmas[spec.pick(rng.random::<f64>())];
        let sigma = batch_sigma.unwrap_or(drawn);
        if sigma > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v as f64 + sigma * z) as f32;
            }
        }
        sigmas.push(sigma);
    }
    Ok(NoisyBatch {
        images,
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        sigmas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_shapes, Split};

    fn one_image(value: f32) -> Dataset {
        Dataset::new("one", Split::Train, Tensor::full(&[1, 1, 4, 4], value), vec![0], 1).unwrap()
    }

    #[test]
    fn clean_spec_is_identity() {
        let d = synth_shapes(2, 3, 16, 0, Split::Train).unwrap();
        let b = sample_noisy_batch(&d, &[0, 4, 5], &NoiseSpec::clean(3), 0).unwrap();
        assert_eq!(b.images.data(), d.images.gather_outer(&[0, 4, 5]).unwrap().data());
        assert_eq!(b.sigmas, vec![0.0; 3]);
    }

    #[test]
    fn weights_are_normalized_and_validated() {
        let s = NoiseSpec::new(vec![0.0, 0.5], Some(vec![1.0, 3.0]), 0).unwrap();
        assert_eq!(s.weights(), &[0.25, 0.75]);
        assert!(NoiseSpec::new(vec![-0.1], None, 0).is_err());
        assert!(NoiseSpec::new(vec![0.1, 0.2], Some(vec![1.0]), 0).is_err());
        assert!(NoiseSpec::new(vec![], None, 0).is_err());
    }

    #[test]
    fn uniform_sigma_frequencies() {
        // 40,000 draws over 4 levels: 99% binomial band 10,000 ± 400
        let spec = NoiseSpec::new(vec![0.0, 0.25, 0.5, 1.0], None, 17).unwrap();
        let mut counts = [0usize; 4];
        for i in 0..40_000u64 {
            let mut rng = rng::stream(spec.seed, &[rng::NS_NOISE, 0, i]);
            counts[spec.pick(rng.random::<f64>())] += 1;
        }
        for c in counts {
            assert!((9_600..=10_400).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn per_pixel_noise_variance() {
        let d = one_image(0.3);
        let spec = NoiseSpec::new(vec![0.5], None, 5).unwrap();
        let mut sum = [0.0f64; 16];
        let mut sq = [0.0f64; 16];
        let draws = 10_000;
        for e in 0..draws {
            let b = sample_noisy_batch(&d, &[0], &spec, e).unwrap();
            for (p, v) in b.images.data().iter().enumerate() {
                let z = *v as f64 - 0.3;
                sum[p] += z;
                sq[p] += z * z;
            }
        }
        for p in 0..16 {
            let m = sum[p] / draws as f64;
            let var = (sq[p] - draws as f64 * m * m) / (draws - 1) as f64;
            assert!((0.24..=0.26).contains(&var), "pixel {p}: {var}");
        }
    }

    #[test]
    fn noise_does_not_depend_on_content_and_is_reproducible() {
        let a = one_image(0.0);
        let b = one_image(0.9);
        let spec = NoiseSpec::new(vec![0.25, 1.0], None, 8).unwrap();
        for e in 0..5 {
            let na = sample_noisy_batch(&a, &[0], &spec, e).unwrap();
            let nb = sample_noisy_batch(&b, &[0], &spec, e).unwrap();
            assert_eq!(na.sigmas, nb.sigmas);
            for (x, y) in na.images.data().iter().zip(nb.images.data()) {
                assert!(((y - 0.9) - x).abs() < 1e-6);
            }
            let again = sample_noisy_batch(&a, &[0], &spec, e).unwrap();
            assert_eq!(na.images, again.images);
        }
        let e0 = sample_noisy_batch(&a, &[0], &spec, 0).unwrap();
        let e1 = sample_noisy_batch(&a, &[0], &spec, 1).unwrap();
        assert_ne!(e0.images, e1.images);
    }

    #[test]
    fn output_is_not_clamped() {
        let d = one_image(1.0);
        let spec = NoiseSpec::new(vec![1.0], None, 1).unwrap();
        let b = sample_noisy_batch(&d, &[0], &spec, 0).unwrap();
        assert!(b.images.data().iter().any(|&v| v > 1.0));
    }

    #[test]
    fn per_batch_shares_one_sigma() {
        let d = synth_shapes(2, 20, 16, 0, Split::Train).unwrap();
        let mut spec = NoiseSpec::new(vec![0.0, 0.25, 0.5, 1.0], None, 9).unwrap();
        spec.per_batch = true;
        let mut seen = std::collections::BTreeSet::new();
        for start in 0..30 {
            let idx: Vec<usize> = (start..start + 8).collect();
            let b = sample_noisy_batch(&d, &idx, &spec, 0).unwrap();
            assert!(b.sigmas.iter().all(|&s| s == b.sigmas[0]));
            seen.insert((b.sigmas[0] * 100.0) as u32);
        }
        assert!(seen.len() > 1);
    }
}
