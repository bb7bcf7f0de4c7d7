//! Randomized smoothing: Monte Carlo prediction and ℓ2 certification of the
//! smoothed classifier `g(x) = argmax_c P[f(x + δ) = c]`, `δ ~ N(0, σ²I)`.
//!
//! Certification follows the two-stage protocol: `n0` noisy draws select the
//! candidate class, `n` fresh draws estimate its probability, a one-sided
//! Clopper–Pearson bound gives `p_lower`, and the radius is
//! `σ · Φ⁻¹(p_lower)` (the runner-up is bounded by `1 - p_lower`).

pub mod stats;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, Mode, Model};
use crate::rng;
use crate::tensor::Tensor;

pub use stats::{clopper_pearson_lower, inv_norm_cdf, norm_cdf};

/// Hard-label classifier evaluated under noise.
pub trait BaseClassifier: Sync {
    fn num_classes(&self) -> usize;
    /// Flattened per-sample input length.
    fn input_len(&self) -> usize;
    /// Classify a batch of `count` inputs laid out contiguously in `inputs`.
    fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>>;
}

impl BaseClassifier for Model<f32> {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn input_len(&self) -> usize {
        self.spec().input_len()
    }

    fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>> {
        let [c, h, w] = self.spec().input_shape();
        let batch = Tensor::from_vec(&[count, c, h, w], inputs.to_vec())?;
        let logits = self.forward(&batch, Mode::Eval)?;
        let k = logits.shape()[1];
        Ok(logits.data().chunks(k).map(argmax).collect())
    }
}

/// `sign(w·x + b)` as a two-class classifier: class 1 when `w·x + b > 0`.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BaseClassifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        2
    }

    fn input_len(&self) -> usize {
        self.weights.len()
    }

    fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>> {
        let d = self.weights.len();
        Ok((0..count)
            .map(|i| {
                let s: f64 = inputs[i * d..(i + 1) * d]
                    .iter()
                    .zip(&self.weights)
                    .map(|(x, w)| *x as f64 * w)
                    .sum::<f64>()
                    + self.bias;
                usize::from(s > 0.0)
            })
            .collect())
    }
}

/// Closed-form smoothed behavior of [`LinearClassifier`]: the probability of
/// the top class under noise, and the exact ℓ2 distance to the boundary.
pub fn linear_oracle(weights: &[f64], bias: f64, x: &[f64], sigma: f64) -> Result<(f64, f64)> {
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("linear oracle needs a nonzero weight vector".into()));
    }
    if weights.len() != x.len() {
        return Err(Error::Shape(format!("{} weights for a {}-dim input", weights.len(), x.len())));
    }
    let margin = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias;
    let distance = margin.abs() / norm;
    Ok((norm_cdf(distance / sigma), distance))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingParams {
    pub sigma: f64,
    #[serde(default = "default_n0")]
    pub n0: u64,
    #[serde(default = "default_n")]
    pub n: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub seed: u64,
}

pub const DEFAULT_N0: u64 = 100;
pub const DEFAULT_N: u64 = 10_000;
pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_BATCH: usize = 400;

fn default_n0() -> u64 {
    DEFAULT_N0
}
fn default_n() -> u64 {
    DEFAULT_N
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_batch() -> usize {
    DEFAULT_BATCH
}

impl SmoothingParams {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            n0: DEFAULT_N0,
            n: DEFAULT_N,
            alpha: DEFAULT_ALPHA,
            batch: DEFAULT_BATCH,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if self.n0 == 0 {
            return Err(Error::invalid("n0", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha", format!("must be in (0, 1), got {}", self.alpha)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertificationResult {
    pub id: u64,
    pub predicted: usize,
    pub p_lower: f64,
    /// `None` means abstain (`p_lower <= 0.5`).
    pub radius: Option<f64>,
    /// Estimation-stage tallies per class; sums to `n`.
    pub counts: Vec<u64>,
    pub params: SmoothingParams,
}

impl CertificationResult {
    pub fn abstained(&self) -> bool {
        self.radius.is_none()
    }

    /// Successes of the selected class in the estimation stage.
    pub fn k(&self) -> u64 {
        self.counts[self.predicted]
    }

    /// Correct, not abstained, and certified at radius `eps` or more.
    pub fn certified_correct(&self, label: usize, eps: f64) -> bool {
        self.predicted == label && self.radius.is_some_and(|r| r >= eps)
    }
}

/// Radius for a given lower bound: `σ · Φ⁻¹(p_lower)`, or abstain at or below 1/2.
pub fn radius_for(p_lower: f64, sigma: f64) -> Result<Option<f64>> {
    if p_lower <= 0.5 {
        return Ok(None);
    }
    if p_lower >= 1.0 {
        return Err(Error::Domain("p_lower must be below 1".into()));
    }
    Ok(Some(sigma * inv_norm_cdf(p_lower)?))
}

const STAGE_SELECT: u64 = 0;
const STAGE_ESTIMATE: u64 = 1;
const STAGE_PREDICT: u64 = 2;

/// Classify `total` noisy copies of `x` and tally the labels.
///
/// Draws are split into chunks of `batch`; chunk `j` takes its noise from the
/// stream `(seed, id, stage, j)`, so tallies depend on the batch size but not
/// on how chunks are scheduled across threads.
pub fn sample_counts<C: BaseClassifier + ?Sized>(
    classifier: &C,
    x: &[f32],
    sigma: f64,
    total: u64,
    batch: usize,
    seed: u64,
    id: u64,
    stage: u64,
) -> Result<Vec<u64>> {
    let d = classifier.input_len();
    if x.len() != d {
        return Err(Error::Shape(format!("input has {} values, classifier expects {d}", x.len())));
    }
    let k = classifier.num_classes();
    let chunks = total.div_ceil(batch as u64);
    let partial: Vec<Result<Vec<u64>>> = (0..chunks)
        .into_par_iter()
        .map(|j| {
            let count = (total - j * batch as u64).min(batch as u64) as usize;
            let mut rng = rng::stream(seed, &[rng::NS_CERTIFY, id, stage, j]);
            let mut buf = Vec::with_capacity(count * d);
            for _ in 0..count {
                for &v in x {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    buf.push((v as f64 + sigma * z) as f32);
                }
            }
            let mut tally = vec![0u64; k];
            for c in classifier.classify(&buf, count)? {
                tally[c] += 1;
            }
            Ok(tally)
        })
        .collect();
    let mut counts = vec![0u64; k];
    for t in partial {
        for (c, v) in counts.iter_mut().zip(t?) {
            *c += v;
        }
    }
    Ok(counts)
}

/// Certify the smoothed classifier at `x`.
pub fn certify<C: BaseClassifier + ?Sized>(
    classifier: &C,
    x: &[f32],
    id: u64,
    params: &SmoothingParams,
) -> Result<CertificationResult> {
    params.validate()?;
    let selection = sample_counts(classifier, x, params.sigma, params.n0, params.batch, params.seed, id, STAGE_SELECT)?;
    let predicted = top_class(&selection);
    let counts = sample_counts(classifier, x, params.sigma, params.n, params.batch, params.seed, id, STAGE_ESTIMATE)?;
    let p_lower = clopper_pearson_lower(counts[predicted], params.n, params.alpha)?;
    Ok(CertificationResult {
        id,
        predicted,
        p_lower,
        radius: radius_for(p_lower, params.sigma)?,
        counts,
        params: params.clone(),
    })
}

/// Smoothed prediction with abstention: the top class over `n` draws, kept
/// only if the two-sided binomial test of top vs runner-up counts rejects a
/// tie at level `alpha`.
pub fn predict<C: BaseClassifier + ?Sized>(
    classifier: &C,
    x: &[f32],
    id: u64,
    params: &SmoothingParams,
) -> Result<Option<usize>> {
    params.validate()?;
    let counts = sample_counts(classifier, x, params.sigma, params.n, params.batch, params.seed, id, STAGE_PREDICT)?;
    Ok(decide_prediction(&counts, params.alpha))
}

/// Decision rule of [`predict`] on a tally.
pub fn decide_prediction(counts: &[u64], alpha: f64) -> Option<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let top = order[0];
    let n_a = counts[top];
    let n_b = order.get(1).map_or(0, |&c| counts[c]);
    (stats::binomial_two_sided_p(n_a, n_a + n_b) <= alpha).then_some(top)
}

/// Certify many inputs in parallel; results keep input order.
pub fn certify_all<C: BaseClassifier + ?Sized>(
    classifier: &C,
    inputs: &[f32],
    ids: &[u64],
    params: &SmoothingParams,
) -> Result<Vec<CertificationResult>> {
    let d = classifier.input_len();
    if inputs.len() != d * ids.len() {
        return Err(Error::Shape(format!(
            "{} values for {} inputs of length {d}",
            inputs.len(),
            ids.len()
        )));
    }
    ids.par_iter()
        .enumerate()
        .map(|(i, &id)| certify(classifier, &inputs[i * d..(i + 1) * d], id, params))
        .collect()
}


fn top_class(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}
