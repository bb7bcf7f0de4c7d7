//! Oracle suites: the fast statistics routines against independent slow
//! references, and backprop against finite differences.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::certify::stats::{clopper_pearson_lower, inv_norm_cdf};
use crate::error::Result;
use crate::nn::{LayerSpec, Model, ModelSpec};
use crate::norms::NormKind;
use crate::oracle;
use crate::tensor::Tensor;

/// Outcome of one suite.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Probabilities spanning `[1e-10, 1 - 1e-10]`: log-spaced toward both
/// tails plus a uniform sweep of the middle.
pub fn quantile_probe_points(per_decade: usize) -> Vec<f64> {
    let mut ps = Vec::new();
    let decades = 10 * per_decade;
    for i in 0..=decades {
        let p = 10f64.powf(-10.0 + i as f64 / per_decade as f64);
        if p < 0.5 {
            ps.push(p);
            ps.push(1.0 - p);
        }
    }
    for i in 1..1000 {
        ps.push(i as f64 / 1000.0);
    }
    ps.push(1e-10);
    ps.push(1.0 - 1e-10);
    ps
}

/// Largest |Φ⁻¹(p) − oracle(p)| over `points`.
pub fn quantile_max_error(points: &[f64]) -> Result<(f64, f64)> {
    let mut worst = (0.0, 0.5);
    for &p in points {
        let err = (inv_norm_cdf(p)? - oracle::normal_quantile(p)).abs();
        if err > worst.0 {
            worst = (err, p);
        }
    }
    Ok(worst)
}

/// Wall time of `count` quantile evaluations over a deterministic spread of p.
pub fn quantile_timing(count: usize) -> Result<Duration> {
    let step = 1.0 / (count as f64 + 1.0);
    let start = Instant::now();
    let mut acc = 0.0;
    for i in 1..=count {
        acc += inv_norm_cdf(i as f64 * step)?;
    }
    let elapsed = start.elapsed();
    std::hint::black_box(acc);
    Ok(elapsed)
}

/// Result of the exhaustive Clopper–Pearson sweep.
#[derive(Clone, Debug, Default)]
pub struct BoundSweep {
    pub checked: usize,
    pub failures: usize,
    pub first_failure: Option<(usize, usize, f64)>,
    pub closed_form_max_error: f64,
}

/// For every `1 <= n <= n_max` and `0 <= k <= n`, check that the exact
/// binomial tail brackets `alpha` within `tol` of the returned bound:
/// `P[Bin(n, p - tol) >= k] <= alpha <= P[Bin(n, p + tol) >= k]`.
pub fn clopper_pearson_sweep(n_max: usize, alpha: f64, tol: f64) -> Result<BoundSweep> {
    let lf = oracle::ln_factorials(n_max);
    let mut out = BoundSweep::default();
    for n in 1..=n_max {
        for k in 0..=n {
            let p = clopper_pearson_lower(k as u64, n as u64, alpha)?;
            out.checked += 1;
            let ok = if k == 0 {
                p == 0.0
            } else {
                let below = oracle::binomial_upper_tail(k, n, (p - tol).max(0.0), &lf);
                let above = oracle::binomial_upper_tail(k, n, (p + tol).min(1.0), &lf);
                below <= alpha && alpha <= above
            };
            if !ok {
                out.failures += 1;
                out.first_failure.get_or_insert((k, n, p));
            }
        }
        let closed = alpha.powf(1.0 / n as f64);
        let err = (clopper_pearson_lower(n as u64, n as u64, alpha)? - closed).abs();
        out.closed_form_max_error = out.closed_form_max_error.max(err);
    }
    Ok(out)
}

fn gradient_models() -> Vec<(&'static str, ModelSpec)> {
    let conv = |norm| ModelSpec::conv_net([2, 4, 4], &[4], norm, Some(2), 3);
    let mut out = vec![(
        "dense+relu",
        ModelSpec {
            input_channels: 5,
            input_height: 1,
            input_width: 1,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 5, outputs: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 6, outputs: 3 },
            ],
        },
    )];
    out.push((
        "conv+relu",
        ModelSpec {
            input_channels: 2,
            input_height: 5,
            input_width: 3,
            layers: vec![
                LayerSpec::Conv2d { in_channels: 2, out_channels: 3 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 3, out_channels: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 30, outputs: 4 },
            ],
        },
    ));
    out.push(("batch norm", conv(NormKind::Batch)));
    out.push(("instance norm", conv(NormKind::Instance)));
    out.push(("group norm", conv(NormKind::Group)));
    out.push(("layer norm", conv(NormKind::Layer)));
    out
}

/// Finite-difference checks (h = 1e-3, f64) for every layer kind. Returns
/// one `(name, report)` per architecture.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, oracle::GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, (name, spec)) in gradient_models().into_iter().enumerate() {
        let [c, h, w] = spec.input_shape();
        let classes = spec.num_classes();
        let model = Model::<f64>::new(spec, seed.wrapping_add(i as u64))?;
        let n = 3;
        let x: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let x = Tensor::from_vec(&[n, c, h, w], x)?;
        out.push((name, oracle::gradient_check(&model, &x, &labels, 1e-3, 1e-3)?));
    }
    Ok(out)
}

/// All suites at the given effort. `full` runs every (k, n <= 1000) pair.
pub fn run(full: bool) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let points = quantile_probe_points(if full { 40 } else { 8 });
    let (err, at) = quantile_max_error(&points)?;
    checks.push(Check {
        name: "inverse normal CDF vs bisection oracle",
        passed: err < 1e-9,
        detail: format!("{} points, max |error| {err:.2e} at p={at:e} (tolerance 1e-9)", points.len()),
    });
    let count = if full { 1_000_000 } else { 100_000 };
    let t = quantile_timing(count)?;
    let budget = Duration::from_secs_f64(count as f64 / 1e6);
    checks.push(Check {
        name: "inverse normal CDF throughput",
        passed: t < budget,
        detail: format!("{count} evaluations in {:.3} s (budget {:.3} s)", t.as_secs_f64(), budget.as_secs_f64()),
    });

    let n_max = if full { 1000 } else { 150 };
    let sweep = clopper_pearson_sweep(n_max, 0.001, 1e-9)?;
    checks.push(Check {
        name: "Clopper-Pearson vs exact binomial tails",
        passed: sweep.failures == 0 && sweep.closed_form_max_error < 1e-12,
        detail: format!(
            "{} (k, n <= {n_max}) pairs, {} outside 1e-9; k = n closed form max error {:.1e}{}",
            sweep.checked,
            sweep.failures,
            sweep.closed_form_max_error,
            sweep.first_failure.map_or(String::new(), |(k, n, p)| format!("; first failure k={k} n={n} p={p}"))
        ),
    });

    for (name, g) in gradient_suite(17)? {
        checks.push(Check {
            name: "finite-difference gradients",
            passed: g.max_rel_error < 1e-4 && g.skipped_kinks * 10 < g.checked,
            detail: format!(
                "{name}: {} coordinates, max relative error {:.2e}, {} skipped at ReLU kinks",
                g.checked, g.max_rel_error, g.skipped_kinks
            ),
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for c in run(false).unwrap() {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn probe_points_cover_both_tails() {
        let ps = quantile_probe_points(4);
        assert!(ps.iter().all(|&p| (1e-10..=1.0 - 1e-10).contains(&p)));
        assert!(ps.contains(&1e-10));
        assert!(ps.iter().any(|&p| p > 0.999_999));
    }
}
