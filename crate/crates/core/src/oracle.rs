//! Independent reference computations used to validate the numerical core.
//!
//! Nothing here shares an evaluation path with the production code:
//! the normal CDF is integrated by Gauss–Legendre quadrature instead of an
//! erfc series/continued fraction, binomial tails are summed term by term in
//! log space instead of through the incomplete beta, and gradients come from
//! central finite differences with a separately written loss.

use crate::error::Result;
use crate::nn::{LayerCache, Mode, Model};
use crate::tensor::Tensor;

const GL_POINTS: usize = 16;
const PANELS: usize = 48;

/// Gauss–Legendre nodes and weights on [-1, 1] via Newton on P_n.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Upper normal tail Q(a) = P[Z > a] for a >= 0, as
/// φ(a) · ∫₀^∞ exp(-a·s - s²/2) ds by composite Gauss–Legendre.
pub fn normal_tail(a: f64) -> f64 {
    assert!(a >= 0.0);
    let (nodes, weights) = gauss_legendre(GL_POINTS);
    let upper = -a + (a * a + 160.0).sqrt();
    let width = upper / PANELS as f64;
    let mut integral = 0.0;
    for panel in 0..PANELS {
        let mid = (panel as f64 + 0.5) * width;
        for (x, w) in nodes.iter().zip(&weights) {
            let s = mid + 0.5 * width * x;
            integral += w * (-a * s - 0.5 * s * s).exp();
        }
    }
    integral *= 0.5 * width;
    (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt() * integral
}

/// Standard normal CDF through [`normal_tail`].
pub fn normal_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        normal_tail(-x)
    } else {
        1.0 - normal_tail(x)
    }
}

/// Normal quantile by bisection on the quadrature tail. Upper-half
/// probabilities are solved on the tail 1 - p (exact for p >= 1/2).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    if p == 0.5 {
        return 0.0;
    }
    let (target, sign) = if p < 0.5 { (p, -1.0) } else { (1.0 - p, 1.0) };
    // find a > 0 with Q(a) = target; Q is decreasing
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if normal_tail(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    sign * 0.5 * (lo + hi)
}

/// ln(k!) for k in 0..=n by cumulative summation.
pub fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// P[Bin(n, p) >= k] as a log-sum-exp over the pmf terms j = k..=n.
pub fn binomial_upper_tail(k: usize, n: usize, p: f64, ln_fact: &[f64]) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let terms: Vec<f64> = (k..=n)
        .map(|j| ln_fact[n] - ln_fact[j] - ln_fact[n - j] + j as f64 * lp + (n - j) as f64 * lq)
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + s.ln()).exp()
}

/// Clopper–Pearson lower bound by bisection on the log-space tail:
/// the p with P[Bin(n, p) >= k] = alpha.
pub fn clopper_pearson_lower(k: usize, n: usize, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let lf = ln_factorials(n);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binomial_upper_tail(k, n, mid, &lf) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Mean cross-entropy written without the production loss helper.
fn reference_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let logits = model.forward(x, Mode::Train)?;
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because the ±h probes flip a ReLU.
    pub skipped_kinks: usize,
}

fn relu_masks(model: &Model<f64>, x: &Tensor<f64>) -> Result<Vec<bool>> {
    let trace = model.forward_trace(x, Mode::Train, 0)?;
    let mut out = Vec::new();
    for c in &trace.caches {
        if let LayerCache::Relu { mask } = c {
            out.extend_from_slice(mask);
        }
    }
    Ok(out)
}

/// Relative gradient error: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare backprop gradients of every parameter against central finite
/// differences with step `h` (train-mode normalization statistics).
/// Coordinates whose probes land on different sides of a ReLU kink are not
/// differentiable at that scale and are counted in `skipped_kinks` instead.
pub fn gradient_check(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], h: f64, floor: f64) -> Result<GradCheck> {
    let mut analytic = model.clone();
    analytic.zero_grad();
    analytic.loss_backward(x, labels, Mode::Train, 0)?;
    let names: Vec<String> = analytic.params().iter().map(|p| p.name.clone()).collect();
    let grads: Vec<Vec<f64>> = analytic
        .params()
        .iter()
        .map(|p| p.tensor.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();

    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    for (pi, grad) in grads.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.params_mut()[pi].data()[i];
            probe.params_mut()[pi].data_mut()[i] = orig + h;
            let up = reference_loss(&probe, x, labels)?;
            let mask_up = relu_masks(&probe, x)?;
            probe.params_mut()[pi].data_mut()[i] = orig - h;
            let down = reference_loss(&probe, x, labels)?;
            let mask_down = relu_masks(&probe, x)?;
            probe.params_mut()[pi].data_mut()[i] = orig;
            if mask_up != mask_down {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}] analytic {a:.6e} numeric {numeric:.6e}", names[pi]);
            }
        }
    }
    Ok(report)
}
