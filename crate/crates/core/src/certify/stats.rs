//! Special functions behind the certificate: the normal quantile and exact
//! binomial confidence bounds.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Complementary error function, accurate to ~1e-15 relative on the range
/// the quantile refinement visits.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        // Maclaurin series of erf; terms alternate with ratio -x²(2n-1)/(n(2n+1)).
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        1.0 - 2.0 * FRAC_1_SQRT_PI * sum
    } else {
        // Laplace continued fraction, modified Lentz:
        // erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
        let tiny = 1e-300;
        let mut f = x;
        let mut c = x;
        let mut d = 0.0;
        for i in 1..500 {
            let a = i as f64 * 0.5;
            d = x + a * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = x + a / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() * FRAC_1_SQRT_PI / f
    }
}

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Rational approximation of the normal quantile (relative error ~1e-9),
/// used as the starting point for Newton refinement.
fn quantile_seed(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Inverse of the standard normal CDF on the open interval (0, 1).
///
/// Lower-half probabilities are solved directly; upper-half ones through
/// `-Φ⁻¹(1 - p)` (exact in floating point for p ≥ 1/2), which makes the
/// function odd-symmetric.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let mut x = quantile_seed(p);
    for _ in 0..2 {
        let err = norm_cdf(x) - p;
        x -= err / norm_pdf(x);
    }
    x
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Quantile of Beta(a, b): the x with I_x(a, b) = q.
///
/// Newton's method on ln I_x against ln x (nearly linear in the lower tail),
/// kept inside a shrinking bracket and falling back to bisection whenever a
/// step leaves it.
pub fn beta_quantile(a: f64, b: f64, q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let ln_q = q.ln();
    let ln_b = ln_beta(a, b);
    let mut x = (a / (a + b)).clamp(1e-300, 1.0 - 1e-16);
    for _ in 0..200 {
        let i = beta_inc(a, b, x);
        if i < q {
            lo = x;
        } else {
            hi = x;
        }
        if i <= 0.0 || hi - lo <= 4.0 * f64::EPSILON * x {
            break;
        }
        // d ln I / d ln x = x · pdf(x) / I
        let ln_pdf = (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_b;
        let slope = (x.ln() + ln_pdf - i.ln()).exp();
        let next = x * ((ln_q - i.ln()) / slope).exp();
        let next = if next.is_finite() && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 1e-15 * x {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// One-sided Clopper–Pearson lower confidence bound on a binomial success
/// probability after `k` successes in `n` trials: the `alpha` quantile of
/// Beta(k, n - k + 1), and 0 when k = 0.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(Error::Domain(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(alpha.powf(1.0 / n as f64));
    }
    Ok(beta_quantile(k as f64, (n - k + 1) as f64, alpha))
}

/// P[Bin(n, p) >= k].
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    beta_inc(k as f64, (n - k + 1) as f64, p)
}

/// Exact two-sided binomial test p-value against a fair coin.
pub fn binomial_two_sided_p(successes: u64, trials: u64) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let hi = successes.max(trials - successes);
    if 2 * hi == trials {
        return 1.0;
    }
    (2.0 * binomial_upper_tail(hi, trials, 0.5)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_median_and_domain() {
        assert_eq!(inv_norm_cdf(0.5).unwrap(), 0.0);
        assert!(inv_norm_cdf(0.0).is_err());
        assert!(inv_norm_cdf(1.0).is_err());
        assert!(inv_norm_cdf(f64::NAN).is_err());
    }

    #[test]
    fn quantile_reference_points() {
        // Reference values from an independent 50-digit evaluation.
        assert!((inv_norm_cdf(0.84134).unwrap() - 0.999_980_385_966_078_9).abs() < 1e-9);
        assert!((inv_norm_cdf(0.001).unwrap() + 3.090_232_306_167_813_5).abs() < 1e-9);
        assert!((inv_norm_cdf(0.999).unwrap() - 3.090_232_306_167_813_5).abs() < 1e-9);
    }

    #[test]
    fn quantile_is_odd() {
        for &p in &[1e-10, 1e-6, 0.01, 0.2, 0.37, 0.4999] {
            // pair exactly representable complements
            let q = 1.0 - p;
            let a = inv_norm_cdf(1.0 - q).unwrap();
            let b = inv_norm_cdf(q).unwrap();
            assert!((a + b).abs() < 1e-12, "{p}: {a} {b}");
        }
    }

    #[test]
    fn erfc_known_values() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-16);
        assert!((erfc(1.0) - 0.157_299_207_050_285_13).abs() < 1e-16);
        assert!((erfc(3.0) / 2.209_049_699_858_544e-5 - 1.0).abs() < 1e-13);
        assert!((erfc(-1.0) - 1.842_700_792_949_714_9).abs() < 1e-15);
    }

    #[test]
    fn ln_gamma_factorials() {
        let mut lf = 0.0f64;
        for n in 1..60u32 {
            lf += (n as f64).ln();
            assert!((ln_gamma(n as f64 + 1.0) - lf).abs() < 1e-11 * lf.max(1.0), "{n}");
        }
        assert!((ln_gamma(0.5) - 0.5 * PI.ln()).abs() < 1e-14);
    }

    #[test]
    fn clopper_pearson_closed_forms() {
        assert_eq!(clopper_pearson_lower(0, 10, 0.001).unwrap(), 0.0);
        let v = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert!((v - 0.001f64.powf(0.01)).abs() < 1e-15);
        // general path agrees with the closed form at k = n
        assert!((beta_quantile(100.0, 1.0, 0.001) - v).abs() < 1e-12);
        // k = 1: 1 - (1 - p)^n = alpha
        let p1 = clopper_pearson_lower(1, 50, 0.05).unwrap();
        assert!((p1 - (1.0 - 0.95f64.powf(1.0 / 50.0))).abs() < 1e-12);
        assert!(clopper_pearson_lower(11, 10, 0.05).is_err());
        assert!(clopper_pearson_lower(1, 10, 1.0).is_err());
    }

    #[test]
    fn two_sided_test() {
        assert!(binomial_two_sided_p(100, 100) < 1e-29);
        assert!(binomial_two_sided_p(51, 100) > 0.5);
        assert_eq!(binomial_two_sided_p(5, 10), 1.0);
        // 2 * P[Bin(10, 1/2) >= 9] = 2 * 11 / 1024
        assert!((binomial_two_sided_p(9, 10) - 22.0 / 1024.0).abs() < 1e-15);
        assert!((binomial_two_sided_p(1, 10) - 22.0 / 1024.0).abs() < 1e-15);
    }
}
