//! Small shared numeric helpers: moments, quantiles, log-densities.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.8378770664093453;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with n-1 denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Percentile of a sample by linear interpolation between order statistics
/// (the type-7 convention): h = (n-1)p, value = x[floor h] + frac(h) * (x[floor h + 1] - x[floor h]).
///
/// `p` is a fraction in [0, 1]; the input need not be sorted.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(&sorted, p)
}

/// Type-7 percentile of an already-sorted slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// log C(n, r) via log-gamma.
pub fn ln_choose(n: u64, r: u64) -> f64 {
    debug_assert!(r <= n);
    ln_gamma(n as f64 + 1.0) - ln_gamma(r as f64 + 1.0) - ln_gamma((n - r) as f64 + 1.0)
}

/// Binomial log-pmf including the combinatorial constant. Returns -inf for
/// p outside (0,1) unless the corresponding count is 0.
pub fn binomial_logpmf(r: f64, n: f64, p: f64, ln_choose_term: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NEG_INFINITY;
    }
    let t = n - r;
    let mut ll = ln_choose_term;
    if r > 0.0 {
        if p == 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += r * p.ln();
    }
    if t > 0.0 {
        if p == 1.0 {
            return f64::NEG_INFINITY;
        }
        ll += t * (1.0 - p).ln();
    }
    ll
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// N(x; mu, var) log-density.
pub fn normal_logpdf(x: f64, mu: f64, var: f64) -> f64 {
    let d = x - mu;
    -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var)
}

/// Half-normal(scale) log-density on [0, inf).
pub fn half_normal_logpdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 - 0.5 * (LN_2PI + 2.0 * scale.ln()) - x * x / (2.0 * scale * scale)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean, sd, and type-7 quantiles (2.5%, 50%, 97.5%) of a sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub median: f64,
    pub q97_5: f64,
}

pub fn summary_stats(xs: &[f64]) -> SummaryStats {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    SummaryStats {
        mean: mean(xs),
        sd: sd(xs),
        q2_5: percentile_sorted(&sorted, 0.025),
        median: percentile_sorted(&sorted, 0.5),
        q97_5: percentile_sorted(&sorted, 0.975),
    }
}
