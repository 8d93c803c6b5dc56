//! Convergence diagnostics for posterior draws: Gelman-Rubin √R̂, Geweke
//! z-scores, effective sample size, and plot-ready trace/histogram tables.

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;
use crate::stats::{mean, sample_variance};
use serde::{Deserialize, Serialize};

pub const DEFAULT_RHAT_THRESHOLD: f64 = 1.05;
pub const DEFAULT_GEWEKE_THRESHOLD: f64 = 3.0;

/// Potential-scale-reduction statistic √R̂ over 2+ chains of one parameter.
///
/// √R̂ = √(((n−1)/n·W + B/n) / W) with W the mean within-chain variance and
/// B = n·var(chain means). All-identical draws return 1 by convention; zero
/// within-chain variance with distinct chain means signals divergence and
/// returns +∞.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Diagnostics(format!(
            "gelman_rubin needs >= 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap();
    if n < 10 {
        return Err(Error::Diagnostics(format!(
            "gelman_rubin needs >= 10 draws per chain, got {n}"
        )));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_variance(&c[..n])).collect();
    let w = mean(&vars);
    let b = n as f64 * sample_variance(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let n = n as f64;
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Geweke convergence z-score comparing the first and last segments of one
/// chain, with the spectral density at frequency zero estimated by
/// non-overlapping batch means (⌊√n⌋ batches per segment).
pub fn geweke(chain: &[f64], first_frac: f64, last_frac: f64) -> Result<f64> {
    let n = chain.len();
    if n < 100 {
        return Err(Error::Diagnostics(format!(
            "geweke needs a chain of length >= 100, got {n}"
        )));
    }
    if !(first_frac > 0.0 && last_frac > 0.0 && first_frac + last_frac <= 1.0) {
        return Err(Error::Diagnostics(
            "geweke fractions must be positive and sum to at most 1".into(),
        ));
    }
    let n_first = (n as f64 * first_frac).floor() as usize;
    let n_last = (n as f64 * last_frac).floor() as usize;
    let first = &chain[..n_first];
    let last = &chain[n - n_last..];
    let (m_first, sv_first, used_first) = segment_mean_spectral(first);
    let (m_last, sv_last, used_last) = segment_mean_spectral(last);
    let denom = (sv_first / used_first as f64 + sv_last / used_last as f64).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Diagnostics(
            "geweke z undefined: zero spectral variance".into(),
        ));
    }
    Ok((m_first - m_last) / denom)
}

/// Segment mean and batch-means estimate of the spectral density at zero;
/// returns (mean, spectral variance, points used).
fn segment_mean_spectral(seg: &[f64]) -> (f64, f64, usize) {
    let n = seg.len();
    let n_batches = (n as f64).sqrt().floor() as usize;
    let batch = n / n_batches;
    let used = n_batches * batch;
    let batch_means: Vec<f64> = (0..n_batches)
        .map(|b| mean(&seg[b * batch..(b + 1) * batch]))
        .collect();
    let sv = batch as f64 * sample_variance(&batch_means);
    (mean(&seg[..used]), sv, used)
}

/// Effective sample size n / (1 + 2·Σρ̂_k), with the autocorrelation sum
/// truncated by Geyer's initial-positive-sequence rule (stop at the first
/// consecutive-lag pair with non-positive sum). A constant chain has ESS = n
/// by convention.
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 10 {
        return n as f64;
    }
    if chain.iter().all(|&x| x == chain[0]) {
        return n as f64;
    }
    let m = mean(chain);
    let c0: f64 = chain.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return n as f64;
    }
    let auto = |k: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..n - k {
            s += (chain[t] - m) * (chain[t + k] - m);
        }
        s / n as f64 / c0
    };
    let mut sum = 0.0;
    let mut k = 1;
    while k + 1 < n {
        let pair = auto(k) + auto(k + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 2;
    }
    n as f64 / (1.0 + 2.0 * sum)
}

/// One long-format trace row.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub chain: usize,
    pub iteration: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceExport {
    pub parameter: String,
    pub rows: Vec<TraceRow>,
    pub histogram: Vec<HistogramBin>,
}

/// Long-format trace rows plus fixed-bin histogram counts for one parameter,
/// consumable by any plotting tool. A constant chain yields a single
/// occupied bin.
pub fn export_trace_histogram(
    draws: &PosteriorDraws,
    parameter: &str,
    n_bins: usize,
) -> Result<TraceExport> {
    let pidx = draws
        .param_index(parameter)
        .ok_or_else(|| Error::Diagnostics(format!("unknown parameter {parameter:?}")))?;
    let mut rows = Vec::with_capacity(draws.n_chains() * draws.kept_per_chain());
    for chain in 0..draws.n_chains() {
        for (it, v) in draws.series(chain, pidx).into_iter().enumerate() {
            rows.push(TraceRow {
                chain: chain + 1,
                iteration: draws.config.burn_in + it * draws.config.thin,
                value: v,
            });
        }
    }
    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let n_bins = n_bins.max(1);
    let width = (hi - lo) / n_bins as f64;
    let mut histogram: Vec<HistogramBin> = (0..n_bins)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in &values {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        histogram[b].count += 1;
    }
    Ok(TraceExport {
        parameter: parameter.to_string(),
        rows,
        histogram,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub parameter: String,
    pub gelman_rubin: f64,
    pub geweke_z: Vec<f64>,
    pub ess: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rhat_threshold: f64,
    pub geweke_threshold: f64,
    pub total_kept: usize,
    pub parameters: Vec<ParamDiagnostics>,
    pub all_pass: bool,
}

impl DiagnosticsReport {
    pub fn max_rhat(&self) -> f64 {
        self.parameters
            .iter()
            .map(|p| p.gelman_rubin)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-parameter convergence report. √R̂ needs at least two chains; with a
/// single chain it is reported as 1 and only Geweke/ESS are informative.
/// ESS is the sum of per-chain estimates, clamped at the total kept draws.
pub fn diagnose(
    draws: &PosteriorDraws,
    rhat_threshold: f64,
    geweke_threshold: f64,
) -> Result<DiagnosticsReport> {
    let total_kept = draws.n_chains() * draws.kept_per_chain();
    let mut parameters = Vec::with_capacity(draws.names().len());
    for (pidx, name) in draws.names().iter().enumerate() {
        let series: Vec<Vec<f64>> = (0..draws.n_chains())
            .map(|c| draws.series(c, pidx))
            .collect();
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        let rhat = if draws.n_chains() >= 2 {
            gelman_rubin(&refs)?
        } else {
            1.0
        };
        let geweke_z: Vec<f64> = series
            .iter()
            .map(|s| geweke(s, 0.1, 0.5).unwrap_or(f64::NAN))
            .collect();
        let ess = series
            .iter()
            .map(|s| effective_sample_size(s))
            .sum::<f64>()
            .min(total_kept as f64);
        let pass = rhat < rhat_threshold
            && geweke_z
                .iter()
                .all(|z| z.is_nan() || z.abs() < geweke_threshold);
        parameters.push(ParamDiagnostics {
            parameter: name.clone(),
            gelman_rubin: rhat,
            geweke_z,
            ess,
            pass,
        });
    }
    let all_pass = parameters.iter().all(|p| p.pass);
    Ok(DiagnosticsReport {
        rhat_threshold,
        geweke_threshold,
        total_kept,
        parameters,
        all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chain(n: usize, mu: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + sd * z
            })
            .collect()
    }

    #[test]
    fn rhat_identical_chains_below_one() {
        let c = normal_chain(500, 0.0, 1.0, 1);
        let r = gelman_rubin(&[&c, &c]).unwrap();
        let n = 500.0f64;
        assert!((r - ((n - 1.0) / n).sqrt()).abs() < 1e-12);
        assert!(r < 1.0);
    }

    #[test]
    fn rhat_same_distribution_near_one() {
        // Monte Carlo oracle: independent draws from one distribution
        let a = normal_chain(10_000, 0.0, 1.0, 2);
        let b = normal_chain(10_000, 0.0, 1.0, 3);
        let c = normal_chain(10_000, 0.0, 1.0, 4);
        let r = gelman_rubin(&[&a, &b, &c]).unwrap();
        assert!((r - 1.0).abs() < 0.02, "rhat {r}");
    }

    #[test]
    fn rhat_detects_mean_shift() {
        let a = normal_chain(1000, 0.0, 1.0, 5);
        let b = normal_chain(1000, 10.0, 1.0, 6);
        let r = gelman_rubin(&[&a, &b]).unwrap();
        assert!(r > 1.1, "rhat {r}");
    }

    #[test]
    fn rhat_degenerate_conventions() {
        let flat = vec![2.0; 100];
        assert_eq!(gelman_rubin(&[&flat, &flat]).unwrap(), 1.0);
        let other = vec![3.0; 100];
        assert_eq!(gelman_rubin(&[&flat, &other]).unwrap(), f64::INFINITY);
        assert!(gelman_rubin(&[&flat]).is_err());
    }

    #[test]
    fn rhat_affine_invariance() {
        let a = normal_chain(800, 0.3, 1.2, 7);
        let b = normal_chain(800, 0.1, 1.1, 8);
        let r1 = gelman_rubin(&[&a, &b]).unwrap();
        let ta: Vec<f64> = a.iter().map(|x| -3.5 * x + 11.0).collect();
        let tb: Vec<f64> = b.iter().map(|x| -3.5 * x + 11.0).collect();
        let r2 = gelman_rubin(&[&ta, &tb]).unwrap();
        assert!((r1 - r2).abs() < 1e-10);
    }

    #[test]
    fn geweke_iid_within_three() {
        // Monte Carlo oracle: >= 99% of iid chains give |z| < 3
        let mut bad = 0;
        for seed in 0..1000 {
            let c = normal_chain(10_000, 0.0, 1.0, 100 + seed);
            if geweke(&c, 0.1, 0.5).unwrap().abs() >= 3.0 {
                bad += 1;
            }
        }
        assert!(bad <= 10, "{bad}/1000 iid chains outside |z| < 3");
    }

    #[test]
    fn geweke_detects_drift() {
        let n = 10_000;
        let mut flagged = 0;
        for seed in 0..20 {
            let mut c = normal_chain(n, 0.0, 1.0, 999 + seed);
            for (i, v) in c.iter_mut().enumerate() {
                *v += 5.0 * i as f64 / n as f64; // total drift of 5 sd
            }
            if geweke(&c, 0.1, 0.5).unwrap().abs() > 3.0 {
                flagged += 1;
            }
        }
        assert!(flagged >= 19, "drift flagged in only {flagged}/20 chains");
    }

    #[test]
    fn geweke_affine_invariance() {
        let c = normal_chain(5000, 0.0, 1.0, 21);
        let z1 = geweke(&c, 0.1, 0.5).unwrap();
        let t: Vec<f64> = c.iter().map(|x| 2.0 * x - 7.0).collect();
        let z2 = geweke(&t, 0.1, 0.5).unwrap();
        assert!((z1.abs() - z2.abs()).abs() < 1e-10);
    }

    #[test]
    fn geweke_errors() {
        let constant = vec![1.0; 1000];
        assert!(geweke(&constant, 0.1, 0.5).is_err());
        let short = vec![1.0; 50];
        assert!(geweke(&short, 0.1, 0.5).is_err());
    }

    #[test]
    fn ess_iid_near_n() {
        let c = normal_chain(10_000, 0.0, 1.0, 30);
        let ess = effective_sample_size(&c);
        assert!(
            (ess - 10_000.0).abs() < 0.15 * 10_000.0,
            "iid ESS {ess} not within 15% of n"
        );
    }

    #[test]
    fn ess_ar1_matches_analytic() {
        // AR(1) with coefficient 0.9: ESS/n = (1-phi)/(1+phi) = 1/19
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let n = 40_000;
        let phi: f64 = 0.9;
        let innov_sd = (1.0 - phi * phi).sqrt();
        let mut c = Vec::with_capacity(n);
        let mut x = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = phi * x + innov_sd * e;
            c.push(x);
        }
        let ess = effective_sample_size(&c);
        let analytic = n as f64 * (1.0 - phi) / (1.0 + phi);
        assert!(
            (ess - analytic).abs() < 0.25 * analytic,
            "AR(1) ESS {ess} vs analytic {analytic}"
        );
    }

    #[test]
    fn ess_bounds_and_conventions() {
        let constant = vec![4.2; 500];
        assert_eq!(effective_sample_size(&constant), 500.0);
        for seed in 40..60 {
            let c = normal_chain(2000, 0.0, 1.0, seed);
            let ess = effective_sample_size(&c);
            assert!(ess > 0.0 && ess <= 2000.0 * 1.05, "ess {ess}");
        }
    }

    #[test]
    fn diagnostics_deterministic() {
        let a = normal_chain(1000, 0.0, 1.0, 70);
        let b = normal_chain(1000, 0.0, 1.0, 71);
        let r1 = gelman_rubin(&[&a, &b]).unwrap();
        let r2 = gelman_rubin(&[&a, &b]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(
            effective_sample_size(&a),
            effective_sample_size(&a)
        );
    }

    #[test]
    fn trace_histogram_export() {
        use crate::data::{Arm, Dataset, EffectMeasure, StudyRecord};
        use crate::model::{ModelSpec, Transform};
        use crate::sampler::{run, SamplerConfig};
        let ds = Dataset::from_studies(
            vec![StudyRecord::new(
                "s1",
                None,
                vec![Arm::new(0.0, 10, 100).unwrap(), Arm::new(5.0, 20, 100).unwrap()],
            )
            .unwrap()],
            EffectMeasure::LogOr,
        )
        .unwrap();
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        let draws = run(&spec, &ds, &SamplerConfig::new(2, 300, 200, 3)).unwrap();
        let export = export_trace_histogram(&draws, "B1", 20).unwrap();
        assert_eq!(export.rows.len(), 200);
        let total: usize = export.histogram.iter().map(|b| b.count).sum();
        assert_eq!(total, 200);
        assert!(export_trace_histogram(&draws, "nope", 20).is_err());

        // constant series lands in a single bin
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let _ = rng.gen::<f64>();
        let flat = super::super::sampler::PosteriorDraws::read_csv(
            "chain,iteration,parameter,value\n1,0,x,2\n1,1,x,2\n1,2,x,2\n".as_bytes(),
        )
        .unwrap();
        let export = export_trace_histogram(&flat, "x", 10).unwrap();
        let occupied: Vec<_> = export.histogram.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].count, 3);
    }
}
