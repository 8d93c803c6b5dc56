//! Frequentist one-stage baseline: maximum-likelihood estimation of the
//! linear mixed dose-response model
//!
//!   Y_i ~ MVN(Z_i B, Z_i Ψ Z_iᵀ + S_i),
//!
//! where Z_i stacks the transform contrasts of study i, Ψ has diagonal
//! (τ1², τ2²) and off-diagonal ρ τ1 τ2, and S_i is the fixed within-study
//! covariance. B is profiled out by generalized least squares at each
//! variance-parameter evaluation; the variance parameters are maximized by a
//! Nelder-Mead simplex on (log τ1, log τ2, atanh ρ).

use crate::data::EffectTable;
use crate::error::{Error, Result};
use crate::splines::Transform;
use crate::stats::{normal_quantile, LN_2PI};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStageOptions {
    /// Fix (τ1, τ2) instead of estimating them (τ2 ignored when p = 1).
    pub fix_tau: Option<(f64, f64)>,
    /// Fix ρ instead of estimating it.
    pub fix_rho: Option<f64>,
    /// Drop studies with fewer contrasts than coefficients instead of letting
    /// the mixed model shrink them.
    pub drop_underidentified: bool,
    pub max_iterations: usize,
}

impl Default for OneStageOptions {
    fn default() -> Self {
        OneStageOptions {
            fix_tau: None,
            fix_rho: None,
            drop_underidentified: false,
            max_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneStageFit {
    pub b_hat: Vec<f64>,
    pub se: Vec<f64>,
    /// Heterogeneity sds (τ1, τ2), one per coefficient.
    pub tau_hat: Vec<f64>,
    /// Correlation between coefficient random effects; absent when p = 1.
    pub rho_hat: Option<f64>,
    /// Estimate pinned to the boundary |ρ| = 1.
    pub rho_boundary: bool,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_studies: usize,
    pub n_dropped: usize,
}

struct StudyDesign {
    y: DVector<f64>,
    z: DMatrix<f64>,
    s: DMatrix<f64>,
}

fn build_designs(
    tables: &[EffectTable],
    transform: &Transform,
    drop_underidentified: bool,
) -> Result<(Vec<StudyDesign>, usize)> {
    let p = transform.p();
    let mut designs = Vec::with_capacity(tables.len());
    let mut dropped = 0;
    for t in tables {
        let m = t.effects().len();
        if drop_underidentified && m < p {
            dropped += 1;
            continue;
        }
        let mut z = DMatrix::zeros(m, p);
        for (j, &x) in t.doses().iter().enumerate() {
            for (k, v) in transform.contrast(x, t.reference_dose()).into_iter().enumerate() {
                z[(j, k)] = v;
            }
        }
        designs.push(StudyDesign {
            y: t.effects().clone(),
            z,
            s: t.covariance().clone(),
        });
    }
    if designs.is_empty() {
        return Err(Error::OneStage("no usable studies".into()));
    }
    Ok((designs, dropped))
}

fn psi_matrix(p: usize, tau1: f64, tau2: f64, rho: f64) -> DMatrix<f64> {
    if p == 1 {
        DMatrix::from_element(1, 1, tau1 * tau1)
    } else {
        let mut psi = DMatrix::zeros(2, 2);
        psi[(0, 0)] = tau1 * tau1;
        psi[(1, 1)] = tau2 * tau2;
        psi[(0, 1)] = rho * tau1 * tau2;
        psi[(1, 0)] = psi[(0, 1)];
        psi
    }
}

struct GlsResult {
    b: DVector<f64>,
    cov_b: DMatrix<f64>,
    loglik: f64,
}

/// Profile likelihood at a fixed Ψ: GLS for B, then the marginal Gaussian
/// log-likelihood. Returns None when a marginal covariance fails to factor.
fn gls_at_psi(designs: &[StudyDesign], psi: &DMatrix<f64>) -> Option<GlsResult> {
    let p = psi.nrows();
    let mut a = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut chols = Vec::with_capacity(designs.len());
    for d in designs {
        let v = &d.z * psi * d.z.transpose() + &d.s;
        let chol = Cholesky::new(v)?;
        let vinv_z = chol.solve(&d.z);
        let vinv_y = chol.solve(&d.y);
        a += d.z.transpose() * &vinv_z;
        rhs += d.z.transpose() * vinv_y;
        chols.push(chol);
    }
    let a_chol = Cholesky::new(a.clone())?;
    let b = a_chol.solve(&rhs);
    let cov_b = a_chol.inverse();
    let mut loglik = 0.0;
    for (d, chol) in designs.iter().zip(&chols) {
        let r = &d.y - &d.z * &b;
        let q = r.dot(&chol.solve(&r));
        let ln_det: f64 = (0..d.y.len()).map(|j| chol.l_dirty()[(j, j)].ln()).sum::<f64>() * 2.0;
        loglik += -0.5 * (d.y.len() as f64 * LN_2PI + ln_det + q);
    }
    Some(GlsResult { b, cov_b, loglik })
}

/// Free (non-fixed) variance parameters in transformed coordinates.
#[derive(Clone, Copy)]
struct ThetaMap {
    estimate_tau: bool,
    estimate_rho: bool,
    fixed_tau: (f64, f64),
    fixed_rho: f64,
    p: usize,
}

impl ThetaMap {
    fn dim(&self) -> usize {
        let mut d = 0;
        if self.estimate_tau {
            d += if self.p == 2 { 2 } else { 1 };
        }
        if self.estimate_rho {
            d += 1;
        }
        d
    }

    fn decode(&self, theta: &[f64]) -> (f64, f64, f64) {
        let mut idx = 0;
        let (tau1, tau2) = if self.estimate_tau {
            let t1 = theta[idx].clamp(-30.0, 5.0).exp();
            idx += 1;
            if self.p == 2 {
                let t2 = theta[idx].clamp(-30.0, 5.0).exp();
                idx += 1;
                (t1, t2)
            } else {
                (t1, 0.0)
            }
        } else {
            self.fixed_tau
        };
        let rho = if self.estimate_rho {
            theta[idx].clamp(-12.0, 12.0).tanh()
        } else {
            self.fixed_rho
        };
        (tau1, tau2, rho)
    }
}

/// Fits the one-stage model by ML. The returned `loglik` is the profile
/// marginal log-likelihood at the optimum.
pub fn fit_onestage(
    tables: &[EffectTable],
    transform: &Transform,
    options: &OneStageOptions,
) -> Result<OneStageFit> {
    let p = transform.p();
    let (designs, dropped) = build_designs(tables, transform, options.drop_underidentified)?;
    let total_contrasts: usize = designs.iter().map(|d| d.y.len()).sum();
    if total_contrasts < p {
        return Err(Error::OneStage(format!(
            "rank error: {total_contrasts} contrasts cannot identify {p} coefficients"
        )));
    }

    let map = ThetaMap {
        estimate_tau: options.fix_tau.is_none(),
        estimate_rho: p == 2
            && options.fix_rho.is_none()
            && options.fix_tau.is_none_or(|t| t.0 > 0.0 && t.1 > 0.0),
        fixed_tau: options.fix_tau.unwrap_or((0.0, 0.0)),
        fixed_rho: options.fix_rho.unwrap_or(0.0),
        p,
    };

    let objective = |theta: &[f64]| -> f64 {
        let (t1, t2, rho) = map.decode(theta);
        match gls_at_psi(&designs, &psi_matrix(p, t1, t2, rho)) {
            Some(g) => -g.loglik,
            None => f64::INFINITY,
        }
    };

    let (theta_opt, converged, iterations) = if map.dim() == 0 {
        (Vec::new(), true, 0)
    } else {
        // deterministic multi-start over heterogeneity magnitudes
        let starts: Vec<Vec<f64>> = match (map.estimate_tau, map.estimate_rho, p) {
            (true, true, _) => vec![
                vec![(0.05f64).ln(), (0.05f64).ln(), 0.0],
                vec![(0.005f64).ln(), (0.005f64).ln(), 0.0],
                vec![(0.2f64).ln(), (0.2f64).ln(), 0.5],
            ],
            (true, false, 2) => vec![
                vec![(0.05f64).ln(), (0.05f64).ln()],
                vec![(0.005f64).ln(), (0.005f64).ln()],
            ],
            (true, false, _) => vec![vec![(0.05f64).ln()], vec![(0.005f64).ln()]],
            (false, true, _) => vec![vec![0.0], vec![0.7]],
            (false, false, _) => unreachable!(),
        };
        let mut best: Option<(Vec<f64>, f64, bool, usize)> = None;
        for start in starts {
            let (theta, fval, conv, iters) =
                nelder_mead(&objective, &start, options.max_iterations);
            if best.as_ref().is_none_or(|b| fval < b.1) {
                best = Some((theta, fval, conv, iters));
            }
        }
        let (theta, _, conv, iters) = best.unwrap();
        (theta, conv, iters)
    };

    let (tau1, tau2, rho) = map.decode(&theta_opt);
    let gls = gls_at_psi(&designs, &psi_matrix(p, tau1, tau2, rho))
        .ok_or_else(|| Error::OneStage("marginal covariance not positive definite".into()))?;

    let rho_boundary = p == 2 && map.estimate_rho && rho.abs() > 0.9999;
    let rho_hat = if p == 2 {
        Some(if rho_boundary { rho.signum() } else { rho })
    } else {
        None
    };
    Ok(OneStageFit {
        b_hat: gls.b.iter().copied().collect(),
        se: (0..p).map(|k| gls.cov_b[(k, k)].sqrt()).collect(),
        tau_hat: if p == 2 { vec![tau1, tau2] } else { vec![tau1] },
        rho_hat,
        rho_boundary,
        loglik: gls.loglik,
        converged,
        iterations,
        n_studies: designs.len(),
        n_dropped: dropped,
    })
}

/// Profile log-likelihood of the fitted model at externally chosen variance
/// parameters; used for restart-consistency checks.
pub fn profile_loglik(
    tables: &[EffectTable],
    transform: &Transform,
    tau: (f64, f64),
    rho: f64,
) -> Result<f64> {
    let (designs, _) = build_designs(tables, transform, false)?;
    gls_at_psi(&designs, &psi_matrix(transform.p(), tau.0, tau.1, rho))
        .map(|g| g.loglik)
        .ok_or_else(|| Error::OneStage("marginal covariance not positive definite".into()))
}

/// Wald confidence intervals B̂ ± z·se at the given level.
pub fn confint_wald(fit: &OneStageFit, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::OneStage(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    let z = normal_quantile((1.0 + level) / 2.0);
    Ok(fit
        .b_hat
        .iter()
        .zip(&fit.se)
        .map(|(&b, &se)| (b - z * se, b + z * se))
        .collect())
}

/// Standard Nelder-Mead on an n-dimensional objective; returns the best
/// vertex, its value, a convergence flag, and iterations used.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    start: &[f64],
    max_iterations: usize,
) -> (Vec<f64>, f64, bool, usize) {
    let n = start.len();
    let (alpha, gamma, rho_c, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += if v[i].abs() > 1e-3 { 0.25 * v[i].abs() } else { 0.25 };
        simplex.push(v);
    }
    let mut fvals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let mut converged = false;
    let mut iter = 0;
    while iter < max_iterations {
        iter += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fvals[a].partial_cmp(&fvals[b]).unwrap());
        let reordered: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let refvals: Vec<f64> = order.iter().map(|&i| fvals[i]).collect();
        simplex = reordered;
        fvals = refvals;

        let spread = fvals[n] - fvals[0];
        let diam = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if spread.abs() < 1e-10 && diam < 1e-8 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let f_reflect = f(&reflect);

        if f_reflect < fvals[0] {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + gamma * (c - w))
                .collect();
            let f_expand = f(&expand);
            if f_expand < f_reflect {
                simplex[n] = expand;
                fvals[n] = f_expand;
            } else {
                simplex[n] = reflect;
                fvals[n] = f_reflect;
            }
        } else if f_reflect < fvals[n - 1] {
            simplex[n] = reflect;
            fvals[n] = f_reflect;
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + rho_c * (w - c))
                .collect();
            let f_contract = f(&contract);
            if f_contract < fvals[n] {
                simplex[n] = contract;
                fvals[n] = f_contract;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(v, b)| b + sigma * (v - b))
                        .collect();
                    simplex[i] = shrunk;
                    fvals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = fvals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    (simplex[best].clone(), fvals[best], converged, iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_effects, Arm, EffectMeasure, StudyRecord};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn study(id: &str, arms: &[(f64, u64, u64)]) -> StudyRecord {
        StudyRecord::new(
            id,
            None,
            arms.iter().map(|&(d, r, n)| Arm::new(d, r, n).unwrap()).collect(),
        )
        .unwrap()
    }

    fn simulate_tables(seed: u64, ns: usize) -> Vec<EffectTable> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..ns)
            .map(|i| {
                let d1 = rng.gen_range(1.0..5.0);
                let d2 = rng.gen_range(5.0..10.0);
                let base = rng.gen_range(8..15);
                let r1 = base + rng.gen_range(0..10) + (2.0 * d1) as u64;
                let r2 = base + rng.gen_range(0..10) + (2.0 * d2) as u64;
                let s = study(
                    &format!("s{i}"),
                    &[(0.0, base, 120), (d1, r1, 120), (d2, r2, 120)],
                );
                compute_effects(&s, EffectMeasure::LogOr, 0.5).unwrap()
            })
            .collect()
    }

    /// Closed-form GLS pooling with fixed weights: the independent oracle for
    /// the tau = 0 fit.
    fn gls_oracle(tables: &[EffectTable], transform: &Transform) -> Vec<f64> {
        let p = transform.p();
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for t in tables {
            let m = t.effects().len();
            let mut z = DMatrix::zeros(m, p);
            for (j, &x) in t.doses().iter().enumerate() {
                for (k, v) in transform.contrast(x, t.reference_dose()).into_iter().enumerate() {
                    z[(j, k)] = v;
                }
            }
            let sinv = t.covariance().clone().try_inverse().unwrap();
            a += z.transpose() * &sinv * &z;
            rhs += z.transpose() * &sinv * t.effects();
        }
        (a.try_inverse().unwrap() * rhs).iter().copied().collect()
    }

    #[test]
    fn fixed_zero_tau_matches_gls_oracle() {
        let transform = Transform::rcs3([1.0, 5.0, 9.0]).unwrap();
        for seed in 0..5 {
            let tables = simulate_tables(seed, 8);
            let opts = OneStageOptions {
                fix_tau: Some((0.0, 0.0)),
                fix_rho: Some(0.0),
                ..OneStageOptions::default()
            };
            let fit = fit_onestage(&tables, &transform, &opts).unwrap();
            let oracle = gls_oracle(&tables, &transform);
            for (got, expect) in fit.b_hat.iter().zip(&oracle) {
                assert_relative_eq!(got, expect, epsilon = 1e-8, max_relative = 1e-8);
            }
            assert!(fit.converged);
            assert_eq!(fit.iterations, 0);
        }
    }

    #[test]
    fn single_study_p1_saturated() {
        let s = study("s", &[(0.0, 10, 100), (5.0, 20, 100)]);
        let t = compute_effects(&s, EffectMeasure::LogOr, 0.5).unwrap();
        let fit = fit_onestage(std::slice::from_ref(&t), &Transform::linear(), &OneStageOptions::default())
            .unwrap();
        // saturated: B = Y / contrast and tau at the boundary
        assert_relative_eq!(fit.b_hat[0], t.effects()[0] / 5.0, epsilon = 1e-6);
        assert!(fit.tau_hat[0] < 1e-4, "tau {}", fit.tau_hat[0]);
    }

    #[test]
    fn restart_consistency() {
        let transform = Transform::rcs3([1.0, 5.0, 9.0]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for seed in 0..5 {
            let tables = simulate_tables(100 + seed, 10);
            let fit =
                fit_onestage(&tables, &transform, &OneStageOptions::default()).unwrap();
            for _ in 0..10 {
                let t1 = rng.gen_range(1e-4..0.5f64);
                let t2 = rng.gen_range(1e-4..0.5f64);
                let r = rng.gen_range(-0.95..0.95f64);
                let ll = profile_loglik(&tables, &transform, (t1, t2), r).unwrap();
                assert!(
                    fit.loglik >= ll - 1e-6,
                    "optimum {} below restart value {ll}",
                    fit.loglik
                );
            }
        }
    }

    #[test]
    fn invariant_to_study_order() {
        let transform = Transform::rcs3([1.0, 5.0, 9.0]).unwrap();
        let mut tables = simulate_tables(7, 9);
        let fit_a = fit_onestage(&tables, &transform, &OneStageOptions::default()).unwrap();
        tables.reverse();
        let fit_b = fit_onestage(&tables, &transform, &OneStageOptions::default()).unwrap();
        for k in 0..2 {
            assert_relative_eq!(fit_a.b_hat[k], fit_b.b_hat[k], epsilon = 1e-6);
            assert_relative_eq!(fit_a.se[k], fit_b.se[k], epsilon = 1e-6);
        }
    }

    #[test]
    fn gls_scale_equivariance() {
        // scaling every S_i and Psi by kappa leaves B unchanged and shifts the
        // loglik by a deterministic constant
        let transform = Transform::linear();
        let tables = simulate_tables(13, 6);
        let kappa = 3.7;
        let scaled: Vec<EffectTable> = tables
            .iter()
            .map(|t| {
                EffectTable::new(
                    t.study_id(),
                    None,
                    t.effects().iter().copied().collect(),
                    t.covariance() * kappa,
                    t.doses().to_vec(),
                    t.reference_dose(),
                )
                .unwrap()
            })
            .collect();
        let tau = 0.08;
        let opts = |t: f64| OneStageOptions {
            fix_tau: Some((t, t)),
            fix_rho: Some(0.0),
            ..OneStageOptions::default()
        };
        let fit = fit_onestage(&tables, &transform, &opts(tau)).unwrap();
        let fit_scaled =
            fit_onestage(&scaled, &transform, &opts(tau * kappa.sqrt())).unwrap();
        assert_relative_eq!(fit.b_hat[0], fit_scaled.b_hat[0], epsilon = 1e-9);
        // V' = kappa V, so loglik shifts by -(M ln kappa)/2 - q (1/kappa - 1)/2
        // with q the total quadratic form at the (unchanged) GLS estimate
        let mut m_total = 0.0;
        let mut q = 0.0;
        for t in &tables {
            let m = t.effects().len();
            m_total += m as f64;
            let mut zb = DVector::zeros(m);
            for (j, &x) in t.doses().iter().enumerate() {
                zb[j] = transform.contrast(x, t.reference_dose())[0] * fit.b_hat[0];
            }
            let v = t.covariance()
                + DMatrix::from_fn(m, m, |i, j| {
                    let zi = transform.contrast(t.doses()[i], t.reference_dose())[0];
                    let zj = transform.contrast(t.doses()[j], t.reference_dose())[0];
                    zi * zj * tau * tau
                });
            let r = t.effects() - zb;
            q += r.dot(&(v.try_inverse().unwrap() * &r));
        }
        let expected_shift = -0.5 * m_total * kappa.ln() - 0.5 * q * (1.0 / kappa - 1.0);
        assert_relative_eq!(
            fit_scaled.loglik - fit.loglik,
            expected_shift,
            epsilon = 1e-6
        );
    }

    #[test]
    fn wald_intervals() {
        let fit = OneStageFit {
            b_hat: vec![0.2],
            se: vec![0.05],
            tau_hat: vec![0.0],
            rho_hat: None,
            rho_boundary: false,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            n_studies: 1,
            n_dropped: 0,
        };
        let ci = confint_wald(&fit, 0.95).unwrap();
        assert_relative_eq!(ci[0].0, 0.10200180077299731, epsilon = 1e-9);
        assert_relative_eq!(ci[0].1, 0.2979981992270027, epsilon = 1e-9);
        assert!(confint_wald(&fit, 1.2).is_err());

        let degenerate = OneStageFit {
            se: vec![0.0],
            ..fit
        };
        let ci = confint_wald(&degenerate, 0.95).unwrap();
        assert_eq!(ci[0], (0.2, 0.2));
    }

    #[test]
    fn drop_underidentified_excludes_short_studies() {
        let transform = Transform::rcs3([1.0, 5.0, 9.0]).unwrap();
        let mut tables = simulate_tables(3, 6);
        let two_arm = study("short", &[(0.0, 10, 100), (4.0, 14, 100)]);
        tables.push(compute_effects(&two_arm, EffectMeasure::LogOr, 0.5).unwrap());
        let kept = fit_onestage(&tables, &transform, &OneStageOptions::default()).unwrap();
        assert_eq!(kept.n_studies, 7);
        assert_eq!(kept.n_dropped, 0);
        let strict = fit_onestage(
            &tables,
            &transform,
            &OneStageOptions {
                drop_underidentified: true,
                ..OneStageOptions::default()
            },
        )
        .unwrap();
        assert_eq!(strict.n_studies, 6);
        assert_eq!(strict.n_dropped, 1);
    }
}
