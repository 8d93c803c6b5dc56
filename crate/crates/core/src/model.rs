//! Joint log-posterior of the hierarchical dose-response model.
//!
//! A [`Model`] binds a [`ModelSpec`] to a [`Dataset`] and evaluates the
//! unnormalized log posterior of a [`ParameterState`]:
//!
//! * likelihood: binomial on arm counts, with the baseline u_i = λ(p_i0) and
//!   λ(p_ij) = u_i + δ_ij, or multivariate normal on the per-study effect
//!   vectors with fixed covariance;
//! * δ_ij = β_i · (f(X_ij) − f(X_i0)) for the chosen dose transform;
//! * random coefficients β_i ~ MVN(B, Σ) with Σ = τ²[[1,ρ],[ρ,1]], optionally
//!   split into within/between levels over exposure clusters
//!   (β_i ~ MVN(B^c, Σ_within), B^c ~ MVN(B, Σ_between));
//! * priors: N(0, 10³) on coefficients and baselines, half-normal(1) on
//!   heterogeneity scales, uniform on correlations;
//! * an optional zero-dose block pooling baselines: λ(p_i0) ~ N(R0, σ0²).
//!
//! States outside the support evaluate to −∞ rather than erroring, so a
//! sampler can treat them as rejections. The model also exposes the posterior
//! as a sum of per-block terms ([`Model::block_target`]): the difference of a
//! block target under a change of that block's parameters equals the
//! difference of the full log posterior, which is what Metropolis-within-Gibbs
//! needs.

use crate::data::{Dataset, EffectMeasure, EffectTable};
use crate::error::{Error, Result};
pub use crate::splines::Transform;
use crate::stats::{
    expit, half_normal_logpdf, ln_choose, normal_logpdf, softplus, LN_2PI,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub const DEFAULT_CONTINUITY_CORRECTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    Binomial,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Logit,
    Log,
    Identity,
}

impl Link {
    pub fn for_measure(measure: EffectMeasure) -> Link {
        match measure {
            EffectMeasure::LogOr => Link::Logit,
            EffectMeasure::LogRr => Link::Log,
            EffectMeasure::GenericNormal => Link::Identity,
        }
    }

    /// λ⁻¹; returns None when the result is not a probability in (0,1).
    pub fn inverse(self, eta: f64) -> Option<f64> {
        match self {
            Link::Logit => Some(expit(eta)),
            Link::Log => {
                let p = eta.exp();
                if p < 1.0 {
                    Some(p)
                } else {
                    None
                }
            }
            Link::Identity => Some(eta),
        }
    }

    pub fn apply(self, p: f64) -> f64 {
        match self {
            Link::Logit => (p / (1.0 - p)).ln(),
            Link::Log => p.ln(),
            Link::Identity => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientModel {
    Common,
    Random,
}

/// Whether the correlation between coefficient random effects is estimated
/// (bivariate Σ with ρ) or fixed at zero (independent univariate effects).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientCorrelation {
    Estimated,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub coef_mean: f64,
    pub coef_var: f64,
    pub baseline_var: f64,
    pub tau_scale: f64,
    pub sigma0_scale: f64,
    pub rho_bounds: (f64, f64),
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            coef_mean: 0.0,
            coef_var: 1e3,
            baseline_var: 1e3,
            tau_scale: 1.0,
            sigma0_scale: 1.0,
            rho_bounds: (-1.0, 1.0),
        }
    }
}

impl PriorSpec {
    fn validate(&self) -> Result<()> {
        if self.coef_var <= 0.0
            || self.baseline_var <= 0.0
            || self.tau_scale <= 0.0
            || self.sigma0_scale <= 0.0
        {
            return Err(Error::Config("prior variances/scales must be positive".into()));
        }
        let (lo, hi) = self.rho_bounds;
        if !(lo < hi && lo >= -1.0 && hi <= 1.0) {
            return Err(Error::Config(format!(
                "rho bounds must satisfy -1 <= lo < hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Full model configuration; serializable so runs can be reproduced from
/// their manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub likelihood: Likelihood,
    pub link: Link,
    pub transform: Transform,
    pub coefficients: CoefficientModel,
    #[serde(default = "default_correlation")]
    pub correlation: CoefficientCorrelation,
    #[serde(default)]
    pub clustered: bool,
    #[serde(default)]
    pub include_zero_dose_block: bool,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default = "default_correction")]
    pub continuity_correction: f64,
}

fn default_correlation() -> CoefficientCorrelation {
    CoefficientCorrelation::Estimated
}

fn default_correction() -> f64 {
    DEFAULT_CONTINUITY_CORRECTION
}

impl ModelSpec {
    /// Binomial-likelihood model with the link implied by the measure.
    pub fn binomial(measure: EffectMeasure, transform: Transform) -> Self {
        ModelSpec {
            likelihood: Likelihood::Binomial,
            link: Link::for_measure(measure),
            transform,
            coefficients: CoefficientModel::Random,
            correlation: CoefficientCorrelation::Estimated,
            clustered: false,
            include_zero_dose_block: false,
            priors: PriorSpec::default(),
            continuity_correction: DEFAULT_CONTINUITY_CORRECTION,
        }
    }

    /// Normal-likelihood (contrast) model with the link implied by the measure.
    pub fn normal(measure: EffectMeasure, transform: Transform) -> Self {
        ModelSpec {
            likelihood: Likelihood::Normal,
            link: Link::for_measure(measure),
            ..ModelSpec::binomial(measure, transform)
        }
    }
}

/// All sampled quantities. Fields irrelevant to the active [`ModelSpec`]
/// stay at their defaults and are ignored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterState {
    pub b: Vec<f64>,
    pub tau: f64,
    pub rho: f64,
    pub beta: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub b_cluster: Vec<Vec<f64>>,
    pub tau_within: f64,
    pub tau_between: f64,
    pub rho_within: f64,
    pub rho_between: f64,
    pub r0: f64,
    pub sigma0: f64,
}

/// Support of a scalar parameter, deciding the proposal transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Real,
    Positive,
    /// Open interval (lo, hi).
    Interval(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    MeanCoef,
    Tau,
    Rho,
    TauWithin,
    TauBetween,
    RhoWithin,
    RhoBetween,
    ClusterCoef(usize),
    StudyCoef(usize),
    Baseline(usize),
    ZeroDoseMean,
    ZeroDoseSd,
    /// Joint translation of B_k together with every β_ik (and B^c_k): one
    /// shared increment, breaking the ridge between the mean and the random
    /// effects when τ is small.
    CoefShift(usize),
    /// Joint rescaling of a heterogeneity sd together with the deviations it
    /// governs (τ with β_i − mean, τ_between with B^c − B): one shared
    /// log-scale increment, escaping the funnel at small τ.
    HetScale(HetLevel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HetLevel {
    Study,
    Between,
}

/// How the sampler perturbs a block's components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalStyle {
    /// Independent increments per component.
    Independent,
    /// One shared increment added to every component (1 degree of freedom).
    Translation,
    /// One shared factor e^ε: the first component (a positive scale) is
    /// multiplied by it, the rest contract/dilate around anchor values from
    /// [`Model::block_anchors`]. 1 degree of freedom with log-Jacobian dim·ε.
    ScaleWithAnchors,
}

/// One Metropolis-within-Gibbs update unit.
#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub dim: usize,
    pub support: Support,
    pub proposal: ProposalStyle,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    JitteredZero,
    PriorDraw,
}

struct ContrastArm {
    r: f64,
    n: f64,
    lnc: f64,
    contrast: Vec<f64>,
}

struct ArmCounts {
    r0: f64,
    n0: f64,
    lnc0: f64,
    arms: Vec<ContrastArm>,
    /// Continuity-corrected reference proportion, for initialization.
    p0_hat: f64,
}

struct TableData {
    y: DVector<f64>,
    chol_l: DMatrix<f64>,
    ln_norm: f64,
    contrasts: Vec<Vec<f64>>,
}

struct StudyUnit {
    cluster: usize,
    counts: Option<ArmCounts>,
    table: Option<TableData>,
}

/// A [`ModelSpec`] bound to a [`Dataset`], with contrasts and covariance
/// factorizations precomputed.
pub struct Model {
    spec: ModelSpec,
    p: usize,
    units: Vec<StudyUnit>,
    cluster_names: Vec<String>,
    blocks: Vec<Block>,
    names: Vec<String>,
}

impl Model {
    pub fn new(spec: ModelSpec, dataset: &Dataset) -> Result<Self> {
        spec.priors.validate()?;
        let p = spec.transform.p();

        if spec.clustered && spec.coefficients != CoefficientModel::Random {
            return Err(Error::Config(
                "clustered models require random coefficients".into(),
            ));
        }
        if spec.likelihood == Likelihood::Binomial && spec.link == Link::Identity {
            return Err(Error::Config(
                "binomial likelihood requires a logit or log link".into(),
            ));
        }
        let arm_level = !dataset.studies().is_empty();
        if spec.likelihood == Likelihood::Binomial && !arm_level && dataset.n_studies() > 0 {
            return Err(Error::Config(
                "binomial likelihood requires arm-level counts".into(),
            ));
        }
        if spec.include_zero_dose_block && !arm_level {
            return Err(Error::Config(
                "zero-dose block requires arm-level reference counts".into(),
            ));
        }

        // cluster index in first-appearance order
        let labels = dataset.cluster_labels();
        let mut cluster_names: Vec<String> = Vec::new();
        let mut cluster_of = Vec::with_capacity(labels.len());
        for lab in &labels {
            match lab {
                Some(l) => {
                    let idx = match cluster_names.iter().position(|c| c == l) {
                        Some(i) => i,
                        None => {
                            cluster_names.push(l.clone());
                            cluster_names.len() - 1
                        }
                    };
                    cluster_of.push(idx);
                }
                None => {
                    if spec.clustered {
                        return Err(Error::Config(
                            "clustered model requested but a study has no cluster label".into(),
                        ));
                    }
                    cluster_of.push(0);
                }
            }
        }

        let mut units = Vec::new();
        if arm_level {
            for (i, s) in dataset.studies().iter().enumerate() {
                if s.arms().len() < 2 && !spec.include_zero_dose_block {
                    return Err(Error::InsufficientArms {
                        study_id: s.study_id().to_string(),
                        arms: s.arms().len(),
                    });
                }
                let ref_arm = s.reference();
                let x0 = ref_arm.dose;
                let counts = ArmCounts {
                    r0: ref_arm.events as f64,
                    n0: ref_arm.size as f64,
                    lnc0: ln_choose(ref_arm.size, ref_arm.events),
                    arms: s
                        .contrast_arms()
                        .iter()
                        .map(|a| ContrastArm {
                            r: a.events as f64,
                            n: a.size as f64,
                            lnc: ln_choose(a.size, a.events),
                            contrast: spec.transform.contrast(a.dose, x0),
                        })
                        .collect(),
                    p0_hat: (ref_arm.events as f64 + 0.5) / (ref_arm.size as f64 + 1.0),
                };
                let table = if spec.likelihood == Likelihood::Normal && s.arms().len() >= 2 {
                    let t = crate::data::compute_effects(
                        s,
                        dataset.measure(),
                        spec.continuity_correction,
                    )?;
                    Some(Self::build_table(&t, &spec.transform)?)
                } else {
                    None
                };
                units.push(StudyUnit {
                    cluster: cluster_of[i],
                    counts: Some(counts),
                    table,
                });
            }
        } else {
            if spec.likelihood == Likelihood::Binomial && dataset.n_studies() > 0 {
                unreachable!("checked above");
            }
            for (i, t) in dataset.effect_tables(spec.continuity_correction)?.iter().enumerate() {
                units.push(StudyUnit {
                    cluster: cluster_of[i],
                    counts: None,
                    table: Some(Self::build_table(t, &spec.transform)?),
                });
            }
        }

        let n_clusters = if spec.clustered { cluster_names.len() } else { 0 };
        let (blocks, names) = Self::build_layout(&spec, p, units.len(), n_clusters);
        Ok(Model {
            spec,
            p,
            units,
            cluster_names,
            blocks,
            names,
        })
    }

    fn build_table(t: &EffectTable, transform: &Transform) -> Result<TableData> {
        let m = t.effects().len();
        let chol = t.cholesky();
        let l = chol.l();
        let mut ln_det_half = 0.0;
        for j in 0..m {
            ln_det_half += l[(j, j)].ln();
        }
        Ok(TableData {
            y: t.effects().clone(),
            chol_l: l,
            ln_norm: -ln_det_half - 0.5 * m as f64 * LN_2PI,
            contrasts: t
                .doses()
                .iter()
                .map(|&x| transform.contrast(x, t.reference_dose()))
                .collect(),
        })
    }

    fn build_layout(
        spec: &ModelSpec,
        p: usize,
        ns: usize,
        n_clusters: usize,
    ) -> (Vec<Block>, Vec<String>) {
        let mut blocks = Vec::new();
        let mut names = Vec::new();
        let random = spec.coefficients == CoefficientModel::Random;
        let with_rho = random && p == 2 && spec.correlation == CoefficientCorrelation::Estimated;
        let rho_support = Support::Interval(spec.priors.rho_bounds.0, spec.priors.rho_bounds.1);
        let coef_names = |prefix: &str, names: &mut Vec<String>| {
            if p == 1 {
                names.push(format!("{prefix}1"));
            } else {
                for k in 1..=p {
                    names.push(format!("{prefix}{k}"));
                }
            }
        };

        blocks.push(Block {
            kind: BlockKind::MeanCoef,
            dim: p,
            support: Support::Real,
            proposal: ProposalStyle::Independent,
            name: "B".into(),
        });
        coef_names("B", &mut names);

        if random && !spec.clustered {
            blocks.push(Block {
                kind: BlockKind::Tau,
                dim: 1,
                support: Support::Positive,
                proposal: ProposalStyle::Independent,
                name: "tau".into(),
            });
            names.push("tau".into());
            if with_rho {
                blocks.push(Block {
                    kind: BlockKind::Rho,
                    dim: 1,
                    support: rho_support,
                    proposal: ProposalStyle::Independent,
                    name: "rho".into(),
                });
                names.push("rho".into());
            }
        }
        if spec.clustered {
            for (kind, name) in [
                (BlockKind::TauWithin, "tau_within"),
                (BlockKind::TauBetween, "tau_between"),
            ] {
                blocks.push(Block {
                    kind,
                    dim: 1,
                    support: Support::Positive,
                    proposal: ProposalStyle::Independent,
                    name: name.into(),
                });
                names.push(name.into());
            }
            if with_rho {
                for (kind, name) in [
                    (BlockKind::RhoWithin, "rho_within"),
                    (BlockKind::RhoBetween, "rho_between"),
                ] {
                    blocks.push(Block {
                        kind,
                        dim: 1,
                        support: rho_support,
                        proposal: ProposalStyle::Independent,
                        name: name.into(),
                    });
                    names.push(name.into());
                }
            }
            for c in 0..n_clusters {
                blocks.push(Block {
                    kind: BlockKind::ClusterCoef(c),
                    dim: p,
                    support: Support::Real,
                    proposal: ProposalStyle::Independent,
                    name: format!("B_c[{}]", c + 1),
                });
                for k in 1..=p {
                    names.push(format!("B_c[{},{}]", c + 1, k));
                }
            }
        }
        if random {
            for i in 0..ns {
                blocks.push(Block {
                    kind: BlockKind::StudyCoef(i),
                    dim: p,
                    support: Support::Real,
                    proposal: ProposalStyle::Independent,
                    name: format!("beta[{}]", i + 1),
                });
                for k in 1..=p {
                    names.push(format!("beta[{},{}]", i + 1, k));
                }
            }
            // no draws of their own: these move B_k and the beta_ik together
            for k in 0..p {
                blocks.push(Block {
                    kind: BlockKind::CoefShift(k),
                    dim: 1 + ns + n_clusters,
                    support: Support::Real,
                    proposal: ProposalStyle::Translation,
                    name: format!("shift_B{}", k + 1),
                });
            }
            blocks.push(Block {
                kind: BlockKind::HetScale(HetLevel::Study),
                dim: 1 + ns * p,
                support: Support::Positive,
                proposal: ProposalStyle::ScaleWithAnchors,
                name: if spec.clustered { "scale_tau_within" } else { "scale_tau" }.into(),
            });
            if spec.clustered {
                blocks.push(Block {
                    kind: BlockKind::HetScale(HetLevel::Between),
                    dim: 1 + n_clusters * p,
                    support: Support::Positive,
                    proposal: ProposalStyle::ScaleWithAnchors,
                    name: "scale_tau_between".into(),
                });
            }
        }
        if spec.likelihood == Likelihood::Binomial || spec.include_zero_dose_block {
            for i in 0..ns {
                blocks.push(Block {
                    kind: BlockKind::Baseline(i),
                    dim: 1,
                    support: Support::Real,
                    proposal: ProposalStyle::Independent,
                    name: format!("u[{}]", i + 1),
                });
                names.push(format!("u[{}]", i + 1));
            }
        }
        if spec.include_zero_dose_block {
            blocks.push(Block {
                kind: BlockKind::ZeroDoseMean,
                dim: 1,
                support: Support::Real,
                proposal: ProposalStyle::Independent,
                name: "R0".into(),
            });
            names.push("R0".into());
            blocks.push(Block {
                kind: BlockKind::ZeroDoseSd,
                dim: 1,
                support: Support::Positive,
                proposal: ProposalStyle::Independent,
                name: "sigma0".into(),
            });
            names.push("sigma0".into());
        }
        (blocks, names)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_studies(&self) -> usize {
        self.units.len()
    }

    pub fn n_clusters(&self) -> usize {
        if self.spec.clustered {
            self.cluster_names.len()
        } else {
            0
        }
    }

    pub fn cluster_names(&self) -> &[String] {
        &self.cluster_names
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    fn has_baselines(&self) -> bool {
        self.spec.likelihood == Likelihood::Binomial || self.spec.include_zero_dose_block
    }

    fn random(&self) -> bool {
        self.spec.coefficients == CoefficientModel::Random
    }

    fn beta_of<'a>(&self, i: usize, state: &'a ParameterState) -> &'a [f64] {
        if self.random() {
            &state.beta[i]
        } else {
            &state.b
        }
    }

    fn coef_mean_of<'a>(&self, i: usize, state: &'a ParameterState) -> &'a [f64] {
        if self.spec.clustered {
            &state.b_cluster[self.units[i].cluster]
        } else {
            &state.b
        }
    }

    fn within_scale(&self, state: &ParameterState) -> (f64, f64) {
        if self.spec.clustered {
            (state.tau_within, state.rho_within)
        } else {
            (state.tau, state.rho)
        }
    }

    fn effective_rho(&self, rho: f64) -> f64 {
        if self.p == 2 && self.spec.correlation == CoefficientCorrelation::Estimated {
            rho
        } else {
            0.0
        }
    }

    /// MVN log-density of a coefficient vector with common variance τ² and
    /// correlation ρ; −∞ when τ ≤ 0 or |ρ| ≥ 1 (density error as rejection).
    fn coef_mvn_logpdf(&self, x: &[f64], mu: &[f64], tau: f64, rho: f64) -> f64 {
        if tau <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let var = tau * tau;
        if self.p == 1 {
            return normal_logpdf(x[0], mu[0], var);
        }
        let rho = self.effective_rho(rho);
        if rho.abs() >= 1.0 {
            return f64::NEG_INFINITY;
        }
        let d1 = x[0] - mu[0];
        let d2 = x[1] - mu[1];
        let one_m = 1.0 - rho * rho;
        let q = (d1 * d1 - 2.0 * rho * d1 * d2 + d2 * d2) / (var * one_m);
        -LN_2PI - 0.5 * (var * var * one_m).ln() - 0.5 * q
    }

    fn ll_study(&self, i: usize, state: &ParameterState) -> f64 {
        match self.spec.likelihood {
            Likelihood::Binomial => self.ll_study_binomial(i, state),
            Likelihood::Normal => self.ll_study_normal(i, state),
        }
    }

    /// Binomial log-density of one arm with the probability given on the
    /// link scale; the softplus/expm1 forms stay finite for any finite eta
    /// under the logit link and encode the log-link support bound
    /// (probability < 1) as −∞.
    fn arm_loglik(&self, eta: f64, r: f64, n: f64, lnc: f64) -> f64 {
        let t = n - r;
        match self.spec.link {
            Link::Logit => lnc - r * softplus(-eta) - t * softplus(eta),
            Link::Log => {
                if eta >= 0.0 {
                    return f64::NEG_INFINITY;
                }
                lnc + r * eta + t * (-(eta.exp_m1())).ln()
            }
            Link::Identity => f64::NEG_INFINITY,
        }
    }

    fn ll_study_binomial(&self, i: usize, state: &ParameterState) -> f64 {
        let counts = match &self.units[i].counts {
            Some(c) => c,
            None => return 0.0,
        };
        let u = state.u[i];
        let beta = self.beta_of(i, state);
        let mut ll = self.arm_loglik(u, counts.r0, counts.n0, counts.lnc0);
        for arm in &counts.arms {
            let eta = u + dot(beta, &arm.contrast);
            ll += self.arm_loglik(eta, arm.r, arm.n, arm.lnc);
            if ll == f64::NEG_INFINITY {
                return ll;
            }
        }
        ll
    }

    fn ll_study_normal(&self, i: usize, state: &ParameterState) -> f64 {
        let table = match &self.units[i].table {
            Some(t) => t,
            None => return 0.0,
        };
        let beta = self.beta_of(i, state);
        let m = table.y.len();
        let mut d = DVector::zeros(m);
        for j in 0..m {
            d[j] = table.y[j] - dot(beta, &table.contrasts[j]);
        }
        let z = table
            .chol_l
            .solve_lower_triangular(&d)
            .expect("positive-definite factor");
        table.ln_norm - 0.5 * z.norm_squared()
    }

    fn re_study(&self, i: usize, state: &ParameterState) -> f64 {
        if !self.random() {
            return 0.0;
        }
        let (tau, rho) = self.within_scale(state);
        self.coef_mvn_logpdf(&state.beta[i], self.coef_mean_of(i, state), tau, rho)
    }

    fn re_cluster(&self, c: usize, state: &ParameterState) -> f64 {
        self.coef_mvn_logpdf(&state.b_cluster[c], &state.b, state.tau_between, state.rho_between)
    }

    fn ref_binomial(&self, i: usize, state: &ParameterState) -> f64 {
        let counts = match &self.units[i].counts {
            Some(c) => c,
            None => return f64::NEG_INFINITY,
        };
        self.arm_loglik(state.u[i], counts.r0, counts.n0, counts.lnc0)
    }

    fn zd_pool_term(&self, i: usize, state: &ParameterState) -> f64 {
        if state.sigma0 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        normal_logpdf(state.u[i], state.r0, state.sigma0 * state.sigma0)
    }

    fn rho_prior(&self, rho: f64) -> f64 {
        let (lo, hi) = self.spec.priors.rho_bounds;
        if rho > lo && rho < hi {
            -(hi - lo).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Binomial likelihood over all arms of all studies (reference included).
    pub fn loglik_binomial(&self, state: &ParameterState) -> f64 {
        (0..self.units.len()).map(|i| self.ll_study_binomial(i, state)).sum()
    }

    /// Multivariate normal likelihood of the per-study effect vectors.
    pub fn loglik_normal(&self, state: &ParameterState) -> f64 {
        (0..self.units.len()).map(|i| self.ll_study_normal(i, state)).sum()
    }

    /// Random-effect terms: Σ_i MVN(β_i; ·) plus, when clustered,
    /// Σ_c MVN(B^c; B, Σ_between). Zero for common-coefficient models.
    pub fn log_random_effects(&self, state: &ParameterState) -> f64 {
        if !self.random() {
            return 0.0;
        }
        let mut lp: f64 = (0..self.units.len()).map(|i| self.re_study(i, state)).sum();
        if self.spec.clustered {
            lp += (0..self.cluster_names.len())
                .map(|c| self.re_cluster(c, state))
                .sum::<f64>();
        }
        lp
    }

    /// Prior log-density of every active parameter; −∞ outside the support.
    pub fn log_prior(&self, state: &ParameterState) -> f64 {
        let priors = &self.spec.priors;
        let mut lp = 0.0;
        for k in 0..self.p {
            lp += normal_logpdf(state.b[k], priors.coef_mean, priors.coef_var);
        }
        if self.random() && !self.spec.clustered {
            lp += half_normal_logpdf(state.tau, priors.tau_scale);
            if self.p == 2 && self.spec.correlation == CoefficientCorrelation::Estimated {
                lp += self.rho_prior(state.rho);
            }
        }
        if self.spec.clustered {
            lp += half_normal_logpdf(state.tau_within, priors.tau_scale);
            lp += half_normal_logpdf(state.tau_between, priors.tau_scale);
            if self.p == 2 && self.spec.correlation == CoefficientCorrelation::Estimated {
                lp += self.rho_prior(state.rho_within);
                lp += self.rho_prior(state.rho_between);
            }
        }
        if self.has_baselines() {
            for i in 0..self.units.len() {
                lp += normal_logpdf(state.u[i], 0.0, priors.baseline_var);
            }
        }
        if self.spec.include_zero_dose_block {
            lp += normal_logpdf(state.r0, 0.0, priors.baseline_var);
            lp += half_normal_logpdf(state.sigma0, priors.sigma0_scale);
        }
        lp
    }

    /// The zero-dose pooling block as a standalone quantity: per study, the
    /// reference-arm binomial density plus N(λ(p_i0); R0, σ0²).
    pub fn log_zero_dose_block(&self, state: &ParameterState) -> f64 {
        if !self.spec.include_zero_dose_block {
            return 0.0;
        }
        (0..self.units.len())
            .map(|i| self.ref_binomial(i, state) + self.zd_pool_term(i, state))
            .sum()
    }

    /// Full unnormalized log posterior. Under a binomial likelihood the
    /// reference-arm binomial densities are part of the likelihood, so the
    /// zero-dose block contributes only its pooling terms; under a normal
    /// likelihood the block contributes both.
    pub fn log_posterior(&self, state: &ParameterState) -> f64 {
        let mut lp = self.log_prior(state);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp += match self.spec.likelihood {
            Likelihood::Binomial => self.loglik_binomial(state),
            Likelihood::Normal => self.loglik_normal(state),
        };
        lp += self.log_random_effects(state);
        if self.spec.include_zero_dose_block {
            for i in 0..self.units.len() {
                lp += self.zd_pool_term(i, state);
                if self.spec.likelihood == Likelihood::Normal {
                    lp += self.ref_binomial(i, state);
                }
            }
        }
        lp
    }

    /// Sum of exactly the log-posterior terms that contain the block's
    /// parameters; differences of this function under a change of the block
    /// equal differences of [`Model::log_posterior`].
    pub fn block_target(&self, block: &Block, state: &ParameterState) -> f64 {
        let priors = &self.spec.priors;
        match block.kind {
            BlockKind::MeanCoef => {
                let mut lp = 0.0;
                for k in 0..self.p {
                    lp += normal_logpdf(state.b[k], priors.coef_mean, priors.coef_var);
                }
                match (self.random(), self.spec.clustered) {
                    (false, _) => {
                        lp += (0..self.units.len()).map(|i| self.ll_study(i, state)).sum::<f64>()
                    }
                    (true, false) => {
                        lp += (0..self.units.len()).map(|i| self.re_study(i, state)).sum::<f64>()
                    }
                    (true, true) => {
                        lp += (0..self.cluster_names.len())
                            .map(|c| self.re_cluster(c, state))
                            .sum::<f64>()
                    }
                }
                lp
            }
            BlockKind::Tau => {
                half_normal_logpdf(state.tau, priors.tau_scale)
                    + (0..self.units.len()).map(|i| self.re_study(i, state)).sum::<f64>()
            }
            BlockKind::Rho => {
                self.rho_prior(state.rho)
                    + (0..self.units.len()).map(|i| self.re_study(i, state)).sum::<f64>()
            }
            BlockKind::TauWithin => {
                half_normal_logpdf(state.tau_within, priors.tau_scale)
                    + (0..self.units.len()).map(|i| self.re_study(i, state)).sum::<f64>()
            }
            BlockKind::RhoWithin => {
                self.rho_prior(state.rho_within)
                    + (0..self.units.len()).map(|i| self.re_study(i, state)).sum::<f64>()
            }
            BlockKind::TauBetween => {
                half_normal_logpdf(state.tau_between, priors.tau_scale)
                    + (0..self.cluster_names.len())
                        .map(|c| self.re_cluster(c, state))
                        .sum::<f64>()
            }
            BlockKind::RhoBetween => {
                self.rho_prior(state.rho_between)
                    + (0..self.cluster_names.len())
                        .map(|c| self.re_cluster(c, state))
                        .sum::<f64>()
            }
            BlockKind::ClusterCoef(c) => {
                let mut lp = self.re_cluster(c, state);
                for i in 0..self.units.len() {
                    if self.units[i].cluster == c {
                        lp += self.re_study(i, state);
                    }
                }
                lp
            }
            BlockKind::StudyCoef(i) => self.ll_study(i, state) + self.re_study(i, state),
            BlockKind::Baseline(i) => {
                let mut lp = normal_logpdf(state.u[i], 0.0, priors.baseline_var);
                if self.spec.likelihood == Likelihood::Binomial {
                    lp += self.ll_study_binomial(i, state);
                } else if self.spec.include_zero_dose_block {
                    lp += self.ref_binomial(i, state);
                }
                if self.spec.include_zero_dose_block {
                    lp += self.zd_pool_term(i, state);
                }
                lp
            }
            BlockKind::ZeroDoseMean => {
                normal_logpdf(state.r0, 0.0, priors.baseline_var)
                    + (0..self.units.len())
                        .map(|i| self.zd_pool_term(i, state))
                        .sum::<f64>()
            }
            BlockKind::ZeroDoseSd => {
                half_normal_logpdf(state.sigma0, priors.sigma0_scale)
                    + (0..self.units.len())
                        .map(|i| self.zd_pool_term(i, state))
                        .sum::<f64>()
            }
            BlockKind::CoefShift(k) => {
                let mut lp = normal_logpdf(state.b[k], priors.coef_mean, priors.coef_var);
                for i in 0..self.units.len() {
                    lp += self.ll_study(i, state) + self.re_study(i, state);
                }
                if self.spec.clustered {
                    for c in 0..self.cluster_names.len() {
                        lp += self.re_cluster(c, state);
                    }
                }
                lp
            }
            BlockKind::HetScale(HetLevel::Study) => {
                let tau = if self.spec.clustered { state.tau_within } else { state.tau };
                let mut lp = half_normal_logpdf(tau, priors.tau_scale);
                for i in 0..self.units.len() {
                    lp += self.ll_study(i, state) + self.re_study(i, state);
                }
                lp
            }
            BlockKind::HetScale(HetLevel::Between) => {
                let mut lp = half_normal_logpdf(state.tau_between, priors.tau_scale);
                for c in 0..self.cluster_names.len() {
                    lp += self.re_cluster(c, state);
                }
                // moving the cluster means moves the within-level densities too
                for i in 0..self.units.len() {
                    lp += self.re_study(i, state);
                }
                lp
            }
        }
    }

    pub fn block_values(&self, block: &Block, state: &ParameterState, out: &mut Vec<f64>) {
        out.clear();
        match block.kind {
            BlockKind::MeanCoef => out.extend_from_slice(&state.b),
            BlockKind::Tau => out.push(state.tau),
            BlockKind::Rho => out.push(state.rho),
            BlockKind::TauWithin => out.push(state.tau_within),
            BlockKind::TauBetween => out.push(state.tau_between),
            BlockKind::RhoWithin => out.push(state.rho_within),
            BlockKind::RhoBetween => out.push(state.rho_between),
            BlockKind::ClusterCoef(c) => out.extend_from_slice(&state.b_cluster[c]),
            BlockKind::StudyCoef(i) => out.extend_from_slice(&state.beta[i]),
            BlockKind::Baseline(i) => out.push(state.u[i]),
            BlockKind::ZeroDoseMean => out.push(state.r0),
            BlockKind::ZeroDoseSd => out.push(state.sigma0),
            BlockKind::CoefShift(k) => {
                out.push(state.b[k]);
                for beta in &state.beta {
                    out.push(beta[k]);
                }
                if self.spec.clustered {
                    for bc in &state.b_cluster {
                        out.push(bc[k]);
                    }
                }
            }
            BlockKind::HetScale(HetLevel::Study) => {
                out.push(if self.spec.clustered { state.tau_within } else { state.tau });
                for beta in &state.beta {
                    out.extend_from_slice(beta);
                }
            }
            BlockKind::HetScale(HetLevel::Between) => {
                out.push(state.tau_between);
                for bc in &state.b_cluster {
                    out.extend_from_slice(bc);
                }
            }
        }
    }

    pub fn set_block(&self, block: &Block, state: &mut ParameterState, vals: &[f64]) {
        debug_assert_eq!(vals.len(), block.dim);
        match block.kind {
            BlockKind::MeanCoef => state.b.copy_from_slice(vals),
            BlockKind::Tau => state.tau = vals[0],
            BlockKind::Rho => state.rho = vals[0],
            BlockKind::TauWithin => state.tau_within = vals[0],
            BlockKind::TauBetween => state.tau_between = vals[0],
            BlockKind::RhoWithin => state.rho_within = vals[0],
            BlockKind::RhoBetween => state.rho_between = vals[0],
            BlockKind::ClusterCoef(c) => state.b_cluster[c].copy_from_slice(vals),
            BlockKind::StudyCoef(i) => state.beta[i].copy_from_slice(vals),
            BlockKind::Baseline(i) => state.u[i] = vals[0],
            BlockKind::ZeroDoseMean => state.r0 = vals[0],
            BlockKind::ZeroDoseSd => state.sigma0 = vals[0],
            BlockKind::CoefShift(k) => {
                state.b[k] = vals[0];
                let ns = state.beta.len();
                for (i, beta) in state.beta.iter_mut().enumerate() {
                    beta[k] = vals[1 + i];
                }
                if self.spec.clustered {
                    for (c, bc) in state.b_cluster.iter_mut().enumerate() {
                        bc[k] = vals[1 + ns + c];
                    }
                }
            }
            BlockKind::HetScale(HetLevel::Study) => {
                if self.spec.clustered {
                    state.tau_within = vals[0];
                } else {
                    state.tau = vals[0];
                }
                let p = self.p;
                for (i, beta) in state.beta.iter_mut().enumerate() {
                    beta.copy_from_slice(&vals[1 + i * p..1 + (i + 1) * p]);
                }
            }
            BlockKind::HetScale(HetLevel::Between) => {
                state.tau_between = vals[0];
                let p = self.p;
                for (c, bc) in state.b_cluster.iter_mut().enumerate() {
                    bc.copy_from_slice(&vals[1 + c * p..1 + (c + 1) * p]);
                }
            }
        }
    }

    /// Anchor values for [`ProposalStyle::ScaleWithAnchors`] blocks, aligned
    /// with [`Model::block_values`]: the scale's own slot is unused, each
    /// deviation contracts toward its current mean.
    pub fn block_anchors(&self, block: &Block, state: &ParameterState, out: &mut Vec<f64>) {
        out.clear();
        match block.kind {
            BlockKind::HetScale(HetLevel::Study) => {
                out.push(0.0);
                for i in 0..state.beta.len() {
                    out.extend_from_slice(self.coef_mean_of(i, state));
                }
            }
            BlockKind::HetScale(HetLevel::Between) => {
                out.push(0.0);
                for _ in 0..state.b_cluster.len() {
                    out.extend_from_slice(&state.b);
                }
            }
            _ => out.resize(block.dim, 0.0),
        }
    }

    /// Writes the state into `out` in parameter-name order. Composite blocks
    /// (translations and scale moves) alias parameters already covered and
    /// are skipped.
    pub fn flatten(&self, state: &ParameterState, out: &mut Vec<f64>) {
        let mut buf = Vec::with_capacity(2);
        for block in &self.blocks {
            if matches!(block.kind, BlockKind::CoefShift(_) | BlockKind::HetScale(_)) {
                continue;
            }
            self.block_values(block, state, &mut buf);
            out.extend_from_slice(&buf);
        }
    }

    /// A starting state; `JitteredZero` centers coefficients near zero and
    /// baselines near the empirical link-scale reference rates, which keeps
    /// the log link inside its support.
    pub fn initial_state<R: Rng + ?Sized>(&self, init: InitStrategy, rng: &mut R) -> ParameterState {
        let ns = self.units.len();
        let nc = self.n_clusters();
        let priors = &self.spec.priors;
        let mut state = ParameterState {
            b: vec![0.0; self.p],
            beta: if self.random() { vec![vec![0.0; self.p]; ns] } else { Vec::new() },
            u: if self.has_baselines() { vec![0.0; ns] } else { Vec::new() },
            b_cluster: vec![vec![0.0; self.p]; nc],
            ..ParameterState::default()
        };
        match init {
            InitStrategy::JitteredZero => {
                let jitter = Normal::new(0.0, 0.05).unwrap();
                for k in 0..self.p {
                    state.b[k] = jitter.sample(rng);
                }
                state.tau = 0.1;
                state.tau_within = 0.1;
                state.tau_between = 0.1;
                for c in 0..nc {
                    for k in 0..self.p {
                        state.b_cluster[c][k] = state.b[k] + jitter.sample(rng);
                    }
                }
                for i in 0..ns {
                    if self.random() {
                        for k in 0..self.p {
                            state.beta[i][k] = state.b[k] + 0.2 * jitter.sample(rng);
                        }
                    }
                }
                if self.has_baselines() {
                    let mut acc = 0.0;
                    for i in 0..ns {
                        let p0 = self.units[i].counts.as_ref().map_or(0.5, |c| c.p0_hat);
                        state.u[i] = self.spec.link.apply(p0) + 0.1 * jitter.sample(rng);
                        acc += state.u[i];
                    }
                    if self.spec.include_zero_dose_block {
                        state.r0 = acc / ns.max(1) as f64 + jitter.sample(rng);
                        state.sigma0 = 0.1;
                    }
                }
            }
            InitStrategy::PriorDraw => {
                let coef = Normal::new(priors.coef_mean, priors.coef_var.sqrt()).unwrap();
                let base = Normal::new(0.0, priors.baseline_var.sqrt()).unwrap();
                let half = Normal::new(0.0, priors.tau_scale).unwrap();
                let (lo, hi) = priors.rho_bounds;
                let unif = Uniform::new(lo, hi);
                for k in 0..self.p {
                    state.b[k] = coef.sample(rng);
                }
                state.tau = half.sample(rng).abs();
                state.rho = unif.sample(rng);
                state.tau_within = half.sample(rng).abs();
                state.tau_between = half.sample(rng).abs();
                state.rho_within = unif.sample(rng);
                state.rho_between = unif.sample(rng);
                for c in 0..nc {
                    for k in 0..self.p {
                        state.b_cluster[c][k] = state.b[k]
                            + state.tau_between * Normal::new(0.0, 1.0).unwrap().sample(rng);
                    }
                }
                for i in 0..ns {
                    if self.random() {
                        let (tau, _) = self.within_scale(&state);
                        let mean = if self.spec.clustered {
                            state.b_cluster[self.units[i].cluster].clone()
                        } else {
                            state.b.clone()
                        };
                        for (bk, mk) in state.beta[i].iter_mut().zip(&mean) {
                            *bk = mk + tau * Normal::new(0.0, 1.0).unwrap().sample(rng);
                        }
                    }
                }
                if self.has_baselines() {
                    for i in 0..ns {
                        state.u[i] = base.sample(rng);
                    }
                    if self.spec.include_zero_dose_block {
                        state.r0 = base.sample(rng);
                        state.sigma0 =
                            Normal::new(0.0, priors.sigma0_scale).unwrap().sample(rng).abs();
                    }
                }
            }
        }
        state
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// δ_ij: dot product of a coefficient vector with the transform contrast.
pub fn delta(beta: &[f64], x: f64, x0: f64, transform: &Transform) -> Result<f64> {
    if beta.len() != transform.p() {
        return Err(Error::Dimension(format!(
            "coefficient vector has length {}, transform expects {}",
            beta.len(),
            transform.p()
        )));
    }
    Ok(dot(beta, &transform.contrast(x, x0)))
}

/// Absolute response at a dose: λ⁻¹(B·{f(dose) − f(0)} + R0) for one posterior
/// draw. `Ok(None)` marks a rejected draw (log link leaving the probability
/// scale); rejections are counted by callers, never clamped.
pub fn absolute_response(
    b: &[f64],
    r0: f64,
    dose: f64,
    transform: &Transform,
    link: Link,
) -> Result<Option<f64>> {
    let eta = delta(b, dose, 0.0, transform)? + r0;
    Ok(link.inverse(eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, Dataset, StudyRecord};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn study(id: &str, cluster: Option<&str>, arms: &[(f64, u64, u64)]) -> StudyRecord {
        StudyRecord::new(
            id,
            cluster.map(String::from),
            arms.iter().map(|&(d, r, n)| Arm::new(d, r, n).unwrap()).collect(),
        )
        .unwrap()
    }

    fn two_arm_dataset() -> Dataset {
        Dataset::from_studies(
            vec![study("s1", None, &[(0.0, 10, 100), (10.0, 20, 100)])],
            EffectMeasure::LogOr,
        )
        .unwrap()
    }

    fn state_for(model: &Model) -> ParameterState {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        model.initial_state(InitStrategy::JitteredZero, &mut rng)
    }

    #[test]
    fn delta_examples() {
        let t = Transform::rcs3([1.0, 5.0, 9.0]).unwrap();
        assert_relative_eq!(delta(&[0.2, -0.2], 5.0, 1.0, &t).unwrap(), 0.6, epsilon = 1e-12);
        assert_relative_eq!(delta(&[0.3, 0.7], 4.0, 4.0, &t).unwrap(), 0.0);
        let lin = Transform::linear();
        assert_relative_eq!(delta(&[0.04], 10.0, 0.0, &lin).unwrap(), 0.4, epsilon = 1e-12);
        assert!(delta(&[0.1], 5.0, 1.0, &t).is_err());
    }

    #[test]
    fn binomial_loglik_hand_value() {
        // single study, u = logit(0.5), delta forced to 0 via zero coefficients:
        // both arms share p = 0.5
        let ds = Dataset::from_studies(
            vec![study("s1", None, &[(0.0, 5, 10), (10.0, 5, 10)])],
            EffectMeasure::LogOr,
        )
        .unwrap();
        let mut spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.b = vec![0.0];
        state.u = vec![0.0];
        // each arm: log C(10,5) + 10 log .5 = -1.4020427180880324
        assert_relative_eq!(
            model.loglik_binomial(&state),
            2.0 * -1.4020427180880324,
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_link_rejects_probability_above_one() {
        let ds = two_arm_dataset();
        let mut spec = ModelSpec::binomial(EffectMeasure::LogRr, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.u = vec![(0.5f64).ln()];
        state.b = vec![0.1]; // delta = 1.0 at dose 10 -> p = 0.5 e > 1
        assert_eq!(model.loglik_binomial(&state), f64::NEG_INFINITY);
        assert_eq!(model.log_posterior(&state), f64::NEG_INFINITY);
    }

    #[test]
    fn normal_loglik_hand_values() {
        let t1 = EffectTable::new(
            "a",
            None,
            vec![0.0],
            DMatrix::from_element(1, 1, 1.0),
            vec![1.0],
            0.0,
        )
        .unwrap();
        let ds = Dataset::from_tables(vec![t1], EffectMeasure::GenericNormal).unwrap();
        let mut spec = ModelSpec::normal(EffectMeasure::GenericNormal, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.b = vec![0.0];
        assert_relative_eq!(model.loglik_normal(&state), -0.9189385332046727, epsilon = 1e-12);

        let t2 = EffectTable::new(
            "b",
            None,
            vec![1.0, 1.0],
            DMatrix::identity(2, 2),
            vec![1.0, 2.0],
            0.0,
        )
        .unwrap();
        let ds = Dataset::from_tables(vec![t2], EffectMeasure::GenericNormal).unwrap();
        let mut spec = ModelSpec::normal(EffectMeasure::GenericNormal, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.b = vec![0.0];
        assert_relative_eq!(model.loglik_normal(&state), -2.8378770664093453, epsilon = 1e-12);

        // density maximum over the mean when Y = Delta: one contrast at dose 1
        let t3 = EffectTable::new(
            "c",
            None,
            vec![0.7],
            DMatrix::from_element(1, 1, 0.3),
            vec![1.0],
            0.0,
        )
        .unwrap();
        let ds = Dataset::from_tables(vec![t3], EffectMeasure::GenericNormal).unwrap();
        let mut spec = ModelSpec::normal(EffectMeasure::GenericNormal, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.b = vec![0.7];
        let at_mean = model.loglik_normal(&state);
        for shift in [-0.3, 0.2, 0.8] {
            state.b = vec![0.7 + shift];
            assert!(model.loglik_normal(&state) < at_mean);
        }
    }

    #[test]
    fn random_effects_hand_value() {
        let ds = two_arm_dataset();
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::rcs3([1.0, 5.0, 9.0]).unwrap());
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.b = vec![0.3, -0.1];
        state.beta = vec![vec![0.3, -0.1]];
        state.tau = 1.0;
        state.rho = 0.0;
        assert_relative_eq!(
            model.log_random_effects(&state),
            -1.8378770664093453,
            epsilon = 1e-12
        );
        // tau = 0 under random coefficients is a density error, encoded as -inf
        state.tau = 0.0;
        assert_eq!(model.log_random_effects(&state), f64::NEG_INFINITY);
    }

    #[test]
    fn common_model_has_no_random_effect_term() {
        let ds = two_arm_dataset();
        let mut spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        let model = Model::new(spec, &ds).unwrap();
        let state = state_for(&model);
        assert_eq!(model.log_random_effects(&state), 0.0);
        assert!(model.blocks().iter().all(|b| b.kind != BlockKind::Tau));
    }

    #[test]
    fn prior_hand_values() {
        let ds = two_arm_dataset();
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.b = vec![0.0];
        state.tau = 0.0;
        state.u = vec![0.0];
        // p = 1: no rho in the layout; prior = B + tau + u
        let expect = -4.372816172695741 + -0.22579135264472738 + -4.372816172695741;
        assert_relative_eq!(model.log_prior(&state), expect, epsilon = 1e-12);
    }

    #[test]
    fn rho_prior_value() {
        let ds = two_arm_dataset();
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::rcs3([1.0, 5.0, 9.0]).unwrap());
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.rho = 0.0;
        let at_zero = model.log_prior(&state);
        state.rho = 0.5;
        // uniform: same density anywhere inside the support
        assert_relative_eq!(model.log_prior(&state), at_zero, epsilon = 1e-12);
        state.rho = 1.0;
        assert_eq!(model.log_prior(&state), f64::NEG_INFINITY);
        // contribution is log(1/2)
        state.rho = 0.0;
        state.tau = 0.2;
        let full = model.log_prior(&state);
        let b_term: f64 = state.b.iter().map(|&b| normal_logpdf(b, 0.0, 1e3)).sum();
        let u_term: f64 = state.u.iter().map(|&u| normal_logpdf(u, 0.0, 1e3)).sum();
        let tau_term = half_normal_logpdf(0.2, 1.0);
        #[allow(clippy::approx_constant)] // frozen oracle value: ln(1/2)
        let expected_rho_contribution = -0.6931471805599453;
        assert_relative_eq!(
            full - b_term - u_term - tau_term,
            expected_rho_contribution,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_dataset_posterior_is_prior() {
        let ds = Dataset::empty(EffectMeasure::LogOr);
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::rcs3([1.0, 5.0, 9.0]).unwrap());
        let model = Model::new(spec, &ds).unwrap();
        let state = state_for(&model);
        assert_relative_eq!(model.log_posterior(&state), model.log_prior(&state));
    }

    #[test]
    fn posterior_finite_for_prior_draws_logit() {
        let ds = Dataset::from_studies(
            vec![
                study("s1", None, &[(0.0, 10, 100), (5.0, 20, 100), (9.0, 30, 100)]),
                study("s2", None, &[(0.0, 3, 50), (7.0, 9, 60)]),
            ],
            EffectMeasure::LogOr,
        )
        .unwrap();
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::rcs3([1.0, 5.0, 9.0]).unwrap());
        let model = Model::new(spec, &ds).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let state = model.initial_state(InitStrategy::PriorDraw, &mut rng);
            let lp = model.log_posterior(&state);
            assert!(lp.is_finite(), "logit-link posterior must be finite, got {lp}");
        }
    }

    #[test]
    fn posterior_invariant_under_study_relabeling() {
        let s1 = study("s1", None, &[(0.0, 10, 100), (5.0, 20, 100)]);
        let s2 = study("s2", None, &[(0.0, 8, 90), (7.0, 25, 110)]);
        let ds_a =
            Dataset::from_studies(vec![s1.clone(), s2.clone()], EffectMeasure::LogOr).unwrap();
        let ds_b = Dataset::from_studies(vec![s2, s1], EffectMeasure::LogOr).unwrap();
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        let ma = Model::new(spec.clone(), &ds_a).unwrap();
        let mb = Model::new(spec, &ds_b).unwrap();
        let mut state_a = state_for(&ma);
        state_a.b = vec![0.02];
        state_a.beta = vec![vec![0.05], vec![-0.01]];
        state_a.u = vec![-2.0, -1.5];
        state_a.tau = 0.3;
        let mut state_b = state_a.clone();
        state_b.beta.swap(0, 1);
        state_b.u.swap(0, 1);
        assert_relative_eq!(
            ma.log_posterior(&state_a),
            mb.log_posterior(&state_b),
            epsilon = 1e-12
        );
    }

    #[test]
    fn wls_mode_matches_gls_under_flat_prior() {
        // one study, one contrast, common coefficient, normal likelihood:
        // with coef_var = 1e6 the posterior mode of B is the weighted
        // least-squares solution y*x/(x^2) shrunk by the (negligible) prior
        let y = 0.8;
        let s = 0.04;
        let x = 5.0;
        let table = EffectTable::new(
            "s",
            None,
            vec![y],
            DMatrix::from_element(1, 1, s),
            vec![x],
            0.0,
        )
        .unwrap();
        let ds = Dataset::from_tables(vec![table], EffectMeasure::GenericNormal).unwrap();
        let mut spec = ModelSpec::normal(EffectMeasure::GenericNormal, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        spec.priors.coef_var = 1e6;
        let model = Model::new(spec, &ds).unwrap();
        // closed form: B* = (x y / s) / (x^2/s + 1/v)
        let v = 1e6;
        let closed = (x * y / s) / (x * x / s + 1.0 / v);
        let mut state = ParameterState {
            b: vec![closed],
            ..ParameterState::default()
        };
        let at_mode = model.log_posterior(&state);
        for eps in [-1e-4, 1e-4] {
            state.b = vec![closed + eps];
            assert!(model.log_posterior(&state) < at_mode);
        }
        // and agrees with the unshrunk GLS estimate to prior-order accuracy
        assert_relative_eq!(closed, y / x, epsilon = 1e-4);
    }

    #[test]
    fn clustered_single_cluster_degenerates_to_unclustered() {
        // with C = 1 and tau_between -> 0, the clustered log posterior differs
        // from the unclustered one by a constant in the shared parameters
        let ds = Dataset::from_studies(
            vec![
                study("s1", Some("c1"), &[(0.0, 10, 100), (5.0, 20, 100)]),
                study("s2", Some("c1"), &[(0.0, 8, 90), (7.0, 25, 110)]),
            ],
            EffectMeasure::LogOr,
        )
        .unwrap();
        let t = Transform::linear();
        let mut clustered_spec = ModelSpec::binomial(EffectMeasure::LogOr, t.clone());
        clustered_spec.clustered = true;
        let clustered = Model::new(clustered_spec, &ds).unwrap();
        let plain = Model::new(ModelSpec::binomial(EffectMeasure::LogOr, t), &ds).unwrap();

        let tau_b = 1e-9;
        let mut diffs = Vec::new();
        for (b, tau) in [(0.01, 0.2), (0.05, 0.2), (-0.03, 0.2), (0.02, 0.35)] {
            let beta = vec![vec![b + 0.01], vec![b - 0.02]];
            let u = vec![-2.0, -1.8];
            let cl_state = ParameterState {
                b: vec![b],
                b_cluster: vec![vec![b]],
                beta: beta.clone(),
                u: u.clone(),
                tau_within: tau,
                tau_between: tau_b,
                ..ParameterState::default()
            };
            let un_state = ParameterState {
                b: vec![b],
                beta,
                u,
                tau,
                ..ParameterState::default()
            };
            diffs.push(clustered.log_posterior(&cl_state) - plain.log_posterior(&un_state));
        }
        for w in diffs.windows(2) {
            assert_relative_eq!(w[0], w[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn block_target_deltas_match_full_posterior() {
        // the sampler relies on block-local targets; their deltas must equal
        // full log-posterior deltas exactly (up to float noise)
        let ds = Dataset::from_studies(
            vec![
                study("s1", Some("a"), &[(0.0, 10, 100), (5.0, 20, 100), (9.0, 25, 100)]),
                study("s2", Some("a"), &[(0.0, 8, 90), (7.0, 25, 110)]),
                study("s3", Some("b"), &[(0.0, 12, 120), (4.0, 20, 100)]),
            ],
            EffectMeasure::LogOr,
        )
        .unwrap();
        let mut spec =
            ModelSpec::binomial(EffectMeasure::LogOr, Transform::rcs3([1.0, 5.0, 9.0]).unwrap());
        spec.clustered = true;
        spec.include_zero_dose_block = true;
        let model = Model::new(spec, &ds).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let state = model.initial_state(InitStrategy::JitteredZero, &mut rng);
        let mut buf = Vec::new();
        for block in model.blocks() {
            let mut moved = state.clone();
            model.block_values(block, &state, &mut buf);
            let perturbed: Vec<f64> = buf.iter().map(|v| v + 0.037).collect();
            model.set_block(block, &mut moved, &perturbed);
            let d_full = model.log_posterior(&moved) - model.log_posterior(&state);
            let d_block = model.block_target(block, &moved) - model.block_target(block, &state);
            assert!(
                (d_full - d_block).abs() < 1e-9,
                "block {} delta mismatch: full {d_full} vs local {d_block}",
                block.name
            );
        }
    }

    #[test]
    fn zero_dose_block_standalone_terms() {
        let ds = Dataset::from_studies(
            vec![study("s1", None, &[(0.0, 38, 100), (10.0, 50, 100)])],
            EffectMeasure::LogOr,
        )
        .unwrap();
        let mut spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        spec.include_zero_dose_block = true;
        let model = Model::new(spec, &ds).unwrap();
        let mut state = state_for(&model);
        state.u = vec![0.0];
        state.r0 = 0.0;
        state.sigma0 = 1.0;
        let expect = crate::stats::binomial_logpmf(38.0, 100.0, 0.5, ln_choose(100, 38))
            + normal_logpdf(0.0, 0.0, 1.0);
        assert_relative_eq!(model.log_zero_dose_block(&state), expect, epsilon = 1e-12);
    }

    #[test]
    fn absolute_response_examples() {
        let t = Transform::rcs3([10.0, 20.0, 50.0]).unwrap();
        let r0 = crate::stats::logit(0.376);
        // dose 0: exactly the inverse-linked baseline
        let p = absolute_response(&[0.0, 0.0], r0, 0.0, &t, Link::Logit).unwrap().unwrap();
        assert_relative_eq!(p, 0.376, epsilon = 1e-12);
        // zero coefficients: flat at 0.376 for any dose
        for dose in [5.0, 40.0, 80.0] {
            let p = absolute_response(&[0.0, 0.0], r0, dose, &t, Link::Logit).unwrap().unwrap();
            assert_relative_eq!(p, 0.376, epsilon = 1e-12);
        }
        // log link rejection is reported, not clamped
        let rej = absolute_response(&[1.0], 0.0, 10.0, &Transform::linear(), Link::Log).unwrap();
        assert!(rej.is_none());
    }

    #[test]
    fn config_errors() {
        let ds = two_arm_dataset();
        let mut spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        spec.clustered = true; // no cluster labels in the data
        assert!(Model::new(spec, &ds).is_err());

        let mut spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        spec.coefficients = CoefficientModel::Common;
        spec.clustered = true;
        assert!(Model::new(spec, &ds).is_err());

        let single = Dataset::from_studies(
            vec![study("s", None, &[(0.0, 10, 100)])],
            EffectMeasure::LogOr,
        )
        .unwrap();
        let spec = ModelSpec::binomial(EffectMeasure::LogOr, Transform::linear());
        assert!(matches!(
            Model::new(spec.clone(), &single),
            Err(Error::InsufficientArms { .. })
        ));
        // allowed when only the zero-dose block consumes it
        let mut zd = spec;
        zd.include_zero_dose_block = true;
        assert!(Model::new(zd, &single).is_ok());
    }
}
