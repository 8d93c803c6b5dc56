pub mod curve;
pub mod diagnose;
pub mod fit;
pub mod simulate;
pub mod validate;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use drma_core::data::{DataFormat, Dataset, EffectMeasure};
use drma_core::model::InitStrategy;
use drma_core::sampler::SamplerConfig;
use drma_core::simulation::Method;
use drma_core::splines::{self, Transform};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    #[value(name = "logOR", alias = "logor")]
    LogOr,
    #[value(name = "logRR", alias = "logrr")]
    LogRr,
    #[value(name = "generic-normal", alias = "normal")]
    GenericNormal,
}

impl From<MeasureArg> for EffectMeasure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::LogOr => EffectMeasure::LogOr,
            MeasureArg::LogRr => EffectMeasure::LogRr,
            MeasureArg::GenericNormal => EffectMeasure::GenericNormal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    ArmLevel,
    ContrastLevel,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::ArmLevel => DataFormat::ArmLevel,
            FormatArg::ContrastLevel => DataFormat::ContrastLevel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    BinomialBayes,
    NormalBayes,
    Onestage,
}

impl MethodArg {
    pub fn label(self) -> &'static str {
        match self {
            MethodArg::BinomialBayes => "binomial-bayes",
            MethodArg::NormalBayes => "normal-bayes",
            MethodArg::Onestage => "onestage",
        }
    }
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::BinomialBayes => Method::BinomialBayes,
            MethodArg::NormalBayes => Method::NormalBayes,
            MethodArg::Onestage => Method::Onestage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformArg {
    Linear,
    Quadratic,
    Rcs3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    JitteredZero,
    PriorDraw,
}

impl From<InitArg> for InitStrategy {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::JitteredZero => InitStrategy::JitteredZero,
            InitArg::PriorDraw => InitStrategy::PriorDraw,
        }
    }
}

/// MCMC settings shared by `fit` and `simulate`.
#[derive(Args, Clone, Debug)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 3)]
    pub chains: usize,
    #[arg(long, default_value_t = 100_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 10_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Iterations of proposal-scale adaptation (defaults to the burn-in)
    #[arg(long)]
    pub adapt_window: Option<usize>,
    #[arg(long, value_enum, default_value_t = InitArg::JitteredZero)]
    pub init: InitArg,
}

impl SamplerArgs {
    pub fn to_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed,
            adapt_window: self.adapt_window.unwrap_or(self.burn_in),
            init: self.init.into(),
        }
    }
}

/// Resolves the dose transform from flags: explicit knots win, otherwise
/// percentile knots are placed on the dataset's pooled doses.
pub fn resolve_transform(
    kind: TransformArg,
    knots: &Option<Vec<f64>>,
    percentiles: &[f64],
    dataset: &Dataset,
) -> Result<Transform> {
    match kind {
        TransformArg::Linear => Ok(Transform::linear()),
        TransformArg::Quadratic => Ok(Transform::quadratic()),
        TransformArg::Rcs3 => {
            if let Some(k) = knots {
                if k.len() != 3 {
                    bail!("--knots needs exactly 3 values, got {}", k.len());
                }
                Ok(Transform::rcs3([k[0], k[1], k[2]])?)
            } else {
                if percentiles.len() != 3 {
                    bail!(
                        "--knot-percentiles needs exactly 3 values, got {}",
                        percentiles.len()
                    );
                }
                Ok(splines::rcs3_from_doses(&dataset.pooled_doses(), percentiles)?)
            }
        }
    }
}

/// One row of a fit summary; `sd` for posterior summaries, `se` for the
/// frequentist fit, interval bounds under the same keys for both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(rename = "q2.5", skip_serializing_if = "Option::is_none")]
    pub q2_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    #[serde(rename = "q97.5", skip_serializing_if = "Option::is_none")]
    pub q97_5: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema_version: u32,
    pub method: String,
    pub measure: String,
    pub n_studies: usize,
    pub transform: Transform,
    pub parameters: Vec<ParamEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rhat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_boundary: Option<bool>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

pub fn load_dataset_checked(
    path: &Path,
    format: FormatArg,
    measure: MeasureArg,
) -> Result<Dataset> {
    drma_core::data::load_dataset(path, format.into(), measure.into())
        .with_context(|| format!("loading {}", path.display()))
}
