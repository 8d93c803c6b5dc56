use super::{
    load_dataset_checked, resolve_transform, FitSummary, FormatArg, MeasureArg, MethodArg,
    ParamEntry, SamplerArgs, TransformArg,
};
use crate::manifest::{write_json, ManifestBuilder};
use crate::CommonArgs;
use anyhow::{bail, Context, Result};
use clap::Args;
use drma_core::diagnostics::{diagnose, DEFAULT_GEWEKE_THRESHOLD};
use drma_core::model::{
    CoefficientCorrelation, CoefficientModel, Likelihood, Link, ModelSpec, PriorSpec,
};
use drma_core::onestage::{confint_wald, fit_onestage, OneStageOptions};
use drma_core::sampler::{run as run_sampler, PosteriorDraws};
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

#[derive(Args, Clone)]
pub struct FitArgs {
    /// Dataset CSV
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::ArmLevel)]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value_t = MeasureArg::LogOr)]
    pub measure: MeasureArg,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = TransformArg::Rcs3)]
    pub transform: TransformArg,
    /// Explicit spline knots t1,t2,t3
    #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    pub knots: Option<Vec<f64>>,
    /// Percentiles of the pooled doses used when --knots is absent
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "25,50,75")]
    pub knot_percentiles: Vec<f64>,
    /// Common instead of random dose-response coefficients
    #[arg(long)]
    pub common_coefficients: bool,
    /// Independent (zero-correlation) coefficient random effects
    #[arg(long)]
    pub independent_coefficients: bool,
    /// Within/between exposure-cluster hierarchy (needs cluster labels)
    #[arg(long)]
    pub clustered: bool,
    /// Pool reference-arm rates into a zero-dose baseline (enables absolute
    /// response curves)
    #[arg(long)]
    pub zero_dose: bool,
    /// Continuity correction added to every cell of studies with zero cells
    #[arg(long, default_value_t = 0.5)]
    pub correction: f64,
    /// Load the model specification from a JSON file instead of flags
    #[arg(long)]
    pub model_json: Option<PathBuf>,
    #[arg(long, default_value_t = 1.05)]
    pub rhat_threshold: f64,
    /// Drop studies with fewer contrasts than coefficients (one-stage only)
    #[arg(long)]
    pub drop_underidentified: bool,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: FitArgs) -> Result<()> {
    let dataset = load_dataset_checked(&args.data, args.format, args.measure)?;
    let out = &args.common.out;
    let mut warnings: Vec<String> = dataset.warnings().to_vec();

    let mut manifest = ManifestBuilder::new("fit", args.common.seed);
    manifest.input(&args.data)?;

    match args.method {
        MethodArg::Onestage => {
            let spec_transform = resolve_transform(
                args.transform,
                &args.knots,
                &args.knot_percentiles,
                &dataset,
            )?;
            let tables = dataset.effect_tables(args.correction)?;
            let options = OneStageOptions {
                drop_underidentified: args.drop_underidentified,
                ..OneStageOptions::default()
            };
            let fit = fit_onestage(&tables, &spec_transform, &options)?;
            if !fit.converged {
                warnings.push("variance optimization did not converge; best-found values reported".into());
            }
            let ci = confint_wald(&fit, 0.95)?;
            let mut parameters = Vec::new();
            for (k, ((b, se), interval)) in
                fit.b_hat.iter().zip(&fit.se).zip(&ci).enumerate()
            {
                parameters.push(ParamEntry {
                    name: format!("B{}", k + 1),
                    mean: *b,
                    sd: None,
                    se: Some(*se),
                    q2_5: Some(interval.0),
                    median: None,
                    q97_5: Some(interval.1),
                });
            }
            for (k, tau) in fit.tau_hat.iter().enumerate() {
                parameters.push(ParamEntry {
                    name: format!("tau{}", k + 1),
                    mean: *tau,
                    sd: None,
                    se: None,
                    q2_5: None,
                    median: None,
                    q97_5: None,
                });
            }
            if let Some(rho) = fit.rho_hat {
                parameters.push(ParamEntry {
                    name: "rho".into(),
                    mean: rho,
                    sd: None,
                    se: None,
                    q2_5: None,
                    median: None,
                    q97_5: None,
                });
            }
            let summary = FitSummary {
                schema_version: 1,
                method: args.method.label().into(),
                measure: format!("{}", dataset.measure()),
                n_studies: fit.n_studies,
                transform: spec_transform.clone(),
                parameters,
                max_rhat: None,
                converged: Some(fit.converged),
                loglik: Some(fit.loglik),
                rho_boundary: Some(fit.rho_boundary),
                seed: args.common.seed,
                warnings: warnings.clone(),
            };
            write_json(&out.join("summary.json"), &summary)?;
            manifest.write(
                out,
                json!({
                    "method": args.method.label(),
                    "data": args.data,
                    "format": format!("{:?}", args.format),
                    "measure": format!("{}", dataset.measure()),
                    "transform": spec_transform,
                    "correction": args.correction,
                    "onestage": options,
                }),
            )?;
        }
        MethodArg::BinomialBayes | MethodArg::NormalBayes => {
            let spec = if let Some(path) = &args.model_json {
                manifest.input(path)?;
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<ModelSpec>(&text)
                    .with_context(|| format!("parsing model spec {}", path.display()))?
            } else {
                let transform = resolve_transform(
                    args.transform,
                    &args.knots,
                    &args.knot_percentiles,
                    &dataset,
                )?;
                ModelSpec {
                    likelihood: match args.method {
                        MethodArg::BinomialBayes => Likelihood::Binomial,
                        _ => Likelihood::Normal,
                    },
                    link: Link::for_measure(dataset.measure()),
                    transform,
                    coefficients: if args.common_coefficients {
                        CoefficientModel::Common
                    } else {
                        CoefficientModel::Random
                    },
                    correlation: if args.independent_coefficients {
                        CoefficientCorrelation::Zero
                    } else {
                        CoefficientCorrelation::Estimated
                    },
                    clustered: args.clustered,
                    include_zero_dose_block: args.zero_dose,
                    priors: PriorSpec::default(),
                    continuity_correction: args.correction,
                }
            };
            if args.clustered && dataset.clusters().is_empty() {
                bail!("--clustered requested but the dataset has no cluster labels");
            }
            let config = args.sampler.to_config(args.common.seed);
            let draws = run_sampler(&spec, &dataset, &config)?;

            let file = std::fs::File::create(out.join("draws.csv"))?;
            draws.write_csv(std::io::BufWriter::new(file))?;

            let report = diagnose(&draws, args.rhat_threshold, DEFAULT_GEWEKE_THRESHOLD)?;
            write_json(&out.join("diagnostics.json"), &report)?;

            write_parameter_csv(out, &draws)?;

            let summaries = draws.summarize()?;
            let headline = [
                "B1", "B2", "tau", "rho", "tau_within", "tau_between", "rho_within",
                "rho_between", "R0", "sigma0",
            ];
            let parameters: Vec<ParamEntry> = summaries
                .iter()
                .filter(|s| headline.contains(&s.name.as_str()))
                .map(|s| ParamEntry {
                    name: s.name.clone(),
                    mean: s.stats.mean,
                    sd: Some(s.stats.sd),
                    se: None,
                    q2_5: Some(s.stats.q2_5),
                    median: Some(s.stats.median),
                    q97_5: Some(s.stats.q97_5),
                })
                .collect();
            let summary = FitSummary {
                schema_version: 1,
                method: args.method.label().into(),
                measure: format!("{}", dataset.measure()),
                n_studies: dataset.n_studies(),
                transform: spec.transform.clone(),
                parameters,
                max_rhat: Some(report.max_rhat()),
                converged: None,
                loglik: None,
                rho_boundary: None,
                seed: args.common.seed,
                warnings: warnings.clone(),
            };
            write_json(&out.join("summary.json"), &summary)?;
            manifest.write(
                out,
                json!({
                    "method": args.method.label(),
                    "data": args.data,
                    "format": format!("{:?}", args.format),
                    "measure": format!("{}", dataset.measure()),
                    "model": spec,
                    "sampler": config,
                    "rhat_threshold": args.rhat_threshold,
                }),
            )?;
            if !report.all_pass {
                eprintln!(
                    "warning: convergence flags failed for {} parameter(s); see diagnostics.json",
                    report.parameters.iter().filter(|p| !p.pass).count()
                );
            }
        }
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("fit written to {}", out.display());
    Ok(())
}

/// Full per-parameter posterior summaries (headline and study-level alike).
fn write_parameter_csv(out: &std::path::Path, draws: &PosteriorDraws) -> Result<()> {
    let mut file = std::fs::File::create(out.join("parameters.csv"))?;
    writeln!(file, "parameter,mean,sd,q2.5,median,q97.5")?;
    let mut wtr = csv::Writer::from_writer(file);
    for s in draws.summarize()? {
        wtr.write_record([
            s.name.clone(),
            s.stats.mean.to_string(),
            s.stats.sd.to_string(),
            s.stats.q2_5.to_string(),
            s.stats.median.to_string(),
            s.stats.q97_5.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
