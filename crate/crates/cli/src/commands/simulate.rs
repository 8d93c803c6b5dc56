use super::{MeasureArg, MethodArg, SamplerArgs};
use crate::manifest::{write_json, ManifestBuilder};
use crate::CommonArgs;
use anyhow::{bail, Context, Result};
use clap::Args;
use drma_core::data::EffectMeasure;
use drma_core::simulation::{run_study, table2_suite, Method, MetricsReport, Scenario, StudyConfig};
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

#[derive(Args, Clone)]
pub struct SimulateArgs {
    /// Built-in scenario suite
    #[arg(long, conflicts_with = "scenarios", value_parser = ["table2"])]
    pub suite: Option<String>,
    /// Scenario suite JSON file (array of scenario objects)
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// Effect measure for the built-in suite
    #[arg(long, value_enum, default_value_t = MeasureArg::LogOr)]
    pub measure: MeasureArg,
    /// Replications per scenario (overrides the scenario files)
    #[arg(long)]
    pub reps: Option<usize>,
    /// Methods to fit
    #[arg(long, value_enum, value_delimiter = ',', num_args = 1,
          default_value = "binomial-bayes,normal-bayes,onestage")]
    pub methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 1.05)]
    pub rhat_threshold: f64,
    /// Continue from this run's checkpoint.jsonl instead of starting fresh
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: SimulateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("simulate", args.common.seed);
    let scenarios: Vec<Scenario> = match (&args.suite, &args.scenarios) {
        (Some(_), _) => table2_suite(EffectMeasure::from(args.measure)),
        (None, Some(path)) => {
            manifest.input(path)?;
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("schema error in {}", path.display()))?
        }
        (None, None) => bail!("give either --suite table2 or --scenarios FILE"),
    };
    if scenarios.is_empty() {
        bail!("scenario suite is empty");
    }

    let out = &args.common.out;
    let config = StudyConfig {
        methods: args.methods.iter().map(|&m| Method::from(m)).collect(),
        replications: args.reps,
        sampler: args.sampler.to_config(args.common.seed),
        seed: args.common.seed,
        rhat_threshold: args.rhat_threshold,
        checkpoint: Some(out.join("checkpoint.jsonl")),
        resume: args.resume,
    };
    let report = run_study(&scenarios, &config)?;

    write_json(&out.join("metrics.json"), &report)?;
    write_metrics_csv(out, &report)?;
    manifest.write(
        out,
        json!({
            "scenarios": scenarios,
            "methods": args.methods.iter().map(|m| m.label()).collect::<Vec<_>>(),
            "replications": args.reps,
            "sampler": config.sampler,
            "rhat_threshold": args.rhat_threshold,
            "resume": args.resume,
        }),
    )?;
    println!(
        "simulation report ({} rows) written to {}",
        report.rows.len(),
        out.display()
    );
    Ok(())
}

fn write_metrics_csv(out: &std::path::Path, report: &MetricsReport) -> Result<()> {
    let mut file = std::fs::File::create(out.join("metrics.csv"))?;
    writeln!(
        file,
        "scenario,method,parameter,truth,n,n_failed,bias,mse,coverage,power,se2mean,\
         mcse_bias,mcse_mse,mcse_coverage,mcse_power,convergence_rate"
    )?;
    for r in &report.rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.method.label(),
            r.parameter,
            r.truth,
            r.metrics.n,
            r.n_failed,
            r.metrics.bias,
            r.metrics.mse,
            r.metrics.coverage,
            r.metrics.power,
            r.metrics.se2mean,
            r.metrics.mcse_bias,
            r.metrics.mcse_mse,
            r.metrics.mcse_coverage,
            r.metrics.mcse_power,
            r.convergence_rate.map_or(String::new(), |c| c.to_string()),
        )?;
    }
    Ok(())
}
