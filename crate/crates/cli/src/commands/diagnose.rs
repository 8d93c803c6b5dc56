use crate::manifest::{write_json, ManifestBuilder};
use crate::CommonArgs;
use anyhow::{Context, Result};
use clap::Args;
use drma_core::diagnostics::{diagnose, export_trace_histogram};
use drma_core::sampler::PosteriorDraws;
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

#[derive(Args, Clone)]
pub struct DiagnoseArgs {
    /// Draws CSV written by `drma fit` (chain,iteration,parameter,value)
    pub draws: PathBuf,
    #[arg(long, default_value_t = 1.05)]
    pub rhat_threshold: f64,
    #[arg(long, default_value_t = 3.0)]
    pub geweke_threshold: f64,
    /// Histogram bins per parameter
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: DiagnoseArgs) -> Result<()> {
    let file = std::fs::File::open(&args.draws)
        .with_context(|| format!("reading {}", args.draws.display()))?;
    let draws = PosteriorDraws::read_csv(std::io::BufReader::new(file))?;

    let report = diagnose(&draws, args.rhat_threshold, args.geweke_threshold)?;
    let out = &args.common.out;
    write_json(&out.join("report.json"), &report)?;

    // plot-ready exports: every parameter into one long trace table and one
    // histogram table
    let mut traces = csv::Writer::from_writer(std::fs::File::create(out.join("traces.csv"))?);
    traces.write_record(["parameter", "chain", "iteration", "value"])?;
    let mut hist = std::fs::File::create(out.join("histograms.csv"))?;
    writeln!(hist, "parameter,bin_lo,bin_hi,count")?;
    for name in draws.names() {
        let export = export_trace_histogram(&draws, name, args.bins)?;
        for row in &export.rows {
            traces.write_record([
                name.clone(),
                row.chain.to_string(),
                row.iteration.to_string(),
                row.value.to_string(),
            ])?;
        }
        for b in &export.histogram {
            writeln!(hist, "{},{},{},{}", name, b.lo, b.hi, b.count)?;
        }
    }
    traces.flush()?;

    let mut manifest = ManifestBuilder::new("diagnose", args.common.seed);
    manifest.input(&args.draws)?;
    manifest.write(
        out,
        json!({
            "draws": args.draws,
            "rhat_threshold": args.rhat_threshold,
            "geweke_threshold": args.geweke_threshold,
            "bins": args.bins,
        }),
    )?;

    for p in &report.parameters {
        println!(
            "{}: rhat {:.4} ess {:.0} {}",
            p.parameter,
            p.gelman_rubin,
            p.ess,
            if p.pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{}; report written to {}",
        if report.all_pass { "all parameters pass" } else { "some parameters FAIL" },
        out.display()
    );
    Ok(())
}
