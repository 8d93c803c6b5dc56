use crate::manifest::ManifestBuilder;
use crate::CommonArgs;
use anyhow::{bail, Context, Result};
use clap::Args;
use drma_core::curve::{curve_table, parse_grid};
use drma_core::model::ModelSpec;
use drma_core::sampler::PosteriorDraws;
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

#[derive(Args, Clone)]
pub struct CurveArgs {
    /// Directory of a completed Bayesian fit (needs manifest.json + draws.csv)
    #[arg(long)]
    pub fit: PathBuf,
    /// Dose grid start:stop:step
    #[arg(long, conflicts_with = "doses", default_value = "1:80:1")]
    pub grid: String,
    /// Explicit comma-separated doses
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub doses: Option<Vec<f64>>,
    /// Require the absolute-response columns (error if the fit has no
    /// zero-dose block)
    #[arg(long)]
    pub absolute: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(args: CurveArgs) -> Result<()> {
    let manifest_path = args.fit.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let fit_manifest: serde_json::Value = serde_json::from_str(&manifest_text)?;
    let model_value = fit_manifest
        .pointer("/config/model")
        .cloned()
        .context("fit manifest has no Bayesian model configuration (one-stage fits have no draws)")?;
    let spec: ModelSpec = serde_json::from_value(model_value)?;

    let draws_path = args.fit.join("draws.csv");
    let file = std::fs::File::open(&draws_path)
        .with_context(|| format!("reading {}", draws_path.display()))?;
    let draws = PosteriorDraws::read_csv(std::io::BufReader::new(file))?;

    let doses = match &args.doses {
        Some(d) => d.clone(),
        None => parse_grid(&args.grid)?,
    };
    if doses.is_empty() {
        bail!("empty dose grid");
    }
    let rows = curve_table(&draws, &spec.transform, spec.link, &doses, args.absolute)?;

    let out = &args.common.out;
    let mut file = std::fs::File::create(out.join("curve.csv"))?;
    writeln!(
        file,
        "dose,rel_mean,rel_lo,rel_hi,abs_mean,abs_lo,abs_hi,abs_rejected"
    )?;
    for r in &rows {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        writeln!(
            file,
            "{},{},{},{},{},{},{},{}",
            r.dose,
            r.rel_mean,
            r.rel_lo,
            r.rel_hi,
            opt(r.abs_mean),
            opt(r.abs_lo),
            opt(r.abs_hi),
            r.abs_rejected
        )?;
    }

    let mut manifest = ManifestBuilder::new("curve", args.common.seed);
    manifest.input(&manifest_path)?;
    manifest.input(&draws_path)?;
    manifest.write(
        out,
        json!({
            "fit": args.fit,
            "doses": doses,
            "absolute": args.absolute,
            "model": spec,
        }),
    )?;
    println!("curve with {} rows written to {}", rows.len(), out.display());
    Ok(())
}
