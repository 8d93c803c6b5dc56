use super::{load_dataset_checked, FormatArg, MeasureArg};
use crate::manifest::{write_json, ManifestBuilder};
use anyhow::Result;
use clap::Args;
use drma_core::data::validate_dataset;
use serde_json::json;
use std::path::PathBuf;

#[derive(Args, Clone)]
pub struct ValidateArgs {
    /// Dataset CSV
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::ArmLevel)]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value_t = MeasureArg::LogOr)]
    pub measure: MeasureArg,
    /// Coefficient count of the intended dose transform
    #[arg(long, default_value_t = 2)]
    pub transform_p: usize,
    /// Optional output directory for report.json (+ manifest)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Accepted for interface uniformity; validation is single-threaded
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

pub fn run(args: ValidateArgs) -> Result<()> {
    let dataset = load_dataset_checked(&args.data, args.format, args.measure)?;
    let report = validate_dataset(&dataset, args.transform_p);

    println!(
        "{} studies, {} clusters, measure {}",
        report.n_studies, report.n_clusters, report.measure
    );
    for s in &report.studies {
        println!(
            "  {}: {} dose levels, {} zero cell(s), one-stage {}, hierarchical {}",
            s.study_id,
            s.dose_levels,
            s.zero_cells,
            if s.one_stage_identified { "identified" } else { "shrinkage-only" },
            if s.bayes_usable { "usable" } else { "baseline-only" },
        );
    }
    for w in dataset.warnings() {
        println!("warning: {w}");
    }

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("report.json"), &report)?;
        let mut manifest = ManifestBuilder::new("validate", args.seed);
        manifest.input(&args.data)?;
        manifest.write(
            out,
            json!({
                "data": args.data,
                "format": format!("{:?}", args.format),
                "measure": format!("{}", dataset.measure()),
                "transform_p": args.transform_p,
            }),
        )?;
    }
    Ok(())
}
