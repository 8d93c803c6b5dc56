//! Aggregated dose-response data: arm-level counts, contrast-level effects,
//! and the delta-method covariance of within-study log relative effects.
//!
//! Arm-level input is a CSV of `study_id,cluster,dose,events,size` rows; the
//! lowest dose in each study is the reference level and all effects are
//! contrasts against it. Contrast-level input
//! (`study_id,cluster,dose,ref_dose,log_effect,se,ref_var`) supplies
//! pre-computed effects, e.g. adjusted estimates where counts are unavailable.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

/// Relative-effect measure on the natural-log scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectMeasure {
    #[serde(rename = "logOR")]
    LogOr,
    #[serde(rename = "logRR")]
    LogRr,
    /// Contrast-level effects of any kind (logHR, mean difference, ...),
    /// modeled with a normal likelihood and identity link.
    #[serde(rename = "generic-normal")]
    GenericNormal,
}

impl std::fmt::Display for EffectMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EffectMeasure::LogOr => "logOR",
            EffectMeasure::LogRr => "logRR",
            EffectMeasure::GenericNormal => "generic-normal",
        })
    }
}

/// Input file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    ArmLevel,
    ContrastLevel,
}

/// One dose arm: dose level, event count r, sample size n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub dose: f64,
    pub events: u64,
    pub size: u64,
}

impl Arm {
    pub fn new(dose: f64, events: u64, size: u64) -> Result<Self> {
        if !dose.is_finite() || dose < 0.0 {
            return Err(Error::validation("arm", format!("dose must be a non-negative real, got {dose}")));
        }
        if size == 0 {
            return Err(Error::validation("arm", "sample size must be positive"));
        }
        if events > size {
            return Err(Error::validation(
                "arm",
                format!("events ({events}) exceed sample size ({size})"),
            ));
        }
        Ok(Arm { dose, events, size })
    }

    /// Non-events t = n - r.
    pub fn non_events(&self) -> u64 {
        self.size - self.events
    }
}

/// One study's arms, sorted by dose; the first arm is the reference level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    study_id: String,
    cluster: Option<String>,
    arms: Vec<Arm>,
}

impl StudyRecord {
    /// Sorts arms by dose and rejects duplicated dose levels.
    pub fn new(study_id: impl Into<String>, cluster: Option<String>, mut arms: Vec<Arm>) -> Result<Self> {
        let study_id = study_id.into();
        if arms.is_empty() {
            return Err(Error::validation(&study_id, "study has no arms"));
        }
        arms.sort_by(|a, b| a.dose.partial_cmp(&b.dose).unwrap());
        if let Some(w) = arms.windows(2).find(|w| w[0].dose == w[1].dose) {
            return Err(Error::validation(
                &study_id,
                format!("duplicated dose level {}", w[0].dose),
            ));
        }
        Ok(StudyRecord { study_id, cluster, arms })
    }

    pub fn study_id(&self) -> &str {
        &self.study_id
    }

    pub fn cluster(&self) -> Option<&str> {
        self.cluster.as_deref()
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    /// The minimum-dose arm.
    pub fn reference(&self) -> &Arm {
        &self.arms[0]
    }

    /// Non-reference arms in increasing dose order.
    pub fn contrast_arms(&self) -> &[Arm] {
        &self.arms[1..]
    }

    pub fn has_zero_cell(&self) -> bool {
        self.arms.iter().any(|a| a.events == 0 || a.non_events() == 0)
    }
}

/// Per-study vector of relative effects and its covariance matrix.
///
/// `effects[j]` is the log relative effect of `doses[j]` versus
/// `reference_dose`; `covariance` is symmetric positive definite (checked by
/// Cholesky factorization at construction).
#[derive(Debug, Clone, PartialEq)]
pub struct EffectTable {
    study_id: String,
    cluster: Option<String>,
    effects: DVector<f64>,
    covariance: DMatrix<f64>,
    doses: Vec<f64>,
    reference_dose: f64,
}

impl EffectTable {
    pub fn new(
        study_id: impl Into<String>,
        cluster: Option<String>,
        effects: Vec<f64>,
        covariance: DMatrix<f64>,
        doses: Vec<f64>,
        reference_dose: f64,
    ) -> Result<Self> {
        let study_id = study_id.into();
        let m = effects.len();
        if m == 0 {
            return Err(Error::validation(&study_id, "effect table is empty"));
        }
        if doses.len() != m || covariance.nrows() != m || covariance.ncols() != m {
            return Err(Error::Dimension(format!(
                "study {study_id}: effects {}, doses {}, covariance {}x{}",
                m,
                doses.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        for i in 0..m {
            if covariance[(i, i)] <= 0.0 {
                return Err(Error::Covariance { study_id });
            }
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs()
                    > 1e-10 * covariance[(i, i)].abs().max(1.0)
                {
                    return Err(Error::Covariance { study_id });
                }
            }
        }
        if Cholesky::new(covariance.clone()).is_none() {
            return Err(Error::Covariance { study_id });
        }
        Ok(EffectTable {
            study_id,
            cluster,
            effects: DVector::from_vec(effects),
            covariance,
            doses,
            reference_dose,
        })
    }

    pub fn study_id(&self) -> &str {
        &self.study_id
    }

    pub fn cluster(&self) -> Option<&str> {
        self.cluster.as_deref()
    }

    pub fn effects(&self) -> &DVector<f64> {
        &self.effects
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn reference_dose(&self) -> f64 {
        self.reference_dose
    }

    pub fn cholesky(&self) -> Cholesky<f64, Dyn> {
        Cholesky::new(self.covariance.clone()).expect("validated at construction")
    }
}

/// A validated collection of studies sharing one effect measure.
///
/// Arm-level datasets hold `StudyRecord`s (and derive effect tables on
/// demand); contrast-level datasets hold `EffectTable`s directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    measure: EffectMeasure,
    studies: Vec<StudyRecord>,
    tables: Vec<EffectTable>,
    warnings: Vec<String>,
}

impl Dataset {
    pub fn from_studies(studies: Vec<StudyRecord>, measure: EffectMeasure) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &studies {
            if !seen.insert(s.study_id().to_string()) {
                return Err(Error::validation(
                    s.study_id(),
                    "duplicate study_id in dataset",
                ));
            }
        }
        Ok(Dataset {
            measure,
            studies,
            tables: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn from_tables(tables: Vec<EffectTable>, measure: EffectMeasure) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tables {
            if !seen.insert(t.study_id().to_string()) {
                return Err(Error::validation(t.study_id(), "duplicate study_id in dataset"));
            }
        }
        Ok(Dataset {
            measure,
            studies: Vec::new(),
            tables,
            warnings: Vec::new(),
        })
    }

    /// An empty dataset (prior-only model evaluation).
    pub fn empty(measure: EffectMeasure) -> Self {
        Dataset {
            measure,
            studies: Vec::new(),
            tables: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn measure(&self) -> EffectMeasure {
        self.measure
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn is_arm_level(&self) -> bool {
        !self.studies.is_empty() || self.tables.is_empty()
    }

    pub fn n_studies(&self) -> usize {
        if self.studies.is_empty() {
            self.tables.len()
        } else {
            self.studies.len()
        }
    }

    /// Distinct cluster labels in first-appearance order.
    pub fn clusters(&self) -> Vec<String> {
        let mut out = Vec::new();
        let labels = self
            .studies
            .iter()
            .map(|s| s.cluster())
            .chain(self.tables.iter().map(|t| t.cluster()));
        for c in labels.flatten() {
            if !out.iter().any(|x| x == c) {
                out.push(c.to_string());
            }
        }
        out
    }

    /// Cluster label per study, in study order.
    pub fn cluster_labels(&self) -> Vec<Option<String>> {
        if self.studies.is_empty() {
            self.tables.iter().map(|t| t.cluster().map(String::from)).collect()
        } else {
            self.studies.iter().map(|s| s.cluster().map(String::from)).collect()
        }
    }

    /// All doses pooled across studies including reference doses; this is the
    /// distribution percentile-based knots are placed on.
    pub fn pooled_doses(&self) -> Vec<f64> {
        if !self.studies.is_empty() {
            self.studies
                .iter()
                .flat_map(|s| s.arms().iter().map(|a| a.dose))
                .collect()
        } else {
            self.tables
                .iter()
                .flat_map(|t| {
                    std::iter::once(t.reference_dose()).chain(t.doses().iter().copied())
                })
                .collect()
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Effect tables for contrast-based analyses. Arm-level datasets compute
    /// them via [`compute_effects`]; contrast-level datasets return the loaded
    /// tables. Studies with a single arm are skipped (they carry no contrast).
    pub fn effect_tables(&self, correction: f64) -> Result<Vec<EffectTable>> {
        if self.studies.is_empty() {
            return Ok(self.tables.clone());
        }
        self.studies
            .iter()
            .filter(|s| s.arms().len() >= 2)
            .map(|s| compute_effects(s, self.measure, correction))
            .collect()
    }
}

/// Builds the per-study effect vector and delta-method covariance from arm
/// counts. `correction` is added to every event and non-event cell of the
/// study when any cell is zero.
///
/// logOR: Y_j = log odds ratio vs reference; S has diagonal
/// 1/r_j + 1/t_j + 1/r_0 + 1/t_0 and shared off-diagonal 1/r_0 + 1/t_0.
/// logRR: Y_j = log risk ratio; diagonal 1/r_j - 1/n_j + 1/r_0 - 1/n_0 and
/// off-diagonal 1/r_0 - 1/n_0.
pub fn compute_effects(
    study: &StudyRecord,
    measure: EffectMeasure,
    correction: f64,
) -> Result<EffectTable> {
    if study.arms().len() < 2 {
        return Err(Error::InsufficientArms {
            study_id: study.study_id().to_string(),
            arms: study.arms().len(),
        });
    }
    if correction < 0.0 {
        return Err(Error::validation(study.study_id(), "correction must be >= 0"));
    }
    let add = if study.has_zero_cell() {
        if correction == 0.0 {
            return Err(Error::DegenerateCell {
                study_id: study.study_id().to_string(),
            });
        }
        correction
    } else {
        0.0
    };

    // corrected cells: r' = r + c, t' = t + c, n' = n + 2c
    let cells: Vec<(f64, f64, f64)> = study
        .arms()
        .iter()
        .map(|a| {
            let r = a.events as f64 + add;
            let t = a.non_events() as f64 + add;
            (r, t, r + t)
        })
        .collect();
    let (r0, t0, n0) = cells[0];
    let m = cells.len() - 1;

    let off = match measure {
        EffectMeasure::LogOr => 1.0 / r0 + 1.0 / t0,
        EffectMeasure::LogRr => 1.0 / r0 - 1.0 / n0,
        EffectMeasure::GenericNormal => {
            return Err(Error::Config(
                "generic-normal effects must be supplied contrast-level".into(),
            ))
        }
    };

    let mut effects = Vec::with_capacity(m);
    let mut cov = DMatrix::from_element(m, m, off);
    for (j, &(rj, tj, nj)) in cells[1..].iter().enumerate() {
        match measure {
            EffectMeasure::LogOr => {
                effects.push((rj / tj).ln() - (r0 / t0).ln());
                cov[(j, j)] = 1.0 / rj + 1.0 / tj + off;
            }
            EffectMeasure::LogRr => {
                effects.push((rj / nj).ln() - (r0 / n0).ln());
                cov[(j, j)] = 1.0 / rj - 1.0 / nj + off;
            }
            EffectMeasure::GenericNormal => unreachable!(),
        }
    }

    EffectTable::new(
        study.study_id(),
        study.cluster().map(String::from),
        effects,
        cov,
        study.contrast_arms().iter().map(|a| a.dose).collect(),
        study.reference().dose,
    )
}

/// Loads a dataset from CSV. Arm-level header: `study_id,cluster,dose,events,size`;
/// contrast-level header: `study_id,cluster,dose,ref_dose,log_effect,se,ref_var`.
/// Rows of one study are grouped by `study_id` and sorted by dose.
pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat, measure: EffectMeasure) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, format, measure)
}

/// [`load_dataset`] over any reader.
pub fn read_dataset<R: Read>(reader: R, format: DataFormat, measure: EffectMeasure) -> Result<Dataset> {
    match format {
        DataFormat::ArmLevel => read_arm_level(reader, measure),
        DataFormat::ContrastLevel => read_contrast_level(reader, measure),
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: u64) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {name} from {field:?}"),
    })
}

fn opt_cluster(field: &str) -> Option<String> {
    let t = field.trim();
    if t.is_empty() {
        None
    } else {
        Some(t.to_string())
    }
}

type ArmGroup = (Option<String>, Vec<(Arm, u64)>);

fn read_arm_level<R: Read>(reader: R, measure: EffectMeasure) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(&mut rdr, &["study_id", "cluster", "dose", "events", "size"])?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, ArmGroup> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let study_id: String = record[0].to_string();
        let cluster = opt_cluster(&record[1]);
        let dose: f64 = parse_field(&record[2], "dose", line)?;
        let events: u64 = parse_field(&record[3], "events", line)?;
        let size: u64 = parse_field(&record[4], "size", line)?;
        let arm = Arm::new(dose, events, size).map_err(|e| Error::Parse {
            line,
            msg: format!("study {study_id}: {e}"),
        })?;
        let entry = groups.entry(study_id.clone()).or_insert_with(|| {
            order.push(study_id.clone());
            (cluster.clone(), Vec::new())
        });
        if entry.0 != cluster {
            return Err(Error::Parse {
                line,
                msg: format!("study {study_id}: inconsistent cluster label"),
            });
        }
        if entry.1.iter().any(|(a, _)| a.dose == dose) {
            return Err(Error::Parse {
                line,
                msg: format!("study {study_id}: duplicate dose {dose}"),
            });
        }
        entry.1.push((arm, line));
    }

    let mut studies = Vec::with_capacity(order.len());
    for id in order {
        let (cluster, arms) = groups.remove(&id).unwrap();
        studies.push(StudyRecord::new(
            id,
            cluster,
            arms.into_iter().map(|(a, _)| a).collect(),
        )?);
    }
    Dataset::from_studies(studies, measure)
}

fn read_contrast_level<R: Read>(reader: R, measure: EffectMeasure) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(
        &mut rdr,
        &["study_id", "cluster", "dose", "ref_dose", "log_effect", "se", "ref_var"],
    )?;

    struct Row {
        dose: f64,
        effect: f64,
        se: f64,
    }
    type ContrastGroup<R> = (Option<String>, f64, Option<f64>, Vec<R>);
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, ContrastGroup<Row>> = HashMap::new();
    let mut missing_ref_var = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 7 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 7 fields, got {}", record.len()),
            });
        }
        let study_id = record[0].to_string();
        let cluster = opt_cluster(&record[1]);
        let dose: f64 = parse_field(&record[2], "dose", line)?;
        let ref_dose: f64 = parse_field(&record[3], "ref_dose", line)?;
        let effect: f64 = parse_field(&record[4], "log_effect", line)?;
        let se: f64 = parse_field(&record[5], "se", line)?;
        let ref_var: Option<f64> = if record[6].trim().is_empty() {
            None
        } else {
            Some(parse_field(&record[6], "ref_var", line)?)
        };
        if se <= 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("study {study_id}: se must be positive, got {se}"),
            });
        }
        if let Some(v) = ref_var {
            if v < 0.0 {
                return Err(Error::Parse {
                    line,
                    msg: format!("study {study_id}: ref_var must be >= 0, got {v}"),
                });
            }
        }
        let entry = groups.entry(study_id.clone()).or_insert_with(|| {
            order.push(study_id.clone());
            if ref_var.is_none() {
                missing_ref_var.push(study_id.clone());
            }
            (cluster.clone(), ref_dose, ref_var, Vec::new())
        });
        if entry.0 != cluster || entry.1 != ref_dose || entry.2 != ref_var {
            return Err(Error::Parse {
                line,
                msg: format!("study {study_id}: inconsistent cluster/ref_dose/ref_var across rows"),
            });
        }
        if entry.3.iter().any(|r| r.dose == dose) || dose == ref_dose {
            return Err(Error::Parse {
                line,
                msg: format!("study {study_id}: duplicate dose {dose}"),
            });
        }
        entry.3.push(Row { dose, effect, se });
    }

    let mut tables = Vec::with_capacity(order.len());
    for id in order {
        let (cluster, ref_dose, ref_var, mut rows) = groups.remove(&id).unwrap();
        rows.sort_by(|a, b| a.dose.partial_cmp(&b.dose).unwrap());
        let m = rows.len();
        let off = ref_var.unwrap_or(0.0);
        let mut cov = DMatrix::from_element(m, m, off);
        for (j, row) in rows.iter().enumerate() {
            cov[(j, j)] = row.se * row.se;
        }
        tables.push(EffectTable::new(
            id,
            cluster,
            rows.iter().map(|r| r.effect).collect(),
            cov,
            rows.iter().map(|r| r.dose).collect(),
            ref_dose,
        )?);
    }
    let mut ds = Dataset::from_tables(tables, measure)?;
    for id in missing_ref_var {
        ds.warnings.push(format!(
            "study {id}: ref_var missing; off-diagonal covariance assumed 0"
        ));
    }
    Ok(ds)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(csv_err)?;
    let got: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {expected:?}, got {got:?}"),
        });
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Writes an arm-level dataset back to CSV; doses print in shortest
/// round-trip form so write-then-load reproduces the dataset exactly.
pub fn write_arm_level_csv(dataset: &Dataset) -> Result<String> {
    if !dataset.is_arm_level() {
        return Err(Error::Config("dataset is contrast-level".into()));
    }
    let mut out = String::from("study_id,cluster,dose,events,size\n");
    for s in dataset.studies() {
        for a in s.arms() {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.study_id(),
                s.cluster().unwrap_or(""),
                a.dose,
                a.events,
                a.size
            )
            .expect("string write");
        }
    }
    Ok(out)
}

/// Per-study usability report; `transform_p` is the number of coefficients of
/// the intended dose transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_studies: usize,
    pub n_clusters: usize,
    pub measure: EffectMeasure,
    pub transform_p: usize,
    pub studies: Vec<StudyCheck>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyCheck {
    pub study_id: String,
    pub cluster: Option<String>,
    pub arms: usize,
    pub dose_levels: usize,
    pub zero_cells: usize,
    /// Enough dose levels (>= p+1) to identify its own curve in the one-stage
    /// model; studies below this bound enter only through shrinkage.
    pub one_stage_identified: bool,
    /// Usable by the hierarchical contrast-based models (>= 2 arms).
    pub bayes_usable: bool,
}

/// Report-only check of each study against the requirements of the one-stage
/// baseline and the hierarchical models.
pub fn validate_dataset(dataset: &Dataset, transform_p: usize) -> ValidationReport {
    let studies = if dataset.is_arm_level() {
        dataset
            .studies()
            .iter()
            .map(|s| StudyCheck {
                study_id: s.study_id().to_string(),
                cluster: s.cluster().map(String::from),
                arms: s.arms().len(),
                dose_levels: s.arms().len(),
                zero_cells: s
                    .arms()
                    .iter()
                    .filter(|a| a.events == 0 || a.non_events() == 0)
                    .count(),
                one_stage_identified: s.arms().len() > transform_p,
                bayes_usable: s.arms().len() >= 2,
            })
            .collect()
    } else {
        dataset
            .tables
            .iter()
            .map(|t| StudyCheck {
                study_id: t.study_id().to_string(),
                cluster: t.cluster().map(String::from),
                arms: t.doses().len() + 1,
                dose_levels: t.doses().len() + 1,
                zero_cells: 0,
                one_stage_identified: t.doses().len() >= transform_p,
                bayes_usable: true,
            })
            .collect()
    };
    ValidationReport {
        n_studies: dataset.n_studies(),
        n_clusters: dataset.clusters().len(),
        measure: dataset.measure(),
        transform_p,
        studies,
    }
}
