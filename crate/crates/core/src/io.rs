//! File formats: model JSON, sample/posterior/prediction CSV, and the
//! long-format results emitted by grid sweeps.
//!
//! Floats in CSV output carry 17 significant digits so downstream tooling
//! reproduces values bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::mixture::{
    GaussianComponent, LabeledSample, MixtureComponents, MixtureModel, PosteriorMatrix,
    StudentComponent,
};
use crate::rules::PredictionVector;
use crate::sim::{CellResult, GridConfig, GridResult, RuleKind};

/// Formats a float with 17 significant digits; round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn parse_f64(text: &str, what: &str) -> Result<f64> {
    match text.trim() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t
            .parse()
            .map_err(|e| Error::Format(format!("bad {what} value {t:?}: {e}"))),
    }
}

// ---------------------------------------------------------------------------
// Model JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ComponentFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dof: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    family: String,
    weights: Vec<f64>,
    components: Vec<ComponentFile>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format(format!("{what} must be a square matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(n, n, &flat))
}

pub fn model_to_json(model: &MixtureModel) -> Result<String> {
    let components = match model.components() {
        MixtureComponents::Gaussian(comps) => comps
            .iter()
            .map(|c| ComponentFile {
                mean: Some(c.mean().iter().copied().collect()),
                covariance: Some(matrix_to_rows(c.covariance())),
                location: None,
                scale: None,
                dof: None,
            })
            .collect(),
        MixtureComponents::Student(comps) => comps
            .iter()
            .map(|c| ComponentFile {
                mean: None,
                covariance: None,
                location: Some(c.location().iter().copied().collect()),
                scale: Some(matrix_to_rows(c.scale())),
                dof: Some(c.dof()),
            })
            .collect(),
    };
    let family = match model.components() {
        MixtureComponents::Gaussian(_) => "gaussian",
        MixtureComponents::Student(_) => "student",
    };
    Ok(serde_json::to_string_pretty(&ModelFile {
        family: family.to_string(),
        weights: model.weights().to_vec(),
        components,
    })?)
}

pub fn model_from_json(text: &str) -> Result<MixtureModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    match file.family.as_str() {
        "gaussian" => {
            let comps =
                file.components
                    .iter()
                    .map(|c| {
                        let mean = c.mean.as_ref().ok_or_else(|| {
                            Error::Format("gaussian component needs a mean".into())
                        })?;
                        let cov = c.covariance.as_ref().ok_or_else(|| {
                            Error::Format("gaussian component needs a covariance".into())
                        })?;
                        GaussianComponent::new(
                            DVector::from_vec(mean.clone()),
                            rows_to_matrix(cov, "covariance")?,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
            MixtureModel::gaussian(file.weights, comps)
        }
        "student" => {
            let comps =
                file.components
                    .iter()
                    .map(|c| {
                        let location = c.location.as_ref().ok_or_else(|| {
                            Error::Format("student component needs a location".into())
                        })?;
                        let scale = c.scale.as_ref().ok_or_else(|| {
                            Error::Format("student component needs a scale".into())
                        })?;
                        let dof = c
                            .dof
                            .ok_or_else(|| Error::Format("student component needs dof".into()))?;
                        StudentComponent::new(
                            DVector::from_vec(location.clone()),
                            rows_to_matrix(scale, "scale")?,
                            dof,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
            MixtureModel::student(file.weights, comps)
        }
        other => Err(Error::Format(format!("unknown mixture family {other:?}"))),
    }
}

pub fn write_model(path: &Path, model: &MixtureModel) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(model_to_json(model)?.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<MixtureModel> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    model_from_json(&text)
}

// ---------------------------------------------------------------------------
// Sample CSV: x1,...,xd[,label]
// ---------------------------------------------------------------------------

pub fn write_sample(path: &Path, sample: &LabeledSample) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let d = sample.points().ncols();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("label".to_string());
    w.write_record(&header)?;
    for i in 0..sample.len() {
        let mut record: Vec<String> = (0..d).map(|j| fmt_f64(sample.points()[(i, j)])).collect();
        record.push(sample.labels()[i].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a sample CSV; the `label` column is optional.
pub fn read_sample(path: &Path) -> Result<(DMatrix<f64>, Option<Vec<usize>>)> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header = r.headers()?.clone();
    let label_col = header.iter().position(|h| h.trim() == "label");
    let x_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_col)
        .map(|(i, _)| i)
        .collect();
    if x_cols.is_empty() {
        return Err(Error::Format(
            "sample file has no coordinate columns".into(),
        ));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record?;
        for &c in &x_cols {
            data.push(parse_f64(&record[c], "coordinate")?);
        }
        if let Some(c) = label_col {
            let z: usize = record[c]
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("bad label {:?}: {e}", &record[c])))?;
            labels.push(z);
        }
    }
    let n = data.len() / x_cols.len();
    let points = DMatrix::from_row_slice(n, x_cols.len(), &data);
    Ok((points, label_col.map(|_| labels)))
}

// ---------------------------------------------------------------------------
// Posterior CSV: tau_1,...,tau_P
// ---------------------------------------------------------------------------

pub fn write_posteriors(path: &Path, posteriors: &PosteriorMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let header: Vec<String> = (1..=posteriors.p()).map(|k| format!("tau_{k}")).collect();
    w.write_record(&header)?;
    for i in 0..posteriors.n() {
        let record: Vec<String> = (0..posteriors.p())
            .map(|k| fmt_f64(posteriors.get(i, k)))
            .collect();
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_posteriors(path: &Path) -> Result<PosteriorMatrix> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let p = r.headers()?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for record in r.records() {
        let record = record?;
        if record.len() != p {
            return Err(Error::Format("ragged posterior row".into()));
        }
        for field in record.iter() {
            data.push(parse_f64(field, "posterior")?);
        }
        n += 1;
    }
    PosteriorMatrix::new(DMatrix::from_row_slice(n, p, &data))
}

// ---------------------------------------------------------------------------
// Prediction CSV: single `label` column, 0 = abstain
// ---------------------------------------------------------------------------

pub fn write_predictions(path: &Path, predictions: &PredictionVector) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["label"])?;
    for &z in predictions.labels() {
        w.write_record([z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads any CSV with a `label` column (prediction or sample files).
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let col = r
        .headers()?
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Format("no `label` column found".into()))?;
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record?;
        labels.push(
            record[col]
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("bad label {:?}: {e}", &record[col])))?,
        );
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Grid config JSON and sweep results CSV
// ---------------------------------------------------------------------------

pub fn read_grid_config(path: &Path) -> Result<GridConfig> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    Ok(serde_json::from_str(&text)?)
}

fn interest_field(interest: &[usize]) -> String {
    interest
        .iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

const RESULT_COLUMNS: [&str; 14] = [
    "family",
    "D",
    "sigma2_or_dof",
    "mode",
    "alpha",
    "interest",
    "rule",
    "replicate",
    "mfdr",
    "mnpr",
    "mfnr",
    "n_classified",
    "lambda_hat",
    "tau_threshold",
];

/// One row per (cell, replicate, rule), long format.
pub fn write_results<W: Write>(writer: W, grid: &GridResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULT_COLUMNS)?;
    for cell in &grid.cells {
        for outcome in &cell.outcomes {
            for rule in RuleKind::ALL {
                let report: &EvalReport = outcome.report(rule);
                let (lambda, tau) = if rule == RuleKind::Optimal {
                    (
                        fmt_f64(outcome.lambda.lambda_hat),
                        outcome
                            .lambda
                            .tau_scale_threshold
                            .map(fmt_f64)
                            .unwrap_or_default(),
                    )
                } else {
                    (String::new(), String::new())
                };
                w.write_record([
                    cell.config.family.as_str().to_string(),
                    fmt_f64(cell.config.d),
                    fmt_f64(cell.config.sigma2_or_dof()),
                    cell.config.posterior_mode.as_str().to_string(),
                    fmt_f64(cell.config.alpha),
                    interest_field(&cell.config.interest),
                    rule.as_str().to_string(),
                    outcome.replicate.to_string(),
                    fmt_f64(report.realized_mfdr),
                    fmt_f64(report.realized_mnpr),
                    fmt_f64(report.realized_mfnr),
                    report.n_classified.to_string(),
                    lambda,
                    tau,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_results_file(path: &Path, grid: &GridResult) -> Result<()> {
    write_results(BufWriter::new(File::create(path)?), grid)
}

/// One row per (cell, rule) with summary statistics.
pub fn write_aggregates<W: Write>(writer: W, grid: &GridResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "family",
        "D",
        "sigma2_or_dof",
        "mode",
        "alpha",
        "interest",
        "rule",
        "n_replicates",
        "n_failed",
        "frac_none_classified",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for rate in ["mfdr", "mnpr", "mfnr"] {
        for stat in ["mean", "sd", "median", "q25", "q75"] {
            header.push(format!("{rate}_{stat}"));
        }
    }
    header.push("n_classified_mean".to_string());
    header.push("lambda_hat_median".to_string());
    header.push("tau_threshold_median".to_string());
    w.write_record(&header)?;

    for cell in &grid.cells {
        write_cell_aggregates(&mut w, cell)?;
    }
    w.flush()?;
    Ok(())
}

fn write_cell_aggregates<W: Write>(w: &mut csv::Writer<W>, cell: &CellResult) -> Result<()> {
    let Some(aggregates) = &cell.aggregates else {
        return Ok(());
    };
    for rule_agg in &aggregates.rules {
        let mut record = vec![
            cell.config.family.as_str().to_string(),
            fmt_f64(cell.config.d),
            fmt_f64(cell.config.sigma2_or_dof()),
            cell.config.posterior_mode.as_str().to_string(),
            fmt_f64(cell.config.alpha),
            interest_field(&cell.config.interest),
            rule_agg.rule.as_str().to_string(),
            rule_agg.report.n_reports.to_string(),
            cell.failures.len().to_string(),
            fmt_f64(rule_agg.frac_none_classified),
        ];
        for stats in [
            &rule_agg.report.mfdr,
            &rule_agg.report.mnpr,
            &rule_agg.report.mfnr,
        ] {
            record.extend([
                fmt_f64(stats.mean),
                fmt_f64(stats.sd),
                fmt_f64(stats.median),
                fmt_f64(stats.q25),
                fmt_f64(stats.q75),
            ]);
        }
        record.push(fmt_f64(rule_agg.report.mean_n_classified));
        let (lambda, tau) = if rule_agg.rule == RuleKind::Optimal {
            (
                aggregates
                    .lambda_hat
                    .as_ref()
                    .map(|s| fmt_f64(s.median))
                    .unwrap_or_default(),
                aggregates
                    .tau_threshold
                    .as_ref()
                    .map(|s| fmt_f64(s.median))
                    .unwrap_or_default(),
            )
        } else {
            (String::new(), String::new())
        };
        record.push(lambda);
        record.push(tau);
        w.write_record(&record)?;
    }
    Ok(())
}

pub fn write_aggregates_file(path: &Path, grid: &GridResult) -> Result<()> {
    write_aggregates(BufWriter::new(File::create(path)?), grid)
}
