//! File formats: counts CSV, matrix CSV, and the JSON records exchanged by
//! the command-line tool.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! value read back is bit-identical to the one written.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::CountDataset;
use crate::error::{Error, Result};
use crate::evaluate::CurvePoint;
use crate::inference::FitResult;
use crate::obs_models::{ModelKind, ObservationModel};
use crate::pal::LoadingMatrix;
use crate::simulate::{SimOutput, SimSpec};

pub const COUNTS_HEADER: &str = "trial,neuron,bin,count";
pub const CURVE_HEADER: &str = "model,seed,N,error";
pub const METRICS_HEADER: &str = "metric,value";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))
}

/// Dense matrix as `{"rows", "cols", "data"}` with row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Dimension(format!(
                "matrix record {}x{} holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

// ---------------------------------------------------------------------------
// counts

pub fn format_counts(data: &CountDataset) -> String {
    let mut out = String::with_capacity(16 * data.as_slice().len() + 32);
    out.push_str(COUNTS_HEADER);
    out.push('\n');
    for r in 0..data.n_trials() {
        for i in 0..data.n_neurons() {
            for t in 0..data.n_bins() {
                let _ = writeln!(out, "{r},{i},{t},{}", data.count(r, i, t));
            }
        }
    }
    out
}

pub fn write_counts_csv(path: impl AsRef<Path>, data: &CountDataset) -> Result<()> {
    write_text(path.as_ref(), &format_counts(data))
}

/// Parses a counts file. Rows must be in dense order (trial, then neuron,
/// then bin) and cover every entry exactly once.
pub fn parse_counts(path: &Path, text: &str) -> Result<CountDataset> {
    let err = |line: usize, column: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        column,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == COUNTS_HEADER => {}
        Some((_, h)) => return Err(err(1, 1, format!("expected header \"{COUNTS_HEADER}\", found \"{h}\""))),
        None => return Err(err(1, 1, "empty file".into())),
    }
    let mut rows: Vec<(usize, [usize; 3], f64)> = Vec::new();
    for (k, line) in lines {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(lineno, fields.len().min(4) + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let mut idx = [0usize; 3];
        for c in 0..3 {
            idx[c] = fields[c]
                .parse()
                .map_err(|_| err(lineno, c + 1, format!("\"{}\" is not a non-negative integer", fields[c])))?;
        }
        let count: f64 = fields[3]
            .parse()
            .map_err(|_| err(lineno, 4, format!("\"{}\" is not a number", fields[3])))?;
        if !count.is_finite() || count < 0.0 {
            return Err(err(lineno, 4, format!("count {count} must be finite and non-negative")));
        }
        rows.push((lineno, idx, count));
    }
    if rows.is_empty() {
        return Err(err(2, 1, "no data rows".into()));
    }
    let dims = rows.iter().fold([0usize; 3], |m, (_, idx, _)| [m[0].max(idx[0] + 1), m[1].max(idx[1] + 1), m[2].max(idx[2] + 1)]);
    let [n_trials, n_neurons, n_bins] = dims;
    let mut counts = Vec::with_capacity(rows.len());
    for (k, (lineno, idx, count)) in rows.iter().enumerate() {
        let expected = [k / (n_neurons * n_bins), (k / n_bins) % n_neurons, k % n_bins];
        if let Some(c) = (0..3).find(|&c| idx[c] != expected[c]) {
            return Err(err(
                *lineno,
                c + 1,
                format!("expected entry {},{},{} (dense trial/neuron/bin order)", expected[0], expected[1], expected[2]),
            ));
        }
        counts.push(*count);
    }
    let expected_rows = n_trials * n_neurons * n_bins;
    if counts.len() != expected_rows {
        let last = rows.last().map_or(1, |r| r.0);
        return Err(err(last + 1, 1, format!("{} rows for a {n_trials}x{n_neurons}x{n_bins} dataset, expected {expected_rows}", counts.len())));
    }
    CountDataset::new(n_neurons, n_bins, n_trials, counts)
}

pub fn read_counts_csv(path: impl AsRef<Path>) -> Result<CountDataset> {
    let path = path.as_ref();
    parse_counts(path, &read_text(path)?)
}

// ---------------------------------------------------------------------------
// plain matrices

/// One matrix row per line, comma separated, no header.
pub fn format_matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_text(path.as_ref(), &format_matrix_csv(m))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if *cols.get_or_insert(fields.len()) != fields.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: k + 1,
                column: fields.len(),
                message: format!("row has {} values, earlier rows {}", fields.len(), cols.unwrap()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            data.push(f.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: k + 1,
                column: c + 1,
                message: format!("\"{f}\" is not a number"),
            })?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &data))
}

// ---------------------------------------------------------------------------
// hyperparameters and fits

/// Fitted model parameters in the exchange format read by external tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(rename = "W")]
    pub w: MatrixJson,
    pub length_scales: Vec<f64>,
}

impl Hyperparameters {
    pub fn loadings(&self) -> Result<LoadingMatrix> {
        LoadingMatrix::new(self.w.to_matrix()?)
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        match self.model {
            ModelKind::Poisson => Ok(ObservationModel::poisson()),
            ModelKind::Binomial => {
                let n = self.n.clone().ok_or_else(|| Error::InvalidData("binomial record lacks \"n\"".into()))?;
                if n.len() != self.w.rows {
                    return Err(Error::Dimension(format!("{} binomial n values for {} neurons", n.len(), self.w.rows)));
                }
                ObservationModel::binomial(n)
            }
            ModelKind::NegBinomial => {
                ObservationModel::negbinom(self.alpha.ok_or_else(|| Error::InvalidData("negbinom record lacks \"alpha\"".into()))?)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.loadings()?;
        if self.length_scales.len() != w.n_latents() {
            return Err(Error::Dimension(format!(
                "{} length scales for {} latents",
                self.length_scales.len(),
                w.n_latents()
            )));
        }
        if let Some(&l) = self.length_scales.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!("length scale {l} must be positive")));
        }
        self.observation_model().map(|_| ())
    }
}

pub fn export_hyperparameters(w: &LoadingMatrix, length_scales: &[f64], model: &ObservationModel) -> Hyperparameters {
    Hyperparameters {
        model: model.kind(),
        n: model.binomial_n().map(<[u32]>::to_vec),
        alpha: model.alpha(),
        w: MatrixJson::from(w.as_matrix()),
        length_scales: length_scales.to_vec(),
    }
}

pub fn write_hyperparameters(path: impl AsRef<Path>, h: &Hyperparameters) -> Result<()> {
    write_json(path, h)
}

pub fn read_hyperparameters(path: impl AsRef<Path>) -> Result<Hyperparameters> {
    let h: Hyperparameters = read_json(path)?;
    h.validate()?;
    Ok(h)
}

/// A fit as stored on disk: the hyperparameter export plus optimizer
/// bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub hyperparameters: Hyperparameters,
    pub final_evidence: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restart_evidences: Vec<Option<f64>>,
    pub trace: Vec<f64>,
}

impl From<&FitResult> for FitRecord {
    fn from(f: &FitResult) -> Self {
        Self {
            hyperparameters: export_hyperparameters(&f.loadings, &f.length_scales, &f.model),
            final_evidence: f.final_evidence,
            iterations: f.iterations,
            converged: f.converged,
            restart_evidences: f.restart_evidences.clone(),
            trace: f.trace.clone(),
        }
    }
}

/// Reads either a [`FitRecord`] or a bare [`Hyperparameters`] file.
pub fn read_fit_hyperparameters(path: impl AsRef<Path>) -> Result<Hyperparameters> {
    let path = path.as_ref();
    let value: serde_json::Value = read_json(path)?;
    let h: Hyperparameters = if value.get("hyperparameters").is_some() {
        serde_json::from_value::<FitRecord>(value).map_err(|e| Error::json(path, e))?.hyperparameters
    } else {
        serde_json::from_value(value).map_err(|e| Error::json(path, e))?
    };
    h.validate()?;
    Ok(h)
}

// ---------------------------------------------------------------------------
// simulation ground truth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub spec: SimSpec,
    pub x_true: MatrixJson,
    pub w_true: MatrixJson,
    pub length_scales: Vec<f64>,
}

impl From<&SimOutput> for TruthRecord {
    fn from(s: &SimOutput) -> Self {
        Self {
            spec: s.spec.clone(),
            x_true: MatrixJson::from(&s.x_true),
            w_true: MatrixJson::from(&s.w_true),
            length_scales: s.spec.length_scales.clone(),
        }
    }
}

impl TruthRecord {
    /// Rates implied by the true latents and loadings.
    pub fn true_rates(&self) -> Result<DMatrix<f64>> {
        let model = self.spec.observation_model()?;
        model.rate(&(self.w_true.to_matrix()? * self.x_true.to_matrix()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelKind,
    pub seed: u64,
    pub n_neurons: usize,
    pub n_bins: usize,
    pub n_trials: usize,
    pub n_latents: usize,
    pub counts: String,
    pub truth: String,
}

// ---------------------------------------------------------------------------
// metrics

pub fn format_metrics(rows: &[(&str, f64)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(&str, f64)]) -> Result<()> {
    write_text(path.as_ref(), &format_metrics(rows))
}

/// Error curve rows; failed points leave the error column empty.
pub fn format_curve(model: ModelKind, seed: u64, points: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        let err = p.error.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{model},{seed},{},{err}", p.n_neurons);
    }
    out
}

pub fn write_curve_csv(path: impl AsRef<Path>, model: ModelKind, seed: u64, points: &[CurvePoint]) -> Result<()> {
    write_text(path.as_ref(), &format_curve(model, seed, points))
}
