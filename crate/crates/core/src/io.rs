//! CSV ingestion, standardization, k-means initialization and model files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::PointPrediction;
use crate::model::Model;
use crate::predict::PredictionResult;
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;
const STD_FLOOR_REL: f64 = 1e-12;

/// Per-column affine standardization `(v - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Column means and sample standard deviations. Constant columns get std 1.
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows() as f64;
        let mut mean = Vec::with_capacity(m.ncols());
        let mut std = Vec::with_capacity(m.ncols());
        for col in m.column_iter() {
            let mu = col.sum() / n;
            let var = if m.nrows() > 1 {
                col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let sd = var.sqrt();
            mean.push(mu);
            std.push(if sd > STD_FLOOR_REL * mu.abs().max(1.0) {
                sd
            } else {
                1.0
            });
        }
        Standardization { mean, std }
    }

    pub fn identity(cols: usize) -> Self {
        Standardization {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    fn check(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.ncols() != self.mean.len() {
            return Err(Error::data(format!(
                "expected {} columns, got {}",
                self.mean.len(),
                m.ncols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
            (m[(r, c)] - self.mean[c]) / self.std[c]
        }))
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
            m[(r, c)] * self.std[c] + self.mean[c]
        }))
    }

    /// Maps a prediction from the standardized scale back to the raw scale.
    pub fn invert_prediction(&self, p: &PointPrediction) -> PointPrediction {
        let log_jac: f64 = self.std.iter().map(|s| s.ln()).sum();
        PointPrediction {
            mean: p
                .mean
                .iter()
                .enumerate()
                .map(|(c, v)| v * self.std[c] + self.mean[c])
                .collect(),
            variance: p
                .variance
                .iter()
                .enumerate()
                .map(|(c, v)| v * self.std[c] * self.std[c])
                .collect(),
            class_probs: p.class_probs.clone(),
            log_density: p.log_density.map(|l| l - log_jac),
        }
    }
}

/// How the target file is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSpec {
    /// Real targets, standardized per column.
    Standardized,
    /// Real or count targets kept on their raw scale.
    Raw,
    /// Class labels: one integer column, or one-hot columns. With a class
    /// count, indices at or beyond it are rejected.
    Classes(Option<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Standardized inputs.
    pub x: DMatrix<f64>,
    /// Targets on the training scale (class indices for classification).
    pub y: DMatrix<f64>,
    pub x_stats: Standardization,
    pub y_stats: Option<Standardization>,
}

/// Reads a rectangular numeric CSV. A first row in which no cell parses as
/// a number is taken as a header.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    parse_matrix(&text).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if i == 0 && rec.iter().all(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::data(format!(
                    "line {line}: expected {w} columns, found {}",
                    rec.len()
                )))
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(rec.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::data(format!("line {line}, column {}: '{cell}' is not a number", c + 1)))?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "line {line}, column {}: non-finite value '{cell}'",
                    c + 1
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    let w = width.ok_or_else(|| Error::data("no data rows"))?;
    Ok(DMatrix::from_fn(rows.len(), w, |r, c| rows[r][c]))
}

/// Converts a label matrix (integer column or one-hot rows) to class indices.
pub fn class_indices(y: &DMatrix<f64>, classes: Option<usize>) -> Result<DMatrix<f64>> {
    let idx: Vec<f64> = if y.ncols() == 1 {
        y.column(0)
            .iter()
            .enumerate()
            .map(|(r, &v)| {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::data(format!(
                        "row {}: class label {v} is not a nonnegative integer",
                        r + 1
                    )));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?
    } else {
        y.row_iter()
            .enumerate()
            .map(|(r, row)| {
                let hot: Vec<usize> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v == 1.0)
                    .map(|(c, _)| c)
                    .collect();
                if hot.len() != 1 || row.iter().any(|v| *v != 0.0 && *v != 1.0) {
                    return Err(Error::data(format!("row {}: not a one-hot label", r + 1)));
                }
                Ok(hot[0] as f64)
            })
            .collect::<Result<_>>()?
    };
    let limit = classes.unwrap_or(if y.ncols() == 1 { usize::MAX } else { y.ncols() });
    if let Some((r, v)) = idx.iter().enumerate().find(|(_, v)| **v as usize >= limit) {
        return Err(Error::data(format!(
            "row {}: class index {v} is out of range for {limit} classes",
            r + 1
        )));
    }
    Ok(DMatrix::from_column_slice(idx.len(), 1, &idx))
}

/// Loads features and targets, standardizing X always and Y when asked.
pub fn load_csv(features: &Path, targets: &Path, spec: TargetSpec) -> Result<Dataset> {
    let x_raw = read_matrix(features)?;
    let y_raw = read_matrix(targets)?;
    build_dataset(x_raw, y_raw, spec)
}

pub fn build_dataset(x_raw: DMatrix<f64>, y_raw: DMatrix<f64>, spec: TargetSpec) -> Result<Dataset> {
    if x_raw.nrows() != y_raw.nrows() {
        return Err(Error::data(format!(
            "{} feature rows but {} target rows",
            x_raw.nrows(),
            y_raw.nrows()
        )));
    }
    let x_stats = Standardization::fit(&x_raw);
    let x = x_stats.apply(&x_raw)?;
    let (y, y_stats) = match spec {
        TargetSpec::Standardized => {
            let s = Standardization::fit(&y_raw);
            (s.apply(&y_raw)?, Some(s))
        }
        TargetSpec::Raw => (y_raw, None),
        TargetSpec::Classes(c) => (class_indices(&y_raw, c)?, None),
    };
    Ok(Dataset { x, y, x_stats, y_stats })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `m` centroids of the rows of `x`: k-means++ seeding then Lloyd iterations
/// (at most 50, or until no centroid moves by more than 1e-8).
pub fn kmeans_init(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::config(format!("cannot place {m} centroids among {n} points")));
    }
    let pts: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut rng = rng::stream(&[seed, 0x6b6d_6561_6e73]);
    let mut cents: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &cents[0])).collect();
    while cents.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            // Duplicate points: fall back to any unused row.
            (0..n).find(|i| !cents.iter().any(|c| c == &pts[*i])).unwrap_or(0)
        };
        cents.push(pts[pick].clone());
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(sq_dist(p, &pts[pick]));
        }
    }
    let dim = x.ncols();
    let mut assign = vec![0usize; n];
    for _ in 0..50 {
        for (a, p) in assign.iter_mut().zip(&pts) {
            *a = (0..m)
                .min_by(|&i, &j| sq_dist(p, &cents[i]).total_cmp(&sq_dist(p, &cents[j])))
                .unwrap();
        }
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (a, p) in assign.iter().zip(&pts) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..m {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&i, &j| {
                        sq_dist(&pts[i], &cents[assign[i]]).total_cmp(&sq_dist(&pts[j], &cents[assign[j]]))
                    })
                    .unwrap();
                assign[far] = c;
                pts[far].clone()
            };
            shift = shift.max(sq_dist(&new, &cents[c]).sqrt());
            cents[c] = new;
        }
        if shift < 1e-8 {
            break;
        }
    }
    Ok(DMatrix::from_fn(m, dim, |r, c| cents[r][c]))
}

/// The first `m` rows of `x`, for inducing inputs placed on the data.
pub fn inducing_from_data(x: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 || m > x.nrows() {
        return Err(Error::config(format!(
            "cannot take {m} inducing inputs from {} rows",
            x.nrows()
        )));
    }
    Ok(x.rows(0, m).into_owned())
}

/// A trained model with everything needed to predict on raw-scale inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub seed: u64,
    pub x_stats: Standardization,
    pub y_stats: Option<Standardization>,
    /// Training settings, echoed for reference.
    pub config: serde_json::Value,
    pub model: Model,
}

impl ModelArtifact {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::data(format!(
                "unsupported model schema version {version:?}, expected {SCHEMA_VERSION}"
            )));
        }
        let art: ModelArtifact = serde_json::from_value(raw)?;
        art.validate()?;
        Ok(art)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.x_stats.mean.len();
        if self.x_stats.std.len() != dim {
            return Err(Error::data("input standardization is inconsistent"));
        }
        if let Some(y) = &self.y_stats {
            if y.mean.len() != self.model.likelihood.target_dim() || y.std.len() != y.mean.len() {
                return Err(Error::data("target standardization is inconsistent"));
            }
        }
        if self
            .x_stats
            .std
            .iter()
            .chain(self.y_stats.iter().flat_map(|s| &s.std))
            .any(|s| !(*s > 0.0))
        {
            return Err(Error::data("standardization scales must be positive"));
        }
        self.model.validate_shapes(dim)?;
        self.model.inducing.validate(&self.model.inducing.z[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Predictions as CSV: `index`, point predictions, per-output variances,
/// class probabilities for classifiers and `log_density` when available.
pub fn predictions_csv(preds: &[PointPrediction]) -> String {
    let Some(first) = preds.first() else {
        return String::from("index\n");
    };
    let p = first.mean.len();
    let classes = first.class_probs.as_ref().map_or(0, |c| c.len());
    let has_ld = first.log_density.is_some();
    let mut header = vec!["index".to_string()];
    header.extend((0..p).map(|c| format!("pred_{c}")));
    header.extend((0..p).map(|c| format!("var_{c}")));
    header.extend((0..classes).map(|c| format!("prob_{c}")));
    if has_ld {
        header.push("log_density".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for (i, pt) in preds.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in pt
            .mean
            .iter()
            .chain(&pt.variance)
            .chain(pt.class_probs.iter().flatten())
        {
            let _ = write!(out, ",{v}");
        }
        if let Some(l) = pt.log_density {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
    }
    out
}

/// Parses the output of [`predictions_csv`].
pub fn parse_predictions(text: &str) -> Result<Vec<PointPrediction>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("malformed predictions file: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let cols = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    };
    let (pred, var, prob) = (cols("pred_"), cols("var_"), cols("prob_"));
    let ld = header.iter().position(|h| h == "log_density");
    if pred.is_empty() {
        return Err(Error::data("predictions file has no pred_ columns"));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::data(format!("malformed predictions file: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::data(format!("line {line}, column {}: bad value", i + 1)))
        };
        out.push(PointPrediction {
            mean: pred.iter().map(|&i| get(i)).collect::<Result<_>>()?,
            variance: var.iter().map(|&i| get(i)).collect::<Result<_>>()?,
            class_probs: if prob.is_empty() {
                None
            } else {
                Some(prob.iter().map(|&i| get(i)).collect::<Result<_>>()?)
            },
            log_density: ld.map(get).transpose()?,
        });
    }
    Ok(out)
}

/// Points of `results` mapped back to the raw target scale.
pub fn raw_scale(results: &[PredictionResult], y_stats: Option<&Standardization>) -> Vec<PointPrediction> {
    results
        .iter()
        .map(|r| match y_stats {
            Some(s) => s.invert_prediction(&r.point),
            None => r.point.clone(),
        })
        .collect()
}
