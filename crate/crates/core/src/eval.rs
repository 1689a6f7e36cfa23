//! Evaluation metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::BlockGrid;
use crate::render::Image;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("similarity matrix: {0}")]
    Matrix(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("reading {path}: {message}")]
    File { path: std::path::PathBuf, message: String },
}

/// Similarities of render sets (rows) against captions (columns).
///
/// File form (JSON): `{"captions": [...], "scores": [[...], ...],
/// "true_caption": [...]}`. When `true_caption` is omitted row `i` belongs
/// to caption `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub captions: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_caption: Option<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn validate(&self) -> Result<(), EvalError> {
        let c = self.captions.len();
        if self.scores.is_empty() {
            return Err(EvalError::Matrix("no rows".into()));
        }
        for (i, row) in self.scores.iter().enumerate() {
            if row.len() != c {
                return Err(EvalError::Matrix(format!("row {i} has {} scores for {c} captions", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::Matrix(format!("row {i} has a non-finite score")));
            }
        }
        match &self.true_caption {
            Some(t) if t.len() != self.scores.len() => Err(EvalError::Matrix(format!(
                "{} true captions for {} rows",
                t.len(),
                self.scores.len()
            ))),
            Some(t) if t.iter().any(|&j| j >= c) => Err(EvalError::Matrix("true caption index out of range".into())),
            None if self.scores.len() > c => Err(EvalError::Matrix("more rows than captions without true_caption".into())),
            _ => Ok(()),
        }
    }

    pub fn truth(&self, row: usize) -> usize {
        self.true_caption.as_ref().map_or(row, |t| t[row])
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let err = |message: String| EvalError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// Percentage of render sets whose true caption is the strict row maximum,
/// averaged per caption over that caption's render sets, then over
/// captions. Ties count as failures.
pub fn r_precision(sim: &SimilarityMatrix) -> Result<f64, EvalError> {
    sim.validate()?;
    let mut per_caption: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, row) in sim.scores.iter().enumerate() {
        let t = sim.truth(i);
        let hit = row.iter().enumerate().all(|(j, &s)| j == t || s < row[t]);
        let e = per_caption.entry(t).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    let sum: f64 = per_caption.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(100.0 * sum / per_caption.len() as f64)
}

/// Cellwise agreement, air included.
pub fn block_accuracy(a: &BlockGrid, b: &BlockGrid) -> Result<f64, EvalError> {
    if a.size() != b.size() {
        return Err(EvalError::Mismatch(format!("grid sizes {} and {}", a.size(), b.size())));
    }
    let same = a.stored().iter().zip(b.stored()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.num_cells() as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(EvalError::Mismatch(format!(
            "image sizes {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10 · log10(1 / MSE)` in dB for images in `[0, 1]`; infinite when equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

/// PSNR of the pooled error over several image pairs.
pub fn mean_psnr(pairs: &[(Image, Image)]) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for (a, b) in pairs {
        total += mse(a, b)?;
    }
    let e = total / pairs.len() as f64;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}
