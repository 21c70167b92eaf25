//! JSON problem files and CSV matrix input.
//!
//! ```json
//! {"Q": 3, "N": 2, "partition": [[0, 1]], "X": [[1, 0], [0, 1], [1, 1]],
//!  "y": [1, 2, 3], "lambda": 0.5, "beta0": null, "sigma": null}
//! ```
//!
//! `X` is row-major, either nested rows or one flat array of `Q*N` values.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockPartition, Design};
use crate::datagen::Scenario;
use crate::error::{Error, Result};
use crate::solver::Problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowMajor {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub partition: BlockPartition,
    #[serde(rename = "X")]
    pub x: RowMajor,
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

impl ProblemFile {
    pub fn from_scenario(scenario: &Scenario, y: &DVector<f64>, lambda: Option<f64>) -> Self {
        let x = scenario.design.matrix();
        Self {
            q: x.nrows(),
            n: x.ncols(),
            partition: (*scenario.partition).clone(),
            x: RowMajor::Rows(x.row_iter().map(|r| r.iter().copied().collect()).collect()),
            y: y.iter().copied().collect(),
            lambda,
            beta0: Some(scenario.beta0.iter().copied().collect()),
            sigma: Some(scenario.sigma),
            manifest: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        let values: Vec<f64> = match &self.x {
            RowMajor::Rows(rows) => {
                if rows.len() != self.q || rows.iter().any(|r| r.len() != self.n) {
                    return Err(Error::Format(format!("X is not {}x{}", self.q, self.n)));
                }
                rows.concat()
            }
            RowMajor::Flat(v) => {
                if v.len() != self.q * self.n {
                    return Err(Error::Format(format!(
                        "flat X has {} values, expected {}",
                        v.len(),
                        self.q * self.n
                    )));
                }
                v.clone()
            }
        };
        Ok(DMatrix::from_row_slice(self.q, self.n, &values))
    }

    /// Validated design, partition and observations.
    pub fn parts(&self) -> Result<(Arc<Design>, Arc<BlockPartition>, DVector<f64>)> {
        if self.y.len() != self.q {
            return Err(Error::Format(format!("y has {} values, expected {}", self.y.len(), self.q)));
        }
        if self.partition.total_dim() != self.n {
            return Err(Error::Format(format!(
                "partition covers {} coordinates, expected {}",
                self.partition.total_dim(),
                self.n
            )));
        }
        let design = Design::new(self.matrix()?)?;
        Ok((
            Arc::new(design),
            Arc::new(self.partition.clone()),
            DVector::from_vec(self.y.clone()),
        ))
    }

    /// The problem at `lambda`, falling back to the file's own value.
    pub fn problem(&self, lambda: Option<f64>) -> Result<Problem> {
        let lambda = lambda
            .or(self.lambda)
            .ok_or_else(|| Error::Format("no lambda given and none in the problem file".into()))?;
        let (design, partition, y) = self.parts()?;
        Problem::new(design, partition, y, lambda)
    }
}

/// Numeric CSV; fields separated by commas or whitespace, `#` starts a comment line.
pub fn parse_csv_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number {f:?}", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format("CSV rows are empty or ragged".into()));
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &rows.concat()))
}

/// A column vector from CSV: one value per line, or a single row.
pub fn parse_csv_vector(text: &str) -> Result<DVector<f64>> {
    let m = parse_csv_matrix(text)?;
    match m.shape() {
        (_, 1) => Ok(m.column(0).into_owned()),
        (1, _) => Ok(m.row(0).transpose()),
        (r, c) => Err(Error::Format(format!("expected a vector, got {r}x{c}"))),
    }
}

/// Problem file assembled from CSV design and response files.
pub fn problem_from_csv(
    x_text: &str,
    y_text: &str,
    partition: BlockPartition,
    lambda: Option<f64>,
) -> Result<ProblemFile> {
    let x = parse_csv_matrix(x_text)?;
    let y = parse_csv_vector(y_text)?;
    Ok(ProblemFile {
        q: x.nrows(),
        n: x.ncols(),
        partition,
        x: RowMajor::Rows(x.row_iter().map(|r| r.iter().copied().collect()).collect()),
        y: y.iter().copied().collect(),
        lambda,
        beta0: None,
        sigma: None,
        manifest: None,
    })
}
