//! Block partitions, block supports and the block-structured operators built on them.
//!
//! Vectors restricted to a support ("compact" vectors) concatenate the active
//! blocks in increasing block order, each block's coordinates in increasing
//! index order. [`BlockSupport::coords`] gives the matching global indices.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative factor of the default support tolerance (`1e-10 * max|beta_i|`).
pub const DEFAULT_SUPPORT_REL_TOL: f64 = 1e-10;

/// Disjoint segmentation of `{0..N-1}` into nonempty blocks, kept in canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct BlockPartition {
    blocks: Vec<Vec<usize>>,
    total_dim: usize,
}

impl BlockPartition {
    /// Builds a partition from arbitrary index lists. Indices inside a block are
    /// sorted and blocks are ordered by their smallest index.
    pub fn new(blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut blocks = blocks;
        if blocks.is_empty() {
            return Err(Error::InvalidPartition("no blocks".into()));
        }
        for (i, block) in blocks.iter_mut().enumerate() {
            if block.is_empty() {
                return Err(Error::InvalidPartition(format!("block {i} is empty")));
            }
            block.sort_unstable();
        }
        blocks.sort_by_key(|b| b[0]);
        let total_dim: usize = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; total_dim];
        for block in &blocks {
            for &idx in block {
                if idx >= total_dim {
                    return Err(Error::InvalidPartition(format!(
                        "index {idx} outside 0..{total_dim}"
                    )));
                }
                if seen[idx] {
                    return Err(Error::InvalidPartition(format!("index {idx} appears twice")));
                }
                seen[idx] = true;
            }
        }
        Ok(Self { blocks, total_dim })
    }

    /// Consecutive blocks with the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&s| {
                let b: Vec<usize> = (start..start + s).collect();
                start += s;
                b
            })
            .collect();
        Self::new(blocks)
    }

    /// `n` blocks of size one (the plain Lasso).
    pub fn singletons(n: usize) -> Result<Self> {
        Self::contiguous(&vec![1; n])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.blocks).expect("index lists always serialize")
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &[usize] {
        &self.blocks[b]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Euclidean norm of the subvector of `v` on block `b`.
    pub fn block_norm(&self, v: &DVector<f64>, b: usize) -> f64 {
        self.blocks[b].iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<Vec<usize>>> for BlockPartition {
    type Error = Error;

    fn try_from(blocks: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(blocks)
    }
}

impl From<BlockPartition> for Vec<Vec<usize>> {
    fn from(p: BlockPartition) -> Self {
        p.blocks
    }
}

/// The set of blocks carrying nonzero coefficients.
#[derive(Debug, Clone)]
pub struct BlockSupport {
    active: Vec<usize>,
    partition: Arc<BlockPartition>,
    active_dim: usize,
}

impl BlockSupport {
    /// Support made of the listed block ids (deduplicated and sorted).
    pub fn new(partition: Arc<BlockPartition>, active: Vec<usize>) -> Result<Self> {
        let mut active = active;
        active.sort_unstable();
        active.dedup();
        if let Some(&b) = active.iter().find(|&&b| b >= partition.num_blocks()) {
            return Err(Error::InvalidParameter(format!(
                "block {b} not in partition of {} blocks",
                partition.num_blocks()
            )));
        }
        let active_dim = active.iter().map(|&b| partition.block(b).len()).sum();
        Ok(Self {
            active,
            partition,
            active_dim,
        })
    }

    pub fn empty(partition: Arc<BlockPartition>) -> Self {
        Self {
            active: Vec::new(),
            partition,
            active_dim: 0,
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    pub fn active_dim(&self) -> usize {
        self.active_dim
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, block: usize) -> bool {
        self.active.binary_search(&block).is_ok()
    }

    pub fn inactive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.partition.num_blocks()).filter(move |b| !self.contains(*b))
    }

    /// Global coordinate indices in compact order.
    pub fn coords(&self) -> Vec<usize> {
        self.active
            .iter()
            .flat_map(|&b| self.partition.block(b).iter().copied())
            .collect()
    }

    /// `(block id, range inside the compact vector)` for each active block.
    pub fn compact_ranges(&self) -> Vec<(usize, Range<usize>)> {
        let mut start = 0;
        self.active
            .iter()
            .map(|&b| {
                let len = self.partition.block(b).len();
                let r = start..start + len;
                start += len;
                (b, r)
            })
            .collect()
    }

    /// Restriction of a full-length vector to the support.
    pub fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.active_dim, self.coords().into_iter().map(|i| v[i]))
    }

    /// Zero-padded full-length vector from a compact one.
    pub fn extend(&self, compact: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.partition.total_dim());
        for (k, i) in self.coords().into_iter().enumerate() {
            full[i] = compact[k];
        }
        full
    }

    /// The columns `X_I` of a matrix, in compact order.
    pub fn columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.select_columns(self.coords().iter())
    }

    /// Principal submatrix `G_II` of a square matrix.
    pub fn principal(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let coords = self.coords();
        g.select_rows(coords.iter()).select_columns(coords.iter())
    }
}

impl PartialEq for BlockSupport {
    fn eq(&self, other: &Self) -> bool {
        self.active == other.active && self.partition == other.partition
    }
}

/// A coefficient vector tied to its block partition.
#[derive(Debug, Clone)]
pub struct Coefficients {
    values: DVector<f64>,
    partition: Arc<BlockPartition>,
}

impl Coefficients {
    pub fn new(values: DVector<f64>, partition: Arc<BlockPartition>) -> Result<Self> {
        if values.len() != partition.total_dim() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient length {} but partition covers {}",
                values.len(),
                partition.total_dim()
            )));
        }
        Ok(Self { values, partition })
    }

    pub fn zeros(partition: Arc<BlockPartition>) -> Self {
        Self {
            values: DVector::zeros(partition.total_dim()),
            partition,
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    pub fn block_norm(&self, b: usize) -> f64 {
        self.partition.block_norm(&self.values, b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }

    /// Support with the relative default tolerance `1e-10 * max|beta_i|`.
    pub fn support(&self) -> BlockSupport {
        block_support(self, DEFAULT_SUPPORT_REL_TOL * self.max_abs())
    }
}

/// Blocks whose Euclidean norm exceeds `tol`.
pub fn block_support(beta: &Coefficients, tol: f64) -> BlockSupport {
    let partition = Arc::clone(&beta.partition);
    let active: Vec<usize> = (0..partition.num_blocks())
        .filter(|&b| beta.block_norm(b) > tol)
        .collect();
    let active_dim = active.iter().map(|&b| partition.block(b).len()).sum();
    BlockSupport {
        active,
        partition,
        active_dim,
    }
}

/// Scales each active block of a compact vector to unit norm.
pub fn normalize_blocks(support: &BlockSupport, beta_i: &DVector<f64>) -> Result<DVector<f64>> {
    check_compact(support, beta_i)?;
    let mut out = beta_i.clone();
    for (b, range) in support.compact_ranges() {
        let norm = beta_i.rows_range(range.clone()).norm();
        if norm == 0.0 {
            return Err(Error::DegenerateBlock { block: b });
        }
        out.rows_range_mut(range).unscale_mut(norm);
    }
    Ok(out)
}

/// Dense block-diagonal matrix of `delta_beta ∘ P_beta`: on block `b` it is
/// `(Id - u u^T) / ||beta_b||` with `u = beta_b / ||beta_b||`.
pub fn delta_p_matrix(support: &BlockSupport, beta_i: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_compact(support, beta_i)?;
    let dim = support.active_dim();
    let mut m = DMatrix::zeros(dim, dim);
    for (b, range) in support.compact_ranges() {
        let block = beta_i.rows_range(range.clone());
        let norm = block.norm();
        if norm == 0.0 {
            return Err(Error::DegenerateBlock { block: b });
        }
        let u = block / norm;
        let len = range.len();
        let proj = DMatrix::identity(len, len) - &u * u.transpose();
        m.view_mut((range.start, range.start), (len, len))
            .copy_from(&(proj / norm));
    }
    Ok(m)
}

fn check_compact(support: &BlockSupport, v: &DVector<f64>) -> Result<()> {
    if v.len() != support.active_dim() {
        return Err(Error::DimensionMismatch(format!(
            "compact vector length {} but support dimension {}",
            v.len(),
            support.active_dim()
        )));
    }
    Ok(())
}

/// Full-column-rank design matrix `X` with its cached Gram matrix.
#[derive(Debug, Clone)]
pub struct Design {
    matrix: DMatrix<f64>,
    gram: DMatrix<f64>,
    identity: bool,
}

/// Smallest admissible Gram eigenvalue relative to the largest one.
const RANK_REL_TOL: f64 = 1e-12;

impl Design {
    /// Validates `Q >= N` and that `X^T X` is positive definite.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (q, n) = matrix.shape();
        if n == 0 {
            return Err(Error::InvalidDesign("design has no columns".into()));
        }
        if q < n {
            return Err(Error::InvalidDesign(format!(
                "underdetermined design: {q} rows < {n} columns"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDesign("non-finite entry".into()));
        }
        let gram = matrix.tr_mul(&matrix);
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let (min, max) = (eig.min(), eig.max());
        if !(max > 0.0) || min <= RANK_REL_TOL * max || gram.clone().cholesky().is_none() {
            return Err(Error::InvalidDesign(format!(
                "columns are not linearly independent (Gram eigenvalues in [{min:e}, {max:e}])"
            )));
        }
        let identity = q == n && matrix == DMatrix::identity(n, n);
        Ok(Self {
            matrix,
            gram,
            identity,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            gram: DMatrix::identity(n, n),
            identity: true,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }
}
