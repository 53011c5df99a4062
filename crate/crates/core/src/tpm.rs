//! Transition probability matrices, stationary distributions and the
//! multinomial-logit working parameterization of stochastic rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ChmmError, Result};

/// Entries below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance for accepting externally supplied rows before renormalizing them.
const INPUT_ROW_TOL: f64 = 1e-8;

/// Row-stochastic square matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TransitionMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for TransitionMatrix {
    type Error = ChmmError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        TransitionMatrix::from_rows(&rows)
    }
}

impl From<TransitionMatrix> for Vec<Vec<f64>> {
    fn from(m: TransitionMatrix) -> Self {
        m.rows()
    }
}

impl TransitionMatrix {
    /// Validates a row-major matrix. Rows must sum to one within 1e-8 and are
    /// renormalized so the stored rows sum to one to machine precision.
    pub fn new(dim: usize, mut entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.len() != dim * dim {
            return Err(ChmmError::Shape(format!(
                "transition matrix of dimension {dim} needs {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        for (i, row) in entries.chunks_mut(dim).enumerate() {
            normalize_row(row, i)?;
        }
        Ok(Self { dim, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(ChmmError::Shape(
                "transition matrix rows must all have length equal to the row count".into(),
            ));
        }
        Self::new(dim, rows.concat())
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self { dim, entries }
    }

    pub fn uniform(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![1.0 / dim as f64; dim * dim],
        }
    }

    /// Builds from entries that are row-stochastic by construction (no tolerance check).
    pub(crate) fn from_stochastic_unchecked(dim: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), dim * dim);
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Kronecker product `self ⊗ other`; rows of `self` index the slower digit.
    pub fn kron(&self, other: &TransitionMatrix) -> TransitionMatrix {
        let (a, b) = (self.dim, other.dim);
        let dim = a * b;
        let mut entries = vec![0.0; dim * dim];
        for i1 in 0..a {
            for j1 in 0..a {
                let x = self.get(i1, j1);
                for i2 in 0..b {
                    let row = i1 * b + i2;
                    for j2 in 0..b {
                        entries[row * dim + j1 * b + j2] = x * other.get(i2, j2);
                    }
                }
            }
        }
        TransitionMatrix { dim, entries }
    }

    /// Largest absolute deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.entries
            .chunks(self.dim)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix with rows and columns relabelled: `out[perm[i]][perm[j]] = self[i][j]`.
    pub fn permuted(&self, perm: &[usize]) -> TransitionMatrix {
        let k = self.dim;
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                entries[perm[i] * k + perm[j]] = self.get(i, j);
            }
        }
        TransitionMatrix { dim: k, entries }
    }
}

fn normalize_row(row: &mut [f64], i: usize) -> Result<()> {
    if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < 0.0 || **x > 1.0) {
        return Err(ChmmError::InvalidParameter(format!(
            "row {i} has entry {x} outside [0, 1]"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > INPUT_ROW_TOL {
        return Err(ChmmError::InvalidParameter(format!(
            "row {i} sums to {sum}, not 1"
        )));
    }
    row.iter_mut().for_each(|x| *x /= sum);
    Ok(())
}

/// Probability vector solving `δΓ = δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    probs: Vec<f64>,
}

impl StationaryDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }
}

/// Solves `δ(Γ − I) = 0, Σδ = 1` directly: the last balance equation of
/// `(Γᵀ − I)δᵀ = 0` is replaced by the normalization row.
pub fn stationary_distribution(tpm: &TransitionMatrix) -> Result<StationaryDistribution> {
    let k = tpm.dim();
    if k == 1 {
        return Ok(StationaryDistribution { probs: vec![1.0] });
    }
    let mut a = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            a[(j, i)] = tpm.get(i, j) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(k);
    b[k - 1] = 1.0;

    let lu = a.lu();
    let x = lu.solve(&b).ok_or_else(|| {
        ChmmError::NonUniqueStationary("balance equations are singular (reducible chain)".into())
    })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ChmmError::NonUniqueStationary(
            "balance equations are numerically singular".into(),
        ));
    }
    if x.iter().any(|&v| v < -1e-9) {
        return Err(ChmmError::NonUniqueStationary(format!(
            "solution has negative mass (min {:e}); the chain is not irreducible",
            x.min()
        )));
    }
    let mut probs: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);

    let residual = (0..k)
        .map(|j| ((0..k).map(|i| probs[i] * tpm.get(i, j)).sum::<f64>() - probs[j]).abs())
        .fold(0.0, f64::max);
    if residual > 1e-10 {
        return Err(ChmmError::NonUniqueStationary(format!(
            "balance residual {residual:e} exceeds 1e-10"
        )));
    }
    Ok(StationaryDistribution { probs })
}

/// Multinomial logits of a probability row relative to `reference`:
/// `log(p_j / p_ref)` for every `j != reference`, in column order.
pub fn logit_row(row: &[f64], reference: usize) -> Vec<f64> {
    let floored = |p: f64| {
        if p < PROB_FLOOR {
            log::warn!("probability {p:e} clamped to {PROB_FLOOR:e} before logit transform");
            PROB_FLOOR
        } else {
            p
        }
    };
    let log_ref = floored(row[reference]).ln();
    row.iter()
        .enumerate()
        .filter(|(j, _)| *j != reference)
        .map(|(_, &p)| floored(p).ln() - log_ref)
        .collect()
}

/// Inverse of [`logit_row`]; the output sums to one exactly up to rounding.
pub fn softmax_row(logits: &[f64], reference: usize) -> Vec<f64> {
    let n = logits.len() + 1;
    let mut out = Vec::with_capacity(n);
    let mut it = logits.iter();
    for j in 0..n {
        out.push(if j == reference { 0.0 } else { *it.next().unwrap() });
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.iter_mut().for_each(|x| *x = (*x - max).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

/// Row-wise logits with the diagonal as reference, `dim·(dim−1)` values.
pub fn tpm_to_working(tpm: &TransitionMatrix) -> Vec<f64> {
    (0..tpm.dim())
        .flat_map(|i| logit_row(tpm.row(i), i))
        .collect()
}

pub fn working_to_tpm(values: &[f64], dim: usize) -> Result<TransitionMatrix> {
    if values.len() != dim * dim.saturating_sub(1) {
        return Err(ChmmError::Shape(format!(
            "{dim}x{dim} transition matrix needs {} working values, got {}",
            dim * (dim - 1),
            values.len()
        )));
    }
    let mut entries = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        entries.extend(softmax_row(&values[i * (dim - 1)..(i + 1) * (dim - 1)], i));
    }
    Ok(TransitionMatrix::from_stochastic_unchecked(dim, entries))
}
