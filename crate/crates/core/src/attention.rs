//! Scaled dot-product causal attention and the validated attention map type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{causal_visible, dot, softmax_in_place, softmax_rows, DenseMatrix};

/// Row-stochastic tolerance for attention maps.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Square causal row-stochastic matrix of attention scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    matrix: DenseMatrix,
}

impl AttentionMap {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        let n = matrix.rows();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if matrix.cols() != n {
            return Err(Error::InvalidAttentionMap(format!(
                "not square: {}x{}",
                n,
                matrix.cols()
            )));
        }
        for (i, row) in matrix.row_iter().enumerate() {
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if v < 0.0 {
                    return Err(Error::InvalidAttentionMap(format!(
                        "negative entry at ({i}, {j})"
                    )));
                }
                if j > i && v != 0.0 {
                    return Err(Error::InvalidAttentionMap(format!(
                        "non-causal entry at ({i}, {j})"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidAttentionMap(format!(
                    "row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self { matrix })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(DenseMatrix::from_rows(rows)?)
    }

    /// Uniform causal map: row `i` puts `1/(i+1)` on each visible column.
    pub fn uniform_causal(n: usize) -> Result<Self> {
        let mut m = DenseMatrix::zeros(n, n).into_data();
        for i in 0..n {
            for j in 0..=i {
                m[i * n + j] = 1.0 / (i + 1) as f64;
            }
        }
        Self::new(DenseMatrix::new(n, n, m)?)
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    /// The visible prefix of row `i` (`i + 1` entries).
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix.row(i)[..=i]
    }

    /// Sum of each column over all rows (the cumulative attention each key received).
    pub fn column_sums(&self) -> Vec<f64> {
        let n = self.len();
        let mut sums = vec![0.0; n];
        for i in 0..n {
            for (j, v) in self.row(i).iter().enumerate() {
                sums[j] += v;
            }
        }
        sums
    }
}

#[inline]
pub(crate) fn scaled_logit(q: &[f64], k: &[f64], d_k: usize) -> f64 {
    dot(q, k) / (d_k as f64).sqrt()
}

/// Causal self-attention over a full sequence: returns `softmax(QKᵀ/√d_k)` with
/// future positions masked, and the attended output `A·V`.
pub fn causal_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    d_k: usize,
) -> Result<(AttentionMap, DenseMatrix)> {
    if q.cols() != d_k {
        return Err(Error::mismatch("Q", format!("{d_k} columns"), q.cols()));
    }
    if k.cols() != d_k {
        return Err(Error::mismatch("K", format!("{d_k} columns"), k.cols()));
    }
    if v.rows() != k.rows() {
        return Err(Error::mismatch("V", format!("{} rows", k.rows()), v.rows()));
    }
    if q.rows() != k.rows() {
        return Err(Error::mismatch("Q", format!("{} rows", k.rows()), q.rows()));
    }
    let n = q.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut logits = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            logits.push(if j <= i {
                scaled_logit(q.row(i), k.row(j), d_k)
            } else {
                0.0
            });
        }
    }
    let scores = softmax_rows(&DenseMatrix::new(n, n, logits)?, Some(&causal_visible(n)))?;
    let mut out = Vec::with_capacity(n * v.cols());
    for i in 0..n {
        let row = &scores.row(i)[..=i];
        out.extend(weighted_sum(row, v, |j| j));
    }
    let out = DenseMatrix::new(n, v.cols(), out)?;
    Ok((AttentionMap::new(scores)?, out))
}

/// Output accumulation `Σ_j w_j · V[idx(j)]` in ascending `j`.
fn weighted_sum(
    weights: &[f64],
    v: &DenseMatrix,
    idx: impl Fn(usize) -> usize,
) -> Vec<f64> {
    let mut acc = vec![0.0; v.cols()];
    for (j, &w) in weights.iter().enumerate() {
        for (a, x) in acc.iter_mut().zip(v.row(idx(j))) {
            *a += w * x;
        }
    }
    acc
}

/// Attention of a single query over a set of cached key/value rows.
///
/// Returns the normalized score row (one entry per cached row, in row order)
/// and the attended output. The arithmetic matches the corresponding row of
/// [`causal_attention`] exactly when the cache holds every prior position.
pub fn attend(
    q: &[f64],
    keys: &DenseMatrix,
    values: &DenseMatrix,
    d_k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if q.len() != d_k || keys.cols() != d_k {
        return Err(Error::mismatch("query/keys", d_k, format!("{}/{}", q.len(), keys.cols())));
    }
    if values.rows() != keys.rows() {
        return Err(Error::mismatch("values", keys.rows(), values.rows()));
    }
    let mut row: Vec<f64> = keys.row_iter().map(|k| scaled_logit(q, k, d_k)).collect();
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention logits"));
    }
    softmax_in_place(&mut row);
    let out = weighted_sum(&row, values, |j| j);
    Ok((row, out))
}
