//! Dense vector and matrix primitives shared by every loss.
//!
//! Everything here is `f64`. Vectors are plain slices; [`Mat`] is a
//! row-major matrix whose entries are checked finite on construction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this floor are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix construction",
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Stack `self` on top of `other`.
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: other.cols,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Copy of the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Embedding rows with one identity label per row.
///
/// Training batches hold two views per image: rows `0..N` come from the
/// first dropout channel and rows `N..2N` from the second, so the views of
/// image `i` sit at rows `i` and `N + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Mat,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Mat, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.rows(),
                actual: labels.len(),
            });
        }
        Ok(EmbeddingBatch { embeddings, labels })
    }

    /// Build a two-view batch from per-image labels.
    pub fn paired(embeddings: Mat, image_labels: &[usize]) -> Result<Self> {
        if embeddings.rows() != 2 * image_labels.len() {
            return Err(Error::DimensionMismatch {
                expected: 2 * image_labels.len(),
                actual: embeddings.rows(),
            });
        }
        let labels = image_labels.iter().chain(image_labels).copied().collect();
        Ok(EmbeddingBatch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Number of images in a two-view batch.
    pub fn num_images(&self) -> usize {
        self.len() / 2
    }

    pub fn image_labels(&self) -> &[usize] {
        &self.labels[..self.num_images()]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        self.embeddings.row(r)
    }
}

/// Cosine similarities between selected rows of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    pub values: Mat,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_FLOOR) {
        return Err(Error::ZeroNorm { index: 0, norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = norm(a);
    if !(na > NORM_FLOOR) {
        return Err(Error::ZeroNorm { index: 0, norm: na });
    }
    let nb = norm(b);
    if !(nb > NORM_FLOOR) {
        return Err(Error::ZeroNorm { index: 1, norm: nb });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn sim_matrix(batch: &EmbeddingBatch, rows: &[usize], cols: &[usize]) -> Result<SimMatrix> {
    for &i in rows.iter().chain(cols) {
        if i >= batch.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: batch.len(),
            });
        }
        let n = norm(batch.row(i));
        if !(n > NORM_FLOOR) {
            return Err(Error::ZeroNorm { index: i, norm: n });
        }
    }
    // Each entry is computed independently, so the thread count cannot
    // change any bit of the result.
    let data: Vec<f64> = rows
        .par_iter()
        .flat_map_iter(|&r| {
            cols.iter()
                .map(move |&c| cosine_sim(batch.row(r), batch.row(c)).expect("norms checked"))
        })
        .collect();
    Ok(SimMatrix {
        values: Mat::from_vec(rows.len(), cols.len(), data)?,
        row_ids: rows.to_vec(),
        col_ids: cols.to_vec(),
    })
}

/// `log(sum(exp(z)))` with max subtraction.
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Softmax probabilities, computed with the same max shift as [`logsumexp`].
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy `-log softmax(logits)[target]`.
///
/// Evaluated as `log(1 + sum_{k != t} exp(z_k - z_t))`, which keeps full
/// relative precision when the target dominates and the loss is tiny.
pub fn log_softmax_ce(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let zt = logits[target];
    let others = || {
        logits
            .iter()
            .enumerate()
            .filter(move |&(k, _)| k != target)
            .map(move |(_, z)| z - zt)
    };
    let m = others().fold(f64::NEG_INFINITY, f64::max);
    Ok(if m == f64::NEG_INFINITY {
        0.0
    } else if m > 0.0 {
        m + ((-m).exp() + others().map(|d| (d - m).exp()).sum::<f64>()).ln()
    } else {
        others().map(f64::exp).sum::<f64>().ln_1p()
    })
}

/// Normalize every row in place, returning the original norms.
pub fn normalize_rows(m: &mut Mat) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = norm(row);
        if !(n > NORM_FLOOR) {
            return Err(Error::ZeroNorm { index: r, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(norms)
}

/// Backward pass of row normalization `u = x / |x|`.
///
/// Given the normalized rows `u`, the original norms and `dL/du`, returns
/// `dL/dx = (g - u (u . g)) / |x|`.
pub fn normalize_rows_backward(unit: &Mat, norms: &[f64], grad_unit: &Mat) -> Mat {
    let mut out = Mat::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let u = unit.row(r);
        let g = grad_unit.row(r);
        let proj = dot(u, g);
        let inv = 1.0 / norms[r];
        for (o, (ui, gi)) in out.row_mut(r).iter_mut().zip(u.iter().zip(g)) {
            *o = (gi - ui * proj) * inv;
        }
    }
    out
}

/// `a * b^T` for row-major `a` (m x k) and `b` (n x k).
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.cols());
    let mut out = Mat::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            out.set(i, j, dot(ar, b.row(j)));
        }
    }
    out
}

/// `a * b` for row-major `a` (m x k) and `b` (k x n).
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.rows());
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let orow = &mut out.data[i * b.cols()..(i + 1) * b.cols()];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a^T * b` for row-major `a` (k x m) and `b` (k x n).
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows(), b.rows());
    let mut out = Mat::zeros(a.cols(), b.cols());
    for k in 0..a.rows() {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols()..(i + 1) * b.cols()];
            for (o, bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    out
}
