//! Dense matrices, probability vectors and the information-theoretic
//! scalars (entropy, cross-entropy, KL) shared by every other module.
//!
//! All logarithms are natural, so every divergence is in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the second argument of KL and cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the unit-sum constraint of a [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Row-major dense matrix of finite `f64` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite matrix entry at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> RealMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        RealMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Appends the rows of `other`; column counts must agree.
    pub fn append_rows(&mut self, other: &RealMatrix) -> Result<()> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::invalid(format!(
                "cannot append {}-column rows to a {}-column matrix",
                other.cols, self.cols
            )));
        }
        if self.rows == 0 {
            self.cols = other.cols;
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y` for a vector `y` of length `rows`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in self.row_iter().zip(y) {
            if yr != 0.0 {
                for (o, &w) in out.iter_mut().zip(r) {
                    *o += w * yr;
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A point on the probability simplex over `k ≥ 2` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid(format!(
                "probability vector needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::invalid("probability entries must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Self(v)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("softmax input contains a non-finite logit"));
    }
    Ok(softmax_finite(logits))
}

/// Softmax for logits already known to be finite.
pub(crate) fn softmax_finite(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    ProbVector(out)
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.0.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

fn check_same_k(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.k() != q.k() {
        return Err(Error::invalid(format!(
            "class-count mismatch: {} vs {}",
            p.k(),
            q.k()
        )));
    }
    Ok(())
}

/// `−Σ pᵢ ln max(qᵢ, 1e-12)`.
pub fn cross_entropy(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_k(p, q)?;
    Ok(-p
        .0
        .iter()
        .zip(&q.0)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * qi.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// `Σ pᵢ ln(pᵢ / max(qᵢ, 1e-12))`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_k(p, q)?;
    Ok(p.0
        .iter()
        .zip(&q.0)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum::<f64>())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_label(p: &ProbVector) -> usize {
    argmax(&p.0)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Outcome of comparing `H(X|Y)` against the marginal cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalEntropyCheck {
    pub conditional_entropy: f64,
    pub marginal_cross_entropy: f64,
    pub bound_holds: bool,
}

/// Exact enumeration of `H(X|Y)` and `l(X, Y) = −Σ Pr(X=i) ln Pr(Y=i)` for
/// a joint table with rows indexed by X and columns by Y.
///
/// The two marginals are compared on a shared alphabet `0..max(k, m)`; the
/// shorter marginal is zero-padded and the usual floor applies to it.
#[allow(clippy::needless_range_loop)]
pub fn conditional_entropy_vs_cross_entropy_check(
    joint: &RealMatrix,
) -> Result<ConditionalEntropyCheck> {
    let (k, m) = (joint.rows(), joint.cols());
    if k == 0 || m == 0 {
        return Err(Error::invalid("joint table must be non-empty"));
    }
    if joint.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("joint table has negative entries"));
    }
    let total: f64 = joint.as_slice().iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("joint table sums to {total}")));
    }

    let width = k.max(m);
    let mut px = vec![0.0; width];
    let mut py = vec![0.0; width];
    for i in 0..k {
        for j in 0..m {
            let v = joint.get(i, j);
            px[i] += v;
            py[j] += v;
        }
    }

    let mut h_x_given_y = 0.0;
    for i in 0..k {
        for j in 0..m {
            let v = joint.get(i, j);
            if v > 0.0 {
                h_x_given_y -= v * (v / py[j]).ln();
            }
        }
    }

    let ce: f64 = -px
        .iter()
        .zip(&py)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * b.max(PROB_FLOOR).ln())
        .sum::<f64>();

    Ok(ConditionalEntropyCheck {
        conditional_entropy: h_x_given_y,
        marginal_cross_entropy: ce,
        bound_holds: h_x_given_y <= ce + 1e-9,
    })
}
