//! Validated numeric containers and the small-kernel math the pipeline
//! is built from.
//!
//! `Vec64`/`Mat64` reject non-finite entries at every construction point, so
//! NaN/Inf cannot propagate silently. `Simplex` additionally guarantees
//! strictly positive entries summing to one.

use crate::error::{AnlError, Result};
use crate::par;
use serde::{Deserialize, Deserializer, Serialize};

const SIMPLEX_SUM_TOL: f64 = 1e-12;
/// Floor applied to softmax outputs so extreme logits never round to zero.
const PROB_FLOOR: f64 = 1e-300;

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Dense vector of finite f64 values.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Vec64 {
    data: Vec<f64>,
}

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if !all_finite(&data) {
            return Err(AnlError::domain("Vec64::new", "non-finite entry"));
        }
        Ok(Vec64 { data })
    }

    pub fn zeros(n: usize) -> Self {
        Vec64 { data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vec64) -> Result<f64> {
        if self.len() != other.len() {
            return Err(AnlError::dim(
                "Vec64::dot",
                format!("{} vs {}", self.len(), other.len()),
            ));
        }
        Ok(dot(&self.data, &other.data))
    }

    /// Unit-norm copy. Errors on (near-)zero norm: direction is undefined.
    pub fn normalized(&self) -> Result<Vec64> {
        let n = self.norm();
        if n <= 0.0 {
            return Err(AnlError::domain("Vec64::normalized", "zero norm"));
        }
        Ok(Vec64 {
            data: self.data.iter().map(|x| x / n).collect(),
        })
    }
}

impl<'de> Deserialize<'de> for Vec64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        Vec64::new(data).map_err(serde::de::Error::custom)
    }
}

/// Dense row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AnlError::dim(
                "Mat64::new",
                format!("{} values for {}x{}", data.len(), rows, cols),
            ));
        }
        if !all_finite(&data) {
            return Err(AnlError::domain("Mat64::new", "non-finite entry"));
        }
        Ok(Mat64 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(AnlError::dim("Mat64::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Mat64::new(rows.len(), n_cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Replace the contents of row `i`, validating finiteness.
    pub fn set_row(&mut self, i: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.cols {
            return Err(AnlError::dim(
                "Mat64::set_row",
                format!("{} values for {} cols", values.len(), self.cols),
            ));
        }
        if !all_finite(values) {
            return Err(AnlError::domain("Mat64::set_row", "non-finite entry"));
        }
        self.row_mut(i).copy_from_slice(values);
        Ok(())
    }

    /// Gather the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Mat64> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(AnlError::dim(
                    "Mat64::select_rows",
                    format!("row {} of {}", i, self.rows),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Mat64 {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// `self * other`; (m x k)(k x n) -> (m x n). Rows computed in parallel.
    pub fn matmul(&self, other: &Mat64) -> Result<Mat64> {
        if self.cols != other.rows {
            return Err(AnlError::dim(
                "Mat64::matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let n = other.cols;
        let rows = par::map_indexed(self.rows, |i| {
            let a = self.row(i);
            let mut out = vec![0.0; n];
            for (k, &aik) in a.iter().enumerate() {
                let b = other.row(k);
                for j in 0..n {
                    out[j] += aik * b[j];
                }
            }
            out
        });
        let mut data = Vec::with_capacity(self.rows * n);
        for r in rows {
            data.extend_from_slice(&r);
        }
        Mat64::new(self.rows, n, data)
    }

    /// `self^T * other`; (m x k)^T (m x n) -> (k x n).
    pub fn matmul_ta(&self, other: &Mat64) -> Result<Mat64> {
        if self.rows != other.rows {
            return Err(AnlError::dim(
                "Mat64::matmul_ta",
                format!("{}x{} ^T * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let n = other.cols;
        let rows = par::map_indexed(self.cols, |i| {
            let mut out = vec![0.0; n];
            for r in 0..self.rows {
                let a = self.get(r, i);
                let b = other.row(r);
                for j in 0..n {
                    out[j] += a * b[j];
                }
            }
            out
        });
        let mut data = Vec::with_capacity(self.cols * n);
        for r in rows {
            data.extend_from_slice(&r);
        }
        Mat64::new(self.cols, n, data)
    }

    /// `self * other^T`; (m x k)(n x k)^T -> (m x n).
    pub fn matmul_tb(&self, other: &Mat64) -> Result<Mat64> {
        if self.cols != other.cols {
            return Err(AnlError::dim(
                "Mat64::matmul_tb",
                format!("{}x{} * {}x{} ^T", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let n = other.rows;
        let rows = par::map_indexed(self.rows, |i| {
            let a = self.row(i);
            let mut out = vec![0.0; n];
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = dot(a, other.row(j));
            }
            out
        });
        let mut data = Vec::with_capacity(self.rows * n);
        for r in rows {
            data.extend_from_slice(&r);
        }
        Mat64::new(self.rows, n, data)
    }

    pub fn add(&self, other: &Mat64) -> Result<Mat64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(AnlError::dim("Mat64::add", "shape mismatch"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat64::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Result<Mat64> {
        Mat64::new(self.rows, self.cols, self.data.iter().map(|x| x * s).collect())
    }

    /// L2-normalize every row. Errors if any row has zero norm.
    pub fn normalized_rows(&self) -> Result<Mat64> {
        let rows: Vec<Result<Vec<f64>>> = par::map_indexed(self.rows, |i| {
            let r = self.row(i);
            let n = dot(r, r).sqrt();
            if n <= 0.0 {
                Err(AnlError::domain(
                    "Mat64::normalized_rows",
                    format!("row {} has zero norm", i),
                ))
            } else {
                Ok(r.iter().map(|x| x / n).collect())
            }
        });
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in rows {
            data.extend_from_slice(&r?);
        }
        Mat64::new(self.rows, self.cols, data)
    }
}

impl<'de> Deserialize<'de> for Mat64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        Mat64::new(raw.rows, raw.cols, raw.data).map_err(serde::de::Error::custom)
    }
}

/// Discrete probability distribution: strictly positive entries, sum within
/// 1e-12 of one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Simplex {
    probs: Vec<f64>,
}

impl Simplex {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(AnlError::domain("Simplex::new", "empty"));
        }
        if !all_finite(&probs) || probs.iter().any(|&p| p <= 0.0) {
            return Err(AnlError::domain(
                "Simplex::new",
                "entries must be finite and strictly positive",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(AnlError::domain(
                "Simplex::new",
                format!("sum {} not within {} of 1", sum, SIMPLEX_SUM_TOL),
            ));
        }
        Ok(Simplex { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl<'de> Deserialize<'de> for Simplex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(d)?;
        Simplex::new(probs).map_err(serde::de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Errors on length mismatch or a zero-norm operand.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AnlError::dim(
            "cosine_sim",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= 0.0 || nb <= 0.0 {
        return Err(AnlError::domain("cosine_sim", "zero-norm operand"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Numerically stable softmax. The max is subtracted before exponentiation
/// and outputs are floored at 1e-300, so any finite logits yield a valid
/// `Simplex`.
pub fn softmax(logits: &[f64]) -> Result<Simplex> {
    if logits.is_empty() {
        return Err(AnlError::domain("softmax", "empty logits"));
    }
    if !all_finite(logits) {
        return Err(AnlError::domain("softmax", "non-finite logit"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| (e / sum).max(PROB_FLOOR)).collect();
    Simplex::new(probs)
}

/// Row-wise `log softmax(logits)`, stable for large logit spreads.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|x| (x - max).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|x| x - max - log_sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// 1 - cosine similarity.
    CosineDist,
}

/// Full pairwise distance matrix over the rows of `x`: symmetric,
/// zero diagonal, non-negative. Upper triangle is computed once (rows in
/// parallel) and mirrored, so symmetry is exact.
pub fn pairwise_distance(x: &Mat64, metric: Metric) -> Result<Mat64> {
    let n = x.rows();
    if metric == Metric::CosineDist {
        for i in 0..n {
            if norm(x.row(i)) <= 0.0 {
                return Err(AnlError::domain(
                    "pairwise_distance",
                    format!("row {} has zero norm", i),
                ));
            }
        }
    }
    let upper: Vec<Vec<f64>> = par::map_indexed(n, |i| {
        let a = x.row(i);
        (i + 1..n)
            .map(|j| {
                let b = x.row(j);
                match metric {
                    Metric::Euclidean => a
                        .iter()
                        .zip(b)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt(),
                    Metric::CosineDist => 1.0 - dot(a, b) / (norm(a) * norm(b)),
                }
            })
            .collect()
    });
    let mut out = Mat64::zeros(n, n);
    for i in 0..n {
        for (off, &d) in upper[i].iter().enumerate() {
            let j = i + 1 + off;
            // Cosine of near-identical rows can round slightly past the
            // mathematical range; clamp so distances stay non-negative.
            let d = d.max(0.0);
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

/// Pull a gradient on row-normalized vectors back to the raw rows:
/// for each row, `g = (d - (d . u) u) / |x|` where `u = x / |x|`. Errors
/// on zero-norm rows.
pub fn normalize_rows_grad(raw: &Mat64, d_unit: &Mat64) -> Result<Mat64> {
    if raw.rows() != d_unit.rows() || raw.cols() != d_unit.cols() {
        return Err(AnlError::dim("normalize_rows_grad", "raw vs gradient shape"));
    }
    let rows: Vec<Result<Vec<f64>>> = par::map_indexed(raw.rows(), |i| {
        let x = raw.row(i);
        let d = d_unit.row(i);
        let n = norm(x);
        if n <= 0.0 {
            return Err(AnlError::domain(
                "normalize_rows_grad",
                format!("row {} has zero norm", i),
            ));
        }
        let unit: Vec<f64> = x.iter().map(|v| v / n).collect();
        let radial = dot(d, &unit);
        Ok(d.iter()
            .zip(&unit)
            .map(|(g, u)| (g - radial * u) / n)
            .collect())
    });
    let mut out = Mat64::zeros(raw.rows(), raw.cols());
    for (i, row) in rows.into_iter().enumerate() {
        out.set_row(i, &row?)?;
    }
    Ok(out)
}

/// Central-difference gradient estimate of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(AnlError::domain("finite_diff_grad", "step must be positive"));
    }
    if !all_finite(x) {
        return Err(AnlError::domain("finite_diff_grad", "non-finite point"));
    }
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error used by gradient checks: |a-b| / max(1, |a|, |b|)
/// reduced over all coordinates.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / f64::max(1.0, f64::max(x.abs(), y.abs())))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn vec64_rejects_non_finite() {
        assert!(Vec64::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vec64::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(Vec64::new(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn mat64_shape_checks() {
        assert!(Mat64::new(2, 3, vec![0.0; 5]).is_err());
        let m = Mat64::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(m.get(1, 2), 6.0);
        assert_eq!(m.row(0), &[1., 2., 3.]);
        assert!(m.matmul(&Mat64::zeros(2, 2)).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Mat64::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Mat64::new(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transpose_products_match_explicit_forms() {
        let a = Mat64::new(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Mat64::new(3, 4, (0..12).map(|x| x as f64 * 0.5).collect()).unwrap();
        let ta = a.matmul_ta(&b).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut want = 0.0;
                for r in 0..3 {
                    want += a.get(r, i) * b.get(r, j);
                }
                assert_abs_diff_eq!(ta.get(i, j), want, epsilon = 1e-12);
            }
        }
        let c = Mat64::new(5, 2, (0..10).map(|x| (x as f64).cos()).collect()).unwrap();
        let tb = a.matmul_tb(&c).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_abs_diff_eq!(tb.get(i, j), dot(a.row(i), c.row(j)), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cosine_known_values() {
        assert_abs_diff_eq!(cosine_sim(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_sim(&[2., 0.], &[1., 0.]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            cosine_sim(&[1., 1.], &[1., 0.]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cosine_rejects_zero_norm_and_mismatch() {
        assert!(cosine_sim(&[0., 0.], &[1., 0.]).is_err());
        assert!(cosine_sim(&[1., 0.], &[1., 0., 0.]).is_err());
    }

    #[test]
    fn softmax_uniform_and_peaked() {
        let u = softmax(&[0., 0., 0.]).unwrap();
        for &p in u.probs() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[10., 0., 0.]).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.99990921, epsilon = 1e-8);
        assert_abs_diff_eq!(p.probs()[1], 0.00004540, epsilon = 1e-8);
        assert_abs_diff_eq!(p.probs()[2], 0.00004540, epsilon = 1e-8);
        assert_eq!(p.probs()[1], p.probs()[2]);
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = softmax(&[700.0, 0.0, -700.0]).unwrap();
        assert!(p.probs().iter().all(|&x| x > 0.0));
        let q = softmax(&[-1e8, 0.0]).unwrap();
        assert!(q.probs()[0] > 0.0);
    }

    #[test]
    fn log_softmax_consistent_with_softmax() {
        let logits = [1.5, -0.3, 0.2, 4.0];
        let lp = log_softmax(&logits);
        let p = softmax(&logits).unwrap();
        for (l, q) in lp.iter().zip(p.probs()) {
            assert_abs_diff_eq!(l.exp(), *q, epsilon = 1e-12);
        }
    }

    #[test]
    fn simplex_rejects_bad_inputs() {
        assert!(Simplex::new(vec![]).is_err());
        assert!(Simplex::new(vec![0.5, 0.5, 0.1]).is_err());
        assert!(Simplex::new(vec![1.0, 0.0]).is_err());
        assert!(Simplex::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn pairwise_euclidean_hand_case() {
        let x = Mat64::new(2, 2, vec![0., 0., 3., 4.]).unwrap();
        let d = pairwise_distance(&x, Metric::Euclidean).unwrap();
        assert_abs_diff_eq!(d.get(0, 1), 5.0, epsilon = 1e-12);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn pairwise_identical_rows_zero() {
        let x = Mat64::new(3, 4, vec![0.3; 12]).unwrap();
        let d = pairwise_distance(&x, Metric::Euclidean).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
        let dc = pairwise_distance(&x, Metric::CosineDist).unwrap();
        assert!(dc.as_slice().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn pairwise_matches_brute_force() {
        use crate::rng::{component_rng, stream};
        use rand::Rng;
        let mut rng = component_rng(11, stream::WORLD_NOISE);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Mat64::new(5, 3, data).unwrap();
        for metric in [Metric::Euclidean, Metric::CosineDist] {
            let d = pairwise_distance(&x, metric).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let want = if i == j {
                        0.0
                    } else {
                        match metric {
                            Metric::Euclidean => x
                                .row(i)
                                .iter()
                                .zip(x.row(j))
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt(),
                            Metric::CosineDist => {
                                1.0 - cosine_sim(x.row(i), x.row(j)).unwrap()
                            }
                        }
                    };
                    assert_abs_diff_eq!(d.get(i, j), want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let grad = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert_abs_diff_eq!(grad[0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(grad[1], 4.0, epsilon = 1e-8);
        let flat = finite_diff_grad(|_| 3.5, &[0.2, -0.7, 1.1], 1e-5).unwrap();
        assert!(flat.iter().all(|&g| g.abs() < 1e-10));
    }

    #[test]
    fn normalize_rows_grad_matches_finite_difference() {
        // Loss = sum of an arbitrary fixed linear functional of the
        // normalized rows; its raw-space gradient is the pulled-back one.
        let raw = Mat64::new(2, 3, vec![0.8, -0.3, 1.4, -1.1, 0.5, 0.2]).unwrap();
        let coeff = Mat64::new(2, 3, vec![0.7, 1.3, -0.4, 0.9, -1.6, 0.3]).unwrap();
        let loss = |flat: &[f64]| {
            let m = Mat64::new(2, 3, flat.to_vec()).unwrap();
            let u = m.normalized_rows().unwrap();
            u.as_slice()
                .iter()
                .zip(coeff.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, raw.as_slice(), 1e-6).unwrap();
        let analytic = normalize_rows_grad(&raw, &coeff).unwrap();
        assert!(max_rel_err(analytic.as_slice(), &fd) < 1e-7);
    }

    #[test]
    fn normalize_rows_grad_rejects_zero_row() {
        let raw = Mat64::new(1, 2, vec![0.0, 0.0]).unwrap();
        let d = Mat64::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(normalize_rows_grad(&raw, &d).is_err());
    }

    #[test]
    fn finite_diff_matches_softmax_ce_analytic() {
        let logits = [0.4, -1.2, 0.9, 0.0];
        let label = 2usize;
        let f = |z: &[f64]| -log_softmax(z)[label];
        let fd = finite_diff_grad(f, &logits, 1e-6).unwrap();
        let p = softmax(&logits).unwrap();
        let analytic: Vec<f64> = p
            .probs()
            .iter()
            .enumerate()
            .map(|(k, &pk)| if k == label { pk - 1.0 } else { pk })
            .collect();
        assert!(max_rel_err(&fd, &analytic) < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_is_valid_simplex(logits in proptest::collection::vec(-700.0f64..700.0, 1..20)) {
            let s = softmax(&logits).unwrap();
            let sum: f64 = s.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.probs().iter().all(|&p| p > 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 2..10),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted).unwrap();
            for (p, q) in a.probs().iter().zip(b.probs()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 2..8),
            s in 0.1f64..20.0,
        ) {
            prop_assume!(norm(&a) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            let c1 = cosine_sim(&a, &a).unwrap();
            let c2 = cosine_sim(&a, &scaled).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-9);
            prop_assert!((c1 - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pairwise_symmetric_nonneg(
            data in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let x = Mat64::new(4, 3, data).unwrap();
            let d = pairwise_distance(&x, Metric::Euclidean).unwrap();
            for i in 0..4 {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..4 {
                    prop_assert!(d.get(i, j) >= 0.0);
                    prop_assert_eq!(d.get(i, j).to_bits(), d.get(j, i).to_bits());
                }
            }
        }
    }
}
