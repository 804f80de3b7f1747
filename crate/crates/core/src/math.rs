//! Small numeric kernels shared by the semantic and loss modules.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Tolerance used when checking unit-norm preconditions.
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable log-softmax of one vector.
pub fn log_softmax(xs: ArrayView1<f64>) -> Vec<f64> {
    let lse = log_sum_exp(xs.iter().copied());
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: ArrayView1<f64>) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        for (j, p) in softmax(row).into_iter().enumerate() {
            out[[i, j]] = p;
        }
    }
    out
}

/// Fails unless every row has unit Euclidean norm.
pub fn check_unit_rows(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let n = norm(row);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Precondition(format!(
                "{what}: row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// `a · bᵀ` computed entry by entry so each entry is a plain dot product.
pub fn gram(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.axis_iter(Axis(0)).enumerate() {
        for (j, rb) in b.axis_iter(Axis(0)).enumerate() {
            out[[i, j]] = dot(ra, rb);
        }
    }
    out
}

/// Divides every row by its norm; zero or non-finite rows are reported by index.
pub fn normalize_rows(m: &mut Array2<f64>) -> std::result::Result<(), usize> {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let n = norm(row.view());
        if !n.is_finite() || n == 0.0 {
            return Err(i);
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(())
}
