//! Gradient-free label semantics.
//!
//! Intra-task similarity `S = T·Tᵀ` over the current label embeddings turns
//! into soft targets with a temperature-like sharpness `alpha`; cross-task
//! similarity `T·Oᵀ` against old-class embeddings turns into distillation
//! targets with temperature `tau`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::math;

const SYMMETRY_TOL: f64 = 1e-6;

/// `K × K` semantically-guided targets. Row `c` is the target distribution for
/// a sample whose ground-truth class is `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    values: Array2<f64>,
    alpha: f64,
    class_order: Vec<String>,
}

impl SoftLabelMatrix {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn class_order(&self) -> &[String] {
        &self.class_order
    }

    pub fn num_classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, class: usize) -> ArrayView1<'_, f64> {
        self.values.row(class)
    }

    /// Attaches class names; the length must match `K`.
    pub fn with_class_order(mut self, order: Vec<String>) -> Result<Self> {
        if order.len() != self.num_classes() {
            return Err(Error::Shape(format!(
                "class order has {} names for {} classes",
                order.len(),
                self.num_classes()
            )));
        }
        self.class_order = order;
        Ok(self)
    }

    /// One-hot targets blended with `eps` of uniform mass so that every entry
    /// stays strictly positive.
    pub fn one_hot(k: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::config("eps", format!("{eps} must lie in (0, 1)")));
        }
        let uniform = eps / k as f64;
        let values = Array2::from_shape_fn((k, k), |(i, j)| {
            if i == j {
                1.0 - eps + uniform
            } else {
                uniform
            }
        });
        Ok(Self {
            values,
            alpha: f64::INFINITY,
            class_order: Vec::new(),
        })
    }
}

/// `K_new × M` distillation targets over old classes.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTargetMatrix {
    values: Array2<f64>,
    tau: f64,
    new_order: Vec<String>,
    old_order: Vec<String>,
}

impl DistillTargetMatrix {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn row(&self, new_class: usize) -> ArrayView1<'_, f64> {
        self.values.row(new_class)
    }

    pub fn new_order(&self) -> &[String] {
        &self.new_order
    }

    pub fn old_order(&self) -> &[String] {
        &self.old_order
    }

    pub fn with_orders(mut self, new_order: Vec<String>, old_order: Vec<String>) -> Result<Self> {
        if new_order.len() != self.values.nrows() || old_order.len() != self.values.ncols() {
            return Err(Error::Shape(format!(
                "orders of length {}×{} for a {}×{} target matrix",
                new_order.len(),
                old_order.len(),
                self.values.nrows(),
                self.values.ncols()
            )));
        }
        self.new_order = new_order;
        self.old_order = old_order;
        Ok(self)
    }
}

/// Cosine similarity between every pair of current-task label embeddings.
pub fn intra_similarity(t: ArrayView2<f64>) -> Result<Array2<f64>> {
    math::check_unit_rows(t, "label embeddings")?;
    let k = t.nrows();
    let mut s = Array2::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let v = math::dot(t.row(i), t.row(j)).clamp(-1.0, 1.0);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(s)
}

/// `C[i, j] = exp(α·S[i, j]) / Σ_k exp(α·S[i, k])`.
pub fn soft_labels(s: ArrayView2<f64>, alpha: f64) -> Result<SoftLabelMatrix> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::config("alpha", format!("{alpha} must be a finite value ≥ 0")));
    }
    let k = s.nrows();
    if s.ncols() != k {
        return Err(Error::Shape(format!("similarity matrix is {}×{}", k, s.ncols())));
    }
    for i in 0..k {
        for j in 0..i {
            if (s[[i, j]] - s[[j, i]]).abs() > SYMMETRY_TOL {
                return Err(Error::Precondition(format!(
                    "similarity matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let scaled = s.mapv(|x| alpha * x);
    Ok(SoftLabelMatrix {
        values: math::softmax_rows(scaled.view()),
        alpha,
        class_order: Vec::new(),
    })
}

/// Cosine similarity of each current class (rows) to each old class (columns).
pub fn inter_similarity(t_new: ArrayView2<f64>, o_old: ArrayView2<f64>) -> Result<Array2<f64>> {
    if o_old.nrows() == 0 {
        return Err(Error::Precondition(
            "no old classes; cross-task distillation is inactive on the first task".into(),
        ));
    }
    if t_new.ncols() != o_old.ncols() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            t_new.ncols(),
            o_old.ncols()
        )));
    }
    math::check_unit_rows(t_new, "current label embeddings")?;
    math::check_unit_rows(o_old, "old label embeddings")?;
    Ok(math::gram(t_new, o_old).mapv(|x| x.clamp(-1.0, 1.0)))
}

/// Row-wise softmax of `S_cross / tau`.
pub fn distill_targets(s_cross: ArrayView2<f64>, tau: f64) -> Result<DistillTargetMatrix> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::config("tau", format!("{tau} must be a finite value > 0")));
    }
    let scaled = s_cross.mapv(|x| x / tau);
    Ok(DistillTargetMatrix {
        values: math::softmax_rows(scaled.view()),
        tau,
        new_order: Vec::new(),
        old_order: Vec::new(),
    })
}

/// Index of the most similar old class for each current class.
pub fn most_similar_old(s_cross: ArrayView2<f64>) -> Vec<usize> {
    s_cross
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn planar(deg: &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((deg.len(), 2));
        for (i, d) in deg.iter().enumerate() {
            let r = d.to_radians();
            m[[i, 0]] = r.cos();
            m[[i, 1]] = r.sin();
        }
        m
    }

    #[test]
    fn intra_similarity_examples() {
        let same = array![[0.6, 0.8], [0.6, 0.8]];
        assert_abs_diff_eq!(intra_similarity(same.view()).unwrap(), array![[1.0, 1.0], [1.0, 1.0]], epsilon = 1e-12);
        let ortho = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(intra_similarity(ortho.view()).unwrap(), array![[1.0, 0.0], [0.0, 1.0]]);
        let c30 = 30f64.to_radians().cos();
        let s = intra_similarity(planar(&[0.0, 60.0, 90.0]).view()).unwrap();
        assert_abs_diff_eq!(s, array![[1.0, 0.5, 0.0], [0.5, 1.0, c30], [0.0, c30, 1.0]], epsilon = 1e-12);
        assert_eq!(intra_similarity(Array2::zeros((0, 3)).view()).unwrap().dim(), (0, 0));
        assert!(intra_similarity(array![[2.0, 0.0]].view()).is_err());
    }

    #[test]
    fn soft_label_examples() {
        let c = soft_labels(Array2::ones((3, 3)).view(), 13.0).unwrap();
        assert!(c.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let c = soft_labels(Array2::eye(2).view(), 13.0).unwrap();
        let e = (-13.0f64).exp();
        assert_abs_diff_eq!(c.values()[[0, 0]], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(c.values()[[0, 1]], e / (1.0 + e), epsilon = 1e-15);

        // 40-digit oracle: softmax([13, 6.5]).
        let c = soft_labels(array![[1.0, 0.5], [0.5, 1.0]].view(), 13.0).unwrap();
        assert_abs_diff_eq!(c.values()[[0, 0]], 0.998_498_817_743_263, epsilon = 1e-14);
        assert_abs_diff_eq!(c.values()[[0, 1]], 0.001_501_182_256_736_991_5, epsilon = 1e-14);

        assert!(soft_labels(Array2::eye(2).view(), -1.0).is_err());
        assert!(soft_labels(array![[1.0, 0.2], [0.5, 1.0]].view(), 1.0).is_err());
    }

    #[test]
    fn soft_labels_do_not_overflow() {
        let c = soft_labels(array![[1.0, -1.0], [-1.0, 1.0]].view(), 1000.0).unwrap();
        assert!(c.values().iter().all(|v| v.is_finite()));
        assert_eq!(c.values()[[0, 0]], 1.0);
    }

    #[test]
    fn one_hot_blend_rows_sum_to_one() {
        let c = SoftLabelMatrix::one_hot(4, 1e-8).unwrap();
        for row in c.values().rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-15);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn inter_similarity_examples() {
        let old = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let s = inter_similarity(array![[0.0, 1.0, 0.0]].view(), old.view()).unwrap();
        assert_eq!(s, array![[0.0, 1.0]]);
        let s = inter_similarity(array![[0.0, 0.0, 1.0]].view(), old.view()).unwrap();
        assert_eq!(s, array![[0.0, 0.0]]);
        assert!(inter_similarity(array![[0.0, 0.0, 1.0]].view(), Array2::zeros((0, 3)).view()).is_err());
        assert_eq!(most_similar_old(array![[0.1, 0.9, 0.9], [0.5, 0.2, 0.1]].view()), vec![1, 0]);
    }

    #[test]
    fn distill_target_examples() {
        let t = distill_targets(array![[0.3], [-0.9]].view(), 0.1).unwrap();
        assert_eq!(t.values(), array![[1.0], [1.0]].view());
        let t = distill_targets(array![[0.4, 0.4, 0.4]].view(), 0.1).unwrap();
        assert!(t.row(0).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        // 40-digit oracle: softmax([8, 2]).
        let t = distill_targets(array![[0.8, 0.2]].view(), 0.1).unwrap();
        assert_abs_diff_eq!(t.values()[[0, 0]], 0.997_527_376_843_365_2, epsilon = 1e-14);
        assert_abs_diff_eq!(t.values()[[0, 1]], 0.002_472_623_156_634_774, epsilon = 1e-14);
        assert!(distill_targets(array![[0.8]].view(), 0.0).is_err());
        assert!(distill_targets(array![[0.8]].view(), -1.0).is_err());
    }

    fn unit_rows(k: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-1.0f64..1.0, k * d).prop_filter_map("degenerate row", move |v| {
            let mut m = Array2::from_shape_vec((k, d), v).ok()?;
            crate::math::normalize_rows(&mut m).ok()?;
            Some(m)
        })
    }

    proptest! {
        #[test]
        fn soft_label_rows_are_distributions_peaked_on_diagonal(t in unit_rows(5, 6), alpha in 0.5f64..50.0) {
            let s = intra_similarity(t.view()).unwrap();
            let c = soft_labels(s.view(), alpha).unwrap();
            for (j, row) in c.values().rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
                let distinct = (0..5).all(|k| k == j || s[[j, k]] < 1.0 - 1e-9);
                if distinct {
                    let arg = row.iter().enumerate().fold((0, -1.0), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0;
                    prop_assert_eq!(arg, j);
                }
            }
        }

        #[test]
        fn soft_labels_ignore_constant_shift(t in unit_rows(4, 3), b in -3.0f64..3.0) {
            let s = intra_similarity(t.view()).unwrap();
            let c0 = soft_labels(s.view(), 13.0).unwrap();
            let c1 = soft_labels(s.mapv(|x| x + b).view(), 13.0).unwrap();
            for (x, y) in c0.values().iter().zip(c1.values().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn distill_rows_shift_invariant_and_sharpen(row in proptest::collection::vec(-1.0f64..1.0, 2..6), shift in -2.0f64..2.0) {
            let m = row.len();
            let s = Array2::from_shape_vec((1, m), row.clone()).unwrap();
            let shifted = s.mapv(|x| x + shift);
            let a = distill_targets(s.view(), 0.1).unwrap();
            let b = distill_targets(shifted.view(), 0.1).unwrap();
            for (x, y) in a.values().iter().zip(b.values().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - row.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > 1e-3 {
                let hot = distill_targets(s.view(), 0.5).unwrap();
                let cold = distill_targets(s.view(), 0.25).unwrap();
                let max = |r: ArrayView1<f64>| r.iter().cloned().fold(0.0, f64::max);
                prop_assert!(max(cold.row(0)) > max(hot.row(0)));
            }
        }
    }

    #[test]
    fn alpha_limits() {
        let s = intra_similarity(planar(&[0.0, 40.0, 100.0]).view()).unwrap();
        let sharp = soft_labels(s.view(), 1000.0).unwrap();
        assert_abs_diff_eq!(sharp.values(), Array2::<f64>::eye(3).view(), epsilon = 1e-12);
        let flat = soft_labels(s.view(), 1e-9).unwrap();
        assert!(flat.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-8));
    }
}
