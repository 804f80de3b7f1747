//! Training objectives over logit matrices.
//!
//! Every differentiable loss returns its batch-mean value together with the
//! gradient with respect to the logit matrix it was given, so the trainer can
//! chain them through `P = β·I·Tᵀ` into the encoder.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::semantic::{DistillTargetMatrix, SoftLabelMatrix};

/// `P = β · I · Tᵀ` with unit-norm rows on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub values: Array2<f64>,
    pub scale_beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            mu: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("mu", self.mu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("{v} must be a finite value ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Argument order of the KL divergences between a prediction and a target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(prediction ‖ target)`.
    #[default]
    PredictionFirst,
    /// `KL(target ‖ prediction)`.
    TargetFirst,
}

/// Batch-mean loss and its gradient with respect to the input logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossOutput {
    fn zeros(shape: (usize, usize)) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros(shape),
        }
    }
}

pub fn clip_logits(i: ArrayView2<f64>, t: ArrayView2<f64>, beta: f64) -> Result<LogitMatrix> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::config("beta", format!("{beta} must be a finite value ≥ 0")));
    }
    if i.ncols() != t.ncols() {
        return Err(Error::Shape(format!(
            "image features have dim {}, text features {}",
            i.ncols(),
            t.ncols()
        )));
    }
    math::check_unit_rows(i, "image features")?;
    math::check_unit_rows(t, "text features")?;
    Ok(LogitMatrix {
        values: i.dot(&t.t()) * beta,
        scale_beta: beta,
    })
}

/// Symmetric image/text cross entropy over a square logit matrix whose
/// diagonal holds the matched pairs.
pub fn contrastive_loss(p: ArrayView2<f64>) -> Result<LossOutput> {
    contrastive_loss_masked(p, None)
}

/// Contrastive loss where off-diagonal pairs sharing a class are removed from
/// the softmax denominators. `classes[i]` is the class of pair `i`.
pub fn contrastive_loss_masked(p: ArrayView2<f64>, classes: Option<&[usize]>) -> Result<LossOutput> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::Shape(format!(
            "contrastive loss needs a square logit matrix, got {}×{}",
            n,
            p.ncols()
        )));
    }
    if let Some(c) = classes {
        if c.len() != n {
            return Err(Error::Shape(format!("{} class ids for {n} pairs", c.len())));
        }
    }
    if n == 0 {
        return Ok(LossOutput::zeros((0, 0)));
    }
    let keep = |i: usize, j: usize| match classes {
        Some(c) => i == j || c[i] != c[j],
        None => true,
    };
    let nf = n as f64;
    let mut out = LossOutput::zeros((n, n));
    // Image side: softmax along each row.
    for i in 0..n {
        let cols: Vec<usize> = (0..n).filter(|&j| keep(i, j)).collect();
        let lse = math::log_sum_exp(cols.iter().map(|&j| p[[i, j]]));
        out.value += 0.5 * (lse - p[[i, i]]) / nf;
        for &j in &cols {
            let prob = (p[[i, j]] - lse).exp();
            out.grad[[i, j]] += 0.5 * (prob - if i == j { 1.0 } else { 0.0 }) / nf;
        }
    }
    // Text side: softmax down each column.
    for j in 0..n {
        let rows: Vec<usize> = (0..n).filter(|&i| keep(i, j)).collect();
        let lse = math::log_sum_exp(rows.iter().map(|&i| p[[i, j]]));
        out.value += 0.5 * (lse - p[[j, j]]) / nf;
        for &i in &rows {
            let prob = (p[[i, j]] - lse).exp();
            out.grad[[i, j]] += 0.5 * (prob - if i == j { 1.0 } else { 0.0 }) / nf;
        }
    }
    Ok(out)
}

/// KL between `softmax(logits)` and a strictly positive target, plus the
/// gradient with respect to the logits.
fn kl_to_target(logits: ArrayView1<f64>, log_target: &[f64], dir: KlDirection) -> (f64, Vec<f64>) {
    let log_p = math::log_softmax(logits);
    let p: Vec<f64> = log_p.iter().map(|x| x.exp()).collect();
    match dir {
        KlDirection::PredictionFirst => {
            let a: Vec<f64> = log_p.iter().zip(log_target).map(|(lp, lq)| lp - lq).collect();
            let kl: f64 = p.iter().zip(&a).map(|(p, a)| p * a).sum();
            let grad = p.iter().zip(&a).map(|(p, a)| p * (a - kl)).collect();
            (kl, grad)
        }
        KlDirection::TargetFirst => {
            let q: Vec<f64> = log_target.iter().map(|x| x.exp()).collect();
            let kl: f64 = q
                .iter()
                .zip(log_target.iter().zip(&log_p))
                .map(|(q, (lq, lp))| if *q > 0.0 { q * (lq - lp) } else { 0.0 })
                .sum();
            let qs: f64 = q.iter().sum();
            let grad = p.iter().zip(&q).map(|(p, q)| p * qs - q).collect();
            (kl, grad)
        }
    }
}

fn log_positive(row: ArrayView1<f64>, what: &str) -> Result<Vec<f64>> {
    row.iter()
        .map(|&q| {
            if q > 0.0 && q.is_finite() {
                Ok(q.ln())
            } else {
                Err(Error::Precondition(format!("{what} entry {q} is not strictly positive")))
            }
        })
        .collect()
}

/// Mean KL between softmax predictions over the current label set and the
/// soft-label row of each sample's class.
pub fn sg_rl_loss(
    p_task: ArrayView2<f64>,
    labels: &[usize],
    targets: &SoftLabelMatrix,
    dir: KlDirection,
) -> Result<LossOutput> {
    let (n, k) = p_task.dim();
    if k != targets.num_classes() {
        return Err(Error::Shape(format!(
            "{k} logit columns for {} soft-label classes",
            targets.num_classes()
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    let log_rows = (0..k)
        .map(|c| log_positive(targets.row(c), "soft label"))
        .collect::<Result<Vec<_>>>()?;
    let mut out = LossOutput::zeros((n, k));
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::Precondition(format!("label {c} outside [0, {k})")));
        }
        let (kl, g) = kl_to_target(p_task.row(i), &log_rows[c], dir);
        out.value += kl / n as f64;
        for (j, gj) in g.into_iter().enumerate() {
            out.grad[[i, j]] = gj / n as f64;
        }
    }
    Ok(out)
}

fn check_old_pair(p_cur: ArrayView2<f64>, p_prev: ArrayView2<f64>) -> Result<()> {
    if p_cur.dim() != p_prev.dim() {
        return Err(Error::Shape(format!(
            "current {:?} vs previous {:?} old-class logits",
            p_cur.dim(),
            p_prev.dim()
        )));
    }
    if p_cur.ncols() == 0 {
        return Err(Error::Precondition(
            "no old classes; distillation must be skipped on the first task".into(),
        ));
    }
    Ok(())
}

/// Mean `KL(p_cur ‖ p_prev)` over samples; the previous model is a constant.
pub fn naive_kd_loss(p_cur: ArrayView2<f64>, p_prev: ArrayView2<f64>, dir: KlDirection) -> Result<LossOutput> {
    check_old_pair(p_cur, p_prev)?;
    let n = p_cur.nrows();
    let mut out = LossOutput::zeros(p_cur.dim());
    for (i, prev) in p_prev.axis_iter(Axis(0)).enumerate() {
        let (kl, g) = kl_to_target(p_cur.row(i), &math::log_softmax(prev), dir);
        out.value += kl / n as f64;
        for (j, gj) in g.into_iter().enumerate() {
            out.grad[[i, j]] = gj / n as f64;
        }
    }
    Ok(out)
}

/// Naive distillation plus `mu` times the KL to each sample's semantic
/// target row (`target_rows[i]` indexes into `targets`).
pub fn sg_kd_loss(
    p_cur: ArrayView2<f64>,
    p_prev: ArrayView2<f64>,
    targets: &DistillTargetMatrix,
    target_rows: &[usize],
    mu: f64,
    dir: KlDirection,
) -> Result<LossOutput> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::config("mu", format!("{mu} must be a finite value ≥ 0")));
    }
    let mut out = naive_kd_loss(p_cur, p_prev, dir)?;
    let (n, m) = p_cur.dim();
    if target_rows.len() != n {
        return Err(Error::Shape(format!("{} target rows for {n} samples", target_rows.len())));
    }
    if targets.values().ncols() != m {
        return Err(Error::Shape(format!(
            "targets cover {} old classes, logits {m}",
            targets.values().ncols()
        )));
    }
    if mu == 0.0 {
        return Ok(out);
    }
    for (i, &r) in target_rows.iter().enumerate() {
        if r >= targets.values().nrows() {
            return Err(Error::Precondition(format!("target row {r} out of range")));
        }
        let log_q = log_positive(targets.row(r), "distillation target")?;
        let (kl, g) = kl_to_target(p_cur.row(i), &log_q, dir);
        out.value += mu * kl / n as f64;
        for (j, gj) in g.into_iter().enumerate() {
            out.grad[[i, j]] += mu * gj / n as f64;
        }
    }
    Ok(out)
}

/// `l_c + λ₁·l_sgrl + λ₂·l_sgkd`, with the distillation term dropped on the
/// first task.
pub fn total_loss(l_c: f64, l_sgrl: f64, l_sgkd: f64, w: &LossWeights, first_task: bool) -> Result<f64> {
    w.validate()?;
    let kd = if first_task { 0.0 } else { w.lambda2 * l_sgkd };
    Ok(l_c + w.lambda1 * l_sgrl + kd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::{distill_targets, soft_labels};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    const FWD: KlDirection = KlDirection::PredictionFirst;

    fn targets_from(rows: Array2<f64>) -> DistillTargetMatrix {
        // τ = 1 on log-probabilities reproduces the rows exactly (up to rounding).
        distill_targets(rows.mapv(f64::ln).view(), 1.0).unwrap()
    }

    #[test]
    fn clip_logit_examples() {
        let eye = Array2::<f64>::eye(3);
        let p = clip_logits(eye.view(), eye.view(), 100.0).unwrap();
        assert_eq!(p.values, &eye * 100.0);
        let i = array![[0.6, 0.8], [1.0, 0.0]];
        assert_eq!(clip_logits(i.view(), eye.slice(ndarray::s![..2, ..2]), 0.0).unwrap().values, Array2::<f64>::zeros((2, 2)));
        assert!(clip_logits(array![[2.0, 0.0]].view(), i.view(), 1.0).is_err());
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(array![[5.0]].view()).unwrap().value, 0.0);
        let uniform = Array2::from_elem((4, 4), 0.7);
        assert_abs_diff_eq!(contrastive_loss(uniform.view()).unwrap().value, 4f64.ln(), epsilon = 1e-15);
        // 40-digit oracle: −log(e / (e + 1)).
        let v = contrastive_loss(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap().value;
        assert_abs_diff_eq!(v, 0.313_261_687_518_222_8, epsilon = 1e-15);
        assert!(contrastive_loss(Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn masking_duplicate_classes() {
        let p = array![[2.0, 2.0, 0.0], [2.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let plain = contrastive_loss(p.view()).unwrap().value;
        let masked = contrastive_loss_masked(p.view(), Some(&[0, 0, 1])).unwrap().value;
        assert!(masked < plain);
        // With every pair in its own class the mask is a no-op.
        let same = contrastive_loss_masked(p.view(), Some(&[0, 1, 2])).unwrap();
        assert_eq!(same, contrastive_loss(p.view()).unwrap());
    }

    #[test]
    fn sg_rl_examples() {
        let c = soft_labels(array![[1.0, 0.5], [0.5, 1.0]].view(), 13.0).unwrap();
        let row = c.row(0).to_owned();
        let logits = row.mapv(f64::ln).insert_axis(Axis(0));
        assert!(sg_rl_loss(logits.view(), &[0], &c, FWD).unwrap().value.abs() < 1e-12);

        // Symmetric log-probability similarity reproduces rows [0.99850, 0.00150] at α = 1.
        let (a, b) = (0.99850f64.ln(), 0.00150f64.ln());
        let fixed = soft_labels(array![[a, b], [b, a]].view(), 1.0).unwrap();
        // KL([0.5, 0.5] ‖ [0.99850, 0.00150]) from the 40-digit oracle.
        let kl = sg_rl_loss(array![[0.0, 0.0]].view(), &[0], &fixed, FWD).unwrap().value;
        assert_abs_diff_eq!(kl, 2.558_748_467_940_174_6, epsilon = 1e-12);

        let one = sg_rl_loss(array![[0.3, -0.2]].view(), &[1], &c, FWD).unwrap().value;
        let two = sg_rl_loss(array![[0.3, -0.2], [0.3, -0.2]].view(), &[1, 1], &c, FWD).unwrap().value;
        assert_abs_diff_eq!(one, two, epsilon = 1e-15);
        assert!(sg_rl_loss(array![[0.3, -0.2]].view(), &[2], &c, FWD).is_err());
    }

    #[test]
    fn naive_kd_examples() {
        let p = array![[0.2, 1.1, -0.4], [3.0, 0.0, 0.5]];
        assert!(naive_kd_loss(p.view(), p.view(), FWD).unwrap().value.abs() < 1e-15);
        // 40-digit oracle: KL(softmax[1,0] ‖ softmax[0,1]).
        let v = naive_kd_loss(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view(), FWD).unwrap().value;
        assert_abs_diff_eq!(v, 0.462_117_157_260_009_76, epsilon = 1e-14);
        let shifted = naive_kd_loss(array![[6.0, 5.0]].view(), array![[5.0, 6.0]].view(), FWD).unwrap().value;
        assert_abs_diff_eq!(shifted, v, epsilon = 1e-14);
        assert!(naive_kd_loss(Array2::zeros((2, 0)).view(), Array2::zeros((2, 0)).view(), FWD).is_err());
    }

    #[test]
    fn sg_kd_examples() {
        let cur = array![[0.4, -0.3, 1.0]];
        let prev = array![[0.1, 0.1, 0.9]];
        let t = targets_from(array![[0.2, 0.3, 0.5]]);
        let naive = naive_kd_loss(cur.view(), prev.view(), FWD).unwrap();
        assert_eq!(sg_kd_loss(cur.view(), prev.view(), &t, &[0], 0.0, FWD).unwrap(), naive);

        let t = targets_from(array![[0.5, 0.5]]);
        let zero = sg_kd_loss(array![[1.0, 1.0]].view(), array![[0.0, 0.0]].view(), &t, &[0], 1.0, FWD).unwrap();
        assert!(zero.value.abs() < 1e-15);

        // 40-digit oracle: KL([0.5, 0.5] ‖ [0.9, 0.1]).
        let t = targets_from(array![[0.9, 0.1]]);
        let v = sg_kd_loss(array![[0.0, 0.0]].view(), array![[0.0, 0.0]].view(), &t, &[0], 1.0, FWD).unwrap().value;
        assert_abs_diff_eq!(v, 0.510_825_623_765_990_7, epsilon = 1e-12);
        assert!(sg_kd_loss(cur.view(), prev.view(), &targets_from(array![[0.2, 0.3, 0.5]]), &[0], -1.0, FWD).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(total_loss(1.0, 2.0, 3.0, &w, false).unwrap(), 2.3, epsilon = 1e-15);
        assert_abs_diff_eq!(total_loss(1.0, 2.0, 3.0, &w, true).unwrap(), 2.0, epsilon = 1e-15);
        let ft = LossWeights { lambda1: 0.0, lambda2: 0.0, mu: 1.0 };
        assert_eq!(total_loss(1.25, 2.0, 3.0, &ft, false).unwrap(), 1.25);
        let bad = LossWeights { lambda1: -0.1, ..w };
        assert!(total_loss(1.0, 0.0, 0.0, &bad, false).is_err());
    }

    /// Central differences of a loss with respect to its logits.
    fn numeric_grad(p: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(p.raw_dim());
        for idx in ndarray::indices(p.dim()) {
            let mut a = p.clone();
            let mut b = p.clone();
            a[idx] += h;
            b[idx] -= h;
            g[idx] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    fn logits(n: usize, m: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-4.0f64..4.0, n * m).prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn logit_gradients_match_finite_differences(p in logits(4, 4), q in logits(4, 4), dir_rev in any::<bool>()) {
            let dir = if dir_rev { KlDirection::TargetFirst } else { FWD };
            let classes = [0usize, 1, 0, 2];
            let c = contrastive_loss_masked(p.view(), Some(&classes)).unwrap();
            let n = numeric_grad(&p, |x| contrastive_loss_masked(x.view(), Some(&classes)).unwrap().value);
            prop_assert!((&c.grad - &n).iter().all(|d| d.abs() < 1e-7));

            let kd = naive_kd_loss(p.view(), q.view(), dir).unwrap();
            let n = numeric_grad(&p, |x| naive_kd_loss(x.view(), q.view(), dir).unwrap().value);
            prop_assert!((&kd.grad - &n).iter().all(|d| d.abs() < 1e-7));

            let t = distill_targets(q.view(), 0.5).unwrap();
            let rows = [3usize, 0, 1, 1];
            let sg = sg_kd_loss(p.view(), q.view(), &t, &rows, 0.7, dir).unwrap();
            let n = numeric_grad(&p, |x| sg_kd_loss(x.view(), q.view(), &t, &rows, 0.7, dir).unwrap().value);
            prop_assert!((&sg.grad - &n).iter().all(|d| d.abs() < 1e-7));

            let s = crate::semantic::soft_labels(Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.3 }).view(), 13.0).unwrap();
            let labels = [2usize, 0, 3, 3];
            let rl = sg_rl_loss(p.view(), &labels, &s, dir).unwrap();
            let n = numeric_grad(&p, |x| sg_rl_loss(x.view(), &labels, &s, dir).unwrap().value);
            prop_assert!((&rl.grad - &n).iter().all(|d| d.abs() < 1e-7));
        }

        #[test]
        fn kl_losses_are_nonnegative_and_shift_invariant(p in logits(3, 5), q in logits(3, 5), shift in -5.0f64..5.0) {
            let kd = naive_kd_loss(p.view(), q.view(), FWD).unwrap().value;
            prop_assert!(kd >= -1e-9);
            let shifted = naive_kd_loss(p.mapv(|x| x + shift).view(), q.view(), FWD).unwrap().value;
            prop_assert!((kd - shifted).abs() < 1e-12);
            let c = contrastive_loss(p.slice(ndarray::s![.., ..3]).view()).unwrap().value;
            prop_assert!(c >= 0.0);
        }

        #[test]
        fn contrastive_is_permutation_invariant(p in logits(4, 4), perm in Just(vec![2usize, 0, 3, 1])) {
            let permuted = Array2::from_shape_fn((4, 4), |(i, j)| p[[perm[i], perm[j]]]);
            let a = contrastive_loss(p.view()).unwrap().value;
            let b = contrastive_loss(permuted.view()).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
