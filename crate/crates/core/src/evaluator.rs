//! Test-time classification over every class seen so far, and run metrics.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::math;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Classifies one unit feature against the seen-class embeddings. Returns the
/// winning row and the softmax of the cosine similarities; ties go to the
/// lowest index.
pub fn predict(feature: ArrayView1<f64>, seen: ArrayView2<f64>) -> Result<(usize, Array1<f64>)> {
    if seen.nrows() == 0 {
        return Err(Error::Precondition("no seen classes to predict from".into()));
    }
    if feature.len() != seen.ncols() {
        return Err(Error::Shape(format!("feature dim {} vs embeddings {}", feature.len(), seen.ncols())));
    }
    math::check_unit_rows(feature.insert_axis(Axis(0)), "test feature")?;
    math::check_unit_rows(seen, "seen-class embeddings")?;
    let sims: Array1<f64> = seen.axis_iter(Axis(0)).map(|t| math::dot(feature, t)).collect();
    Ok((argmax(sims.view()), Array1::from(math::softmax(sims.view()))))
}

fn argmax(xs: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent, in `[0, 100]`.
    pub top1: f64,
    pub top5: f64,
    pub num_samples: usize,
    /// Predicted dataset class per evaluated sample, in input order.
    pub predictions: Vec<usize>,
}

/// Encodes `samples` and scores them against `seen_classes`, whose embedding
/// rows are `class_embeddings[c]` for dataset class `c`.
pub fn evaluate(
    encoder: &Encoder,
    samples: ArrayView2<f64>,
    labels: &[usize],
    seen_classes: &[usize],
    class_embeddings: ArrayView2<f64>,
) -> Result<EvalResult> {
    if labels.len() != samples.nrows() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), samples.nrows())));
    }
    if let Some(l) = labels.iter().find(|l| !seen_classes.contains(l)) {
        return Err(Error::Protocol(format!("test sample with unseen class {l}")));
    }
    let seen = class_embeddings.select(Axis(0), seen_classes);
    let features = encoder.encode(samples)?;
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let mut predictions = Vec::with_capacity(labels.len());
    for (f, &label) in features.axis_iter(Axis(0)).zip(labels) {
        let (best, scores) = predict(f, seen.view())?;
        let truth = seen_classes.iter().position(|&c| c == label).expect("checked above");
        predictions.push(seen_classes[best]);
        if best == truth {
            hit1 += 1;
        }
        let higher = scores.iter().enumerate().filter(|&(j, &s)| s > scores[truth] || (s == scores[truth] && j < truth)).count();
        if higher < 5 {
            hit5 += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    Ok(EvalResult {
        top1: 100.0 * hit1 as f64 / n,
        top5: 100.0 * hit5 as f64 / n,
        num_samples: labels.len(),
        predictions,
    })
}

/// Mean softmax mass (over all seen classes, logits `beta·cos`) that current
/// samples place on the old class most similar to their own label.
pub fn related_old_mass(
    features: ArrayView2<f64>,
    labels: &[usize],
    old_classes: &[usize],
    seen_classes: &[usize],
    class_embeddings: ArrayView2<f64>,
    beta: f64,
) -> Result<f64> {
    if old_classes.is_empty() || labels.is_empty() {
        return Ok(0.0);
    }
    let old = class_embeddings.select(Axis(0), old_classes);
    let seen = class_embeddings.select(Axis(0), seen_classes);
    let mut total = 0.0;
    for (f, &label) in features.axis_iter(Axis(0)).zip(labels) {
        let cross = math::gram(class_embeddings.row(label).insert_axis(Axis(0)), old.view());
        let related = old_classes[crate::semantic::most_similar_old(cross.view())[0]];
        let logits: Array1<f64> = seen.axis_iter(Axis(0)).map(|t| beta * math::dot(f, t)).collect();
        let probs = math::softmax(logits.view());
        let j = seen_classes.iter().position(|&c| c == related).expect("old classes are seen");
        total += probs[j];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: usize,
    pub classes: Vec<String>,
    pub num_seen_classes: usize,
    pub num_test_samples: usize,
    pub top1: f64,
    pub top5: f64,
    /// Absent on the first task.
    pub related_old_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub task: usize,
    pub epoch: usize,
    pub contrastive: f64,
    pub sg_rl: f64,
    pub kd: f64,
    pub total: f64,
}

/// Result of one run. `avg` is the mean of the post-task top-1 accuracies,
/// first task included; `last` is the final one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tasks: Vec<TaskReport>,
    pub avg: f64,
    pub last: f64,
    pub avg_top5: f64,
    pub last_top5: f64,
    pub loss_trace: Vec<EpochLoss>,
}

impl RunReport {
    pub fn new(name: &str, seed: u64, config: serde_json::Value, tasks: Vec<TaskReport>, loss_trace: Vec<EpochLoss>) -> Self {
        let top1: Vec<f64> = tasks.iter().map(|t| t.top1).collect();
        let top5: Vec<f64> = tasks.iter().map(|t| t.top5).collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            name: name.to_string(),
            seed,
            config,
            tasks,
            avg: mean(&top1),
            last: top1.last().copied().unwrap_or(0.0),
            avg_top5: mean(&top5),
            last_top5: top5.last().copied().unwrap_or(0.0),
            loss_trace,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.top1).collect()
    }

    /// Per-task accuracy curve as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,seen_classes,test_samples,top1,top5\n");
        for t in &self.tasks {
            let _ = writeln!(out, "{},{},{},{},{}", t.task_id, t.num_seen_classes, t.num_test_samples, t.top1, t.top5);
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Static SVG with one top-1 curve per report.
pub fn accuracy_svg(reports: &[&RunReport]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let tasks = reports.iter().map(|r| r.tasks.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (tasks - 1) as f64;
    let y = |acc: f64| H - PAD - (H - 2.0 * PAD) * acc / 100.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">task</text>\n\
         <text x=\"12\" y=\"{cy}\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">top-1 accuracy (%)</text>\n",
        b = H - PAD,
        r = W - PAD,
        cx = W / 2.0,
        ty = H - 8.0,
        cy = H / 2.0,
    );
    for acc in [0.0, 50.0, 100.0] {
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{acc:.0}</text>", PAD - 4.0, y(acc) + 4.0);
    }
    for (k, r) in reports.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = r.tasks.iter().enumerate().map(|(i, t)| format!("{:.1},{:.1}", x(i), y(t.top1))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", points.join(" "));
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>", PAD + 8.0, PAD + 14.0 * k as f64, r.name);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Zero-filled `classes × dim` helper used by tests and examples.
pub fn stack_rows(rows: &[ArrayView1<f64>]) -> Array2<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}
