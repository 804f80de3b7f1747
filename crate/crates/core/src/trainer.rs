//! Per-task training loop: contrastive matching, semantic soft labels,
//! distillation from the previous task's frozen snapshot, exemplar replay.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_labels, EmbeddingTable};
use crate::encoder::{Encoder, EncoderKind, EncoderSnapshot, EncoderSpec, Gradients};
use crate::error::{Error, Result};
use crate::evaluator::{self, EpochLoss, EvalResult, RunReport, TaskReport};
use crate::losses::{self, KlDirection, LossWeights};
use crate::memory::{ExemplarStore, ReplaySampler};
use crate::protocol::{Dataset, TaskSpec, TaskStream};
use crate::semantic::{self, SoftLabelMatrix};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "one-hot")]
    OneHot,
    #[serde(rename = "sg-rl")]
    SgRl,
    #[serde(rename = "sg-rl+naive-kd")]
    SgRlNaiveKd,
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Ft, Mode::OneHot, Mode::SgRl, Mode::SgRlNaiveKd, Mode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ft => "ft",
            Mode::OneHot => "one-hot",
            Mode::SgRl => "sg-rl",
            Mode::SgRlNaiveKd => "sg-rl+naive-kd",
            Mode::Full => "full",
        }
    }

    fn uses_label_term(self) -> bool {
        self != Mode::Ft
    }

    fn uses_kd(self) -> bool {
        matches!(self, Mode::SgRlNaiveKd | Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode {s:?}; expected one of ft, one-hot, sg-rl, sg-rl+naive-kd, full")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-dataset epoch counts, keyed by dataset name.
    pub epochs_override: BTreeMap<String, usize>,
    pub mode: Mode,
    pub weights: LossWeights,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Exemplars kept per class; 0 disables replay.
    pub exemplars: usize,
    pub seed: u64,
    pub kl_direction: KlDirection,
    /// Exemplars appended to every batch. `None` shuffles exemplars into the
    /// current-task data uniformly.
    pub replay_per_batch: Option<usize>,
    /// Smoothing for the one-hot ablation, which needs strictly positive targets.
    pub one_hot_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    /// Optimizer and loss settings of the original full-scale experiments.
    pub fn full_scale() -> Self {
        let mut epochs_override = BTreeMap::new();
        epochs_override.insert("cub200".to_string(), 20);
        epochs_override.insert("aircraft".to_string(), 20);
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 256,
            epochs: 10,
            epochs_override,
            mode: Mode::Full,
            weights: LossWeights::default(),
            alpha: 13.0,
            beta: 100.0,
            tau: 0.1,
            exemplars: 20,
            seed: crate::protocol::DEFAULT_SEED,
            kl_direction: KlDirection::default(),
            replay_per_batch: None,
            one_hot_eps: 1e-8,
        }
    }

    /// Smaller batches and fewer epochs for CPU runs on the synthetic fixture.
    pub fn desk_scale() -> Self {
        Self { batch_size: 64, epochs: 5, ..Self::full_scale() }
    }

    /// Few-shot sessions: lower rate and no exemplar memory.
    pub fn few_shot() -> Self {
        Self { lr: 0.001, exemplars: 0, ..Self::desk_scale() }
    }

    pub fn epochs_for(&self, dataset: &str) -> usize {
        self.epochs_override.get(dataset).copied().unwrap_or(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} must be finite and > 0")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} must be finite and ≥ 0")))
            }
        };
        positive("lr", self.lr)?;
        non_negative("momentum", self.momentum)?;
        non_negative("weight_decay", self.weight_decay)?;
        non_negative("alpha", self.alpha)?;
        non_negative("beta", self.beta)?;
        positive("tau", self.tau)?;
        positive("one_hot_eps", self.one_hot_eps)?;
        if self.one_hot_eps >= 1.0 {
            return Err(Error::config("one_hot_eps", "must be < 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be ≥ 1"));
        }
        self.weights.validate()
    }
}

/// Loss values of one batch; `kd` is zero on the first task and for modes
/// without distillation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub sg_rl: f64,
    pub kd: f64,
    pub total: f64,
}

/// Class bookkeeping shared by every batch of a task.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext<'a> {
    /// Unit label embedding of every dataset class, row `c` for class `c`.
    pub class_embeddings: ArrayView2<'a, f64>,
    pub task_classes: &'a [usize],
    /// Classes of completed tasks.
    pub old_classes: &'a [usize],
    pub config: &'a TrainConfig,
}

/// Total loss of one batch and its gradient with respect to the trainable
/// encoder parameters. `previous` must be present exactly when
/// `ctx.old_classes` is non-empty.
pub fn batch_objective(
    encoder: &Encoder,
    previous: Option<&EncoderSnapshot>,
    x: ArrayView2<f64>,
    labels: &[usize],
    ctx: &BatchContext<'_>,
) -> Result<(LossBreakdown, Gradients)> {
    let cfg = ctx.config;
    let first_task = ctx.old_classes.is_empty();
    if first_task == previous.is_some() {
        return Err(Error::Precondition(
            "a previous-model snapshot is required exactly when old classes exist".into(),
        ));
    }
    let beta = cfg.beta;
    let emb = ctx.class_embeddings;
    let cache = encoder.forward(x)?;
    let feats = cache.output();
    let mut d_feats = Array2::<f64>::zeros(feats.dim());
    let mut out = LossBreakdown::default();

    let t_batch = emb.select(Axis(0), labels);
    let p = losses::clip_logits(feats, t_batch.view(), beta)?;
    let lc = losses::contrastive_loss_masked(p.values.view(), Some(labels))?;
    d_feats.scaled_add(beta, &lc.grad.dot(&t_batch));
    out.contrastive = lc.value;

    // Current-task classes plus any exemplar classes present in the batch.
    let mut label_set = ctx.task_classes.to_vec();
    let mut replayed: Vec<usize> = labels.iter().copied().filter(|c| !label_set.contains(c)).collect();
    replayed.sort_unstable();
    replayed.dedup();
    label_set.extend(replayed);
    let local: Vec<usize> = labels.iter().map(|c| label_set.iter().position(|l| l == c).expect("label in set")).collect();
    let t_set = emb.select(Axis(0), &label_set);

    if cfg.mode.uses_label_term() {
        let targets = match cfg.mode {
            Mode::OneHot => SoftLabelMatrix::one_hot(label_set.len(), cfg.one_hot_eps)?,
            _ => semantic::soft_labels(semantic::intra_similarity(t_set.view())?.view(), cfg.alpha)?,
        };
        let p_task = losses::clip_logits(feats, t_set.view(), beta)?;
        let rl = losses::sg_rl_loss(p_task.values.view(), &local, &targets, cfg.kl_direction)?;
        d_feats.scaled_add(cfg.weights.lambda1 * beta, &rl.grad.dot(&t_set));
        out.sg_rl = rl.value;
    }

    if !first_task && cfg.mode.uses_kd() {
        let snapshot = previous.expect("checked above");
        let o_old = emb.select(Axis(0), ctx.old_classes);
        let p_cur = losses::clip_logits(feats, o_old.view(), beta)?;
        let prev_feats = snapshot.encode(x)?;
        let p_prev = losses::clip_logits(prev_feats.view(), o_old.view(), beta)?;
        let kd = if cfg.mode == Mode::Full {
            let cross = semantic::inter_similarity(t_set.view(), o_old.view())?;
            let targets = semantic::distill_targets(cross.view(), cfg.tau)?;
            losses::sg_kd_loss(p_cur.values.view(), p_prev.values.view(), &targets, &local, cfg.weights.mu, cfg.kl_direction)?
        } else {
            losses::naive_kd_loss(p_cur.values.view(), p_prev.values.view(), cfg.kl_direction)?
        };
        d_feats.scaled_add(cfg.weights.lambda2 * beta, &kd.grad.dot(&o_old));
        out.kd = kd.value;
    }

    out.total = losses::total_loss(out.contrastive, out.sg_rl, out.kd, &cfg.weights, first_task)?;
    let grads = encoder.backward(&cache, d_feats.view())?;
    Ok((out, grads))
}

/// SGD with momentum and L2 weight decay on the trainable tail.
#[derive(Debug, Clone)]
struct Sgd {
    velocity: Vec<f64>,
}

impl Sgd {
    fn new(n: usize) -> Self {
        Self { velocity: vec![0.0; n] }
    }

    fn step(&mut self, encoder: &mut Encoder, grads: &Gradients, cfg: &TrainConfig) {
        let velocity = &mut self.velocity;
        encoder.update_trainable(grads, |k, w, g| {
            let v = cfg.momentum * velocity[k] + g + cfg.weight_decay * *w;
            velocity[k] = v;
            *w -= cfg.lr * v;
        });
    }
}

/// Training state carried across the tasks of one stream.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    class_embeddings: Array2<f64>,
    encoder: Encoder,
    snapshot: Option<EncoderSnapshot>,
    store: ExemplarStore,
    seen: Vec<usize>,
    rng: ChaCha8Rng,
    loss_trace: Vec<EpochLoss>,
    batches_run: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, table: &EmbeddingTable, encoder: Encoder, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let class_embeddings = embed_labels(table, &dataset.class_names)?;
        if encoder.spec().input_dim != dataset.dim() {
            return Err(Error::Shape(format!(
                "encoder input {} vs dataset features {}",
                encoder.spec().input_dim,
                dataset.dim()
            )));
        }
        if encoder.spec().feature_dim != table.dim() {
            return Err(Error::Shape(format!(
                "encoder output {} vs label embeddings {}",
                encoder.spec().feature_dim,
                table.dim()
            )));
        }
        Ok(Self {
            store: ExemplarStore::new(config.exemplars),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            dataset,
            class_embeddings,
            encoder,
            snapshot: None,
            seen: Vec::new(),
            loss_trace: Vec::new(),
            batches_run: 0,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn store(&self) -> &ExemplarStore {
        &self.store
    }

    /// The frozen model of the most recently completed task.
    pub fn previous_model(&self) -> Option<&EncoderSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    pub fn class_embeddings(&self) -> ArrayView2<'_, f64> {
        self.class_embeddings.view()
    }

    pub fn loss_trace(&self) -> &[EpochLoss] {
        &self.loss_trace
    }

    /// Trains on one task, then extends the exemplar memory by herding and
    /// replaces the previous-model snapshot.
    pub fn train_task(&mut self, task: &TaskSpec) -> Result<()> {
        if (task.task_id == 0) != self.snapshot.is_none() {
            return Err(Error::Protocol(format!(
                "task {} arrives {} a previous-model snapshot",
                task.task_id,
                if self.snapshot.is_some() { "with" } else { "without" }
            )));
        }
        if let Some(c) = task.classes.iter().find(|c| self.seen.contains(c) || self.store.contains_class(**c)) {
            return Err(Error::Protocol(format!(
                "task {} class {} is already in memory",
                task.task_id, self.dataset.class_names[*c]
            )));
        }
        let cfg = self.config.clone();
        let current_rows: Vec<usize> = task.classes.iter().flat_map(|&c| self.dataset.train_rows(c, task.shots)).collect();
        let (cur_x, cur_y) = self.dataset.rows(&current_rows);
        let (mem_x, mem_y) = self.store.all();
        let mixed = cfg.replay_per_batch.is_none();
        let (pool_x, pool_y) = if mixed && !mem_y.is_empty() {
            let mut x = Array2::zeros((cur_y.len() + mem_y.len(), cur_x.ncols()));
            x.slice_mut(s![..cur_y.len(), ..]).assign(&cur_x);
            x.slice_mut(s![cur_y.len().., ..]).assign(&mem_x);
            (x, cur_y.iter().chain(&mem_y).copied().collect::<Vec<_>>())
        } else {
            (cur_x, cur_y)
        };
        let mut sampler = match cfg.replay_per_batch {
            Some(r) if r > 0 && !self.store.is_empty() => Some(ReplaySampler::new(&self.store, &mut self.rng)),
            _ => None,
        };

        let old = self.seen.clone();
        let ctx = BatchContext {
            class_embeddings: self.class_embeddings.view(),
            task_classes: &task.classes,
            old_classes: &old,
            config: &cfg,
        };
        let mut sgd = Sgd::new(self.encoder.num_trainable());
        let mut order: Vec<usize> = (0..pool_y.len()).collect();
        for epoch in 0..cfg.epochs_for(&self.dataset.name) {
            order.shuffle(&mut self.rng);
            let mut sums = LossBreakdown::default();
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let mut x = pool_x.select(Axis(0), chunk);
                let mut y: Vec<usize> = chunk.iter().map(|&i| pool_y[i]).collect();
                if let (Some(sampler), Some(r)) = (sampler.as_mut(), cfg.replay_per_batch) {
                    let (rx, ry) = sampler.next_batch(r, &mut self.rng);
                    x.append(Axis(0), rx.view()).expect("matching widths");
                    y.extend(ry);
                }
                let batch = self.batches_run;
                self.batches_run += 1;
                let (loss, grads) = batch_objective(&self.encoder, self.snapshot.as_ref(), x.view(), &y, &ctx)
                    .map_err(|e| match e {
                        Error::Numeric { detail, .. } => Error::Numeric { batch, detail },
                        other => other,
                    })?;
                if !loss.total.is_finite() {
                    return Err(Error::Numeric {
                        batch,
                        detail: format!(
                            "non-finite loss: contrastive {}, sg-rl {}, kd {}",
                            loss.contrastive, loss.sg_rl, loss.kd
                        ),
                    });
                }
                sgd.step(&mut self.encoder, &grads, &cfg);
                sums.contrastive += loss.contrastive;
                sums.sg_rl += loss.sg_rl;
                sums.kd += loss.kd;
                sums.total += loss.total;
                batches += 1;
            }
            let n = batches.max(1) as f64;
            self.loss_trace.push(EpochLoss {
                task: task.task_id,
                epoch,
                contrastive: sums.contrastive / n,
                sg_rl: sums.sg_rl / n,
                kd: sums.kd / n,
                total: sums.total / n,
            });
        }

        if self.store.per_class() > 0 {
            for &c in &task.classes {
                let (x, _) = self.dataset.rows(&self.dataset.train_rows(c, task.shots));
                let feats = self.encoder.encode(x.view())?;
                self.store.add_class(c, x.view(), feats.view())?;
            }
        }
        self.snapshot = Some(self.encoder.snapshot());
        self.seen.extend(&task.classes);
        Ok(())
    }

    /// Cumulative test accuracy over every class seen so far.
    pub fn evaluate(&self) -> Result<EvalResult> {
        evaluate_classes(&self.encoder, self.dataset, self.class_embeddings.view(), &self.seen)
    }

    /// Mean mass the current model puts on each current test sample's most
    /// related old class; `None` before any old class exists.
    pub fn related_old_mass(&self, task: &TaskSpec) -> Result<Option<f64>> {
        let old: Vec<usize> = self.seen.iter().copied().filter(|c| !task.classes.contains(c)).collect();
        if old.is_empty() {
            return Ok(None);
        }
        let (x, y) = self.dataset.rows(&self.dataset.test_rows(&task.classes));
        let feats = self.encoder.encode(x.view())?;
        evaluator::related_old_mass(feats.view(), &y, &old, &self.seen, self.class_embeddings.view(), self.config.beta).map(Some)
    }
}

/// Accuracy of `encoder` on the test samples of `seen` classes.
pub fn evaluate_classes(encoder: &Encoder, dataset: &Dataset, class_embeddings: ArrayView2<f64>, seen: &[usize]) -> Result<EvalResult> {
    let (x, y) = dataset.rows(&dataset.test_rows(seen));
    evaluator::evaluate(encoder, x.view(), &y, seen, class_embeddings)
}

/// Encoder layout of a run config; widths default to the data dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden: Vec<usize>,
    pub trainable_tail: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::ExternalFeatures, hidden: Vec::new(), trainable_tail: 1, init_seed: 0 }
    }
}

impl EncoderConfig {
    pub fn resolve(&self, input_dim: usize, feature_dim: usize) -> EncoderSpec {
        EncoderSpec {
            kind: self.kind,
            input_dim,
            feature_dim,
            hidden: self.hidden.clone(),
            trainable_tail: self.trainable_tail,
            init_seed: self.init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub base: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
}

/// Everything needed to reproduce one run; the JSON config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Benchmark directory holding `dataset.json` and `embeddings.json`;
    /// relative paths resolve against `SEMCL_DATA_DIR` when set.
    pub dataset: PathBuf,
    /// Class split such as `4x5` or `10+10x5`; ignored when `few_shot` or
    /// `class_lists` is given.
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub few_shot: Option<FewShotConfig>,
    /// Explicit class-name lists per task.
    #[serde(default)]
    pub class_lists: Option<Vec<Vec<String>>>,
    /// Seed of the class order; defaults to the training seed.
    #[serde(default)]
    pub stream_seed: Option<u64>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", format!("{:?} must be a non-empty path component", self.name)));
        }
        if self.split.is_none() && self.few_shot.is_none() && self.class_lists.is_none() {
            return Err(Error::config("split", "one of split, few_shot or class_lists is required"));
        }
        self.train.validate()
    }

    pub fn stream(&self, dataset: &Dataset) -> Result<TaskStream> {
        let seed = self.stream_seed.unwrap_or(self.train.seed);
        if let Some(lists) = &self.class_lists {
            return crate::protocol::stream_from_class_lists(&dataset.class_names, lists);
        }
        if let Some(f) = &self.few_shot {
            return crate::protocol::build_fewshot_stream(dataset.num_classes(), f.base, f.sessions, f.ways, f.shots, seed);
        }
        let split = self.split.as_deref().expect("validated");
        crate::protocol::build_stream(dataset.num_classes(), split, seed)
    }
}

/// Trains every task of `stream` in order, evaluating on the cumulative test
/// set after each one. `on_task` sees the trainer and the fresh task report.
#[allow(clippy::too_many_arguments)]
pub fn run_stream_with(
    name: &str,
    dataset: &Dataset,
    table: &EmbeddingTable,
    stream: &TaskStream,
    spec: EncoderSpec,
    config: &TrainConfig,
    config_echo: serde_json::Value,
    mut on_task: impl FnMut(&Trainer<'_>, &TaskReport) -> Result<()>,
) -> Result<RunReport> {
    stream.validate()?;
    table.ensure_covers(&stream.tasks.iter().flat_map(|t| t.classes.iter().map(|&c| dataset.class_names[c].as_str())).collect::<Vec<_>>())?;
    let mut trainer = Trainer::new(dataset, table, Encoder::new(spec)?, config.clone())?;
    let mut reports = Vec::with_capacity(stream.len());
    for task in &stream.tasks {
        trainer.train_task(task)?;
        let eval = trainer.evaluate()?;
        let report = TaskReport {
            task_id: task.task_id,
            classes: task.classes.iter().map(|&c| dataset.class_names[c].clone()).collect(),
            num_seen_classes: trainer.seen_classes().len(),
            num_test_samples: eval.num_samples,
            top1: eval.top1,
            top5: eval.top5,
            related_old_mass: trainer.related_old_mass(task)?,
        };
        on_task(&trainer, &report)?;
        reports.push(report);
    }
    Ok(RunReport::new(name, config.seed, config_echo, reports, trainer.loss_trace.clone()))
}

pub fn run_stream(
    dataset: &Dataset,
    table: &EmbeddingTable,
    stream: &TaskStream,
    spec: EncoderSpec,
    config: &TrainConfig,
) -> Result<RunReport> {
    let echo = serde_json::to_value(config).expect("config serializes");
    run_stream_with(config.mode.as_str(), dataset, table, stream, spec, config, echo, |_, _| Ok(()))
}

/// Per-task cumulative accuracies of an encoder that is never updated.
pub fn zero_shot_accuracies(encoder: &Encoder, dataset: &Dataset, table: &EmbeddingTable, stream: &TaskStream) -> Result<Vec<EvalResult>> {
    let emb = embed_labels(table, &dataset.class_names)?;
    (0..stream.len())
        .map(|t| evaluate_classes(encoder, dataset, emb.view(), &stream.seen_after(t)))
        .collect()
}
