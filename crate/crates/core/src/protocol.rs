//! Task streams, dataset manifests and the synthetic benchmark.
//!
//! Split strings follow the usual class-incremental grammar:
//! `"A+BxC"` is an initial task of `A` classes followed by `C` tasks of `B`
//! classes, and `"AxB"` is `B` tasks of `A` classes. Classes are shuffled by
//! the stream seed before partitioning.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{read_f32_matrix, read_json, write_f32_matrix, write_json, EmbeddingTable, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::math;

pub const DEFAULT_SEED: u64 = 1993;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Dataset class indices, in task order.
    pub classes: Vec<usize>,
    /// Per-class cap on training samples; `None` means all of them.
    pub shots: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub class_order_seed: u64,
    pub num_classes: usize,
    pub split: String,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of all tasks strictly before `task_id`.
    pub fn classes_before(&self, task_id: usize) -> Vec<usize> {
        self.tasks[..task_id].iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    /// Classes of tasks `0..=task_id`.
    pub fn seen_after(&self, task_id: usize) -> Vec<usize> {
        self.classes_before(task_id + 1)
    }

    /// Checks that tasks are disjoint and cover every class exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes];
        for t in &self.tasks {
            for &c in &t.classes {
                if c >= self.num_classes {
                    return Err(Error::Protocol(format!("class {c} outside the dataset")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::Protocol(format!("class {c} appears in more than one task")));
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Protocol(format!("class {c} is not assigned to any task")));
        }
        Ok(())
    }
}

/// Parsed split string: `initial` classes first, then `tasks` of `per_task`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub initial: usize,
    pub per_task: usize,
    pub tasks: usize,
}

impl SplitSpec {
    pub fn parse(split: &str) -> Result<Self> {
        let bad = || Error::config("split", format!("{split:?} is not of the form A+BxC or AxB"));
        let s = split.trim().replace('×', "x");
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let (initial, rest) = match s.split_once('+') {
            Some((a, rest)) => (Some(num(a)?), rest.to_string()),
            None => (None, s.clone()),
        };
        let (a, b) = rest.split_once(['x', 'X']).ok_or_else(bad)?;
        let (a, b) = (num(a)?, num(b)?);
        if a == 0 || b == 0 || initial == Some(0) {
            return Err(Error::config("split", format!("{split:?} has an empty task")));
        }
        Ok(match initial {
            Some(initial) => Self { initial, per_task: a, tasks: b },
            // "AxB": B tasks of A classes.
            None => Self { initial: a, per_task: a, tasks: b - 1 },
        })
    }

    pub fn total(&self) -> usize {
        self.initial + self.per_task * self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks + 1
    }
}

fn shuffled_classes(num_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn build_stream(num_classes: usize, split: &str, seed: u64) -> Result<TaskStream> {
    let spec = SplitSpec::parse(split)?;
    if spec.total() != num_classes {
        return Err(Error::config(
            "split",
            format!("{split:?} covers {} classes but the dataset has {num_classes}", spec.total()),
        ));
    }
    let order = shuffled_classes(num_classes, seed);
    let mut tasks = vec![TaskSpec { task_id: 0, classes: order[..spec.initial].to_vec(), shots: None }];
    for (k, chunk) in order[spec.initial..].chunks(spec.per_task).enumerate() {
        tasks.push(TaskSpec { task_id: k + 1, classes: chunk.to_vec(), shots: None });
    }
    Ok(TaskStream { tasks, class_order_seed: seed, num_classes, split: split.to_string() })
}

/// Base task with all samples, then `sessions` tasks of `ways` classes capped
/// at `shots` training samples per class.
pub fn build_fewshot_stream(
    num_classes: usize,
    base: usize,
    sessions: usize,
    ways: usize,
    shots: usize,
    seed: u64,
) -> Result<TaskStream> {
    let split = format!("{base}+{ways}x{sessions}");
    if base + sessions * ways != num_classes {
        return Err(Error::config(
            "split",
            format!("{base} + {sessions}·{ways} = {} but the dataset has {num_classes}", base + sessions * ways),
        ));
    }
    if base == 0 || ways == 0 || shots == 0 {
        return Err(Error::config("split", "base, ways and shots must be positive"));
    }
    let mut stream = build_stream(num_classes, &split, seed)?;
    for t in stream.tasks.iter_mut().skip(1) {
        t.shots = Some(shots);
    }
    Ok(stream)
}

/// Explicit class-list split file, for semantic splits such as cats-then-dogs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub tasks: Vec<Vec<String>>,
}

pub fn stream_from_class_lists(class_names: &[String], lists: &[Vec<String>]) -> Result<TaskStream> {
    let tasks = lists
        .iter()
        .enumerate()
        .map(|(task_id, names)| {
            let classes = names
                .iter()
                .map(|n| {
                    class_names
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| Error::UnknownLabel(n.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskSpec { task_id, classes, shots: None })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = lists.iter().map(|l| l.len().to_string()).collect::<Vec<_>>().join("+");
    let stream = TaskStream { tasks, class_order_seed: 0, num_classes: class_names.len(), split };
    stream.validate()?;
    Ok(stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub row: usize,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub dim: usize,
    /// Feature payload relative to the manifest, in the embedding-table format.
    pub data: PathBuf,
    pub samples: Vec<SampleEntry>,
}

/// Per-sample feature rows with labels and a train/test tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Training rows of `class` in file order, truncated to `shots`.
    pub fn train_rows(&self, class: usize, shots: Option<usize>) -> Vec<usize> {
        let rows = (0..self.labels.len()).filter(|&i| self.labels[i] == class && self.splits[i] == Split::Train);
        match shots {
            Some(k) => rows.take(k).collect(),
            None => rows.collect(),
        }
    }

    /// Test rows whose label is in `classes`, in file order.
    pub fn test_rows(&self, classes: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.num_classes()];
        for &c in classes {
            member[c] = true;
        }
        (0..self.labels.len())
            .filter(|&i| self.splits[i] == Split::Test && member[self.labels[i]])
            .collect()
    }

    pub fn rows(&self, rows: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (self.features.select(Axis(0), rows), rows.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest: DatasetManifest = read_json(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let rows = manifest.samples.iter().map(|s| s.row + 1).max().unwrap_or(0);
        let all = read_f32_matrix(&base.join(&manifest.data), rows, manifest.dim)?;
        let mut labels = Vec::with_capacity(manifest.samples.len());
        let mut splits = Vec::with_capacity(manifest.samples.len());
        let mut order = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            if s.label >= manifest.classes.len() {
                return Err(Error::Protocol(format!("sample row {} has unknown label {}", s.row, s.label)));
            }
            order.push(s.row);
            labels.push(s.label);
            splits.push(s.split);
        }
        Ok(Self {
            name: manifest.name,
            class_names: manifest.classes,
            features: all.select(Axis(0), &order),
            labels,
            splits,
        })
    }

    /// Writes `<stem>.json` and `<stem>.bin`, returning the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data = PathBuf::from(format!("{stem}.bin"));
        write_f32_matrix(&dir.join(&data), self.features.view())?;
        let manifest = DatasetManifest {
            name: self.name.clone(),
            classes: self.class_names.clone(),
            dim: self.dim(),
            data,
            samples: (0..self.labels.len())
                .map(|row| SampleEntry { row, label: self.labels[row], split: self.splits[row] })
                .collect(),
        };
        let path = dir.join(format!("{stem}.json"));
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

/// Desk-scale benchmark: clustered label embeddings and noisy "image"
/// features around per-class visual prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Norm of the per-sample Gaussian noise relative to the unit prototype.
    pub intra_spread: f64,
    /// Norm of each class's prototype offset from its label embedding, as a
    /// multiple of `intra_spread`.
    pub class_offset: f64,
    pub semantic_clusters: usize,
    /// Squared weight of the cluster center in each label embedding; must
    /// exceed 2/3 for within-cluster similarity to dominate.
    pub cluster_weight: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 16,
            samples_per_class: 100,
            test_per_class: 50,
            intra_spread: 2.0,
            class_offset: 2.0,
            semantic_clusters: 4,
            cluster_weight: 0.75,
            seed: DEFAULT_SEED,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::config("classes", "need at least one class and one sample per class"));
        }
        if self.semantic_clusters == 0 || self.semantic_clusters > self.num_classes {
            return Err(Error::config(
                "clusters",
                format!("{} clusters for {} classes", self.semantic_clusters, self.num_classes),
            ));
        }
        if self.dim < 2 * self.semantic_clusters {
            return Err(Error::config(
                "dim",
                format!(
                    "{} < 2·{} clusters; cluster separation cannot be guaranteed",
                    self.dim, self.semantic_clusters
                ),
            ));
        }
        if !(self.cluster_weight > 2.0 / 3.0 && self.cluster_weight <= 1.0) {
            return Err(Error::config("cluster_weight", "must lie in (2/3, 1]"));
        }
        if [self.intra_spread, self.class_offset].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::config("intra_spread", "spreads must be ≥ 0"));
        }
        Ok(())
    }

    pub fn cluster_of(&self, class: usize) -> usize {
        class * self.semantic_clusters / self.num_classes
    }
}

fn gaussian_vec(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = math::norm(v.view());
    v / n
}

/// Rounds every entry to the nearest `f32`, so in-memory data equals what a
/// save/load roundtrip produces.
fn round_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|x| x as f32 as f64);
}

/// Orthonormal rows spanning `R^dim` (Gram–Schmidt on Gaussian draws).
fn orthonormal_basis(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((dim, dim));
    let mut k = 0;
    while k < dim {
        let mut v = gaussian_vec(dim, rng);
        for j in 0..k {
            let p = math::dot(v.view(), basis.row(j));
            v.scaled_add(-p, &basis.row(j));
        }
        let n = math::norm(v.view());
        if n > 1e-6 {
            basis.row_mut(k).assign(&(v / n));
            k += 1;
        }
    }
    basis
}

/// Smallest within-cluster and largest cross-cluster label similarity.
pub fn cluster_margins(table: ArrayView2<f64>, cluster_of: impl Fn(usize) -> usize) -> (f64, f64) {
    let mut within = f64::INFINITY;
    let mut cross = f64::NEG_INFINITY;
    for i in 0..table.nrows() {
        for j in i + 1..table.nrows() {
            let s = math::dot(table.row(i), table.row(j));
            if cluster_of(i) == cluster_of(j) {
                within = within.min(s);
            } else {
                cross = cross.max(s);
            }
        }
    }
    (within, cross)
}

pub fn synth_class_name(cfg: &SynthConfig, class: usize) -> String {
    format!("cluster{}-class{:02}", cfg.cluster_of(class), class)
}

pub fn synth_benchmark(cfg: &SynthConfig) -> Result<(Dataset, EmbeddingTable)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let basis = orthonormal_basis(cfg.dim, &mut rng);
    let centers = basis.slice(ndarray::s![..cfg.semantic_clusters, ..]);
    let complement = basis.slice(ndarray::s![cfg.semantic_clusters.., ..]);
    let (a, r) = (cfg.cluster_weight.sqrt(), (1.0 - cfg.cluster_weight).sqrt());

    let mut text = Array2::<f64>::zeros((cfg.num_classes, cfg.dim));
    for c in 0..cfg.num_classes {
        let coeffs = gaussian_vec(complement.nrows(), &mut rng);
        let u = unit(complement.t().dot(&coeffs));
        text.row_mut(c).assign(&(&centers.row(cfg.cluster_of(c)) * a + &u * r));
    }
    round_f32(&mut text);
    let names: Vec<String> = (0..cfg.num_classes).map(|c| synth_class_name(cfg, c)).collect();
    let table = EmbeddingTable::from_rows(names.clone(), text, DEFAULT_TEMPLATE)?;
    let text = table.vectors();

    if cfg.semantic_clusters > 1 && cfg.semantic_clusters < cfg.num_classes {
        let (within, cross) = cluster_margins(text, |c| cfg.cluster_of(c));
        if within.is_finite() && within <= cross {
            return Err(Error::Precondition(format!(
                "cluster separation violated: within {within} ≤ cross {cross}"
            )));
        }
    }

    let offset = cfg.class_offset * cfg.intra_spread;
    let noise_scale = cfg.intra_spread / (cfg.dim as f64).sqrt();
    let per_class = cfg.samples_per_class + cfg.test_per_class;
    let mut features = Array2::<f64>::zeros((cfg.num_classes * per_class, cfg.dim));
    let mut labels = Vec::with_capacity(features.nrows());
    let mut splits = Vec::with_capacity(features.nrows());
    let mut row = 0;
    for c in 0..cfg.num_classes {
        let shift = unit(gaussian_vec(cfg.dim, &mut rng));
        let prototype = &text.row(c) + &(shift * offset);
        for k in 0..per_class {
            let noise = gaussian_vec(cfg.dim, &mut rng) * noise_scale;
            features.row_mut(row).assign(&unit(&prototype + &noise));
            labels.push(c);
            splits.push(if k < cfg.samples_per_class { Split::Train } else { Split::Test });
            row += 1;
        }
    }
    round_f32(&mut features);
    let dataset = Dataset {
        name: format!("synth{}", cfg.num_classes),
        class_names: names,
        features,
        labels,
        splits,
    };
    Ok((dataset, table))
}

/// File written by [`write_benchmark`] with its SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const EMBEDDINGS_MANIFEST: &str = "embeddings.json";

/// Writes `dataset.{json,bin}` and `embeddings.{json,bin}` into `dir`.
pub fn write_benchmark(dir: &Path, dataset: &Dataset, table: &EmbeddingTable) -> Result<Vec<FileDigest>> {
    dataset.save(dir, "dataset")?;
    table.save(dir, "embeddings")?;
    ["dataset.json", "dataset.bin", "embeddings.json", "embeddings.bin"]
        .iter()
        .map(|f| {
            let path = dir.join(f);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(FileDigest { file: f.to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
        })
        .collect()
}

/// Loads a benchmark directory written by [`write_benchmark`], checking that
/// the embedding table covers every dataset class.
pub fn load_benchmark(dir: &Path) -> Result<(Dataset, EmbeddingTable)> {
    let dataset = Dataset::load(dir.join(DATASET_MANIFEST))?;
    let table = crate::embedding::load_table_for(dir.join(EMBEDDINGS_MANIFEST), &dataset.class_names)?;
    if table.dim() != dataset.dim() {
        return Err(Error::Shape(format!(
            "embeddings have dim {}, features {}",
            table.dim(),
            dataset.dim()
        )));
    }
    Ok((dataset, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_splits() {
        let s = build_stream(100, "10x10", 1).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.tasks.iter().all(|t| t.classes.len() == 10));
        s.validate().unwrap();

        let s = build_stream(101, "11+9x10", 1).unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s.tasks[0].classes.len(), 11);
        assert!(s.tasks[1..].iter().all(|t| t.classes.len() == 9));
        s.validate().unwrap();

        let err = build_stream(100, "10x9", 1).unwrap_err();
        assert!(err.to_string().contains("90") && err.to_string().contains("100"), "{err}");
        assert!(build_stream(100, "ten", 1).unwrap_err().is_config());
        assert_eq!(SplitSpec::parse("50+5×10").unwrap().total(), 100);
    }

    #[test]
    fn stream_is_seed_deterministic() {
        assert_eq!(build_stream(20, "4x5", 7).unwrap(), build_stream(20, "4x5", 7).unwrap());
        assert_ne!(build_stream(20, "4x5", 7).unwrap(), build_stream(20, "4x5", 8).unwrap());
    }

    #[test]
    fn fewshot_streams() {
        let s = build_fewshot_stream(100, 60, 8, 5, 5, DEFAULT_SEED).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s.tasks[0].shots, None);
        assert!(s.tasks[1..].iter().all(|t| t.shots == Some(5) && t.classes.len() == 5));
        assert_eq!(build_fewshot_stream(200, 100, 10, 10, 5, DEFAULT_SEED).unwrap().len(), 11);
        assert!(build_fewshot_stream(100, 60, 8, 6, 5, DEFAULT_SEED).unwrap_err().is_config());
    }

    #[test]
    fn class_list_split() {
        let names: Vec<String> = ["abyssinian", "bengal", "beagle", "boxer", "pug"].iter().map(|s| s.to_string()).collect();
        let lists = vec![vec!["bengal".to_string(), "abyssinian".into()], vec!["pug".into(), "beagle".into(), "boxer".into()]];
        let s = stream_from_class_lists(&names, &lists).unwrap();
        assert_eq!(s.tasks[0].classes, vec![1, 0]);
        assert_eq!(s.split, "2+3");
        let short = vec![vec!["bengal".to_string()]];
        assert!(matches!(stream_from_class_lists(&names, &short), Err(Error::Protocol(_))));
    }

    #[test]
    fn zero_spread_samples_equal_embeddings() {
        let cfg = SynthConfig { num_classes: 6, dim: 8, samples_per_class: 3, test_per_class: 2, intra_spread: 0.0, semantic_clusters: 1, ..Default::default() };
        let (data, table) = synth_benchmark(&cfg).unwrap();
        for (row, &label) in data.features.rows().into_iter().zip(&data.labels) {
            for (a, b) in row.iter().zip(table.vectors().row(label).iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clusters_are_separated() {
        let cfg = SynthConfig { num_classes: 10, semantic_clusters: 2, dim: 32, ..Default::default() };
        let (_, table) = synth_benchmark(&cfg).unwrap();
        let (within, cross) = cluster_margins(table.vectors(), |c| cfg.cluster_of(c));
        assert!(within > cross, "{within} vs {cross}");
        let bad = SynthConfig { dim: 2, semantic_clusters: 4, ..Default::default() };
        assert!(synth_benchmark(&bad).unwrap_err().is_config());
    }

    #[test]
    fn benchmark_roundtrips_exactly() {
        let cfg = SynthConfig { num_classes: 4, dim: 8, samples_per_class: 5, test_per_class: 2, semantic_clusters: 2, ..Default::default() };
        let (data, table) = synth_benchmark(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let digests = write_benchmark(dir.path(), &data, &table).unwrap();
        assert_eq!(digests.len(), 4);
        let (d2, t2) = load_benchmark(dir.path()).unwrap();
        assert_eq!(d2, data);
        assert_eq!(t2, table);
        assert_eq!(data.train_rows(1, None).len(), 5);
        assert_eq!(data.train_rows(1, Some(2)).len(), 2);
        assert_eq!(data.test_rows(&[0, 3]).len(), 4);
    }
}
