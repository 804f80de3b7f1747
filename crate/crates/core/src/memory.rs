//! Exemplar memory for old classes.
//!
//! Exemplars are picked by herding: greedily add the sample that keeps the
//! running mean of the picked features closest to the class mean. The raw
//! samples (not their features) are stored, so later encoders re-encode them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{read_json, write_json};
use crate::error::{Error, Result};
use crate::math;

/// Distances closer than this are treated as ties (lowest index wins).
pub const HERDING_TIE_TOL: f64 = 1e-12;

/// Greedy herding order over one class's unit-norm features.
pub fn herding_select(features: ArrayView2<f64>, m: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Precondition("herding needs at least one sample".into()));
    }
    math::check_unit_rows(features, "herding features")?;
    let mean = features.sum_axis(Axis(0)) / n as f64;
    let mut sum = Array1::<f64>::zeros(features.ncols());
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(m.min(n));
    for k in 1..=m.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for (i, x) in features.axis_iter(Axis(0)).enumerate() {
            if taken[i] {
                continue;
            }
            let candidate = (&sum + &x) / k as f64;
            let d = math::norm((&mean - &candidate).view());
            if best.is_none_or(|(_, bd)| d < bd - HERDING_TIE_TOL) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("fewer than n samples taken");
        taken[i] = true;
        sum += &features.row(i);
        order.push(i);
    }
    Ok(order)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarStore {
    per_class: usize,
    classes: BTreeMap<usize, Array2<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreIndex {
    per_class: usize,
    dim: usize,
    /// `(label, rows)` in storage order.
    classes: Vec<(usize, usize)>,
    data: String,
}

impl ExemplarStore {
    pub fn new(per_class: usize) -> Self {
        Self {
            per_class,
            classes: BTreeMap::new(),
        }
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    /// Total number of stored exemplars.
    pub fn len(&self) -> usize {
        self.classes.values().map(Array2::nrows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn contains_class(&self, label: usize) -> bool {
        self.classes.contains_key(&label)
    }

    pub fn samples_of(&self, label: usize) -> Option<ArrayView2<'_, f64>> {
        self.classes.get(&label).map(|a| a.view())
    }

    /// Herds up to `per_class` exemplars of a newly completed class.
    /// `samples` are the raw inputs and `features` their encoded rows.
    pub fn add_class(&mut self, label: usize, samples: ArrayView2<f64>, features: ArrayView2<f64>) -> Result<()> {
        if self.classes.contains_key(&label) {
            return Err(Error::Protocol(format!("class {label} already has exemplars")));
        }
        if samples.nrows() != features.nrows() {
            return Err(Error::Shape(format!(
                "{} samples but {} feature rows",
                samples.nrows(),
                features.nrows()
            )));
        }
        if let Some(d) = self.classes.values().next().map(Array2::ncols) {
            if d != samples.ncols() {
                return Err(Error::Shape(format!("sample dim {} vs stored {d}", samples.ncols())));
            }
        }
        let picked = herding_select(features, self.per_class)?;
        if !picked.is_empty() {
            self.classes.insert(label, samples.select(Axis(0), &picked));
        }
        Ok(())
    }

    /// Every exemplar with its label, classes in ascending order.
    pub fn all(&self) -> (Array2<f64>, Vec<usize>) {
        let dim = self.classes.values().next().map_or(0, Array2::ncols);
        let mut samples = Array2::zeros((0, dim));
        let mut labels = Vec::with_capacity(self.len());
        for (&label, rows) in &self.classes {
            samples.append(Axis(0), rows.view()).expect("uniform dims");
            labels.extend(std::iter::repeat_n(label, rows.nrows()));
        }
        (samples, labels)
    }

    /// Writes `store.json` and `store.bin` (little-endian `f64`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (samples, _) = self.all();
        let mut bytes = Vec::with_capacity(samples.len() * 8);
        for v in samples.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let bin = dir.join("store.bin");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let index = StoreIndex {
            per_class: self.per_class,
            dim: samples.ncols(),
            classes: self.classes.iter().map(|(&l, r)| (l, r.nrows())).collect(),
            data: "store.bin".into(),
        };
        write_json(&dir.join("store.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: StoreIndex = read_json(&dir.join("store.json"))?;
        let bin = dir.join(&index.data);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let total: usize = index.classes.iter().map(|c| c.1).sum();
        if bytes.len() != total * index.dim * 8 {
            return Err(Error::Shape(format!("{}: unexpected payload length", bin.display())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let all = Array2::from_shape_vec((total, index.dim), values).map_err(|e| Error::Shape(e.to_string()))?;
        let mut classes = BTreeMap::new();
        let mut start = 0;
        for (label, rows) in index.classes {
            classes.insert(label, all.slice(ndarray::s![start..start + rows, ..]).to_owned());
            start += rows;
        }
        Ok(Self {
            per_class: index.per_class,
            classes,
        })
    }
}

/// Samples up to `size` exemplars uniformly without replacement.
pub fn replay_batch(store: &ExemplarStore, size: usize, rng: &mut impl Rng) -> (Array2<f64>, Vec<usize>) {
    let mut sampler = ReplaySampler::new(store, rng);
    sampler.next_batch(size.min(store.len()), rng)
}

/// Draws exemplars without replacement within a pass over the store,
/// reshuffling once every exemplar has been drawn.
#[derive(Debug, Clone)]
pub struct ReplaySampler {
    samples: Array2<f64>,
    labels: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl ReplaySampler {
    pub fn new(store: &ExemplarStore, rng: &mut impl Rng) -> Self {
        let (samples, labels) = store.all();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(rng);
        Self { samples, labels, order, pos: 0 }
    }

    pub fn next_batch(&mut self, size: usize, rng: &mut impl Rng) -> (Array2<f64>, Vec<usize>) {
        let mut picked = Vec::with_capacity(size);
        if !self.order.is_empty() {
            while picked.len() < size {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                picked.push(self.order[self.pos]);
                self.pos += 1;
            }
        }
        let labels = picked.iter().map(|&i| self.labels[i]).collect();
        (self.samples.select(Axis(0), &picked), labels)
    }
}
