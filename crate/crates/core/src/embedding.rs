//! Frozen label text embeddings.
//!
//! Embeddings are exported once from a pre-trained text encoder and shipped
//! as a JSON manifest next to a raw little-endian `f32` payload:
//!
//! ```text
//! { "dim": 512, "template": "a photo of a {label}.", "labels": ["cat", ...], "data": "embeddings.bin" }
//! ```
//!
//! The payload is row-major, one row of `dim` floats per label. Every row is
//! renormalized to unit length on load, and the table is immutable afterwards.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub const DEFAULT_TEMPLATE: &str = "a photo of a {label}.";
const PLACEHOLDER: &str = "{label}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableManifest {
    pub dim: usize,
    pub template: String,
    pub labels: Vec<String>,
    /// Payload path, relative to the manifest's directory.
    pub data: PathBuf,
}

/// One label and its unit-norm vector, borrowed from a table.
#[derive(Debug, Clone, Copy)]
pub struct LabelEmbedding<'a> {
    pub label: &'a str,
    pub vector: ArrayView1<'a, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    /// Rows as supplied, before renormalization; this is what `save` writes.
    source: Array2<f64>,
    template: String,
}

impl EmbeddingTable {
    /// Builds a table from raw rows, renormalizing each one.
    pub fn from_rows(labels: Vec<String>, rows: Array2<f64>, template: &str) -> Result<Self> {
        check_template(template)?;
        if rows.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} embedding rows",
                labels.len(),
                rows.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Embedding {
                    label: label.clone(),
                    reason: "duplicate label".into(),
                });
            }
        }
        let mut vectors = rows.clone();
        for (i, row) in vectors.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Embedding {
                    label: labels[i].clone(),
                    reason: "non-finite value".into(),
                });
            }
        }
        if let Err(i) = math::normalize_rows(&mut vectors) {
            return Err(Error::Embedding {
                label: labels[i].clone(),
                reason: "zero vector cannot be normalized".into(),
            });
        }
        Ok(Self {
            labels,
            index,
            vectors,
            source: rows,
            template: template.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// All vectors, one row per label in table order.
    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn get(&self, label: &str) -> Option<LabelEmbedding<'_>> {
        self.position(label).map(|i| LabelEmbedding {
            label: &self.labels[i],
            vector: self.vectors.row(i),
        })
    }

    /// The prompt the embedding for `label` was exported with.
    pub fn prompt(&self, label: &str) -> String {
        self.template.replace(PLACEHOLDER, label)
    }

    /// Fails on the first label in `required` the table does not contain.
    pub fn ensure_covers<S: AsRef<str>>(&self, required: &[S]) -> Result<()> {
        match required.iter().find(|l| self.position(l.as_ref()).is_none()) {
            Some(missing) => Err(Error::UnknownLabel(missing.as_ref().to_string())),
            None => Ok(()),
        }
    }

    /// Rows for table positions, in the given order.
    pub fn rows(&self, positions: &[usize]) -> Array2<f64> {
        self.vectors.select(Axis(0), positions)
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`, returning the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data = PathBuf::from(format!("{stem}.bin"));
        write_f32_matrix(&dir.join(&data), self.source.view())?;
        let manifest = TableManifest {
            dim: self.dim(),
            template: self.template.clone(),
            labels: self.labels.clone(),
            data,
        };
        let path = dir.join(format!("{stem}.json"));
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

fn check_template(template: &str) -> Result<()> {
    if template.matches(PLACEHOLDER).count() != 1 {
        return Err(Error::config(
            "template",
            format!("{template:?} must contain exactly one {PLACEHOLDER} placeholder"),
        ));
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Reads a row-major little-endian `f32` payload of `rows × dim` values.
pub(crate) fn read_f32_matrix(path: &Path, rows: usize, dim: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{}: payload is {} bytes, expected {rows}·{dim}·4 = {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, dim), values).map_err(|e| Error::Shape(e.to_string()))
}

pub(crate) fn write_f32_matrix(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for x in m.iter() {
        bytes.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and renormalizes an embedding table from its JSON manifest.
pub fn load_table(manifest_path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let manifest_path = manifest_path.as_ref();
    let manifest: TableManifest = read_json(manifest_path)?;
    if manifest.dim == 0 {
        return Err(Error::config("dim", "must be positive"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let rows = read_f32_matrix(&base.join(&manifest.data), manifest.labels.len(), manifest.dim)?;
    EmbeddingTable::from_rows(manifest.labels, rows, &manifest.template)
}

/// Loads a table and checks, at load time, that it covers `required`.
pub fn load_table_for<S: AsRef<str>>(
    manifest_path: impl AsRef<Path>,
    required: &[S],
) -> Result<EmbeddingTable> {
    let table = load_table(manifest_path)?;
    table.ensure_covers(required)?;
    Ok(table)
}

/// Stacks the embeddings of `labels` into a `K × D` matrix in input order.
pub fn embed_labels<S: AsRef<str>>(table: &EmbeddingTable, labels: &[S]) -> Result<Array2<f64>> {
    let positions = labels
        .iter()
        .map(|l| {
            table
                .position(l.as_ref())
                .ok_or_else(|| Error::UnknownLabel(l.as_ref().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(table.rows(&positions))
}
