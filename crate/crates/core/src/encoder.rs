//! Vision encoder producing unit-norm image features.
//!
//! An encoder is a stack of blocks `h ↦ [h +] act(W·h + b)` followed by row
//! normalization. Only the last `trainable_tail` blocks receive gradients;
//! `trainable_tail = 0` freezes the encoder entirely.
//!
//! Two layouts are provided:
//! - `toy-mlp`: tanh hidden blocks and a linear projection, uniformly
//!   initialized in `±1/√fan_in` from a fixed seed.
//! - `external-features`: precomputed per-image features pass through residual
//!   tanh blocks (zero-initialized) and a linear projection initialized to the
//!   identity, so a fresh encoder reproduces its input features exactly.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    ToyMlp,
    ExternalFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub trainable_tail: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl EncoderSpec {
    pub fn num_blocks(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("encoder", "all layer widths must be positive"));
        }
        if self.trainable_tail > self.num_blocks() {
            return Err(Error::config(
                "trainable_tail",
                format!("{} exceeds the {} encoder blocks", self.trainable_tail, self.num_blocks()),
            ));
        }
        if self.kind == EncoderKind::ExternalFeatures
            && (self.input_dim != self.feature_dim || self.hidden.iter().any(|&h| h != self.feature_dim))
        {
            return Err(Error::config(
                "encoder",
                "external-features encoders keep every width equal to feature_dim",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// One parameter block. `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub residual: bool,
}

impl Block {
    fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradient (or momentum buffer) for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients for the trainable tail; `blocks[k]` belongs to encoder block
/// `first_block + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub first_block: usize,
    pub blocks: Vec<BlockGrad>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied())
            .collect()
    }
}

/// Read-only view of one trainable block.
#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a> {
    pub block: usize,
    pub weight: &'a Array2<f64>,
    pub bias: &'a Array1<f64>,
}

/// Intermediate values of a forward pass, kept for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    norms: Array1<f64>,
    output: Array2<f64>,
}

impl ForwardCache {
    /// The unit-norm features.
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.output.view()
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    spec: EncoderSpec,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.feature_dim);
        let last = widths.len() - 2;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let activation = if i == last { Activation::Identity } else { Activation::Tanh };
                match spec.kind {
                    EncoderKind::ToyMlp => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                        let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                        Block { weight, bias, activation, residual: false }
                    }
                    EncoderKind::ExternalFeatures if i == last => Block {
                        weight: Array2::eye(fan_out),
                        bias: Array1::zeros(fan_out),
                        activation,
                        residual: false,
                    },
                    EncoderKind::ExternalFeatures => Block {
                        weight: Array2::zeros((fan_out, fan_in)),
                        bias: Array1::zeros(fan_out),
                        activation,
                        residual: true,
                    },
                }
            })
            .collect();
        Ok(Self { spec, blocks })
    }

    /// Builds an encoder from explicit blocks, checking that shapes chain.
    pub fn from_blocks(spec: EncoderSpec, blocks: Vec<Block>) -> Result<Self> {
        if blocks.len() != spec.num_blocks() {
            return Err(Error::Shape(format!(
                "{} blocks for a spec declaring {}",
                blocks.len(),
                spec.num_blocks()
            )));
        }
        if spec.trainable_tail > blocks.len() {
            return Err(Error::config("trainable_tail", "exceeds block count"));
        }
        let mut width = spec.input_dim;
        for (i, b) in blocks.iter().enumerate() {
            let (out, inp) = b.weight.dim();
            if inp != width || b.bias.len() != out || (b.residual && out != inp) {
                return Err(Error::Shape(format!("block {i} does not chain from width {width}")));
            }
            width = out;
        }
        if width != spec.feature_dim {
            return Err(Error::Shape(format!("final width {width} ≠ feature_dim {}", spec.feature_dim)));
        }
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks.iter().map(Block::num_parameters).sum()
    }

    /// Block indices that receive gradients.
    pub fn trainable_range(&self) -> Range<usize> {
        self.blocks.len() - self.spec.trainable_tail..self.blocks.len()
    }

    pub fn trainable_parameters(&self) -> Vec<ParamView<'_>> {
        self.trainable_range()
            .map(|i| ParamView {
                block: i,
                weight: &self.blocks[i].weight,
                bias: &self.blocks[i].bias,
            })
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.blocks[self.trainable_range()].iter().map(Block::num_parameters).sum()
    }

    /// Trainable parameters flattened in block order (weights, then bias).
    pub fn trainable_flat(&self) -> Vec<f64> {
        self.blocks[self.trainable_range()]
            .iter()
            .flat_map(|b| b.weight.iter().chain(b.bias.iter()).copied())
            .collect()
    }

    pub fn set_trainable_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_trainable() {
            return Err(Error::Shape(format!(
                "{} values for {} trainable parameters",
                values.len(),
                self.num_trainable()
            )));
        }
        let range = self.trainable_range();
        let mut it = values.iter();
        for b in &mut self.blocks[range] {
            for w in b.weight.iter_mut().chain(b.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Applies `f(param, grad)` to every trainable parameter and its gradient.
    pub(crate) fn update_trainable(&mut self, grads: &Gradients, mut f: impl FnMut(usize, &mut f64, f64)) {
        let range = self.trainable_range();
        let mut k = 0;
        for (b, g) in self.blocks[range].iter_mut().zip(&grads.blocks) {
            for (w, gw) in b.weight.iter_mut().zip(g.weight.iter()).chain(b.bias.iter_mut().zip(g.bias.iter())) {
                f(k, w, *gw);
                k += 1;
            }
        }
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(x).map(ForwardCache::into_output)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, encoder expects {}",
                x.ncols(),
                self.spec.input_dim
            )));
        }
        if let Some(row) = first_non_finite_row(x) {
            return Err(Error::Numeric { batch: row, detail: "non-finite encoder input".into() });
        }
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut pre_activations = Vec::with_capacity(self.blocks.len());
        let mut h = x.to_owned();
        for b in &self.blocks {
            let a = h.dot(&b.weight.t()) + &b.bias;
            let mut y = match b.activation {
                Activation::Tanh => a.mapv(f64::tanh),
                Activation::Identity => a.clone(),
            };
            if b.residual {
                y += &h;
            }
            inputs.push(h);
            pre_activations.push(a);
            h = y;
        }
        let norms: Array1<f64> = h.axis_iter(Axis(0)).map(math::norm).collect();
        for (i, &n) in norms.iter().enumerate() {
            if !n.is_finite() || n == 0.0 {
                return Err(Error::Numeric {
                    batch: i,
                    detail: format!("encoder output norm {n} cannot be normalized"),
                });
            }
        }
        let output = &h / &norms.view().insert_axis(Axis(1));
        Ok(ForwardCache { inputs, pre_activations, norms, output })
    }

    /// Gradients of a scalar loss with respect to the trainable tail, given
    /// `d_out = ∂L/∂features`. Blocks before the tail receive nothing.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> Result<Gradients> {
        if d_out.dim() != cache.output.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} vs features {:?}",
                d_out.dim(),
                cache.output.dim()
            )));
        }
        let range = self.trainable_range();
        let mut blocks = Vec::with_capacity(range.len());
        if range.is_empty() {
            return Ok(Gradients { first_block: range.start, blocks });
        }
        // Through the row normalization: (g − u·⟨u, g⟩) / ‖y‖.
        let mut dh = d_out.to_owned();
        Zip::from(dh.rows_mut())
            .and(cache.output.rows())
            .and(&cache.norms)
            .for_each(|mut g, u, &n| {
                let proj = math::dot(g.view(), u);
                Zip::from(&mut g).and(u).for_each(|gi, &ui| *gi = (*gi - ui * proj) / n);
            });
        for i in range.clone().rev() {
            let b = &self.blocks[i];
            let da = match b.activation {
                Activation::Tanh => {
                    let mut da = dh.clone();
                    Zip::from(&mut da)
                        .and(&cache.pre_activations[i])
                        .for_each(|d, &a| {
                            let t = a.tanh();
                            *d *= 1.0 - t * t;
                        });
                    da
                }
                Activation::Identity => dh.clone(),
            };
            let weight = da.t().dot(&cache.inputs[i]);
            let bias = da.sum_axis(Axis(0));
            blocks.push(BlockGrad { weight, bias });
            if i > range.start {
                let mut next = da.dot(&b.weight);
                if b.residual {
                    next += &dh;
                }
                dh = next;
            }
        }
        blocks.reverse();
        Ok(Gradients { first_block: range.start, blocks })
    }

    /// Detached, immutable copy of the current parameters.
    pub fn snapshot(&self) -> EncoderSnapshot {
        EncoderSnapshot { inner: Arc::new(self.clone()) }
    }
}

fn first_non_finite_row(x: ArrayView2<f64>) -> Option<usize> {
    x.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Frozen encoder from the end of the previous task.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSnapshot {
    inner: Arc<Encoder>,
}

impl EncoderSnapshot {
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inner.encode(x)
    }

    pub fn snapshot(&self) -> EncoderSnapshot {
        self.clone()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.inner
    }
}
