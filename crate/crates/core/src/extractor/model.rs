use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::ndmath::{self, Tape, Tensor, Var, NORM_EPS};
use crate::seeds;
use crate::sigsim::ComplexSignal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub width: usize,
    pub stride: usize,
}

/// `2×M` input → (conv → ReLU)* → global average pool → dense to `embed_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub signal_len: usize,
    pub convs: Vec<ConvSpec>,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::for_signal_len(crate::sigsim::DEFAULT_PREAMBLE_LEN)
    }
}

impl Architecture {
    pub const INPUT_CHANNELS: usize = 2;

    /// Three stride-2 width-9 convolutions (16, 32, 32 channels) and a
    /// 64-dimensional embedding.
    pub fn for_signal_len(signal_len: usize) -> Self {
        let conv = |out_channels| ConvSpec {
            out_channels,
            width: 9,
            stride: 2,
        };
        Self {
            signal_len,
            convs: vec![conv(16), conv(32), conv(32)],
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::config("architecture.convs", "at least one convolution required"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("architecture.embed_dim", "must be positive"));
        }
        let mut len = self.signal_len;
        for (i, c) in self.convs.iter().enumerate() {
            if c.out_channels == 0 || c.width == 0 || c.stride == 0 {
                return Err(Error::config(
                    format!("architecture.convs[{i}]"),
                    "zero-sized convolution",
                ));
            }
            if c.width > len {
                return Err(Error::config(
                    format!("architecture.convs[{i}]"),
                    format!("width {} exceeds input length {len}", c.width),
                ));
            }
            len = (len - c.width) / c.stride + 1;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv { stride: usize },
    Dense,
}

/// One weight layer. Convolution kernels are stored `c_out × c_in × w`,
/// whose row-major data is also the `c_out × (c_in·w)` matrix view.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    /// `(rows, cols)` of the weight's matrix view.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1..].iter().product())
    }
}

/// Per-layer weight replacements (full matrices in matrix-view shape) used
/// for merged forwards without copying the whole model.
pub type WeightOverrides = BTreeMap<String, Tensor>;

/// Extractor network `F: C^M → R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorModel {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

/// Un-normalised embedding `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn new(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Zero (or numerically zero) embeddings carry no direction.
    pub fn is_degenerate(&self) -> bool {
        !(self.norm() > NORM_EPS)
    }

    pub fn unit(&self) -> Result<Vec<f64>> {
        Ok(ndmath::l2_normalize(&Tensor::vector(self.0.clone()))?.into_data())
    }
}

impl ExtractorModel {
    /// Seeded Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))` over each
    /// matrix view) and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeds::rng(seed);
        let mut layers = Vec::with_capacity(arch.convs.len() + 1);
        let mut c_in = Architecture::INPUT_CHANNELS;
        for (i, c) in arch.convs.iter().enumerate() {
            let weight = glorot(&mut rng, &[c.out_channels, c_in, c.width]);
            layers.push(Layer {
                name: format!("conv{}", i + 1),
                kind: LayerKind::Conv { stride: c.stride },
                weight,
                bias: Tensor::zeros(&[c.out_channels]),
            });
            c_in = c.out_channels;
        }
        layers.push(Layer {
            name: "dense".into(),
            kind: LayerKind::Dense,
            weight: glorot(&mut rng, &[arch.embed_dim, c_in]),
            bias: Tensor::zeros(&[arch.embed_dim]),
        });
        Ok(Self { arch, layers })
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Names of all weight matrices, in forward order.
    pub fn weight_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// `(rows, cols)` of the named weight's matrix view.
    pub fn weight_dims(&self, name: &str) -> Result<(usize, usize)> {
        self.layer(name)
            .map(Layer::matrix_dims)
            .ok_or_else(|| Error::config("targets", format!("unknown weight `{name}`")))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameter tensors in a fixed order: per layer, weight then bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Order-sensitive digest of every parameter bit, for frozen-base checks.
    pub fn checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.parameters() {
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = [Architecture::INPUT_CHANNELS, self.arch.signal_len];
        if x.shape() != expected {
            return Err(Error::dim("embed", x.shape(), &expected));
        }
        Ok(())
    }

    /// Forward pass on a `2 × M` input, optionally substituting whole weight
    /// matrices (matrix-view shape) for named layers.
    pub fn forward_tensor(&self, x: &Tensor, overrides: Option<&WeightOverrides>) -> Result<Tensor> {
        self.check_input(x)?;
        counters::record_forward();
        let mut h = x.clone();
        for layer in &self.layers {
            let replaced;
            let w = match overrides.and_then(|o| o.get(&layer.name)) {
                Some(m) => {
                    replaced = m.reshape(layer.weight.shape())?;
                    &replaced
                }
                None => &layer.weight,
            };
            h = match layer.kind {
                LayerKind::Conv { stride } => {
                    let c = ndmath::conv1d(&h, w, stride)?;
                    ndmath::relu(&ndmath::add_channel_bias(&c, &layer.bias)?)
                }
                LayerKind::Dense => {
                    let pooled = ndmath::global_avg_pool(&h)?;
                    ndmath::add_channel_bias(&ndmath::matmul(w, &pooled)?, &layer.bias)?
                }
            };
        }
        Ok(h)
    }

    /// `z = F(x)`.
    pub fn embed(&self, x: &ComplexSignal) -> Result<Embedding> {
        if x.len() != self.arch.signal_len {
            return Err(Error::dim("embed", &[x.len()], &[self.arch.signal_len]));
        }
        Ok(Embedding(self.forward_tensor(&x.to_tensor(), None)?.into_data()))
    }

    pub fn embed_with(&self, x: &ComplexSignal, overrides: Option<&WeightOverrides>) -> Result<Embedding> {
        if x.len() != self.arch.signal_len {
            return Err(Error::dim("embed", &[x.len()], &[self.arch.signal_len]));
        }
        Ok(Embedding(self.forward_tensor(&x.to_tensor(), overrides)?.into_data()))
    }

    /// Records the forward pass on `tape`. `weights[i]` / `biases[i]` are the
    /// vars standing in for layer `i` (kernels in their native shape).
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, weights: &[Var], biases: &[Var]) -> Result<Var> {
        self.check_input(tape.value(x))?;
        counters::record_forward();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer.kind {
                LayerKind::Conv { stride } => {
                    let c = tape.conv1d(h, weights[i], stride)?;
                    let b = tape.add_channel_bias(c, biases[i])?;
                    tape.relu(b)
                }
                LayerKind::Dense => {
                    let pooled = tape.global_avg_pool(h)?;
                    let m = tape.matmul(weights[i], pooled)?;
                    tape.add_channel_bias(m, biases[i])?
                }
            };
        }
        Ok(h)
    }
}

fn glorot(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let fan_out = shape[0];
    let fan_in: usize = shape[1..].iter().product();
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = fan_out * fan_in;
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
    )
    .expect("glorot shape")
}
