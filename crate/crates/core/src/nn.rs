//! Inference for the convolutional surrogate network and its weight file.
//!
//! The weight file is a JSON document:
//!
//! ```text
//! { "schema_version": 1, "spatial_dim": 60, "layer_count": 6,
//!   "layers": [ { "kind": "circular_conv1d", "in_channels": 1, "out_channels": 72,
//!                 "kernel_size": 5, "padding": "circular", "activation": "relu",
//!                 "weights": [...], "bias": [...] }, ... ] }
//! ```
//!
//! Weights are stored row-major as `[out][in][kernel]` for convolutions and
//! `[out_channels*d][in_channels*d]` (channel-major features) for dense
//! layers. Every real is written with 9 significant digits, which is enough
//! for `f32` values to survive a write/read cycle unchanged.

use std::io;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::StateVector;
use crate::rng::{self, Role};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    CircularConv1d,
    Dense,
    PointwiseMultiplyMerge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Which channel groups feed the merge layer. The input has three equal
/// groups `g1, g2, g3`; the output is `concat(g1, ga ⊙ gb)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRouting {
    /// `concat(g1, g2 ⊙ g3)`
    #[default]
    Diagram,
    /// `concat(g1, g1 ⊙ g2)`
    Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: String,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<MergeRouting>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::CircularConv1d,
            in_channels,
            out_channels,
            kernel_size,
            padding: "circular".into(),
            activation,
            routing: None,
            weights: vec![0.0; out_channels * in_channels * kernel_size],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn merge(in_channels: usize, routing: MergeRouting) -> Self {
        Self {
            kind: LayerKind::PointwiseMultiplyMerge,
            in_channels,
            out_channels: 2 * in_channels / 3,
            kernel_size: 0,
            padding: "circular".into(),
            activation: Activation::Identity,
            routing: Some(routing),
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    fn expected_shapes(&self, spatial_dim: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::CircularConv1d => (self.out_channels * self.in_channels * self.kernel_size, self.out_channels),
            LayerKind::Dense => (
                self.out_channels * spatial_dim * self.in_channels * spatial_dim,
                self.out_channels * spatial_dim,
            ),
            LayerKind::PointwiseMultiplyMerge => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkWeights {
    pub schema_version: u32,
    pub spatial_dim: usize,
    pub layer_count: usize,
    pub layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn new(spatial_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            schema_version: SCHEMA_VERSION,
            spatial_dim,
            layer_count: layers.len(),
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks version, layer count, channel chaining, tensor sizes and
    /// finiteness, naming the first offending layer.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.spatial_dim == 0 {
            return Err(Error::Schema("spatial_dim must be positive".into()));
        }
        if self.layers.len() < self.layer_count {
            return Err(Error::Schema(format!(
                "layer {} missing: header declares {} layers, file has {}",
                self.layers.len(),
                self.layer_count,
                self.layers.len()
            )));
        }
        if self.layers.len() != self.layer_count {
            return Err(Error::Schema(format!(
                "header declares {} layers, file has {}",
                self.layer_count,
                self.layers.len()
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Schema("network has no layers".into()));
        }
        let mut channels = 1usize;
        for (idx, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::Schema(format!("layer {idx} ({:?}): {msg}", layer.kind));
            if layer.padding != "circular" {
                return Err(fail(format!("unsupported padding {:?}", layer.padding)));
            }
            if layer.in_channels != channels {
                return Err(fail(format!(
                    "expects {} input channels but receives {channels}",
                    layer.in_channels
                )));
            }
            match layer.kind {
                LayerKind::CircularConv1d => {
                    if layer.kernel_size == 0 || layer.kernel_size % 2 == 0 {
                        return Err(fail(format!("kernel size {} must be odd", layer.kernel_size)));
                    }
                    if layer.routing.is_some() {
                        return Err(fail("routing only applies to merge layers".into()));
                    }
                }
                LayerKind::Dense => {
                    if layer.routing.is_some() {
                        return Err(fail("routing only applies to merge layers".into()));
                    }
                }
                LayerKind::PointwiseMultiplyMerge => {
                    if layer.in_channels % 3 != 0 || layer.out_channels != 2 * layer.in_channels / 3 {
                        return Err(fail(format!(
                            "merge needs 3g inputs and 2g outputs, got {} -> {}",
                            layer.in_channels, layer.out_channels
                        )));
                    }
                }
            }
            let (nw, nb) = layer.expected_shapes(self.spatial_dim);
            if layer.weights.len() != nw {
                return Err(fail(format!("expected {nw} weights, found {}", layer.weights.len())));
            }
            if layer.bias.len() != nb {
                return Err(fail(format!("expected {nb} biases, found {}", layer.bias.len())));
            }
            if let Some(pos) = layer.weights.iter().chain(&layer.bias).position(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite value at position {pos}")));
            }
            channels = layer.out_channels;
        }
        if channels != 1 {
            return Err(Error::Schema(format!("network must end with 1 channel, ends with {channels}")));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Conv/merge stack: conv(1→3g, k) → merge → conv(2g→h, k) → conv(h→h, k)
    /// → conv(h→h, k) → conv(h→1, 1), with uniform random weights.
    pub fn conv_surrogate(
        spatial_dim: usize,
        group: usize,
        hidden: usize,
        kernel: usize,
        routing: MergeRouting,
        seed: u64,
    ) -> Result<Self> {
        let mut stream = rng::stream(seed, 0, Role::Misc, 0);
        let mut layers = vec![
            Layer::conv(1, 3 * group, kernel, Activation::Identity),
            Layer::merge(3 * group, routing),
            Layer::conv(2 * group, hidden, kernel, Activation::Relu),
            Layer::conv(hidden, hidden, kernel, Activation::Relu),
            Layer::conv(hidden, hidden, kernel, Activation::Relu),
            Layer::conv(hidden, 1, 1, Activation::Identity),
        ];
        for layer in &mut layers {
            let fan_in = (layer.in_channels * layer.kernel_size).max(1) as f32;
            let bound = 1.0 / fan_in.sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = stream.sample(dist);
            }
        }
        Self::new(spatial_dim, layers)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, NineDigitFormatter);
        self.serialize(&mut ser)?;
        buf.push(b'\n');
        Ok(String::from_utf8(buf).expect("JSON output is UTF-8"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }
}

struct NineDigitFormatter;

impl serde_json::ser::Formatter for NineDigitFormatter {
    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }

    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let text = std::fs::read_to_string(path)?;
    NetworkWeights::from_json(&text)
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, weights.to_json()?)?;
    Ok(())
}

/// Activations laid out as `channels × spatial_dim`, channel-major.
struct Feature {
    channels: usize,
    data: Vec<f64>,
}

fn conv_forward(layer: &Layer, input: &Feature, d: usize) -> Feature {
    let k = layer.kernel_size;
    let half = (k / 2) as isize;
    let mut data = vec![0.0; layer.out_channels * d];
    for o in 0..layer.out_channels {
        let out = &mut data[o * d..(o + 1) * d];
        out.fill(layer.bias[o] as f64);
        for i in 0..layer.in_channels {
            let inp = &input.data[i * d..(i + 1) * d];
            let w = &layer.weights[(o * layer.in_channels + i) * k..(o * layer.in_channels + i + 1) * k];
            for (tap, &wk) in w.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let shift = (tap as isize - half).rem_euclid(d as isize) as usize;
                let wk = wk as f64;
                for (x, o_val) in out.iter_mut().enumerate() {
                    *o_val += wk * inp[(x + shift) % d];
                }
            }
        }
        for v in out.iter_mut() {
            *v = layer.activation.apply(*v);
        }
    }
    Feature {
        channels: layer.out_channels,
        data,
    }
}

fn dense_forward(layer: &Layer, input: &Feature, d: usize) -> Feature {
    let n_in = layer.in_channels * d;
    let n_out = layer.out_channels * d;
    let data = (0..n_out)
        .map(|r| {
            let row = &layer.weights[r * n_in..(r + 1) * n_in];
            let acc = row
                .iter()
                .zip(&input.data)
                .fold(layer.bias[r] as f64, |acc, (&w, &x)| acc + w as f64 * x);
            layer.activation.apply(acc)
        })
        .collect();
    Feature {
        channels: layer.out_channels,
        data,
    }
}

fn merge_forward(layer: &Layer, input: &Feature, d: usize) -> Feature {
    let g = layer.in_channels / 3;
    let group = |idx: usize| &input.data[idx * g * d..(idx + 1) * g * d];
    let (first, a, b) = match layer.routing.unwrap_or_default() {
        MergeRouting::Diagram => (group(0), group(1), group(2)),
        MergeRouting::Caption => (group(0), group(0), group(1)),
    };
    let mut data = Vec::with_capacity(2 * g * d);
    data.extend(first.iter().map(|&v| layer.activation.apply(v)));
    data.extend(a.iter().zip(b).map(|(&x, &y)| layer.activation.apply(x * y)));
    Feature {
        channels: 2 * g,
        data,
    }
}

/// Forward pass on a single-channel input of length `spatial_dim`.
pub fn nn_forward(w: &NetworkWeights, u: &StateVector) -> Result<StateVector> {
    check_dim("nn_forward", w.spatial_dim, u.len())?;
    let d = w.spatial_dim;
    let mut x = Feature {
        channels: 1,
        data: u.as_slice().to_vec(),
    };
    for (idx, layer) in w.layers.iter().enumerate() {
        if layer.in_channels != x.channels {
            return Err(Error::Schema(format!(
                "layer {idx}: expects {} channels, receives {}",
                layer.in_channels, x.channels
            )));
        }
        x = match layer.kind {
            LayerKind::CircularConv1d => conv_forward(layer, &x, d),
            LayerKind::Dense => dense_forward(layer, &x, d),
            LayerKind::PointwiseMultiplyMerge => merge_forward(layer, &x, d),
        };
    }
    if x.channels != 1 {
        return Err(Error::Schema(format!("network produced {} channels", x.channels)));
    }
    Ok(DVector::from_vec(x.data))
}
