//! Small deterministic feedforward engine.
//!
//! A [`LayeredNetwork`] is an ordered stack of layers ending in a softmax.
//! A split index `s` decomposes it as `f = Φ2 ∘ Φ1`, where `Φ1` runs layers
//! `0..s` and `Φ2` runs layers `s..`. Activations are stored row-major; spatial
//! tensors use `h × w × l` (channel-last) layout.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{Granularity, UnitSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InputShape {
                expected: vec![],
                got: shape,
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ActivationMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::ActivationMismatch(format!("non-finite entry at {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Layer kind without parameters; this is what the JSON manifest records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    Maxpool2x2,
    Flatten,
    Softmax,
}

impl LayerSpec {
    fn param_len(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs, outputs),
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => (9 * in_channels * out_channels, out_channels),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv3x3 { in_channels, .. } => 9 * in_channels,
            _ => 0,
        }
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(format!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => match input {
                [h, w, c] if *c == in_channels => Ok(vec![*h, *w, out_channels]),
                _ => Err(format!("conv3x3 expects [h, w, {in_channels}], got {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Maxpool2x2 => match input {
                [h, w, c] if *h >= 2 && *w >= 2 => Ok(vec![h / 2, w / 2, *c]),
                _ => Err(format!("maxpool2x2 expects [h>=2, w>=2, l], got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => match input {
                [_] => Ok(input.to_vec()),
                _ => Err(format!("softmax expects a vector, got {input:?}")),
            },
        }
    }
}

/// A layer with its parameters. Dense weights are `[outputs][inputs]`;
/// conv weights are `[3][3][in_channels][out_channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let (wn, bn) = spec.param_len();
        if weights.len() != wn || bias.len() != bn {
            return Err(Error::InvalidNetwork(format!(
                "{spec:?} needs {wn} weights and {bn} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { spec, weights, bias })
    }

    pub fn parameterless(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }
}

/// Split view of a forward pass: the value of `Φ1(x)` at split `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub tensor: Tensor,
    pub split: usize,
    pub spatial: bool,
}

impl Activation {
    /// Number of addressable units at the given granularity.
    pub fn unit_count(&self, granularity: Granularity) -> Result<usize> {
        match granularity {
            Granularity::Scalar => Ok(self.tensor.len()),
            Granularity::Channel if self.spatial => Ok(self.tensor.shape()[2]),
            Granularity::Channel => Err(Error::Mode(
                "channel units need a spatial activation".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            epochs: 12,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredNetwork {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    split_candidates: Vec<usize>,
    seed: u64,
    // shapes[i] is the input shape of layer i; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkManifest {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    split_candidates: Vec<usize>,
    seed: u64,
    param_count: usize,
    param_file: String,
}

impl LayeredNetwork {
    /// Assembles a network from explicit layers.
    pub fn from_layers(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        split_candidates: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.spec == LayerSpec::Softmax && i + 1 != layers.len() {
                return Err(Error::InvalidNetwork(format!(
                    "softmax at layer {i} is not the final layer"
                )));
            }
        }
        if layers.last().map(|l| &l.spec) != Some(&LayerSpec::Softmax) {
            return Err(Error::InvalidNetwork("final layer must be softmax".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, l) in layers.iter().enumerate() {
            let (wn, bn) = l.spec.param_len();
            if l.weights.len() != wn || l.bias.len() != bn {
                return Err(Error::InvalidNetwork(format!("layer {i}: parameter length mismatch")));
            }
            let next = l
                .spec
                .output_shape(shapes.last().unwrap())
                .map_err(|m| Error::InvalidNetwork(format!("layer {i}: {m}")))?;
            shapes.push(next);
        }
        let mut split_candidates = split_candidates;
        split_candidates.sort_unstable();
        split_candidates.dedup();
        for &s in &split_candidates {
            if s == 0 || s >= layers.len() {
                return Err(Error::InvalidNetwork(format!(
                    "split candidate {s} is not strictly inside the {}-layer stack",
                    layers.len()
                )));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            split_candidates,
            seed,
            shapes,
        })
    }

    /// Builds a network from layer specs with seeded scaled-uniform fan-in init.
    pub fn initialized(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        split_candidates: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| init_layer(spec, &mut rng))
            .collect();
        Self::from_layers(input_shape, layers, split_candidates, seed)
    }

    /// conv3x3(8) → relu → maxpool → conv3x3(16) → relu → flatten → dense(32)
    /// → relu → dense(classes) → softmax, split after each relu.
    pub fn default_architecture(height: usize, width: usize, channels: usize, classes: usize, seed: u64) -> Result<Self> {
        let flat = (height / 2) * (width / 2) * 16;
        let specs = vec![
            LayerSpec::Conv3x3 { in_channels: channels, out_channels: 8 },
            LayerSpec::Relu,
            LayerSpec::Maxpool2x2,
            LayerSpec::Conv3x3 { in_channels: 8, out_channels: 16 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: flat, outputs: 32 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 32, outputs: classes },
            LayerSpec::Softmax,
        ];
        Self::initialized(vec![height, width, channels], specs, vec![2, 5, 8], seed)
    }

    /// Same architecture, freshly initialized from `seed`.
    pub fn reinitialized(&self, seed: u64) -> Self {
        let specs = self.layers.iter().map(|l| l.spec.clone()).collect();
        Self::initialized(self.input_shape.clone(), specs, self.split_candidates.clone(), seed)
            .expect("architecture already validated")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn split_candidates(&self) -> &[usize] {
        &self.split_candidates
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Shape of `Φ1(x)` at split `s`.
    pub fn activation_shape(&self, s: usize) -> Result<&[usize]> {
        self.check_split(s)?;
        Ok(&self.shapes[s])
    }

    fn check_split(&self, s: usize) -> Result<()> {
        if self.split_candidates.contains(&s) {
            Ok(())
        } else {
            Err(Error::SplitIndex {
                split: s,
                candidates: self.split_candidates.clone(),
            })
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::InputShape {
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_activation(&self, a: &Activation, s: usize) -> Result<()> {
        self.check_split(s)?;
        if a.split != s {
            return Err(Error::ActivationMismatch(format!(
                "activation taken at split {}, used at split {s}",
                a.split
            )));
        }
        if a.tensor.shape() != self.shapes[s].as_slice() {
            return Err(Error::ActivationMismatch(format!(
                "split {s} expects shape {:?}, got {:?}",
                self.shapes[s],
                a.tensor.shape()
            )));
        }
        Ok(())
    }

    // values[j] is the input of layer `from + j`; the last entry is the network output.
    fn run(&self, from: usize, to: usize, input: &[f64]) -> Vec<Vec<f64>> {
        let mut values = Vec::with_capacity(to - from + 1);
        values.push(input.to_vec());
        for i in from..to {
            let out = layer_forward(&self.layers[i], &self.shapes[i], values.last().unwrap());
            values.push(out);
        }
        values
    }

    fn run_to(&self, from: usize, to: usize, input: Vec<f64>) -> Vec<f64> {
        let mut v = input;
        for i in from..to {
            v = layer_forward(&self.layers[i], &self.shapes[i], &v);
        }
        v
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run_to(0, self.layers.len(), x.data().to_vec()))
    }

    /// Index of the most probable class; ties go to the smaller index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn forward_split(&self, x: &Tensor, s: usize) -> Result<Activation> {
        self.check_input(x)?;
        self.check_split(s)?;
        let data = self.run_to(0, s, x.data().to_vec());
        Ok(Activation {
            tensor: Tensor {
                shape: self.shapes[s].clone(),
                data,
            },
            split: s,
            spatial: self.shapes[s].len() == 3,
        })
    }

    pub fn forward_from(&self, a: &Activation, s: usize) -> Result<Vec<f64>> {
        self.check_activation(a, s)?;
        Ok(self.run_to(s, self.layers.len(), a.tensor.data().to_vec()))
    }

    /// Gradient of `log f_t(x)` with respect to `x`.
    pub fn input_gradient(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_class(t)?;
        let g = self.log_prob_gradient(0, x.data(), t);
        Ok(Tensor {
            shape: self.input_shape.clone(),
            data: g,
        })
    }

    /// Gradient of `log Φ2(a)_t` with respect to the activation `a` at split `s`.
    pub fn activation_gradient(&self, a: &Activation, s: usize, t: usize) -> Result<Tensor> {
        self.check_activation(a, s)?;
        self.check_class(t)?;
        let g = self.log_prob_gradient(s, a.tensor.data(), t);
        Ok(Tensor {
            shape: self.shapes[s].clone(),
            data: g,
        })
    }

    /// Backpropagates a gradient on the split-`s` activation of `x` down to `x`.
    pub fn backprop_to_input(&self, x: &Tensor, s: usize, grad_at_split: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_split(s)?;
        if grad_at_split.shape() != self.shapes[s].as_slice() {
            return Err(Error::ActivationMismatch("gradient shape does not match split".into()));
        }
        let values = self.run(0, s, x.data());
        let mut d = grad_at_split.data().to_vec();
        for i in (0..s).rev() {
            d = layer_backward(&self.layers[i], &self.shapes[i], &values[i], &values[i + 1], &d, None, true);
        }
        Ok(Tensor {
            shape: self.input_shape.clone(),
            data: d,
        })
    }

    fn check_class(&self, t: usize) -> Result<()> {
        if t >= self.num_classes() {
            return Err(Error::ActivationMismatch(format!(
                "class {t} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn log_prob_gradient(&self, from: usize, input: &[f64], t: usize) -> Vec<f64> {
        let n = self.layers.len();
        let values = self.run(from, n, input);
        let probs = values.last().unwrap();
        // d log p_t / d logits = e_t - p
        let mut d: Vec<f64> = probs.iter().map(|p| -p).collect();
        d[t] += 1.0;
        for i in (from..n - 1).rev() {
            let j = i - from;
            d = layer_backward(&self.layers[i], &self.shapes[i], &values[j], &values[j + 1], &d, None, true);
        }
        d
    }

    /// Flat parameter vector in layer order (weights then bias per layer).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn set_parameters(&mut self, params: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + wn]);
            off += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
    }

    /// Writes `network.json` and the little-endian f64 parameter blob `params.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = NetworkManifest {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
            split_candidates: self.split_candidates.clone(),
            seed: self.seed,
            param_count: self.param_count(),
            param_file: "params.bin".into(),
        };
        crate::io::write_atomic(&dir.join("network.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        crate::io::write_atomic(&dir.join("params.bin"), &crate::io::f64_to_le_bytes(&self.parameters()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: NetworkManifest = serde_json::from_slice(&fs::read(dir.join("network.json"))?)?;
        let blob_path = dir.join(&manifest.param_file);
        let params = crate::io::f64_from_le_bytes(&fs::read(&blob_path)?, &blob_path)?;
        let layers: Vec<Layer> = manifest
            .layers
            .into_iter()
            .map(Layer::parameterless_sized)
            .collect();
        let mut net = Self::from_layers(manifest.input_shape, layers, manifest.split_candidates, manifest.seed)?;
        if params.len() != net.param_count() || params.len() != manifest.param_count {
            return Err(Error::Artifact {
                path: blob_path.display().to_string(),
                message: format!("expected {} parameters, found {}", net.param_count(), params.len()),
            });
        }
        net.set_parameters(&params);
        Ok(net)
    }
}

impl Layer {
    fn parameterless_sized(spec: LayerSpec) -> Self {
        let (wn, bn) = spec.param_len();
        Self {
            spec,
            weights: vec![0.0; wn],
            bias: vec![0.0; bn],
        }
    }
}

fn init_layer(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Layer {
    let (wn, bn) = spec.param_len();
    let fan_in = spec.fan_in().max(1);
    let a = (6.0 / fan_in as f64).sqrt();
    let weights = (0..wn).map(|_| rng.random_range(-a..a)).collect();
    Layer {
        spec,
        weights,
        bias: vec![0.0; bn],
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn layer_forward(layer: &Layer, in_shape: &[usize], x: &[f64]) -> Vec<f64> {
    match layer.spec {
        LayerSpec::Dense { inputs, outputs } => {
            let mut out = layer.bias.clone();
            for (o, acc) in out.iter_mut().enumerate().take(outputs) {
                let row = &layer.weights[o * inputs..(o + 1) * inputs];
                *acc += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
            out
        }
        LayerSpec::Conv3x3 {
            in_channels: ci,
            out_channels: co,
        } => {
            let (h, w) = (in_shape[0], in_shape[1]);
            let mut out = vec![0.0; h * w * co];
            for y in 0..h {
                for xx in 0..w {
                    let o = &mut out[(y * w + xx) * co..(y * w + xx + 1) * co];
                    o.copy_from_slice(&layer.bias);
                    for dy in 0..3 {
                        let Some(yy) = (y + dy).checked_sub(1).filter(|v| *v < h) else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(xs) = (xx + dx).checked_sub(1).filter(|v| *v < w) else {
                                continue;
                            };
                            let inp = &x[(yy * w + xs) * ci..(yy * w + xs + 1) * ci];
                            let wbase = (dy * 3 + dx) * ci * co;
                            for (c, &v) in inp.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let wrow = &layer.weights[wbase + c * co..wbase + (c + 1) * co];
                                for (acc, wv) in o.iter_mut().zip(wrow) {
                                    *acc += v * wv;
                                }
                            }
                        }
                    }
                }
            }
            out
        }
        LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        LayerSpec::Maxpool2x2 => {
            let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
            let (h2, w2) = (h / 2, w / 2);
            let mut out = vec![0.0; h2 * w2 * c];
            for y in 0..h2 {
                for xx in 0..w2 {
                    for ch in 0..c {
                        let (_, m) = pool_argmax(x, w, c, y, xx, ch);
                        out[(y * w2 + xx) * c + ch] = m;
                    }
                }
            }
            out
        }
        LayerSpec::Flatten => x.to_vec(),
        LayerSpec::Softmax => softmax(x),
    }
}

// First maximum of the 2x2 window in row-major order.
fn pool_argmax(x: &[f64], w: usize, c: usize, y: usize, xx: usize, ch: usize) -> (usize, f64) {
    let mut best_idx = ((2 * y) * w + 2 * xx) * c + ch;
    let mut best = x[best_idx];
    for (a, b) in [(0, 1), (1, 0), (1, 1)] {
        let idx = ((2 * y + a) * w + 2 * xx + b) * c + ch;
        if x[idx] > best {
            best = x[idx];
            best_idx = idx;
        }
    }
    (best_idx, best)
}

struct ParamGrad<'a> {
    weights: &'a mut [f64],
    bias: &'a mut [f64],
}

/// Backward pass through one (non-softmax) layer. Accumulates parameter
/// gradients into `grads` when given; returns the input gradient when
/// `need_input` is set (otherwise an empty vector).
fn layer_backward(
    layer: &Layer,
    in_shape: &[usize],
    x: &[f64],
    _y: &[f64],
    dout: &[f64],
    grads: Option<ParamGrad<'_>>,
    need_input: bool,
) -> Vec<f64> {
    match layer.spec {
        LayerSpec::Dense { inputs, outputs } => {
            let mut din = if need_input { vec![0.0; inputs] } else { Vec::new() };
            let mut grads = grads;
            for o in 0..outputs {
                let g = dout[o];
                if g == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * inputs..(o + 1) * inputs];
                if need_input {
                    for (d, wv) in din.iter_mut().zip(row) {
                        *d += g * wv;
                    }
                }
                if let Some(pg) = grads.as_mut() {
                    for (dw, v) in pg.weights[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
                        *dw += g * v;
                    }
                    pg.bias[o] += g;
                }
            }
            din
        }
        LayerSpec::Conv3x3 {
            in_channels: ci,
            out_channels: co,
        } => {
            let (h, w) = (in_shape[0], in_shape[1]);
            let mut din = if need_input { vec![0.0; h * w * ci] } else { Vec::new() };
            let mut grads = grads;
            for y in 0..h {
                for xx in 0..w {
                    let d = &dout[(y * w + xx) * co..(y * w + xx + 1) * co];
                    if let Some(pg) = grads.as_mut() {
                        for (b, g) in pg.bias.iter_mut().zip(d) {
                            *b += g;
                        }
                    }
                    for dy in 0..3 {
                        let Some(yy) = (y + dy).checked_sub(1).filter(|v| *v < h) else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(xs) = (xx + dx).checked_sub(1).filter(|v| *v < w) else {
                                continue;
                            };
                            let ibase = (yy * w + xs) * ci;
                            let wbase = (dy * 3 + dx) * ci * co;
                            for c in 0..ci {
                                let wr = wbase + c * co..wbase + (c + 1) * co;
                                if need_input {
                                    let wrow = &layer.weights[wr.clone()];
                                    din[ibase + c] += wrow.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(pg) = grads.as_mut() {
                                    let v = x[ibase + c];
                                    if v != 0.0 {
                                        for (dw, g) in pg.weights[wr].iter_mut().zip(d) {
                                            *dw += v * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            din
        }
        LayerSpec::Relu => x
            .iter()
            .zip(dout)
            .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
            .collect(),
        LayerSpec::Maxpool2x2 => {
            let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
            let (h2, w2) = (h / 2, w / 2);
            let mut din = vec![0.0; h * w * c];
            for y in 0..h2 {
                for xx in 0..w2 {
                    for ch in 0..c {
                        let (idx, _) = pool_argmax(x, w, c, y, xx, ch);
                        din[idx] += dout[(y * w2 + xx) * c + ch];
                    }
                }
            }
            din
        }
        LayerSpec::Flatten => dout.to_vec(),
        LayerSpec::Softmax => unreachable!("softmax is handled at the loss"),
    }
}

/// Replaces the units of `base` listed in `units` with the values of `donor`.
///
/// This is the unit-level do-operation: scalar units address single positions of
/// the row-major activation, channel units address whole `h × w` planes.
pub fn splice(base: &Activation, donor: &Activation, units: &UnitSet) -> Result<Activation> {
    if base.split != donor.split || base.tensor.shape() != donor.tensor.shape() {
        return Err(Error::ActivationMismatch(format!(
            "base (split {}, {:?}) and donor (split {}, {:?}) differ",
            base.split,
            base.tensor.shape(),
            donor.split,
            donor.tensor.shape()
        )));
    }
    if units.split() != base.split {
        return Err(Error::ActivationMismatch(format!(
            "unit set belongs to split {}, activation to split {}",
            units.split(),
            base.split
        )));
    }
    let count = base.unit_count(units.granularity())?;
    if let Some(&bad) = units.indices().iter().find(|&&i| i >= count) {
        return Err(Error::UnitOutOfRange { index: bad, count });
    }
    let mut data = base.tensor.data().to_vec();
    let src = donor.tensor.data();
    match units.granularity() {
        Granularity::Scalar => {
            for &i in units.indices() {
                data[i] = src[i];
            }
        }
        Granularity::Channel => {
            let c = base.tensor.shape()[2];
            for pos in 0..data.len() / c {
                for &ch in units.indices() {
                    data[pos * c + ch] = src[pos * c + ch];
                }
            }
        }
    }
    Ok(Activation {
        tensor: Tensor {
            shape: base.tensor.shape().to_vec(),
            data,
        },
        split: base.split,
        spatial: base.spatial,
    })
}

/// Mini-batch gradient descent with momentum on mean cross-entropy.
///
/// Parameters are re-initialized from `cfg.seed` before the first epoch, so the
/// result depends only on the architecture, the data and the config.
pub fn train(net: &LayeredNetwork, inputs: &[Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<LayeredNetwork> {
    if inputs.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Empty(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::config("train.learning_rate", "must be > 0"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be >= 1"));
    }
    let d = net.num_classes();
    for (x, &y) in inputs.iter().zip(labels) {
        net.check_input(x)?;
        if y >= d {
            return Err(Error::config("labels", format!("class {y} out of range for {d} classes")));
        }
    }

    let mut net = net.reinitialized(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1f);
    let n_params = net.param_count();
    let mut velocity = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let n_layers = net.layers.len();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                let values = net.run(0, n_layers, inputs[i].data());
                let probs = values.last().unwrap();
                loss -= probs[labels[i]].max(f64::MIN_POSITIVE).ln();
                let mut dz: Vec<f64> = probs.clone();
                dz[labels[i]] -= 1.0;
                let mut off = n_params;
                for li in (0..n_layers - 1).rev() {
                    let layer = &net.layers[li];
                    let (wn, bn) = (layer.weights.len(), layer.bias.len());
                    off -= wn + bn;
                    let (wg, bg) = grad[off..off + wn + bn].split_at_mut(wn);
                    let pg = if wn + bn > 0 {
                        Some(ParamGrad { weights: wg, bias: bg })
                    } else {
                        None
                    };
                    dz = layer_backward(layer, &net.shapes[li], &values[li], &values[li + 1], &dz, pg, li > 0);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            if !(loss * scale).is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let mut params = net.parameters();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g * scale;
                *p += *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            net.set_parameters(&params);
        }
    }
    Ok(net)
}

/// Fraction of inputs whose predicted class equals the label.
pub fn accuracy(net: &LayeredNetwork, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut hits = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        if net.predict(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}
