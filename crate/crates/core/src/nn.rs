//! Multi-channel 2-D convolutional networks, written from scratch in f64.
//!
//! Inputs are patches of shape (W, H, D) with the D slices used as channels,
//! stored x-fastest, which is exactly a row-major `(channel, y, x)` tensor.
//! Convolutions are valid (no padding), stride 1; pooling is 2x2 stride 2
//! with floor semantics. The loss is mean softmax cross-entropy.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{expect_len, frame, unframe};
use crate::patchset::PatchSet;
use crate::{seed, Error, Result};

pub const NDXW_MAGIC: &[u8; 4] = b"NDXW";
pub const NDXW_VERSION: u32 = 1;
pub const FEATURE_UNITS: usize = 200;

/// Items per gradient chunk. Chunks are summed in index order, so the
/// result does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "cnn21")]
    Cnn21,
    #[serde(rename = "cnn47")]
    Cnn47,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn21 => "cnn21",
            Arch::Cnn47 => "cnn47",
        }
    }

    /// Patch shape (W, H, D).
    pub fn patch_shape(self) -> [usize; 3] {
        match self {
            Arch::Cnn21 => [21, 21, 5],
            Arch::Cnn47 => [47, 47, 5],
        }
    }

    pub fn layer_specs(self) -> Vec<LayerSpec> {
        use LayerSpec::*;
        match self {
            Arch::Cnn21 => vec![
                Conv { out: 32, k: 5 },
                Relu,
                MaxPool,
                Conv { out: 64, k: 3 },
                Relu,
                MaxPool,
                Dropout { rate: 0.25 },
                Flatten,
                Dense { out: FEATURE_UNITS },
                Relu,
                Dropout { rate: 0.5 },
                Dense { out: 2 },
            ],
            Arch::Cnn47 => vec![
                Conv { out: 32, k: 5 },
                Relu,
                MaxPool,
                Conv { out: 64, k: 5 },
                Relu,
                MaxPool,
                Conv { out: 128, k: 3 },
                Relu,
                Dropout { rate: 0.25 },
                Flatten,
                Dense { out: FEATURE_UNITS },
                Relu,
                Dropout { rate: 0.5 },
                Dense { out: 2 },
            ],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn21" => Ok(Arch::Cnn21),
            "cnn47" => Ok(Arch::Cnn47),
            _ => Err(Error::UnknownArchitecture(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out: usize, k: usize },
    Relu,
    MaxPool,
    Dropout { rate: f64 },
    Flatten,
    Dense { out: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// weight `(cout, cin, k, k)`, bias `(cout)`.
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool,
    Dropout { rate: f64 },
    Flatten,
    /// weight `(out, in)`, bias `(out)`.
    Dense {
        input: usize,
        out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl Layer {
    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv { cout, k, .. } => LayerSpec::Conv { out: *cout, k: *k },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool => LayerSpec::MaxPool,
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense { out, .. } => LayerSpec::Dense { out: *out },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub arch: Option<Arch>,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub mode: Mode,
}

/// Parameter gradients, aligned with [`NetworkModel::params`].
pub type Grads = Vec<Vec<f64>>;

pub fn build_network(arch: Arch, seed: u64) -> NetworkModel {
    let [w, h, d] = arch.patch_shape();
    NetworkModel::from_specs(Some(arch), [d, h, w], &arch.layer_specs(), seed)
        .expect("built-in architectures are consistent")
}

/// `build_network` from a textual tag.
pub fn build_network_tag(tag: &str, seed: u64) -> Result<NetworkModel> {
    Ok(build_network(tag.parse()?, seed))
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Shape after each layer, as (c, h, w); dense outputs are (n, 1, 1).
fn propagate_shape(spec: &LayerSpec, s: [usize; 3]) -> Result<[usize; 3]> {
    Ok(match *spec {
        LayerSpec::Conv { out, k } => {
            if s[1] < k || s[2] < k {
                return Err(Error::ShapeMismatch(format!("{k}x{k} kernel on {s:?}")));
            }
            [out, s[1] - k + 1, s[2] - k + 1]
        }
        LayerSpec::MaxPool => {
            if s[1] < 2 || s[2] < 2 {
                return Err(Error::ShapeMismatch(format!("2x2 pool on {s:?}")));
            }
            [s[0], s[1] / 2, s[2] / 2]
        }
        LayerSpec::Flatten => [s[0] * s[1] * s[2], 1, 1],
        LayerSpec::Dense { out } => [out, 1, 1],
        LayerSpec::Relu | LayerSpec::Dropout { .. } => s,
    })
}

impl NetworkModel {
    /// Builds a network from layer specs with He-uniform weights and zero biases.
    pub fn from_specs(
        arch: Option<Arch>,
        input_shape: [usize; 3],
        specs: &[LayerSpec],
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seed::named_rng(seed, seed::INIT);
        let mut shape = input_shape;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let next = propagate_shape(spec, shape)?;
            layers.push(match *spec {
                LayerSpec::Conv { out, k } => {
                    let cin = shape[0];
                    Layer::Conv {
                        cin,
                        cout: out,
                        k,
                        weight: he_uniform(&mut rng, cin * k * k, out * cin * k * k),
                        bias: vec![0.0; out],
                    }
                }
                LayerSpec::Dense { out } => {
                    if shape[1] != 1 || shape[2] != 1 {
                        return Err(Error::ShapeMismatch(
                            "dense layer needs a flattened input".into(),
                        ));
                    }
                    Layer::Dense {
                        input: shape[0],
                        out,
                        weight: he_uniform(&mut rng, shape[0], out * shape[0]),
                        bias: vec![0.0; out],
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool => Layer::MaxPool,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::InvalidInput(format!("dropout rate {rate}")));
                    }
                    Layer::Dropout { rate }
                }
                LayerSpec::Flatten => Layer::Flatten,
            });
            shape = next;
        }
        if shape != [2, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "network must end in 2 logits, ends in {shape:?}"
            )));
        }
        Ok(NetworkModel {
            arch,
            input_shape,
            layers,
            mode: Mode::Train,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            if let Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } = l {
                v.push(weight);
                v.push(bias);
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } = l {
                v.push(weight);
                v.push(bias);
            }
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Index of the final dense layer; its input is the feature tap.
    fn last_dense(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
            .expect("network ends in a dense layer")
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, network expects {:?}",
                x.len(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Per-item forward pass. Dropout is active only when a seed is given.
    pub fn forward_item(&self, x: &[f64], dropout_seed: Option<u64>) -> Result<ItemForward> {
        self.check_input(x)?;
        let mut rng = dropout_seed.map(seed::rng);
        let mut act = Act {
            shape: self.input_shape,
            data: x.to_vec(),
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        let tap = self.last_dense();
        let mut features = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if li == tap {
                features = act.data.clone();
            }
            let (next, cache) = layer_forward(layer, act, rng.as_mut());
            caches.push(cache);
            act = next;
        }
        let logits = [act.data[0], act.data[1]];
        Ok(ItemForward {
            probs: softmax2(logits),
            logits,
            features,
            caches,
        })
    }

    /// Forward pass over a batch. In train mode dropout masks are drawn
    /// from `dropout_seed ^ item_index`; in eval mode dropout is identity.
    pub fn forward(&self, batch: &[&[f64]], dropout_seed: u64) -> Result<Vec<ItemForward>> {
        batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let s = (self.mode == Mode::Train).then_some(dropout_seed ^ i as u64);
                self.forward_item(x, s)
            })
            .collect()
    }

    /// Mean cross-entropy and its exact gradient with respect to every
    /// parameter. Dropout is active when `dropout_seed` is given, with
    /// per-item masks from `seed ^ item_index`.
    pub fn gradients(
        &self,
        batch: &[&[f64]],
        labels: &[u8],
        dropout_seed: Option<u64>,
    ) -> Result<(Grads, f64)> {
        if batch.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: batch.len(),
                found: labels.len(),
            });
        }
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidInput(format!("label {l} not in {{0, 1}}")));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let n = batch.len() as f64;
        let zero = || -> Grads { self.params().iter().map(|p| vec![0.0; p.len()]).collect() };
        let chunks: Vec<(Grads, f64)> = (0..batch.len())
            .collect::<Vec<_>>()
            .par_chunks(GRAD_CHUNK)
            .map(|idx| {
                let mut g = zero();
                let mut loss = 0.0;
                for &i in idx {
                    let f = self
                        .forward_item(batch[i], dropout_seed.map(|s| s ^ i as u64))
                        .expect("input checked");
                    loss += cross_entropy(f.logits, labels[i]);
                    let mut d = f.probs.to_vec();
                    d[labels[i] as usize] -= 1.0;
                    d.iter_mut().for_each(|v| *v /= n);
                    self.backward_item(&f.caches, d, &mut g);
                }
                (g, loss)
            })
            .collect();
        let mut total = zero();
        let mut loss = 0.0;
        for (g, l) in chunks {
            for (t, c) in total.iter_mut().zip(g) {
                for (a, b) in t.iter_mut().zip(c) {
                    *a += b;
                }
            }
            loss += l;
        }
        Ok((total, loss / n))
    }

    /// Mean cross-entropy only.
    pub fn loss(&self, batch: &[&[f64]], labels: &[u8], dropout_seed: Option<u64>) -> Result<f64> {
        let mut total = 0.0;
        for (i, (x, &y)) in batch.iter().zip(labels).enumerate() {
            let f = self.forward_item(x, dropout_seed.map(|s| s ^ i as u64))?;
            total += cross_entropy(f.logits, y);
        }
        Ok(total / batch.len() as f64)
    }

    fn backward_item(&self, caches: &[Cache], dlogits: Vec<f64>, grads: &mut Grads) {
        // parameter slots, walking backwards
        let mut slot = grads.len();
        let mut grad = dlogits;
        let first_param_layer = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. }));
        for (li, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_input = first_param_layer.is_some_and(|f| li > f);
            match (layer, cache) {
                (
                    Layer::Conv {
                        cin, cout, k, weight, ..
                    },
                    Cache::Conv { cols, in_shape },
                ) => {
                    slot -= 2;
                    let (gw, rest) = grads[slot..].split_at_mut(1);
                    grad = conv_backward(
                        *cin, *cout, *k, weight, cols, *in_shape, &grad, &mut gw[0], &mut rest[0],
                        need_input,
                    );
                }
                (
                    Layer::Dense {
                        input, out, weight, ..
                    },
                    Cache::Dense { x },
                ) => {
                    slot -= 2;
                    let (gw, rest) = grads[slot..].split_at_mut(1);
                    grad = dense_backward(*input, *out, weight, x, &grad, &mut gw[0], &mut rest[0], need_input);
                }
                (Layer::Relu, Cache::Relu { active }) => {
                    for (g, &a) in grad.iter_mut().zip(active) {
                        if !a {
                            *g = 0.0;
                        }
                    }
                }
                (Layer::MaxPool, Cache::Pool { argmax, in_len }) => {
                    let mut gi = vec![0.0; *in_len];
                    for (g, &a) in grad.iter().zip(argmax) {
                        gi[a] += g;
                    }
                    grad = gi;
                }
                (Layer::Dropout { .. }, Cache::Dropout { scale }) => {
                    if let Some(s) = scale {
                        for (g, m) in grad.iter_mut().zip(s) {
                            *g *= m;
                        }
                    }
                }
                (Layer::Flatten, Cache::None) => {}
                _ => unreachable!("cache matches layer"),
            }
            if li == 0 || !need_input && matches!(layer, Layer::Conv { .. } | Layer::Dense { .. }) {
                break;
            }
        }
    }

    /// Probability of the positive class per input, eval semantics.
    pub fn predict_inputs(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        inputs
            .par_iter()
            .map(|x| self.forward_item(x, None).map(|f| f.probs[1]))
            .collect()
    }

    /// Activations feeding the final 2-unit layer, eval semantics.
    pub fn features_inputs(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs
            .par_iter()
            .map(|x| self.forward_item(x, None).map(|f| f.features))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ItemForward {
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    /// Input to the final dense layer (post-ReLU penultimate activations).
    pub features: Vec<f64>,
    caches: Vec<Cache>,
}

struct Act {
    shape: [usize; 3],
    data: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Cache {
    Conv { cols: Vec<f64>, in_shape: [usize; 3] },
    Relu { active: Vec<bool> },
    Pool { argmax: Vec<usize>, in_len: usize },
    Dropout { scale: Option<Vec<f64>> },
    Dense { x: Vec<f64> },
    None,
}

fn layer_forward(layer: &Layer, act: Act, rng: Option<&mut ChaCha8Rng>) -> (Act, Cache) {
    match layer {
        Layer::Conv {
            cin,
            cout,
            k,
            weight,
            bias,
        } => {
            let [_, h, w] = act.shape;
            let (ho, wo) = (h - k + 1, w - k + 1);
            let cols = im2col(&act.data, *cin, h, w, *k);
            let kk = cin * k * k;
            let wm = ArrayView2::from_shape((*cout, kk), weight).unwrap();
            let cm = ArrayView2::from_shape((kk, ho * wo), &cols).unwrap();
            let mut out = wm.dot(&cm);
            for (mut row, b) in out.rows_mut().into_iter().zip(bias) {
                row += *b;
            }
            (
                Act {
                    shape: [*cout, ho, wo],
                    data: out.into_raw_vec_and_offset().0,
                },
                Cache::Conv {
                    cols,
                    in_shape: act.shape,
                },
            )
        }
        Layer::Relu => {
            let mut data = act.data;
            let active: Vec<bool> = data
                .iter_mut()
                .map(|v| {
                    if *v > 0.0 {
                        true
                    } else {
                        *v = 0.0;
                        false
                    }
                })
                .collect();
            (
                Act {
                    shape: act.shape,
                    data,
                },
                Cache::Relu { active },
            )
        }
        Layer::MaxPool => {
            let (data, argmax) = maxpool_forward(&act.data, act.shape);
            let [c, h, w] = act.shape;
            (
                Act {
                    shape: [c, h / 2, w / 2],
                    data,
                },
                Cache::Pool {
                    argmax,
                    in_len: c * h * w,
                },
            )
        }
        Layer::Dropout { rate } => match rng {
            Some(rng) if *rate > 0.0 => {
                let keep = 1.0 - rate;
                let scale: Vec<f64> = (0..act.data.len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let data = act.data.iter().zip(&scale).map(|(v, s)| v * s).collect();
                (
                    Act {
                        shape: act.shape,
                        data,
                    },
                    Cache::Dropout { scale: Some(scale) },
                )
            }
            _ => (act, Cache::Dropout { scale: None }),
        },
        Layer::Flatten => (
            Act {
                shape: [act.data.len(), 1, 1],
                data: act.data,
            },
            Cache::None,
        ),
        Layer::Dense {
            input,
            out,
            weight,
            bias,
        } => {
            let wm = ArrayView2::from_shape((*out, *input), weight).unwrap();
            let x = ndarray::ArrayView1::from(&act.data);
            let y = wm.dot(&x);
            let data: Vec<f64> = y.iter().zip(bias).map(|(a, b)| a + b).collect();
            (
                Act {
                    shape: [*out, 1, 1],
                    data,
                },
                Cache::Dense { x: act.data },
            )
        }
    }
}

/// Column matrix `(cin*k*k, ho*wo)` for a valid stride-1 convolution.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let p = ho * wo;
    let mut cols = vec![0.0; cin * k * k * p];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let src = c * h * w + (oy + ky) * w + kx;
                    cols[row + oy * wo..row + oy * wo + wo].copy_from_slice(&x[src..src + wo]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    cin: usize,
    cout: usize,
    k: usize,
    weight: &[f64],
    cols: &[f64],
    in_shape: [usize; 3],
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Vec<f64> {
    let [_, h, w] = in_shape;
    let (ho, wo) = (h - k + 1, w - k + 1);
    let p = ho * wo;
    let kk = cin * k * k;
    let d = ArrayView2::from_shape((cout, p), dout).unwrap();
    let c = ArrayView2::from_shape((kk, p), cols).unwrap();
    let mut gwm = ArrayViewMut2::from_shape((cout, kk), gw).unwrap();
    ndarray::linalg::general_mat_mul(1.0, &d, &c.t(), 1.0, &mut gwm);
    for (o, g) in gb.iter_mut().enumerate() {
        *g += dout[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    if !need_input {
        return Vec::new();
    }
    let wm = ArrayView2::from_shape((cout, kk), weight).unwrap();
    let dcols = wm.t().dot(&d);
    let dcols = dcols.as_standard_layout();
    let dc = dcols.as_slice().unwrap();
    let mut dx = vec![0.0; cin * h * w];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let dst = ci * h * w + (oy + ky) * w + kx;
                    for (a, b) in dx[dst..dst + wo].iter_mut().zip(&dc[row + oy * wo..row + oy * wo + wo]) {
                        *a += b;
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    input: usize,
    out: usize,
    weight: &[f64],
    x: &[f64],
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Vec<f64> {
    for o in 0..out {
        let g = dout[o];
        gb[o] += g;
        if g != 0.0 {
            for (a, b) in gw[o * input..(o + 1) * input].iter_mut().zip(x) {
                *a += g * b;
            }
        }
    }
    if !need_input {
        return Vec::new();
    }
    let mut dx = vec![0.0; input];
    for o in 0..out {
        let g = dout[o];
        if g != 0.0 {
            for (a, b) in dx.iter_mut().zip(&weight[o * input..(o + 1) * input]) {
                *a += g * b;
            }
        }
    }
    dx
}

/// 2x2 stride-2 max pooling; the first maximum in scan order wins ties.
pub(crate) fn maxpool_forward(x: &[f64], shape: [usize; 3]) -> (Vec<f64>, Vec<usize>) {
    let [c, h, w] = shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ci * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub fn cross_entropy(z: [f64; 2], label: u8) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[label as usize]
}

/// In-plane transform applied identically to every slice of a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub shift_x: f64,
    pub shift_y: f64,
    pub rotation_deg: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        shift_x: 0.0,
        shift_y: 0.0,
        rotation_deg: 0.0,
        scale: 1.0,
    };

    /// Shift up to 30% of each in-plane extent, rotation in [0, 180]
    /// degrees, scale in [0.9, 1.1].
    pub fn sample(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let (mx, my) = (0.3 * width as f64, 0.3 * height as f64);
        AugmentParams {
            shift_x: rng.gen_range(-mx..=mx),
            shift_y: rng.gen_range(-my..=my),
            rotation_deg: rng.gen_range(0.0..=180.0),
            scale: rng.gen_range(0.9..=1.1),
        }
    }
}

/// Resamples each slice of a `(d, h, w)` patch under `params` with bilinear
/// interpolation; samples outside the patch read as 0.
pub fn apply_augment(x: &[f64], shape: [usize; 3], params: &AugmentParams) -> Vec<f64> {
    let [d, h, w] = shape;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let th = params.rotation_deg.to_radians();
    let (sin, cos) = th.sin_cos();
    let mut out = vec![0.0; x.len()];
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: q = c + R(-theta)(p - c - t) / s
            let px = ox as f64 - cx - params.shift_x;
            let py = oy as f64 - cy - params.shift_y;
            let qx = cx + (cos * px + sin * py) / params.scale;
            let qy = cy + (-sin * px + cos * py) / params.scale;
            let (x0, y0) = (qx.floor(), qy.floor());
            let (fx, fy) = (qx - x0, qy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for s in 0..d {
                let mut v = 0.0;
                for &(tx, ty, wt) in &taps {
                    if wt != 0.0 && tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                        v += wt * x[s * h * w + ty as usize * w + tx as usize];
                    }
                }
                out[s * h * w + oy * w + ox] = v;
            }
        }
    }
    out
}

pub fn augment(x: &[f64], shape: [usize; 3], rng: &mut impl Rng) -> Vec<f64> {
    let p = AugmentParams::sample(shape[2], shape[1], rng);
    apply_augment(x, shape, &p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub augment: bool,
    /// Number of best-by-held-out-loss snapshots retained.
    pub keep_best: usize,
    pub heldout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
            augment: true,
            keep_best: 3,
            heldout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidInput("heldout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub heldout_loss: f64,
    pub model: NetworkModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSet {
    pub final_model: NetworkModel,
    pub final_epoch: usize,
    pub final_heldout_loss: f64,
    /// Sorted by held-out loss ascending (most recent first).
    pub best: Vec<Snapshot>,
}

impl CheckpointSet {
    /// Snapshots in the order they were taken (losses strictly decreasing).
    pub fn chronological(&self) -> Vec<&Snapshot> {
        let mut v: Vec<&Snapshot> = self.best.iter().collect();
        v.sort_by_key(|s| s.epoch);
        v
    }

    /// The retained model with the lowest internal held-out loss.
    pub fn selected(&self) -> &NetworkModel {
        match self.best.first() {
            Some(s) if s.heldout_loss <= self.final_heldout_loss => &s.model,
            _ => &self.final_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: CheckpointSet,
    pub log: Vec<EpochLog>,
}

/// Patch values as network input (channel-major, x-fastest).
pub fn patch_inputs(set: &PatchSet) -> Vec<Vec<f64>> {
    set.patches
        .iter()
        .map(|p| p.values.iter().map(|&v| v as f64).collect())
        .collect()
}

fn check_patch_shape(model: &NetworkModel, set: &PatchSet) -> Result<()> {
    let [w, h, d] = set.shape();
    if !set.is_empty() && [d, h, w] != model.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "patches are {w}x{h}x{d}, network expects {:?}",
            model.input_shape
        )));
    }
    Ok(())
}

pub fn train(model: NetworkModel, set: &PatchSet, config: &TrainConfig) -> Result<TrainOutcome> {
    check_patch_shape(&model, set)?;
    let labels: Vec<u8> = set
        .patches
        .iter()
        .map(|p| match p.label {
            0 | 1 => Ok(p.label as u8),
            l => Err(Error::InvalidInput(format!("label {l} is not binary"))),
        })
        .collect::<Result<_>>()?;
    train_inputs(model, &patch_inputs(set), &labels, config)
}

/// Minibatch SGD with momentum on an internal random train/held-out split.
pub fn train_inputs(
    mut model: NetworkModel,
    inputs: &[Vec<f64>],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: inputs.len(),
            found: labels.len(),
        });
    }
    if inputs.len() < 2 || !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::SingleClassTrainingSet);
    }
    model.set_mode(Mode::Train);
    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::named_rng(config.seed, seed::SPLIT));
    let n_held = ((n as f64 * config.heldout_fraction).round() as usize).clamp(
        usize::from(config.heldout_fraction > 0.0),
        n - 1,
    );
    let (held, fit) = order.split_at(n_held);
    let mut fit = fit.to_vec();
    let held_x: Vec<&[f64]> = held.iter().map(|&i| inputs[i].as_slice()).collect();
    let held_y: Vec<u8> = held.iter().map(|&i| labels[i]).collect();

    let [c, h, w] = model.input_shape;
    let shuffle_seed = seed::sub_seed(config.seed, "shuffle");
    let aug_seed = seed::sub_seed(config.seed, seed::AUGMENT);
    let drop_seed = seed::sub_seed(config.seed, "dropout");
    let mut velocity: Grads = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut best: Vec<Snapshot> = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut log = Vec::with_capacity(config.epochs);
    let mut last_held = f64::NAN;

    for epoch in 0..config.epochs {
        fit.shuffle(&mut seed::rng(shuffle_seed ^ epoch as u64));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in fit.chunks(config.batch_size).enumerate() {
            let step = ((epoch as u64) << 32) | bi as u64;
            let xs: Vec<Vec<f64>> = if config.augment {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let mut rng = seed::rng(aug_seed ^ step.wrapping_mul(1_000_003) ^ j as u64);
                        augment(&inputs[i], [c, h, w], &mut rng)
                    })
                    .collect()
            } else {
                chunk.iter().map(|&i| inputs[i].clone()).collect()
            };
            let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            let ys: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let (g, loss) = model.gradients(&refs, &ys, Some(drop_seed ^ step.wrapping_mul(7919)))?;
            epoch_loss += loss * chunk.len() as f64;
            for ((p, v), gp) in model.params_mut().into_iter().zip(&mut velocity).zip(&g) {
                for ((w, vel), gr) in p.iter_mut().zip(v.iter_mut()).zip(gp) {
                    *vel = config.momentum * *vel - config.learning_rate * gr;
                    *w += *vel;
                }
            }
        }
        let train_loss = epoch_loss / fit.len() as f64;
        let (held_loss, held_acc) = if held_x.is_empty() {
            (train_loss, f64::NAN)
        } else {
            let mut loss = 0.0;
            let mut correct = 0;
            for (x, &y) in held_x.iter().zip(&held_y) {
                let f = model.forward_item(x, None)?;
                loss += cross_entropy(f.logits, y);
                if u8::from(f.probs[1] >= 0.5) == y {
                    correct += 1;
                }
            }
            (loss / held_x.len() as f64, correct as f64 / held_x.len() as f64)
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            heldout_loss: held_loss,
            heldout_acc: held_acc,
        });
        last_held = held_loss;
        if held_loss < best_loss && config.keep_best > 0 {
            best_loss = held_loss;
            let mut snap = model.clone();
            snap.set_mode(Mode::Eval);
            best.insert(
                0,
                Snapshot {
                    epoch,
                    heldout_loss: held_loss,
                    model: snap,
                },
            );
            best.truncate(config.keep_best);
        }
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        checkpoints: CheckpointSet {
            final_model: model,
            final_epoch: config.epochs - 1,
            final_heldout_loss: last_held,
            best,
        },
        log,
    })
}

/// Positive-class probability per patch.
pub fn predict_proba(model: &NetworkModel, set: &PatchSet) -> Result<Vec<f64>> {
    check_patch_shape(model, set)?;
    model.predict_inputs(&patch_inputs(set))
}

/// Penultimate-layer (200-unit) activations per patch.
pub fn extract_cnn_features(model: &NetworkModel, set: &PatchSet) -> Result<Vec<Vec<f64>>> {
    check_patch_shape(model, set)?;
    model.features_inputs(&patch_inputs(set))
}

#[derive(Debug, Serialize, Deserialize)]
struct NdxwHeader {
    arch: String,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    epoch: Option<usize>,
    #[serde(default)]
    heldout_loss: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    name: String,
    len: usize,
}

/// Weight file: NDXW framing, JSON layer manifest, f64 tensors in manifest order.
pub fn encode_weights(model: &NetworkModel, epoch: Option<usize>, heldout_loss: Option<f64>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(8 * model.param_count());
    for (li, l) in model.layers.iter().enumerate() {
        if let Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } = l {
            for (name, t) in [("weight", weight), ("bias", bias)] {
                tensors.push(TensorEntry {
                    layer: li,
                    name: name.into(),
                    len: t.len(),
                });
                crate::container::f64s_le(t.iter().copied(), &mut payload);
            }
        }
    }
    let header = NdxwHeader {
        arch: model.arch.map_or("custom", Arch::name).into(),
        input_shape: model.input_shape,
        layers: model.specs(),
        tensors,
        epoch,
        heldout_loss: heldout_loss.filter(|v| v.is_finite()),
    };
    Ok(frame(NDXW_MAGIC, NDXW_VERSION, &serde_json::to_vec(&header)?, &payload))
}

/// Returns the model (eval mode) plus the stored epoch and loss, if any.
pub fn decode_weights(bytes: &[u8]) -> Result<(NetworkModel, Option<usize>, Option<f64>)> {
    let (hjson, payload) = unframe(NDXW_MAGIC, NDXW_VERSION, bytes)?;
    let h: NdxwHeader = serde_json::from_slice(hjson)
        .map_err(|e| Error::TruncatedPayload(format!("header: {e}")))?;
    let arch = match h.arch.as_str() {
        "custom" => None,
        a => Some(a.parse()?),
    };
    let mut model = NetworkModel::from_specs(arch, h.input_shape, &h.layers, 0)?;
    let expected: usize = model.params().iter().map(|p| p.len()).sum();
    expect_len(payload, 8 * expected)?;
    let values = crate::container::read_f64s(payload);
    let mut offset = 0;
    let lens: Vec<usize> = h.tensors.iter().map(|t| t.len).collect();
    let params = model.params_mut();
    if lens.len() != params.len() {
        return Err(Error::InvalidInput("tensor manifest disagrees with layers".into()));
    }
    for (p, len) in params.into_iter().zip(lens) {
        if p.len() != len {
            return Err(Error::InvalidInput("tensor length disagrees with layer".into()));
        }
        p.copy_from_slice(&values[offset..offset + len]);
        offset += len;
    }
    model.set_mode(Mode::Eval);
    Ok((model, h.epoch, h.heldout_loss))
}

pub fn save_weights(model: &NetworkModel, path: &Path, epoch: Option<usize>, loss: Option<f64>) -> Result<()> {
    fs::write(path, encode_weights(model, epoch, loss)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<NetworkModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_weights(&bytes)?.0)
}

pub fn write_train_log<W: std::io::Write>(w: W, log: &[EpochLog]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for e in log {
        wr.serialize(e)?;
    }
    wr.flush().map_err(|e| Error::io("<train log>", e))?;
    Ok(())
}
