//! A small trainable CNN: convolution, batch norm, ReLU, average pooling,
//! flatten and a linear head, trained with plain SGD on softmax
//! cross-entropy. It exists so the drift pipeline can be exercised end to
//! end (train on source data, accumulate running estimates, trace BN
//! inputs) without an external framework.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bn::{bn_forward, ema_update, BatchStats, BnLayerState, DEFAULT_RETAIN_ALPHA};
use crate::drift::BnProbe;
use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm,
    Relu,
    AvgPool {
        kernel: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
}

impl LayerSpec {
    /// Conv(8,3x3)-BN-ReLU-Pool(2)-Conv(16,3x3)-BN-ReLU-Pool(2)-Flatten-Linear.
    pub fn default_architecture(class_count: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        vec![
            Conv2d {
                out_channels: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            BatchNorm,
            Relu,
            AvgPool { kernel: 2 },
            Conv2d {
                out_channels: 16,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            BatchNorm,
            Relu,
            AvgPool { kernel: 2 },
            Flatten,
            Linear {
                out_features: class_count,
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    in_f: usize,
    out_f: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(Conv),
    Bn(usize),
    Relu,
    AvgPool(usize),
    Flatten,
    Linear(Linear),
}

/// Named parameter tensor, as exposed for serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub layer: usize,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    bn_states: Vec<BnLayerState>,
    input_shape: [usize; 3],
    class_count: usize,
    rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Retain factor of the BN running-estimate updates.
    pub momentum_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum_alpha: DEFAULT_RETAIN_ALPHA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum_alpha) {
            return Err(invalid("bn retain factor must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub struct ForwardOutput {
    /// `batch x class_count`.
    pub logits: Matrix,
    /// Pre-normalization input of every BN layer, when tracing was requested.
    pub bn_inputs: Option<Vec<Tensor4>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Softmax probabilities, one row per sample.
    pub probabilities: Vec<Vec<f64>>,
}

/// Values the backward pass needs from one layer.
enum Cache {
    Conv(Tensor4),
    BnTrain { x_hat: Tensor4, inv_std: Vec<f64> },
    BnEval,
    Relu(Tensor4),
    AvgPool([usize; 4]),
    Flatten([usize; 4]),
    Linear(Tensor4),
}

struct Pass {
    output: Tensor4,
    caches: Vec<Cache>,
    bn_inputs: Vec<Tensor4>,
    batch_stats: Vec<BatchStats>,
}

fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl ToyModel {
    /// Builds a model with seeded fan-in scaled initialization, validating
    /// the shape chain from `input_shape = [C, H, W]` to the class logits.
    pub fn new(
        input_shape: [usize; 3],
        specs: Vec<LayerSpec>,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if class_count < 1 {
            return Err(invalid("class count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut c, mut h, mut w] = input_shape;
        if c * h * w == 0 {
            return Err(invalid("input shape must be non-empty"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut bn_states = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(invalid(format!("layer {i}: degenerate convolution")));
                    }
                    let (oh, ow) = match (
                        out_dim(h, kernel, stride, pad),
                        out_dim(w, kernel, stride, pad),
                    ) {
                        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                        _ => {
                            return Err(shape(format!(
                                "layer {i}: kernel larger than padded input"
                            )))
                        }
                    };
                    let fan_in = c * kernel * kernel;
                    let weight = he_init(&mut rng, out_channels * fan_in, fan_in);
                    let conv = Conv {
                        in_ch: c,
                        out_ch: out_channels,
                        k: kernel,
                        stride,
                        pad,
                        weight,
                        bias: vec![0.0; out_channels],
                    };
                    c = out_channels;
                    h = oh;
                    w = ow;
                    Layer::Conv(conv)
                }
                LayerSpec::BatchNorm => {
                    bn_states.push(BnLayerState::identity(c));
                    Layer::Bn(bn_states.len() - 1)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::AvgPool { kernel } => {
                    if kernel == 0 || kernel > h || kernel > w {
                        return Err(shape(format!(
                            "layer {i}: pool kernel {kernel} does not fit {h}x{w}"
                        )));
                    }
                    h /= kernel;
                    w /= kernel;
                    Layer::AvgPool(kernel)
                }
                LayerSpec::Flatten => {
                    c *= h * w;
                    h = 1;
                    w = 1;
                    Layer::Flatten
                }
                LayerSpec::Linear { out_features } => {
                    if h != 1 || w != 1 {
                        return Err(shape(format!(
                            "layer {i}: linear layer needs a flattened input"
                        )));
                    }
                    if out_features == 0 {
                        return Err(invalid(format!("layer {i}: linear layer without outputs")));
                    }
                    let lin = Linear {
                        in_f: c,
                        out_f: out_features,
                        weight: he_init(&mut rng, out_features * c, c),
                        bias: vec![0.0; out_features],
                    };
                    c = out_features;
                    Layer::Linear(lin)
                }
            };
            layers.push(layer);
        }
        if c != class_count || h != 1 || w != 1 {
            return Err(shape(format!(
                "network ends in {c}x{h}x{w}, expected {class_count} logits"
            )));
        }
        Ok(Self {
            specs,
            layers,
            bn_states,
            input_shape,
            class_count,
            rng_seed: seed,
        })
    }

    pub fn default_for(input_shape: [usize; 3], class_count: usize, seed: u64) -> Result<Self> {
        Self::new(
            input_shape,
            LayerSpec::default_architecture(class_count),
            class_count,
            seed,
        )
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnLayerState] {
        &mut self.bn_states
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameter tensors in a fixed order: per layer, weight then bias
    /// (convolution, linear) or gamma then beta (batch norm).
    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::Bn(i) => {
                    out.push(&self.bn_states[*i].gamma);
                    out.push(&self.bn_states[*i].beta);
                }
                Layer::Linear(l) => {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
                _ => {}
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut bn: Vec<Option<&mut BnLayerState>> = self.bn_states.iter_mut().map(Some).collect();
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Bn(i) => {
                    let s = bn[*i].take().expect("bn layer referenced twice");
                    out.push(&mut s.gamma);
                    out.push(&mut s.beta);
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Named parameter tensors (BN running estimates excluded).
    pub fn parameter_tensors(&self) -> Vec<ParamTensor> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push(ParamTensor {
                        layer: li,
                        name: "weight",
                        shape: vec![c.out_ch, c.in_ch, c.k, c.k],
                        values: c.weight.clone(),
                    });
                    out.push(ParamTensor {
                        layer: li,
                        name: "bias",
                        shape: vec![c.out_ch],
                        values: c.bias.clone(),
                    });
                }
                Layer::Linear(l) => {
                    out.push(ParamTensor {
                        layer: li,
                        name: "weight",
                        shape: vec![l.out_f, l.in_f],
                        values: l.weight.clone(),
                    });
                    out.push(ParamTensor {
                        layer: li,
                        name: "bias",
                        shape: vec![l.out_f],
                        values: l.bias.clone(),
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites one weight or bias tensor of layer `layer`.
    pub fn set_parameter(&mut self, layer: usize, name: &str, values: &[f64]) -> Result<()> {
        let target = match (self.layers.get_mut(layer), name) {
            (Some(Layer::Conv(c)), "weight") => &mut c.weight,
            (Some(Layer::Conv(c)), "bias") => &mut c.bias,
            (Some(Layer::Linear(l)), "weight") => &mut l.weight,
            (Some(Layer::Linear(l)), "bias") => &mut l.bias,
            _ => return Err(invalid(format!("layer {layer} has no parameter {name:?}"))),
        };
        if target.len() != values.len() {
            return Err(shape(format!(
                "parameter {name} of layer {layer} has {} values, got {}",
                target.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter"));
        }
        target.copy_from_slice(values);
        Ok(())
    }

    /// Replaces the state of BN layer `index` (channel count must match).
    pub fn set_bn_state(&mut self, index: usize, state: BnLayerState) -> Result<()> {
        state.validate()?;
        let len = self.bn_states.len();
        let slot = self
            .bn_states
            .get_mut(index)
            .ok_or(Error::IndexOutOfRange { index, len })?;
        if slot.channels() != state.channels() {
            return Err(shape(format!(
                "bn layer {index} has {} channels, got {}",
                slot.channels(),
                state.channels()
            )));
        }
        *slot = state;
        Ok(())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != self.input_shape {
            return Err(shape(format!(
                "input {:?} does not match model input {:?}",
                [c, h, w],
                self.input_shape
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Empty("input batch"));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor4, mode: Mode, keep_cache: bool, trace: bool) -> Result<Pass> {
        self.check_input(x)?;
        if mode == Mode::Train && x.batch() < 2 {
            return Err(invalid("train-mode batch norm needs at least 2 samples"));
        }
        let mut cur = x.clone();
        let mut caches = Vec::new();
        let mut bn_inputs = Vec::new();
        let mut batch_stats = Vec::new();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    let y = conv_forward(c, &cur);
                    (y, Cache::Conv(cur))
                }
                Layer::Bn(i) => {
                    let s = &self.bn_states[*i];
                    if trace {
                        bn_inputs.push(cur.clone());
                    }
                    match mode {
                        Mode::Eval => (bn_forward(&cur, s)?, Cache::BnEval),
                        Mode::Train => {
                            let (y, x_hat, inv_std, stats) = bn_train_forward(&cur, s);
                            batch_stats.push(stats);
                            (y, Cache::BnTrain { x_hat, inv_std })
                        }
                    }
                }
                Layer::Relu => {
                    let y = cur.map(|v| v.max(0.0));
                    (y, Cache::Relu(cur))
                }
                Layer::AvgPool(k) => {
                    let s = cur.shape();
                    (avg_pool_forward(&cur, *k), Cache::AvgPool(s))
                }
                Layer::Flatten => {
                    let s = cur.shape();
                    let flat = Tensor4::from_raw([s[0], s[1] * s[2] * s[3], 1, 1], cur.into_data());
                    (flat, Cache::Flatten(s))
                }
                Layer::Linear(l) => {
                    let y = linear_forward(l, &cur);
                    (y, Cache::Linear(cur))
                }
            };
            if keep_cache {
                caches.push(cache);
            }
            cur = next;
        }
        Ok(Pass {
            output: cur,
            caches,
            bn_inputs,
            batch_stats,
        })
    }

    /// Inference-mode forward pass; BN layers use their running estimates.
    pub fn forward_eval(&self, x: &Tensor4, trace: bool) -> Result<ForwardOutput> {
        let pass = self.run(x, Mode::Eval, false, trace)?;
        Ok(ForwardOutput {
            logits: logits_matrix(&pass.output),
            bn_inputs: trace.then_some(pass.bn_inputs),
        })
    }

    /// Train- or eval-mode forward pass. In train mode BN layers normalize
    /// by batch statistics and fold them into their running estimates.
    pub fn forward(&mut self, x: &Tensor4, mode: Mode, trace: bool) -> Result<ForwardOutput> {
        let pass = self.run(x, mode, false, trace)?;
        if mode == Mode::Train {
            self.fold_batch_stats(&pass.batch_stats)?;
        }
        Ok(ForwardOutput {
            logits: logits_matrix(&pass.output),
            bn_inputs: trace.then_some(pass.bn_inputs),
        })
    }

    fn fold_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        for (s, b) in self.bn_states.iter_mut().zip(stats) {
            *s = ema_update(s, b)?;
        }
        Ok(())
    }

    /// Mean train-mode cross-entropy; does not touch the running estimates.
    pub fn train_loss(&self, x: &Tensor4, labels: &[usize]) -> Result<f64> {
        self.check_labels(x, labels)?;
        let pass = self.run(x, Mode::Train, false, false)?;
        Ok(softmax_cross_entropy(&pass.output, labels).0)
    }

    fn loss_and_relu_pattern(&self, x: &Tensor4, labels: &[usize]) -> Result<(f64, Vec<bool>)> {
        self.check_labels(x, labels)?;
        let pass = self.run(x, Mode::Train, true, false)?;
        let pattern = pass
            .caches
            .iter()
            .filter_map(|c| match c {
                Cache::Relu(t) => Some(t.data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect();
        Ok((softmax_cross_entropy(&pass.output, labels).0, pattern))
    }

    fn check_labels(&self, x: &Tensor4, labels: &[usize]) -> Result<()> {
        if labels.len() != x.batch() {
            return Err(shape(format!(
                "{} labels for {} samples",
                labels.len(),
                x.batch()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.class_count,
            });
        }
        Ok(())
    }

    /// Train-mode loss, gradients in [`Self::params`] order, and the batch
    /// statistics seen by each BN layer.
    fn loss_and_grads(
        &self,
        x: &Tensor4,
        labels: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<BatchStats>)> {
        self.check_labels(x, labels)?;
        let pass = self.run(x, Mode::Train, true, false)?;
        let (loss, mut grad) = softmax_cross_entropy(&pass.output, labels);

        // gradients are produced back to front and reversed at the end
        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        for (layer, cache) in self.layers.iter().zip(pass.caches).rev() {
            grad = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv(input)) => {
                    let (dx, dw, db) = conv_backward(c, &input, &grad);
                    grads_rev.push(db);
                    grads_rev.push(dw);
                    dx
                }
                (Layer::Bn(i), Cache::BnTrain { x_hat, inv_std }) => {
                    let (dx, dg, dbeta) =
                        bn_train_backward(&self.bn_states[*i], &x_hat, &inv_std, &grad);
                    grads_rev.push(dbeta);
                    grads_rev.push(dg);
                    dx
                }
                (Layer::Relu, Cache::Relu(input)) => {
                    let mut g = grad;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                (Layer::AvgPool(k), Cache::AvgPool(in_shape)) => {
                    avg_pool_backward(&grad, *k, in_shape)
                }
                (Layer::Flatten, Cache::Flatten(in_shape)) => {
                    Tensor4::from_raw(in_shape, grad.into_data())
                }
                (Layer::Linear(l), Cache::Linear(input)) => {
                    let (dx, dw, db) = linear_backward(l, &input, &grad);
                    grads_rev.push(db);
                    grads_rev.push(dw);
                    dx
                }
                _ => unreachable!("cache does not match layer"),
            };
        }
        grads_rev.reverse();
        Ok((loss, grads_rev, pass.batch_stats))
    }

    /// One SGD step on a batch; returns the batch loss.
    pub fn sgd_step(&mut self, x: &Tensor4, labels: &[usize], learning_rate: f64) -> Result<f64> {
        let (loss, grads, stats) = self.loss_and_grads(x, labels)?;
        for (p, g) in self.params_mut().into_iter().zip(&grads) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= learning_rate * gv;
            }
        }
        self.fold_batch_stats(&stats)?;
        Ok(loss)
    }
}

impl BnProbe for ToyModel {
    fn bn_states(&self) -> &[BnLayerState] {
        &self.bn_states
    }

    fn trace_bn_inputs(&self, x: &Tensor4) -> Result<Vec<Tensor4>> {
        Ok(self.run(x, Mode::Eval, false, true)?.bn_inputs)
    }
}

fn he_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn logits_matrix(out: &Tensor4) -> Matrix {
    Matrix::new(out.batch(), out.channels(), out.data().to_vec()).expect("logits layout")
}

fn conv_forward(c: &Conv, x: &Tensor4) -> Tensor4 {
    let [b, _, h, w] = x.shape();
    let oh = out_dim(h, c.k, c.stride, c.pad).unwrap();
    let ow = out_dim(w, c.k, c.stride, c.pad).unwrap();
    let mut y = Tensor4::zeros([b, c.out_ch, oh, ow]);
    let k = c.k;
    for n in 0..b {
        for o in 0..c.out_ch {
            let plane_out = y.channel_plane_mut(n, o);
            plane_out.iter_mut().for_each(|v| *v = c.bias[o]);
            for ic in 0..c.in_ch {
                let plane_in = x.channel_plane(n, ic);
                let wbase = (o * c.in_ch + ic) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = c.weight[wbase + ki * k + kj];
                        for i in 0..oh {
                            let r = (i * c.stride + ki) as isize - c.pad as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let row = &plane_in[r as usize * w..(r as usize + 1) * w];
                            let out_row = &mut plane_out[i * ow..(i + 1) * ow];
                            for (j, ov) in out_row.iter_mut().enumerate() {
                                let col = (j * c.stride + kj) as isize - c.pad as isize;
                                if col >= 0 && col < w as isize {
                                    *ov += wv * row[col as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(c: &Conv, x: &Tensor4, dy: &Tensor4) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let [b, _, h, w] = x.shape();
    let [_, _, oh, ow] = dy.shape();
    let k = c.k;
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = vec![0.0; c.weight.len()];
    let mut db = vec![0.0; c.out_ch];
    for n in 0..b {
        for o in 0..c.out_ch {
            let g = dy.channel_plane(n, o);
            db[o] += g.iter().sum::<f64>();
            for ic in 0..c.in_ch {
                let wbase = (o * c.in_ch + ic) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = c.weight[wbase + ki * k + kj];
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let r = (i * c.stride + ki) as isize - c.pad as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let r = r as usize;
                            for j in 0..ow {
                                let col = (j * c.stride + kj) as isize - c.pad as isize;
                                if col < 0 || col >= w as isize {
                                    continue;
                                }
                                let gv = g[i * ow + j];
                                let idx = r * w + col as usize;
                                acc += gv * x.channel_plane(n, ic)[idx];
                                dx.channel_plane_mut(n, ic)[idx] += gv * wv;
                            }
                        }
                        dw[wbase + ki * k + kj] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn bn_train_forward(x: &Tensor4, s: &BnLayerState) -> (Tensor4, Tensor4, Vec<f64>, BatchStats) {
    let stats = crate::bn::batch_stats(x).expect("non-empty batch");
    let inv_std: Vec<f64> = stats
        .var
        .iter()
        .map(|v| 1.0 / (v + s.eps).sqrt().max(1e-12))
        .collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for c in 0..x.channels() {
        for n in 0..x.batch() {
            let xh = x_hat.channel_plane_mut(n, c);
            for v in xh.iter_mut() {
                *v = (*v - stats.mean[c]) * inv_std[c];
            }
            let src: Vec<f64> = xh.to_vec();
            for (yv, xv) in y.channel_plane_mut(n, c).iter_mut().zip(src) {
                *yv = s.gamma[c] * xv + s.beta[c];
            }
        }
    }
    (y, x_hat, inv_std, stats)
}

fn bn_train_backward(
    s: &BnLayerState,
    x_hat: &Tensor4,
    inv_std: &[f64],
    dy: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let channels = x_hat.channels();
    let m = (x_hat.batch() * x_hat.plane()) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        for n in 0..x_hat.batch() {
            for (g, xh) in dy.channel_plane(n, c).iter().zip(x_hat.channel_plane(n, c)) {
                dgamma[c] += g * xh;
                dbeta[c] += g;
            }
        }
    }
    let mut dx = Tensor4::zeros(x_hat.shape());
    for c in 0..channels {
        // dx = gamma * inv_std / m * (m * dy - sum(dy) - x_hat * sum(dy * x_hat))
        let scale = s.gamma[c] * inv_std[c] / m;
        for n in 0..x_hat.batch() {
            let g = dy.channel_plane(n, c);
            let xh = x_hat.channel_plane(n, c);
            for ((d, gv), xv) in dx.channel_plane_mut(n, c).iter_mut().zip(g).zip(xh) {
                *d = scale * (m * gv - dbeta[c] - xv * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn avg_pool_forward(x: &Tensor4, k: usize) -> Tensor4 {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    for n in 0..b {
        for ch in 0..c {
            let src = x.channel_plane(n, ch);
            let dst = y.channel_plane_mut(n, ch);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            acc += src[(i * k + di) * w + j * k + dj];
                        }
                    }
                    dst[i * ow + j] = acc * norm;
                }
            }
        }
    }
    y
}

fn avg_pool_backward(dy: &Tensor4, k: usize, in_shape: [usize; 4]) -> Tensor4 {
    let [b, c, _, w] = in_shape;
    let [_, _, oh, ow] = dy.shape();
    let norm = 1.0 / (k * k) as f64;
    let mut dx = Tensor4::zeros(in_shape);
    for n in 0..b {
        for ch in 0..c {
            let g = dy.channel_plane(n, ch);
            let dst = dx.channel_plane_mut(n, ch);
            for i in 0..oh {
                for j in 0..ow {
                    let v = g[i * ow + j] * norm;
                    for di in 0..k {
                        for dj in 0..k {
                            dst[(i * k + di) * w + j * k + dj] = v;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn linear_forward(l: &Linear, x: &Tensor4) -> Tensor4 {
    let b = x.batch();
    let mut y = Tensor4::zeros([b, l.out_f, 1, 1]);
    for n in 0..b {
        let input = x.sample(n);
        for o in 0..l.out_f {
            let row = &l.weight[o * l.in_f..(o + 1) * l.in_f];
            let v: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + l.bias[o];
            y.data_mut()[n * l.out_f + o] = v;
        }
    }
    y
}

fn linear_backward(l: &Linear, x: &Tensor4, dy: &Tensor4) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let b = x.batch();
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = vec![0.0; l.weight.len()];
    let mut db = vec![0.0; l.out_f];
    for n in 0..b {
        let input = x.sample(n);
        let g = dy.sample(n);
        for o in 0..l.out_f {
            let gv = g[o];
            if gv == 0.0 {
                continue;
            }
            db[o] += gv;
            let row = &l.weight[o * l.in_f..(o + 1) * l.in_f];
            let dwr = &mut dw[o * l.in_f..(o + 1) * l.in_f];
            for (d, xv) in dwr.iter_mut().zip(input) {
                *d += gv * xv;
            }
            let start = n * l.in_f;
            for (d, wv) in dx.data_mut()[start..start + l.in_f].iter_mut().zip(row) {
                *d += gv * wv;
            }
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax of a `batch x classes` matrix.
pub fn softmax_rows(logits: &Matrix) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_cross_entropy(out: &Tensor4, labels: &[usize]) -> (f64, Tensor4) {
    let logits = logits_matrix(out);
    let probs = softmax_rows(&logits);
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(out.shape());
    let k = logits.cols();
    for (n, (p, &y)) in probs.iter().zip(labels).enumerate() {
        loss -= p[y].max(1e-300).ln();
        for (j, &pj) in p.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            grad.data_mut()[n * k + j] = (pj - target) / b;
        }
    }
    (loss / b, grad)
}

/// SGD on softmax cross-entropy over shuffled mini-batches. Every train
/// step updates the BN running estimates with retain factor
/// `cfg.momentum_alpha`. A trailing batch of one sample is dropped.
pub fn train(
    mut model: ToyModel,
    images: &Tensor4,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<ToyModel> {
    cfg.validate()?;
    if images.batch() == 0 {
        return Err(Error::Empty("training set"));
    }
    model.check_input(images)?;
    model.check_labels(images, labels)?;
    for s in &mut model.bn_states {
        s.retain_alpha = cfg.momentum_alpha;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.batch()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = images.select(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            model.sgd_step(&x, &y, cfg.learning_rate)?;
        }
    }
    Ok(model)
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode accuracy and softmax probabilities.
pub fn evaluate(model: &ToyModel, images: &Tensor4, labels: &[usize]) -> Result<Evaluation> {
    if images.batch() == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    model.check_labels(images, labels)?;
    let mut probabilities = Vec::with_capacity(images.batch());
    let idx: Vec<usize> = (0..images.batch()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = images.select(chunk)?;
        probabilities.extend(softmax_rows(&model.forward_eval(&x, false)?.logits));
    }
    let correct = probabilities
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        probabilities,
    })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Step used by [`finite_difference_check`].
pub const FD_STEP: f64 = 1e-4;

/// Magnitude below which gradient errors are measured absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest relative error among compared parameters.
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU, where the loss is not smooth.
    pub skipped_at_kinks: usize,
}

/// Compares backprop gradients with central differences of the train-mode
/// loss, parameter by parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, FD_FLOOR)`. A parameter is
/// skipped when either perturbation changes the sign pattern of any ReLU
/// input: the central difference then straddles a kink and measures nothing
/// useful about the derivative.
pub fn finite_difference_check(
    model: &ToyModel,
    x: &Tensor4,
    labels: &[usize],
) -> Result<GradientCheck> {
    let (_, grads, _) = model.loss_and_grads(x, labels)?;
    let (_, base) = model.loss_and_relu_pattern(x, labels)?;
    let mut probe = model.clone();
    let mut out = GradientCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for (ti, g) in grads.iter().enumerate() {
        for (pi, &analytic) in g.iter().enumerate() {
            let orig = probe.params()[ti][pi];
            probe.params_mut()[ti][pi] = orig + FD_STEP;
            let (up, up_pattern) = probe.loss_and_relu_pattern(x, labels)?;
            probe.params_mut()[ti][pi] = orig - FD_STEP;
            let (down, down_pattern) = probe.loss_and_relu_pattern(x, labels)?;
            probe.params_mut()[ti][pi] = orig;
            if up_pattern != base || down_pattern != base {
                out.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let denom = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            out.max_rel_error = out.max_rel_error.max((analytic - numeric).abs() / denom);
            out.checked += 1;
        }
    }
    Ok(out)
}
