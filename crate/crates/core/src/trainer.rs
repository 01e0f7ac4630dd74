//! Latent-weight training with straight-through gradients.
//!
//! Real-valued shadow weights live in `[−1, 1]` and are binarized with
//! `sign` (zero maps to `+1`) on every forward pass. Each hidden weight layer
//! is followed by batch norm and a sign activation; the output layer's
//! integer scores are multiplied by a learned positive scale before the
//! softmax, which leaves the predicted class unchanged. With a non-zero
//! training bit error rate, every batch reads each binarized weight matrix
//! through a fresh flip mask. Gradients pass through the flips unchanged.
//!
//! Arithmetic is `f64`: pre-activations are integers well below `2^53`, so
//! the eval-mode forward is exact and agrees with the exported [`BnnModel`].

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::bitcore::BitMatrix;
use crate::dataio::Dataset;
use crate::fault::{sample_flip_mask, Domain, FaultError, StreamId};
use crate::model::{
    argmax, batchnorm_sign, fold_batchnorm, Architecture, BatchNormParams, BnnModel, ConvLayer,
    FcLayer, Layer, LayerPlan, ModelError, Shape3, ThresholdLayer, KERNEL_TAPS,
};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("dataset shape {data} does not match model input {model}")]
    Shape { data: Shape3, model: Shape3 },
    #[error("dataset has {data} classes, model has {model}")]
    Classes { data: usize, model: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fault(#[from] FaultError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate halves after this many epochs.
    pub lr_halving: usize,
    /// Training-time bit error rate on binarized weights.
    pub ber_train: f64,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            lr_halving: 25,
            ber_train: 0.0,
            seed: 0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch number.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(1) / self.lr_halving.max(1);
        self.lr * 0.5f64.powi(halvings as i32)
    }

    fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.ber_train) {
            return bad("ber_train must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("batch-norm momentum must lie in [0, 1] and eps be positive");
        }
        Ok(())
    }
}

/// Adam moments for one parameter tensor.
#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LatentConv {
    pub input: Shape3,
    pub out_channels: usize,
    pub first: bool,
    /// `out × (c_in·9)`, tap order `(c_in, ky, kx)`.
    pub w: Array2<f64>,
    opt: Moments,
}

#[derive(Clone, Debug)]
pub struct LatentFc {
    pub inputs: usize,
    pub outputs: usize,
    pub first: bool,
    pub output: bool,
    pub w: Array2<f64>,
    opt: Moments,
}

#[derive(Clone, Debug)]
pub struct LatentNorm {
    pub shape: Shape3,
    pub first_layer: bool,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    opt_gamma: Moments,
    opt_beta: Moments,
}

#[derive(Clone, Debug)]
pub enum LatentLayer {
    Conv(LatentConv),
    Fc(LatentFc),
    Norm(LatentNorm),
    MaxPool2 { input: Shape3 },
}

/// Trainable mirror of a [`BnnModel`].
#[derive(Clone, Debug)]
pub struct LatentModel {
    arch: Architecture,
    input: Shape3,
    z: u32,
    layers: Vec<LatentLayer>,
    /// Output logits are `exp(log_alpha) · scores`.
    pub log_alpha: f64,
    opt_alpha: Moments,
    steps: i32,
    eps: f64,
}

/// Per-layer values kept from the forward pass for the backward pass.
enum Cache {
    Conv { cols: Array2<f64>, wb: Array2<f64> },
    Fc { x: Array2<f64>, wb: Array2<f64> },
    Norm { xhat: Array2<f64>, inv_std: Array1<f64>, y: Array2<f64> },
    Pool { argmax: Vec<usize>, in_len: usize },
    None,
}

/// Batch statistics to fold into the running averages after a step.
struct BatchStats {
    layer: usize,
    mean: Array1<f64>,
    var: Array1<f64>,
    count: usize,
}

struct Forward {
    scores: Array2<f64>,
    caches: Vec<Cache>,
    stats: Vec<BatchStats>,
    flipped: u64,
    exposed: u64,
}

/// Flip injection for one training batch.
#[derive(Clone, Copy, Debug)]
struct Injection {
    p: f64,
    seed: u64,
    epoch: u64,
    batch: u64,
}

/// Weight binarization with `sign(0) = +1`.
pub fn binarize(w: &Array2<f64>) -> Array2<f64> {
    w.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Straight-through window: gradient passes where `|v| ≤ 1`.
pub fn ste_window(v: f64) -> f64 {
    if v.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_xent(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[labels[i]];
        for (k, e) in exps.iter().enumerate() {
            grad[[i, k]] = (e / sum - (k == labels[i]) as u8 as f64) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// Batch-norm over `(batch, channel·positions)` using batch statistics.
/// Returns `(y, xhat, inv_std, mean, biased var)`.
#[allow(clippy::type_complexity)]
pub fn batchnorm_train(
    h: &Array2<f64>,
    channels: usize,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>, Array1<f64>) {
    let p = h.ncols() / channels;
    let m = (h.nrows() * p) as f64;
    let mut mean = Array1::zeros(channels);
    let mut var = Array1::zeros(channels);
    let mut inv_std = Array1::zeros(channels);
    let mut xhat = Array2::zeros(h.raw_dim());
    let mut y = Array2::zeros(h.raw_dim());
    for c in 0..channels {
        let block = h.slice(s![.., c * p..(c + 1) * p]);
        let mu = block.sum() / m;
        let v = block.fold(0.0, |a, &x| a + (x - mu) * (x - mu)) / m;
        let is = 1.0 / (v + eps).sqrt();
        mean[c] = mu;
        var[c] = v;
        inv_std[c] = is;
        let xh = block.mapv(|x| (x - mu) * is);
        y.slice_mut(s![.., c * p..(c + 1) * p])
            .assign(&xh.mapv(|v| gamma[c] * v + beta[c]));
        xhat.slice_mut(s![.., c * p..(c + 1) * p]).assign(&xh);
    }
    (y, xhat, inv_std, mean, var)
}

/// Exact batch-norm backward. Returns `(dh, dgamma, dbeta)`.
pub fn batchnorm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gamma: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let channels = gamma.len();
    let p = dy.ncols() / channels;
    let m = (dy.nrows() * p) as f64;
    let mut dh = Array2::zeros(dy.raw_dim());
    let mut dgamma = Array1::zeros(channels);
    let mut dbeta = Array1::zeros(channels);
    for c in 0..channels {
        let dyc = dy.slice(s![.., c * p..(c + 1) * p]);
        let xc = xhat.slice(s![.., c * p..(c + 1) * p]);
        let sb = dyc.sum();
        let sg = (&dyc * &xc).sum();
        dgamma[c] = sg;
        dbeta[c] = sb;
        let k = gamma[c] * inv_std[c] / m;
        let d = (&dyc * m - sb - &xc * sg) * k;
        dh.slice_mut(s![.., c * p..(c + 1) * p]).assign(&d);
    }
    (dh, dgamma, dbeta)
}

/// Rows `(sample, y, x)`, columns `(c_in, ky, kx)`; out-of-image taps are zero.
fn im2col(x: &Array2<f64>, shape: Shape3) -> Array2<f64> {
    let (c, h, w) = (shape.c, shape.h, shape.w);
    let hw = h * w;
    let mut cols = Array2::zeros((x.nrows() * hw, c * KERNEL_TAPS));
    for b in 0..x.nrows() {
        let xb = x.row(b);
        for y in 0..h {
            for xx in 0..w {
                let mut row = cols.row_mut(b * hw + y * w + xx);
                for ci in 0..c {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            row[ci * KERNEL_TAPS + ky * 3 + kx] =
                                xb[ci * hw + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, shape: Shape3, batch: usize) -> Array2<f64> {
    let (c, h, w) = (shape.c, shape.h, shape.w);
    let hw = h * w;
    let mut dx = Array2::zeros((batch, shape.len()));
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = dcols.row(b * hw + y * w + xx);
                for ci in 0..c {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[b, ci * hw + sy as usize * w + sx as usize]] +=
                                row[ci * KERNEL_TAPS + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(batch·positions, out)` to channel-major `(batch, out·positions)` and back.
fn to_channel_major(out: &Array2<f64>, batch: usize, hw: usize) -> Array2<f64> {
    let f = out.ncols();
    let mut h = Array2::zeros((batch, f * hw));
    for b in 0..batch {
        for p in 0..hw {
            for fi in 0..f {
                h[[b, fi * hw + p]] = out[[b * hw + p, fi]];
            }
        }
    }
    h
}

fn from_channel_major(h: &Array2<f64>, f: usize, hw: usize) -> Array2<f64> {
    let batch = h.nrows();
    let mut out = Array2::zeros((batch * hw, f));
    for b in 0..batch {
        for p in 0..hw {
            for fi in 0..f {
                out[[b * hw + p, fi]] = h[[b, fi * hw + p]];
            }
        }
    }
    out
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt().min(1.0);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..=limit))
}

/// Converts raw pixels to a `(batch, features)` matrix.
pub fn batch_matrix(data: &Dataset, indices: &[usize]) -> Array2<f64> {
    let n = data.shape().len();
    let mut x = Array2::zeros((indices.len(), n));
    for (r, &i) in indices.iter().enumerate() {
        for (dst, &p) in x.row_mut(r).iter_mut().zip(data.image(i)) {
            *dst = p as f64;
        }
    }
    x
}

impl LatentModel {
    pub fn new(arch: &Architecture, input: Shape3, z: u32, seed: u64) -> Result<Self, TrainError> {
        if !(1..=255).contains(&z) {
            return Err(ModelError::InvalidZ(z).into());
        }
        let plan = arch.plan(input)?;
        let mut rng = StreamId::derive(seed, Domain::Init, 0, 0, 0).rng();
        let mut layers = Vec::with_capacity(plan.len());
        let mut out_fan_in = 1;
        for p in plan {
            layers.push(match p {
                LayerPlan::Conv {
                    input,
                    out_channels,
                    first,
                } => {
                    let cols = input.c * KERNEL_TAPS;
                    LatentLayer::Conv(LatentConv {
                        input,
                        out_channels,
                        first,
                        w: glorot(out_channels, cols, cols, out_channels * KERNEL_TAPS, &mut rng),
                        opt: Moments::new(out_channels * cols),
                    })
                }
                LayerPlan::Fc {
                    inputs,
                    outputs,
                    first,
                    output,
                } => {
                    if output {
                        out_fan_in = inputs;
                    }
                    LatentLayer::Fc(LatentFc {
                        inputs,
                        outputs,
                        first,
                        output,
                        w: glorot(outputs, inputs, inputs, outputs, &mut rng),
                        opt: Moments::new(outputs * inputs),
                    })
                }
                LayerPlan::Threshold {
                    output,
                    first_layer,
                } => {
                    let c = output.c;
                    LatentLayer::Norm(LatentNorm {
                        shape: output,
                        first_layer,
                        gamma: Array1::ones(c),
                        beta: Array1::zeros(c),
                        running_mean: Array1::zeros(c),
                        running_var: Array1::ones(c),
                        opt_gamma: Moments::new(c),
                        opt_beta: Moments::new(c),
                    })
                }
                LayerPlan::MaxPool2 { input } => LatentLayer::MaxPool2 { input },
            });
        }
        Ok(Self {
            arch: arch.clone(),
            input,
            z,
            layers,
            // logits start with standard deviation about 1/sqrt(fan-in)
            log_alpha: -(out_fan_in as f64).ln(),
            opt_alpha: Moments::new(1),
            steps: 0,
            eps: TrainConfig::default().bn_eps,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn layers(&self) -> &[LatentLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LatentLayer] {
        &mut self.layers
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    fn forward(&self, x: Array2<f64>, train: bool, inject: Option<Injection>) -> Result<Forward, TrainError> {
        let batch = x.nrows();
        let mut act = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let (mut flipped, mut exposed) = (0u64, 0u64);
        let mut read = |layer: usize, w: &Array2<f64>| -> Result<Array2<f64>, TrainError> {
            let mut wb = binarize(w);
            if let Some(inj) = inject.filter(|inj| inj.p > 0.0) {
                let id = StreamId::derive(inj.seed, Domain::Training, inj.epoch, layer as u64, inj.batch);
                let mask = sample_flip_mask(wb.nrows(), wb.ncols(), inj.p, &mut id.rng())?;
                for r in 0..wb.nrows() {
                    for c in 0..wb.ncols() {
                        if mask.bits().get(r, c) {
                            wb[[r, c]] = -wb[[r, c]];
                        }
                    }
                }
                flipped += mask.count();
                exposed += (wb.nrows() * wb.ncols()) as u64;
            }
            Ok(wb)
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LatentLayer::Conv(c) => {
                    let wb = read(i, &c.w)?;
                    let cols = im2col(&act, c.input);
                    let out = cols.dot(&wb.t());
                    act = to_channel_major(&out, batch, c.input.positions());
                    caches.push(if train { Cache::Conv { cols, wb } } else { Cache::None });
                }
                LatentLayer::Fc(f) => {
                    let wb = read(i, &f.w)?;
                    let out = act.dot(&wb.t());
                    caches.push(if train { Cache::Fc { x: act, wb } } else { Cache::None });
                    act = out;
                }
                LatentLayer::Norm(n) => {
                    let channels = n.shape.c;
                    if train {
                        let (y, xhat, inv_std, mean, var) =
                            batchnorm_train(&act, channels, &n.gamma, &n.beta, self.eps);
                        stats.push(BatchStats {
                            layer: i,
                            mean,
                            var,
                            count: batch * n.shape.positions(),
                        });
                        act = y.mapv(|v| if v > 0.0 { 1.0 } else { -1.0 });
                        caches.push(Cache::Norm { xhat, inv_std, y });
                    } else {
                        let p = n.shape.positions();
                        act = Array2::from_shape_fn(act.raw_dim(), |(b, j)| {
                            let c = j / p;
                            batchnorm_sign(
                                act[[b, j]],
                                n.gamma[c],
                                n.beta[c],
                                n.running_mean[c],
                                n.running_var[c],
                                self.eps,
                            ) as f64
                        });
                        caches.push(Cache::None);
                    }
                }
                LatentLayer::MaxPool2 { input } => {
                    let (oh, ow) = (input.h / 2, input.w / 2);
                    let mut out = Array2::zeros((batch, input.c * oh * ow));
                    let mut arg = Vec::with_capacity(batch * input.c * oh * ow);
                    for b in 0..batch {
                        for c in 0..input.c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let base = c * input.h * input.w;
                                    let mut best = base + 2 * y * input.w + 2 * xx;
                                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                        let j = base + (2 * y + dy) * input.w + 2 * xx + dx;
                                        if act[[b, j]] > act[[b, best]] {
                                            best = j;
                                        }
                                    }
                                    out[[b, c * oh * ow + y * ow + xx]] = act[[b, best]];
                                    arg.push(best);
                                }
                            }
                        }
                    }
                    caches.push(if train {
                        Cache::Pool {
                            argmax: arg,
                            in_len: input.len(),
                        }
                    } else {
                        Cache::None
                    });
                    act = out;
                }
            }
        }
        Ok(Forward {
            scores: act,
            caches,
            stats,
            flipped,
            exposed,
        })
    }

    /// Integer class scores of the eval-mode network: stored signs, running
    /// batch-norm statistics, no flips.
    pub fn eval_scores(&self, x: &[u8]) -> Result<Vec<i64>, TrainError> {
        if x.len() != self.input.len() {
            return Err(ModelError::InputShape {
                expected: self.input.len(),
                got: x.len(),
            }
            .into());
        }
        let xm = Array2::from_shape_fn((1, x.len()), |(_, j)| x[j] as f64);
        let f = self.forward(xm, false, None)?;
        Ok(f.scores.row(0).iter().map(|&v| v as i64).collect())
    }

    pub fn eval_predict(&self, x: &[u8]) -> Result<usize, TrainError> {
        Ok(argmax(&self.eval_scores(x)?))
    }

    /// Eval-mode accuracy, evaluated in chunks.
    pub fn eval_accuracy(&self, data: &Dataset) -> Result<f64, TrainError> {
        check_data(self, data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut hits = 0usize;
        for chunk in idx.chunks(512) {
            let f = self.forward(batch_matrix(data, chunk), false, None)?;
            for (r, &i) in chunk.iter().enumerate() {
                let row: Vec<i64> = f.scores.row(r).iter().map(|&v| v as i64).collect();
                hits += (argmax(&row) == data.label(i)) as usize;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Loss and accuracy of one training-mode forward pass, without updating anything.
    pub fn batch_loss(&self, x: Array2<f64>, labels: &[usize]) -> Result<(f64, f64), TrainError> {
        let f = self.forward(x, true, None)?;
        let logits = &f.scores * self.log_alpha.exp();
        let (loss, _) = softmax_xent(&logits, labels);
        Ok((loss, batch_hits(&f.scores, labels) as f64 / labels.len() as f64))
    }

    /// One optimizer step on one batch. Returns `(loss, hits, flipped, exposed)`.
    fn step(
        &mut self,
        x: Array2<f64>,
        labels: &[usize],
        lr: f64,
        momentum: f64,
        inject: Option<Injection>,
    ) -> Result<(f64, usize, u64, u64), TrainError> {
        let fw = self.forward(x, true, inject)?;
        let alpha = self.log_alpha.exp();
        let logits = &fw.scores * alpha;
        let (loss, dlogits) = softmax_xent(&logits, labels);
        let hits = batch_hits(&fw.scores, labels);
        if !loss.is_finite() {
            return Ok((loss, hits, fw.flipped, fw.exposed));
        }
        let dlog_alpha = (&dlogits * &fw.scores).sum() * alpha;
        let grads = self.backward(&fw.caches, &dlogits * alpha);

        self.steps += 1;
        let t = self.steps;
        for (layer, grad) in self.layers.iter_mut().zip(grads) {
            match (layer, grad) {
                (LatentLayer::Conv(LatentConv { w, opt, .. }), Grad::Weights(g))
                | (LatentLayer::Fc(LatentFc { w, opt, .. }), Grad::Weights(g)) => {
                    let ws = w.as_slice_mut().expect("standard layout");
                    opt.step(ws, g.as_slice().expect("standard layout"), lr, t);
                    ws.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                }
                (LatentLayer::Norm(n), Grad::Norm { gamma, beta }) => {
                    n.opt_gamma.step(n.gamma.as_slice_mut().unwrap(), gamma.as_slice().unwrap(), lr, t);
                    n.opt_beta.step(n.beta.as_slice_mut().unwrap(), beta.as_slice().unwrap(), lr, t);
                }
                _ => {}
            }
        }
        let mut la = [self.log_alpha];
        self.opt_alpha.step(&mut la, &[dlog_alpha], lr, t);
        self.log_alpha = la[0];

        for st in fw.stats {
            if let LatentLayer::Norm(n) = &mut self.layers[st.layer] {
                let unbiased = if st.count > 1 {
                    st.count as f64 / (st.count - 1) as f64
                } else {
                    1.0
                };
                n.running_mean = &n.running_mean * (1.0 - momentum) + &st.mean * momentum;
                n.running_var = &n.running_var * (1.0 - momentum) + &st.var * (momentum * unbiased);
            }
        }
        Ok((loss, hits, fw.flipped, fw.exposed))
    }

    /// Gradients for every layer given the gradient on the output scores.
    fn backward(&self, caches: &[Cache], dscores: Array2<f64>) -> Vec<Grad> {
        let mut grads: Vec<Grad> = (0..self.layers.len()).map(|_| Grad::None).collect();
        let mut up = dscores;
        for i in (0..self.layers.len()).rev() {
            match (&self.layers[i], &caches[i]) {
                (LatentLayer::Fc(f), Cache::Fc { x, wb }) => {
                    let dwb = up.t().dot(x);
                    grads[i] = Grad::Weights(ste_weights(&f.w, dwb));
                    if f.first {
                        break;
                    }
                    up = up.dot(wb);
                }
                (LatentLayer::Conv(c), Cache::Conv { cols, wb }) => {
                    let hw = c.input.positions();
                    let dout = from_channel_major(&up, c.out_channels, hw);
                    let dwb = dout.t().dot(cols);
                    grads[i] = Grad::Weights(ste_weights(&c.w, dwb));
                    if c.first {
                        break;
                    }
                    up = col2im(&dout.dot(wb), c.input, up.nrows());
                }
                (LatentLayer::Norm(n), Cache::Norm { xhat, inv_std, y }) => {
                    let dy = &up * &y.mapv(ste_window);
                    let (dh, gamma, beta) = batchnorm_backward(&dy, xhat, inv_std, &n.gamma);
                    grads[i] = Grad::Norm { gamma, beta };
                    up = dh;
                }
                (LatentLayer::MaxPool2 { .. }, Cache::Pool { argmax, in_len }) => {
                    let mut d = Array2::zeros((up.nrows(), *in_len));
                    let per = up.ncols();
                    for b in 0..up.nrows() {
                        for j in 0..per {
                            d[[b, argmax[b * per + j]]] += up[[b, j]];
                        }
                    }
                    up = d;
                }
                _ => unreachable!("cache matches layer"),
            }
        }
        grads
    }

    /// Stored signs and folded thresholds as an inference model.
    pub fn export(&self) -> Result<BnnModel, TrainError> {
        let pack = |w: &Array2<f64>| BitMatrix::from_fn(w.nrows(), w.ncols(), |r, c| w[[r, c]] >= 0.0);
        let layers = self
            .layers
            .iter()
            .map(|l| -> Result<Layer, TrainError> {
                Ok(match l {
                    LatentLayer::Conv(c) => Layer::Conv(ConvLayer {
                        input: c.input,
                        out_channels: c.out_channels,
                        first: c.first,
                        weights: pack(&c.w),
                    }),
                    LatentLayer::Fc(f) => Layer::Fc(FcLayer {
                        inputs: f.inputs,
                        outputs: f.outputs,
                        first: f.first,
                        output: f.output,
                        weights: pack(&f.w),
                    }),
                    LatentLayer::Norm(n) => {
                        let folded = fold_batchnorm(&n.bn_params(self.eps))?;
                        Layer::Threshold(ThresholdLayer {
                            shape: n.shape,
                            first_layer: n.first_layer,
                            thresholds: folded.iter().map(|&(s, _)| s as i32).collect(),
                            directions: folded.iter().map(|&(_, d)| d).collect(),
                        })
                    }
                    LatentLayer::MaxPool2 { input } => Layer::MaxPool2 { input: *input },
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BnnModel::new(self.arch.clone(), self.input, self.z, layers)?)
    }
}

impl LatentNorm {
    pub fn bn_params(&self, eps: f64) -> BatchNormParams {
        BatchNormParams {
            gamma: self.gamma.to_vec(),
            beta: self.beta.to_vec(),
            mean: self.running_mean.to_vec(),
            var: self.running_var.to_vec(),
            eps,
        }
    }
}

enum Grad {
    Weights(Array2<f64>),
    Norm { gamma: Array1<f64>, beta: Array1<f64> },
    None,
}

fn ste_weights(w: &Array2<f64>, mut dwb: Array2<f64>) -> Array2<f64> {
    dwb.zip_mut_with(w, |g, &v| *g *= ste_window(v));
    dwb
}

fn batch_hits(scores: &Array2<f64>, labels: &[usize]) -> usize {
    scores
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let ints: Vec<i64> = row.iter().map(|&v| v as i64).collect();
            argmax(&ints) == y
        })
        .count()
}

fn check_data(model: &LatentModel, data: &Dataset) -> Result<(), TrainError> {
    if data.shape() != model.input {
        return Err(TrainError::Shape {
            data: data.shape(),
            model: model.input,
        });
    }
    if data.classes() > model.arch.classes {
        return Err(TrainError::Classes {
            data: data.classes(),
            model: model.arch.classes,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Injected flips over weight bits read during the epoch.
    pub flipped_bits: u64,
    pub read_bits: u64,
}

impl EpochLog {
    pub fn flip_rate(&self) -> f64 {
        if self.read_bits == 0 {
            0.0
        } else {
            self.flipped_bits as f64 / self.read_bits as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 6] = ["epoch", "lr", "train_loss", "train_acc", "test_acc", "flip_rate"];

    pub fn rows(&self) -> Vec<Vec<String>> {
        self.epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{:e}", e.lr),
                    format!("{:.6}", e.train_loss),
                    format!("{:.6}", e.train_acc),
                    e.test_acc.map_or(String::new(), |a| format!("{a:.6}")),
                    format!("{:.6}", e.flip_rate()),
                ]
            })
            .collect()
    }
}

pub struct TrainOutcome {
    pub model: BnnModel,
    pub latent: LatentModel,
    pub log: TrainingLog,
}

/// Trains from scratch and exports the folded inference model.
pub fn train(
    arch: &Architecture,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let mut latent = LatentModel::new(arch, train_set.shape(), train_set.z(), cfg.seed)?;
    latent.eps = cfg.bn_eps;
    let log = fit(&mut latent, train_set, test_set, cfg, on_epoch)?;
    Ok(TrainOutcome {
        model: latent.export()?,
        latent,
        log,
    })
}

/// Runs `cfg.epochs` epochs of mini-batch Adam on an existing latent model.
pub fn fit(
    latent: &mut LatentModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingLog, TrainError> {
    cfg.validate()?;
    check_data(latent, train_set)?;
    if let Some(t) = test_set {
        check_data(latent, t)?;
    }
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut StreamId::derive(cfg.seed, Domain::Shuffle, epoch as u64, 0, 0).rng());
        let (mut loss_sum, mut hits, mut flipped, mut read) = (0.0, 0usize, 0u64, 0u64);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let inject = Injection {
                p: cfg.ber_train,
                seed: cfg.seed,
                epoch: epoch as u64,
                batch: bi as u64,
            };
            let (loss, h, f, r) = latent.step(
                batch_matrix(train_set, chunk),
                &labels,
                lr,
                cfg.bn_momentum,
                Some(inject),
            )?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += h;
            flipped += f;
            read += r;
        }
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            test_acc: test_set.map(|t| latent.eval_accuracy(t)).transpose()?,
            flipped_bits: flipped,
            read_bits: read,
        };
        on_epoch(&row);
        log.epochs.push(row);
    }
    Ok(log)
}
