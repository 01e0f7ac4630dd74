//! Layer stack and packed forward pass for fully connected and convolutional BNNs.
//!
//! Every convolutional or fully connected layer except the output layer is
//! followed by a [`ThresholdLayer`] that turns integer pre-activations into
//! signs; 2×2 max-pooling operates on those signs. The first weight layer
//! consumes raw integer pixels in `0..=Z`, all later layers consume ±1 bits.
//! Convolutions are 3×3, stride 1, zero padded.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitcore::{
    apply_mask_xor_in_place, dot_words, masked_dot_words, sign_plane_sum, words_for, BitError,
    BitMatrix, WORD_BITS,
};
use crate::fault::{
    corrupted_read, sample_flip_mask_for, Domain, FaultConfig, FaultError, FaultScope, StreamId,
};

pub const DEFAULT_Z: u32 = 255;
pub const KERNEL_TAPS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("architecture `{arch}`: {reason}")]
    Arch { arch: String, reason: String },
    #[error("input has {got} values, model expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("pixel {index} = {value} exceeds Z = {z}")]
    PixelAboveZ { index: usize, value: u32, z: u32 },
    #[error("Z must be in 1..=255, got {0}")]
    InvalidZ(u32),
    #[error("batch norm for neuron {neuron} is degenerate: {reason}")]
    DegenerateBatchNorm { neuron: usize, reason: String },
    #[error("max-pool input {height}x{width} has an odd side")]
    OddPoolInput { height: usize, width: usize },
    #[error("inconsistent layer stack: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Bits(#[from] BitError),
}

/// Channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(c: usize) -> Self {
        Self { c, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.c, self.h, self.w)
    }
}

// ---------------------------------------------------------------------------
// Architecture strings
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchToken {
    Conv(usize),
    MaxPool2,
    Fc(usize),
}

/// Parsed `In-C64-MP2-FC2048-10` style architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<ArchToken>,
    pub classes: usize,
}

/// Per-layer shapes derived from an [`Architecture`] and an input shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerPlan {
    Conv {
        input: Shape3,
        out_channels: usize,
        first: bool,
    },
    Threshold {
        output: Shape3,
        first_layer: bool,
    },
    MaxPool2 {
        input: Shape3,
    },
    Fc {
        inputs: usize,
        outputs: usize,
        first: bool,
        output: bool,
    },
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let err = |reason: String| ModelError::Arch {
            arch: s.to_string(),
            reason,
        };
        let norm: String = s
            .replace('→', "-")
            .replace("->", "-")
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let tokens: Vec<&str> = norm.split('-').filter(|t| !t.is_empty()).collect();
        if tokens.len() < 2 || tokens[0] != "In" {
            return Err(err("must start with `In` and end with the class count".into()));
        }
        let classes: usize = tokens[tokens.len() - 1]
            .parse()
            .map_err(|_| err(format!("last token `{}` is not a class count", tokens[tokens.len() - 1])))?;
        if classes < 2 {
            return Err(err("need at least two classes".into()));
        }
        let mut hidden = Vec::new();
        for t in &tokens[1..tokens.len() - 1] {
            let count = |prefix: &str| -> Result<usize, ModelError> {
                let n: usize = t[prefix.len()..]
                    .parse()
                    .map_err(|_| err(format!("bad layer token `{t}`")))?;
                if n == 0 {
                    return Err(err(format!("`{t}` has zero width")));
                }
                Ok(n)
            };
            let tok = if let Some(k) = t.strip_prefix("MP") {
                if k != "2" {
                    return Err(err(format!("only 2x2 max-pooling is supported, got `{t}`")));
                }
                ArchToken::MaxPool2
            } else if t.starts_with("FC") {
                ArchToken::Fc(count("FC")?)
            } else if t.starts_with('C') {
                ArchToken::Conv(count("C")?)
            } else {
                return Err(err(format!("unknown layer token `{t}`")));
            };
            hidden.push(tok);
        }
        let arch = Self { hidden, classes };
        arch.check_grammar().map_err(err)?;
        Ok(arch)
    }

    fn check_grammar(&self) -> Result<(), String> {
        let mut prev: Option<ArchToken> = None;
        let mut seen_fc = false;
        for &t in &self.hidden {
            match t {
                ArchToken::MaxPool2 if !matches!(prev, Some(ArchToken::Conv(_))) => {
                    return Err("MP2 must directly follow a convolution".into())
                }
                ArchToken::Conv(_) if seen_fc => {
                    return Err("convolutions cannot follow a fully connected layer".into())
                }
                ArchToken::Fc(_) => seen_fc = true,
                _ => {}
            }
            prev = Some(t);
        }
        Ok(())
    }

    pub fn plan(&self, input: Shape3) -> Result<Vec<LayerPlan>, ModelError> {
        let err = |reason: String| ModelError::Arch {
            arch: self.to_string(),
            reason,
        };
        let mut plan = Vec::new();
        let mut cur = input;
        let mut first = true;
        for &t in &self.hidden {
            match t {
                ArchToken::Conv(out) => {
                    plan.push(LayerPlan::Conv {
                        input: cur,
                        out_channels: out,
                        first,
                    });
                    cur = Shape3::new(out, cur.h, cur.w);
                    plan.push(LayerPlan::Threshold {
                        output: cur,
                        first_layer: first,
                    });
                    first = false;
                }
                ArchToken::MaxPool2 => {
                    if cur.h % 2 != 0 || cur.w % 2 != 0 {
                        return Err(err(format!("MP2 applied to odd map {cur}")));
                    }
                    plan.push(LayerPlan::MaxPool2 { input: cur });
                    cur = Shape3::new(cur.c, cur.h / 2, cur.w / 2);
                }
                ArchToken::Fc(out) => {
                    plan.push(LayerPlan::Fc {
                        inputs: cur.len(),
                        outputs: out,
                        first,
                        output: false,
                    });
                    cur = Shape3::flat(out);
                    plan.push(LayerPlan::Threshold {
                        output: cur,
                        first_layer: first,
                    });
                    first = false;
                }
            }
        }
        plan.push(LayerPlan::Fc {
            inputs: cur.len(),
            outputs: self.classes,
            first,
            output: true,
        });
        Ok(plan)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "In")?;
        for t in &self.hidden {
            match t {
                ArchToken::Conv(n) => write!(f, "-C{n}")?,
                ArchToken::MaxPool2 => write!(f, "-MP2")?,
                ArchToken::Fc(n) => write!(f, "-FC{n}")?,
            }
        }
        write!(f, "-{}", self.classes)
    }
}

impl std::str::FromStr for Architecture {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

// ---------------------------------------------------------------------------
// Activation and batch-norm folding
// ---------------------------------------------------------------------------

/// Comparison direction of a threshold neuron; `Neg` absorbs a negative BN scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Pos,
    Neg,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::Pos => 1,
            Direction::Neg => -1,
        }
    }

    pub fn from_sign(d: i8) -> Option<Self> {
        match d {
            1 => Some(Direction::Pos),
            -1 => Some(Direction::Neg),
            _ => None,
        }
    }
}

/// `d · sign(h − s − 1/2)`; never zero since `h` and `s` are integers.
#[inline]
pub fn threshold_activation(h: i64, s: i64, d: Direction) -> i8 {
    let up = h > s;
    match (up, d) {
        (true, Direction::Pos) | (false, Direction::Neg) => 1,
        _ => -1,
    }
}

/// Training-time batch-norm statistics, one entry per neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// Reference semantics folded by [`fold_batchnorm`]: `+1` iff the normalised
/// value is strictly positive.
pub fn batchnorm_sign(h: f64, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> i8 {
    if gamma * (h - mean) / (var + eps).sqrt() + beta > 0.0 {
        1
    } else {
        -1
    }
}

const THRESHOLD_LIMIT: f64 = (1u64 << 30) as f64;

/// Folds one neuron's BN + sign into an integer threshold and a direction.
///
/// With `θ = μ − β·√(σ²+ε)/γ`, a positive scale fires for `h > θ` and a
/// negative scale for `h < θ`, giving `s = ⌊θ⌋` and `s = ⌈θ⌉ − 1` respectively.
pub fn fold_neuron(
    gamma: f64,
    beta: f64,
    mean: f64,
    var: f64,
    eps: f64,
) -> Result<(i64, Direction), String> {
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(format!("gamma = {gamma}"));
    }
    if !(var + eps > 0.0) {
        return Err(format!("var + eps = {} is not positive", var + eps));
    }
    let theta = mean - beta * (var + eps).sqrt() / gamma;
    if !theta.is_finite() {
        return Err(format!("threshold {theta} is not finite"));
    }
    let theta = theta.clamp(-THRESHOLD_LIMIT, THRESHOLD_LIMIT);
    Ok(if gamma > 0.0 {
        (theta.floor() as i64, Direction::Pos)
    } else {
        (theta.ceil() as i64 - 1, Direction::Neg)
    })
}

pub fn fold_batchnorm(bn: &BatchNormParams) -> Result<Vec<(i64, Direction)>, ModelError> {
    let n = bn.gamma.len();
    if bn.beta.len() != n || bn.mean.len() != n || bn.var.len() != n {
        return Err(ModelError::Inconsistent(
            "batch-norm parameter vectors differ in length".into(),
        ));
    }
    (0..n)
        .map(|i| {
            fold_neuron(bn.gamma[i], bn.beta[i], bn.mean[i], bn.var[i], bn.eps)
                .map_err(|reason| ModelError::DegenerateBatchNorm { neuron: i, reason })
        })
        .collect()
}

/// 2×2 max-pool over a ±1 plane stored row-major.
pub fn maxpool2(plane: &[i8], height: usize, width: usize) -> Result<Vec<i8>, ModelError> {
    if plane.len() != height * width {
        return Err(ModelError::InputShape {
            expected: height * width,
            got: plane.len(),
        });
    }
    if height % 2 != 0 || width % 2 != 0 {
        return Err(ModelError::OddPoolInput { height, width });
    }
    let mut out = Vec::with_capacity(height * width / 4);
    for y in (0..height).step_by(2) {
        for x in (0..width).step_by(2) {
            let any = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .any(|(dy, dx)| plane[(y + dy) * width + x + dx] == 1);
            out.push(if any { 1 } else { -1 });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    FirstConv3x3,
    BinConv3x3,
    MaxPool2,
    ThresholdAct,
    BinFC,
    FirstFC,
    OutputFC,
}

/// 3×3 stride-1 zero-padded convolution; weights are `out × (c_in·9)` with
/// tap order `(c_in, ky, kx)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub input: Shape3,
    pub out_channels: usize,
    pub first: bool,
    pub weights: BitMatrix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub first: bool,
    pub output: bool,
    pub weights: BitMatrix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThresholdLayer {
    /// channels = neurons; `h × w` positions per neuron.
    pub shape: Shape3,
    pub first_layer: bool,
    pub thresholds: Vec<i32>,
    pub directions: Vec<Direction>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv(ConvLayer),
    Fc(FcLayer),
    Threshold(ThresholdLayer),
    MaxPool2 { input: Shape3 },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(c) if c.first => LayerKind::FirstConv3x3,
            Layer::Conv(_) => LayerKind::BinConv3x3,
            Layer::Fc(f) if f.output => LayerKind::OutputFC,
            Layer::Fc(f) if f.first => LayerKind::FirstFC,
            Layer::Fc(_) => LayerKind::BinFC,
            Layer::Threshold(_) => LayerKind::ThresholdAct,
            Layer::MaxPool2 { .. } => LayerKind::MaxPool2,
        }
    }

    pub fn weights(&self) -> Option<&BitMatrix> {
        match self {
            Layer::Conv(c) => Some(&c.weights),
            Layer::Fc(f) => Some(&f.weights),
            _ => None,
        }
    }

    fn weights_mut(&mut self) -> Option<&mut BitMatrix> {
        match self {
            Layer::Conv(c) => Some(&mut c.weights),
            Layer::Fc(f) => Some(&mut f.weights),
            _ => None,
        }
    }

    fn reads_integer_input(&self) -> bool {
        match self {
            Layer::Conv(c) => c.first,
            Layer::Fc(f) => f.first,
            _ => false,
        }
    }
}

/// Inference model: binary weights, integer thresholds, directions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BnnModel {
    arch: Architecture,
    input: Shape3,
    z: u32,
    layers: Vec<Layer>,
}

/// Pre-activations of one threshold layer for one input, neuron-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceLayer {
    pub layer: usize,
    pub first_layer: bool,
    pub neurons: usize,
    pub positions: usize,
    pub h: Vec<i64>,
    pub thresholds: Vec<i32>,
    pub directions: Vec<Direction>,
}

impl TraceLayer {
    pub fn neuron(&self, n: usize) -> &[i64] {
        &self.h[n * self.positions..(n + 1) * self.positions]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ForwardTrace {
    pub layers: Vec<TraceLayer>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForwardOutput {
    pub scores: Vec<i64>,
    pub trace: Option<ForwardTrace>,
}

impl ForwardOutput {
    pub fn predicted(&self) -> usize {
        argmax(&self.scores)
    }
}

/// Identifies which transient read this forward pass performs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReadFault {
    pub cfg: FaultConfig,
    pub trial: u64,
    pub sample: u64,
}

/// Lowest index wins ties.
pub fn argmax(scores: &[i64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Inter-layer activation.
#[derive(Clone, Debug)]
pub(crate) enum Act {
    /// Integer pre-activations, channel-major.
    Pre(Vec<i64>),
    /// Packed signs as a single row, channel-major.
    Bin(BitMatrix),
}

/// Units whose binary output gets inverted in a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inversion {
    /// Index into the model's layer list; must be a threshold layer.
    pub layer: usize,
    /// Flat indices `neuron · positions + position` to invert.
    pub bits: Vec<usize>,
}

impl BnnModel {
    pub fn new(
        arch: Architecture,
        input: Shape3,
        z: u32,
        layers: Vec<Layer>,
    ) -> Result<Self, ModelError> {
        if !(1..=255).contains(&z) {
            return Err(ModelError::InvalidZ(z));
        }
        let model = Self {
            arch,
            input,
            z,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let plan = self.arch.plan(self.input)?;
        let bad = |i: usize, what: &str| ModelError::Inconsistent(format!("layer {i}: {what}"));
        if plan.len() != self.layers.len() {
            return Err(ModelError::Inconsistent(format!(
                "{} layers for an architecture of {}",
                self.layers.len(),
                plan.len()
            )));
        }
        for (i, (p, l)) in plan.iter().zip(&self.layers).enumerate() {
            match (p, l) {
                (
                    LayerPlan::Conv {
                        input,
                        out_channels,
                        first,
                    },
                    Layer::Conv(c),
                ) => {
                    if c.input != *input || c.out_channels != *out_channels || c.first != *first {
                        return Err(bad(i, "conv shape"));
                    }
                    if c.weights.rows() != c.out_channels
                        || c.weights.cols() != input.c * KERNEL_TAPS
                    {
                        return Err(bad(i, "conv weight shape"));
                    }
                }
                (
                    LayerPlan::Fc {
                        inputs,
                        outputs,
                        first,
                        output,
                    },
                    Layer::Fc(f),
                ) => {
                    if f.inputs != *inputs
                        || f.outputs != *outputs
                        || f.first != *first
                        || f.output != *output
                    {
                        return Err(bad(i, "fc shape"));
                    }
                    if f.weights.rows() != f.outputs || f.weights.cols() != f.inputs {
                        return Err(bad(i, "fc weight shape"));
                    }
                }
                (
                    LayerPlan::Threshold {
                        output,
                        first_layer,
                    },
                    Layer::Threshold(t),
                ) => {
                    if t.shape != *output
                        || t.first_layer != *first_layer
                        || t.thresholds.len() != output.c
                        || t.directions.len() != output.c
                    {
                        return Err(bad(i, "threshold shape"));
                    }
                }
                (LayerPlan::MaxPool2 { input }, Layer::MaxPool2 { input: got }) if input == got => {}
                _ => return Err(bad(i, "layer kind does not match architecture")),
            }
        }
        Ok(())
    }

    /// Random weights, thresholds within the pre-activation range, random directions.
    pub fn random<R: Rng + ?Sized>(
        arch: &Architecture,
        input: Shape3,
        z: u32,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let plan = arch.plan(input)?;
        let mut layers = Vec::with_capacity(plan.len());
        let mut fan_in = 0usize;
        for p in &plan {
            layers.push(match *p {
                LayerPlan::Conv {
                    input,
                    out_channels,
                    first,
                } => {
                    fan_in = input.c * KERNEL_TAPS;
                    Layer::Conv(ConvLayer {
                        input,
                        out_channels,
                        first,
                        weights: BitMatrix::from_fn(out_channels, fan_in, |_, _| rng.gen()),
                    })
                }
                LayerPlan::Fc {
                    inputs,
                    outputs,
                    first,
                    output,
                } => {
                    fan_in = inputs;
                    Layer::Fc(FcLayer {
                        inputs,
                        outputs,
                        first,
                        output,
                        weights: BitMatrix::from_fn(outputs, inputs, |_, _| rng.gen()),
                    })
                }
                LayerPlan::Threshold {
                    output,
                    first_layer,
                } => {
                    let span = if first_layer {
                        (fan_in as i64 * z as i64 / 4).max(1)
                    } else {
                        (fan_in as i64 / 2).max(1)
                    };
                    Layer::Threshold(ThresholdLayer {
                        shape: output,
                        first_layer,
                        thresholds: (0..output.c)
                            .map(|_| rng.gen_range(-span..=span) as i32)
                            .collect(),
                        directions: (0..output.c)
                            .map(|_| if rng.gen_bool(0.8) { Direction::Pos } else { Direction::Neg })
                            .collect(),
                    })
                }
                LayerPlan::MaxPool2 { input } => Layer::MaxPool2 { input },
            });
        }
        Self::new(arch.clone(), input, z, layers)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn z(&self) -> u32 {
        self.z
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to one layer's stored weights (for tests and tooling).
    pub fn weights_mut(&mut self, layer: usize) -> Option<&mut BitMatrix> {
        self.layers.get_mut(layer).and_then(Layer::weights_mut)
    }

    /// Indices of threshold layers, i.e. the layers whose neurons carry metrics.
    pub fn threshold_layers(&self) -> impl Iterator<Item = (usize, &ThresholdLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Threshold(t) => Some((i, t)),
            _ => None,
        })
    }

    /// Number of non-output neurons.
    pub fn hidden_neurons(&self) -> usize {
        self.threshold_layers().map(|(_, t)| t.shape.c).sum()
    }

    pub fn check_input(&self, x: &[u8]) -> Result<(), ModelError> {
        if x.len() != self.input.len() {
            return Err(ModelError::InputShape {
                expected: self.input.len(),
                got: x.len(),
            });
        }
        if let Some((index, &v)) = x.iter().enumerate().find(|(_, &v)| v as u32 > self.z) {
            return Err(ModelError::PixelAboveZ {
                index,
                value: v as u32,
                z: self.z,
            });
        }
        Ok(())
    }

    pub fn forward(
        &self,
        x: &[u8],
        inject: Option<&ReadFault>,
        trace: bool,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_input(x)?;
        let mut tr = trace.then(ForwardTrace::default);
        let scores = self.run(x, 0, None, inject, tr.as_mut(), None)?;
        Ok(ForwardOutput { scores, trace: tr })
    }

    pub fn predict(&self, x: &[u8]) -> Result<usize, ModelError> {
        Ok(self.forward(x, None, false)?.predicted())
    }

    /// Clean forward pass with some threshold outputs inverted.
    pub fn forward_inverted(&self, x: &[u8], inv: &Inversion) -> Result<Vec<i64>, ModelError> {
        self.check_input(x)?;
        self.check_inversion(inv)?;
        self.run(x, 0, None, None, None, Some(inv))
    }

    pub(crate) fn check_inversion(&self, inv: &Inversion) -> Result<(), ModelError> {
        match self.layers.get(inv.layer) {
            Some(Layer::Threshold(t)) => {
                if let Some(&b) = inv.bits.iter().find(|&&b| b >= t.shape.len()) {
                    return Err(ModelError::Inconsistent(format!(
                        "inversion bit {b} outside layer {}",
                        inv.layer
                    )));
                }
                Ok(())
            }
            _ => Err(ModelError::Inconsistent(format!(
                "layer {} is not a threshold layer",
                inv.layer
            ))),
        }
    }

    /// Clean binary outputs of every threshold layer, keyed by layer index.
    pub(crate) fn threshold_outputs(&self, x: &[u8]) -> Result<Vec<(usize, BitMatrix)>, ModelError> {
        let mut out = Vec::new();
        let mut act: Option<Act> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.step(i, layer, x, act.take(), None, None, None)?;
            if let (Layer::Threshold(_), Act::Bin(b)) = (layer, &next) {
                out.push((i, b.clone()));
            }
            act = Some(next);
        }
        Ok(out)
    }

    /// Resumes a clean forward pass with `act` as the output of layer `layer`.
    pub(crate) fn resume(&self, x: &[u8], layer: usize, act: BitMatrix) -> Result<Vec<i64>, ModelError> {
        self.run(x, layer + 1, Some(Act::Bin(act)), None, None, None)
    }

    fn run(
        &self,
        x: &[u8],
        start: usize,
        mut act: Option<Act>,
        inject: Option<&ReadFault>,
        mut trace: Option<&mut ForwardTrace>,
        inv: Option<&Inversion>,
    ) -> Result<Vec<i64>, ModelError> {
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let read = match (inject, layer.weights()) {
                (Some(f), Some(w)) if f.cfg.p() > 0.0 => {
                    let id = StreamId::derive(f.cfg.seed, Domain::Inference, f.trial, i as u64, f.sample);
                    Some(corrupted_read(w, &f.cfg, id)?)
                }
                _ => None,
            };
            if let (Some(f), Some(Act::Bin(b))) = (inject, act.as_mut()) {
                if f.cfg.scope == FaultScope::WeightsAndActivations
                    && f.cfg.p() > 0.0
                    && layer.weights().is_some()
                    && !layer.reads_integer_input()
                {
                    let id = StreamId::derive(f.cfg.seed, Domain::Activation, f.trial, i as u64, f.sample);
                    let mask = sample_flip_mask_for(b, f.cfg.p(), id)?;
                    apply_mask_xor_in_place(b, &mask)?;
                }
            }
            act = Some(self.step(i, layer, x, act, read.as_ref(), trace.as_deref_mut(), inv)?);
        }
        match act {
            Some(Act::Pre(scores)) => Ok(scores),
            _ => Err(ModelError::Inconsistent("model does not end in an output layer".into())),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        i: usize,
        layer: &Layer,
        x: &[u8],
        act: Option<Act>,
        read: Option<&BitMatrix>,
        trace: Option<&mut ForwardTrace>,
        inv: Option<&Inversion>,
    ) -> Result<Act, ModelError> {
        Ok(match layer {
            Layer::Conv(c) => {
                let wm = read.unwrap_or(&c.weights);
                if c.first {
                    Act::Pre(conv_integer(c, wm, x))
                } else {
                    Act::Pre(conv_binary(c, wm, expect_bin(act)?))
                }
            }
            Layer::Fc(f) => {
                let wm = read.unwrap_or(&f.weights);
                if f.first {
                    Act::Pre(fc_integer(wm, x, self.z))
                } else {
                    Act::Pre(fc_binary(wm, &expect_bin(act)?))
                }
            }
            Layer::Threshold(t) => {
                let h = match act {
                    Some(Act::Pre(h)) => h,
                    _ => return Err(ModelError::Inconsistent("threshold without pre-activations".into())),
                };
                let mut bits = threshold_bits(t, &h);
                if let Some(inv) = inv.filter(|inv| inv.layer == i) {
                    for &b in &inv.bits {
                        bits.flip(0, b);
                    }
                }
                if let Some(tr) = trace {
                    tr.layers.push(TraceLayer {
                        layer: i,
                        first_layer: t.first_layer,
                        neurons: t.shape.c,
                        positions: t.shape.positions(),
                        h,
                        thresholds: t.thresholds.clone(),
                        directions: t.directions.clone(),
                    });
                }
                Act::Bin(bits)
            }
            Layer::MaxPool2 { input } => Act::Bin(maxpool_bits(*input, &expect_bin(act)?)),
        })
    }
}

fn expect_bin(act: Option<Act>) -> Result<BitMatrix, ModelError> {
    match act {
        Some(Act::Bin(b)) => Ok(b),
        _ => Err(ModelError::Inconsistent("expected binary activations".into())),
    }
}

fn threshold_bits(t: &ThresholdLayer, h: &[i64]) -> BitMatrix {
    let pos = t.shape.positions();
    let mut bits = BitMatrix::zeros(1, t.shape.len());
    for n in 0..t.shape.c {
        let (s, d) = (t.thresholds[n] as i64, t.directions[n]);
        for p in 0..pos {
            if threshold_activation(h[n * pos + p], s, d) == 1 {
                bits.set(0, n * pos + p, true);
            }
        }
    }
    bits
}

fn maxpool_bits(input: Shape3, act: &BitMatrix) -> BitMatrix {
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = BitMatrix::zeros(1, input.c * oh * ow);
    for c in 0..input.c {
        let base = c * input.h * input.w;
        for y in 0..oh {
            for x in 0..ow {
                let any = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .any(|(dy, dx)| act.get(0, base + (2 * y + dy) * input.w + 2 * x + dx));
                if any {
                    out.set(0, c * oh * ow + y * ow + x, true);
                }
            }
        }
    }
    out
}

/// Bit planes of integer pixels: plane k holds bit k of every input.
fn bit_planes(x: &[u8], z: u32) -> Vec<BitMatrix> {
    let planes = (32 - z.leading_zeros()) as usize;
    (0..planes)
        .map(|k| BitMatrix::from_fn(1, x.len(), |_, j| x[j] >> k & 1 == 1))
        .collect()
}

fn fc_integer(w: &BitMatrix, x: &[u8], z: u32) -> Vec<i64> {
    let planes = bit_planes(x, z);
    (0..w.rows())
        .map(|o| {
            let row = w.row(o).words;
            planes
                .iter()
                .enumerate()
                .map(|(k, p)| sign_plane_sum(row, p.words()) << k)
                .sum()
        })
        .collect()
}

fn fc_binary(w: &BitMatrix, x: &BitMatrix) -> Vec<i64> {
    let xr = x.row(0).words;
    (0..w.rows())
        .map(|o| dot_words(w.row(o).words, xr, w.cols()))
        .collect()
}

fn conv_integer(c: &ConvLayer, w: &BitMatrix, x: &[u8]) -> Vec<i64> {
    let Shape3 { c: cin, h, w: wd } = c.input;
    let signs: Vec<i64> = w.unpack_signs().into_iter().map(i64::from).collect();
    let taps = cin * KERNEL_TAPS;
    let mut out = vec![0i64; c.out_channels * h * wd];
    let mut patch = vec![0i64; taps];
    for y in 0..h {
        for xx in 0..wd {
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        patch[ci * KERNEL_TAPS + ky * 3 + kx] =
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                x[ci * h * wd + sy as usize * wd + sx as usize] as i64
                            } else {
                                0
                            };
                    }
                }
            }
            for o in 0..c.out_channels {
                let wr = &signs[o * taps..(o + 1) * taps];
                out[o * h * wd + y * wd + xx] = wr.iter().zip(&patch).map(|(a, b)| a * b).sum();
            }
        }
    }
    out
}

fn conv_binary(c: &ConvLayer, w: &BitMatrix, act: BitMatrix) -> Vec<i64> {
    let Shape3 { c: cin, h, w: wd } = c.input;
    let taps = cin * KERNEL_TAPS;
    let nw = words_for(taps);
    let mut out = vec![0i64; c.out_channels * h * wd];
    let mut patch = vec![0u64; nw];
    let mut valid = vec![0u64; nw];
    for y in 0..h {
        for xx in 0..wd {
            patch.fill(0);
            valid.fill(0);
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            let t = ci * KERNEL_TAPS + ky * 3 + kx;
                            valid[t / WORD_BITS] |= 1 << (t % WORD_BITS);
                            if act.get(0, ci * h * wd + sy as usize * wd + sx as usize) {
                                patch[t / WORD_BITS] |= 1 << (t % WORD_BITS);
                            }
                        }
                    }
                }
            }
            for o in 0..c.out_channels {
                out[o * h * wd + y * wd + xx] = masked_dot_words(w.row(o).words, &patch, &valid);
            }
        }
    }
    out
}
