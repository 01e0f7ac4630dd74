//! Brute-force references that the packed implementation is checked against.
//!
//! Nothing here touches the packed kernels: weights are unpacked once into
//! `i64` signs and everything else is naive loops over small integers.

use itertools::Itertools;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::fault::{Domain, StreamId};
use crate::model::{threshold_activation, BnnModel, Direction, Layer, Shape3, KERNEL_TAPS};

/// Exhaustive search bound: `2^25` subsets worst case.
pub const MAX_EXHAUSTIVE_FAN_IN: usize = 25;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("fan-in {0} exceeds the exhaustive-search bound of {MAX_EXHAUSTIVE_FAN_IN}")]
    FanInTooLarge(usize),
    #[error("input has {got} values, neuron has fan-in {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("input flips are undefined for first-layer integer inputs")]
    FirstLayerInputFlip,
    #[error("weights must be +1 or -1")]
    NotASign,
    #[error("empty input")]
    Empty,
}

// ---------------------------------------------------------------------------
// Dense forward
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum DenseLayer {
    Conv {
        input: Shape3,
        out: usize,
        w: Vec<i64>,
    },
    Fc {
        inputs: usize,
        outputs: usize,
        w: Vec<i64>,
    },
    Threshold {
        neurons: usize,
        positions: usize,
        s: Vec<i64>,
        d: Vec<i64>,
    },
    MaxPool {
        input: Shape3,
    },
}

/// Unpacked copy of a [`BnnModel`] evaluated with plain integer arithmetic.
#[derive(Clone, Debug)]
pub struct DenseModel {
    input: Shape3,
    layers: Vec<DenseLayer>,
}

impl DenseModel {
    pub fn from_model(model: &BnnModel) -> Self {
        let unpack = |m: &crate::bitcore::BitMatrix| -> Vec<i64> {
            m.unpack_signs().into_iter().map(i64::from).collect()
        };
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => DenseLayer::Conv {
                    input: c.input,
                    out: c.out_channels,
                    w: unpack(&c.weights),
                },
                Layer::Fc(f) => DenseLayer::Fc {
                    inputs: f.inputs,
                    outputs: f.outputs,
                    w: unpack(&f.weights),
                },
                Layer::Threshold(t) => DenseLayer::Threshold {
                    neurons: t.shape.c,
                    positions: t.shape.positions(),
                    s: t.thresholds.iter().map(|&s| s as i64).collect(),
                    d: t.directions.iter().map(|d| d.sign() as i64).collect(),
                },
                Layer::MaxPool2 { input } => DenseLayer::MaxPool { input: *input },
            })
            .collect();
        Self {
            input: model.input_shape(),
            layers,
        }
    }
}

/// Class scores plus the pre-activations seen by every threshold layer.
pub fn dense_forward_trace(model: &DenseModel, x: &[u8]) -> (Vec<i64>, Vec<Vec<i64>>) {
    assert_eq!(x.len(), model.input.len(), "input length");
    let mut v: Vec<i64> = x.iter().map(|&p| p as i64).collect();
    let mut pre = Vec::new();
    for layer in &model.layers {
        v = match layer {
            DenseLayer::Conv { input, out, w } => {
                let (c, h, wd) = (input.c, input.h, input.w);
                let mut o = vec![0i64; out * h * wd];
                for f in 0..*out {
                    for y in 0..h as isize {
                        for xx in 0..wd as isize {
                            let mut acc = 0;
                            for ci in 0..c {
                                for ky in -1..=1isize {
                                    for kx in -1..=1isize {
                                        let (sy, sx) = (y + ky, xx + kx);
                                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                            continue;
                                        }
                                        let tap = ci * KERNEL_TAPS + ((ky + 1) * 3 + kx + 1) as usize;
                                        acc += w[f * c * KERNEL_TAPS + tap]
                                            * v[ci * h * wd + sy as usize * wd + sx as usize];
                                    }
                                }
                            }
                            o[f * h * wd + y as usize * wd + xx as usize] = acc;
                        }
                    }
                }
                o
            }
            DenseLayer::Fc { inputs, outputs, w } => (0..*outputs)
                .map(|o| (0..*inputs).map(|j| w[o * inputs + j] * v[j]).sum())
                .collect(),
            DenseLayer::Threshold {
                neurons,
                positions,
                s,
                d,
            } => {
                pre.push(v.clone());
                let mut o = vec![0; neurons * positions];
                for n in 0..*neurons {
                    for p in 0..*positions {
                        // sign of d·(h − s − 1/2), doubled to stay integral
                        let m = d[n] * (2 * v[n * positions + p] - 2 * s[n] - 1);
                        o[n * positions + p] = if m > 0 { 1 } else { -1 };
                    }
                }
                o
            }
            DenseLayer::MaxPool { input } => {
                let (oh, ow) = (input.h / 2, input.w / 2);
                let mut o = Vec::with_capacity(input.c * oh * ow);
                for c in 0..input.c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let at = |dy: usize, dx: usize| {
                                v[c * input.h * input.w + (2 * y + dy) * input.w + 2 * xx + dx]
                            };
                            o.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                        }
                    }
                }
                o
            }
        };
    }
    (v, pre)
}

pub fn dense_forward(model: &DenseModel, x: &[u8]) -> Vec<i64> {
    dense_forward_trace(model, x).0
}

// ---------------------------------------------------------------------------
// Single-neuron flip search
// ---------------------------------------------------------------------------

/// One threshold neuron at one position, in the setting of the flip theorem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DenseNeuron {
    weights: Vec<i64>,
    pub s: i64,
    pub d: Direction,
    pub first_layer: bool,
    /// Input scale: `Z` for the first layer, ignored otherwise.
    pub z: u32,
}

/// What a flip acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipTarget {
    Weights,
    Inputs,
}

impl DenseNeuron {
    pub fn new(
        weights: Vec<i8>,
        s: i64,
        d: Direction,
        first_layer: bool,
        z: u32,
    ) -> Result<Self, OracleError> {
        if weights.len() > MAX_EXHAUSTIVE_FAN_IN {
            return Err(OracleError::FanInTooLarge(weights.len()));
        }
        if weights.iter().any(|&w| w != 1 && w != -1) {
            return Err(OracleError::NotASign);
        }
        Ok(Self {
            weights: weights.into_iter().map(i64::from).collect(),
            s,
            d,
            first_layer,
            z,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[i64] {
        &self.weights
    }

    fn scale(&self) -> i64 {
        if self.first_layer {
            self.z as i64
        } else {
            1
        }
    }

    pub fn pre_activation(&self, x: &[i64]) -> i64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum()
    }

    pub fn output(&self, x: &[i64]) -> i8 {
        threshold_activation(self.pre_activation(x), self.s, self.d)
    }

    /// `|h − s − 1/2| / scale` as a float; only used for reporting.
    pub fn tolerance(&self, x: &[i64]) -> f64 {
        (self.pre_activation(x) as f64 - self.s as f64 - 0.5).abs() / self.scale() as f64
    }

    /// Exact `tolerance(x) >= b` via `|2h − 2s − 1| >= 2·scale·b`.
    pub fn tolerance_at_least(&self, x: &[i64], b: f64) -> bool {
        let twice = (2 * self.pre_activation(x) - 2 * self.s - 1).abs() as f64;
        twice >= 2.0 * self.scale() as f64 * b
    }

    fn check(&self, x: &[i64], target: FlipTarget) -> Result<(), OracleError> {
        if x.len() != self.fan_in() {
            return Err(OracleError::InputLength {
                expected: self.fan_in(),
                got: x.len(),
            });
        }
        if target == FlipTarget::Inputs && self.first_layer {
            return Err(OracleError::FirstLayerInputFlip);
        }
        Ok(())
    }

    fn output_after(&self, x: &[i64], subset: &[usize], target: FlipTarget) -> i8 {
        let mut w = self.weights.clone();
        let mut v = x.to_vec();
        for &j in subset {
            match target {
                FlipTarget::Weights => w[j] = -w[j],
                FlipTarget::Inputs => v[j] = -v[j],
            }
        }
        threshold_activation(w.iter().zip(&v).map(|(a, b)| a * b).sum(), self.s, self.d)
    }

    /// Smallest flip subset of size at most `max_k` that changes the output,
    /// searched in order of increasing cardinality.
    pub fn find_witness(
        &self,
        x: &[i64],
        max_k: usize,
        target: FlipTarget,
    ) -> Result<Option<Vec<usize>>, OracleError> {
        self.check(x, target)?;
        let base = self.output(x);
        for k in 1..=max_k.min(self.fan_in()) {
            let found = (0..self.fan_in())
                .combinations(k)
                .find(|subset| self.output_after(x, subset, target) != base);
            if found.is_some() {
                return Ok(found);
            }
        }
        Ok(None)
    }
}

/// Minimum number of flips that changes the neuron's output, or `fan_in + 1`
/// when no subset does.
pub fn min_flips_to_change(
    neuron: &DenseNeuron,
    x: &[i64],
    target: FlipTarget,
) -> Result<usize, OracleError> {
    Ok(neuron
        .find_witness(x, neuron.fan_in(), target)?
        .map_or(neuron.fan_in() + 1, |w| w.len()))
}

/// Subset sums of weight-flip deltas, visited in order of subset size.
///
/// Gives the same answer as [`min_flips_to_change`] for weight flips, but
/// every subset sum costs one addition and the search stops at the first
/// changing subset. With `cap < fan_in` only subsets of at most `cap` flips
/// are visited and `cap + 1` stands for "more than `cap`".
pub struct SubsetSums {
    cap: usize,
    order: Vec<usize>,
    sums: Vec<i64>,
}

impl SubsetSums {
    pub fn new(fan_in: usize, cap: usize) -> Result<Self, OracleError> {
        if fan_in > MAX_EXHAUSTIVE_FAN_IN {
            return Err(OracleError::FanInTooLarge(fan_in));
        }
        let cap = cap.min(fan_in);
        let mut order: Vec<usize> = (1..1usize << fan_in)
            .filter(|m| m.count_ones() as usize <= cap)
            .collect();
        // a mask's sum extends the sum of the mask without its lowest bit,
        // which is one smaller and therefore visited earlier
        order.sort_by_key(|m| m.count_ones());
        Ok(Self {
            cap,
            order,
            sums: vec![0; 1 << fan_in],
        })
    }

    pub fn min_flips(&mut self, neuron: &DenseNeuron, x: &[i64]) -> usize {
        let h = neuron.pre_activation(x);
        let base = threshold_activation(h, neuron.s, neuron.d);
        let delta: Vec<i64> = (0..neuron.fan_in())
            .map(|j| -2 * neuron.weights[j] * x[j])
            .collect();
        for &mask in &self.order {
            let v = self.sums[mask & (mask - 1)] + delta[mask.trailing_zeros() as usize];
            self.sums[mask] = v;
            if threshold_activation(h + v, neuron.s, neuron.d) != base {
                return mask.count_ones() as usize;
            }
        }
        self.cap + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    /// Precondition `T >= b` does not hold; nothing to check.
    Skipped,
    Fail { witness: Vec<usize> },
}

/// If the position tolerance is at least `b`, no set of up to `⌊b/2⌋` flips
/// may change the output.
pub fn verify_flip_bound(
    neuron: &DenseNeuron,
    x: &[i64],
    b: f64,
    target: FlipTarget,
) -> Result<Verdict, OracleError> {
    neuron.check(x, target)?;
    if !neuron.tolerance_at_least(x, b) {
        return Ok(Verdict::Skipped);
    }
    let k = (b / 2.0).floor() as usize;
    Ok(match neuron.find_witness(x, k, target)? {
        None => Verdict::Pass,
        Some(witness) => Verdict::Fail { witness },
    })
}

/// Two-pass population variance.
pub fn naive_variance(values: &[f64]) -> Result<f64, OracleError> {
    if values.is_empty() {
        return Err(OracleError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

// ---------------------------------------------------------------------------
// Exhaustive harness
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct HarnessConfig {
    pub neurons: usize,
    pub fan_in: usize,
    pub first_layer: bool,
    pub z: u32,
    pub grid: Vec<f64>,
    pub target: FlipTarget,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            neurons: 200,
            fan_in: 9,
            first_layer: false,
            z: 3,
            grid: vec![2.0, 4.0, 8.0],
            target: FlipTarget::Weights,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub neuron: DenseNeuron,
    pub input: Vec<i64>,
    pub b: f64,
    pub flips: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HarnessReport {
    pub config: HarnessConfig,
    pub inputs_per_neuron: u64,
    /// (neuron, input, b) triples meeting the precondition.
    pub checked: u64,
    pub skipped: u64,
    pub witnesses: Vec<Witness>,
    /// Hidden weight flips only: cases where the minimum flip count differs
    /// from `⌊T/2⌋ + 1` while the output is changeable at all.
    pub bound_not_tight: u64,
    pub unchangeable: u64,
}

impl HarnessReport {
    pub fn passed(&self) -> bool {
        self.witnesses.is_empty()
    }
}

fn random_neuron<R: Rng>(cfg: &HarnessConfig, rng: &mut R) -> Result<DenseNeuron, OracleError> {
    let weights = (0..cfg.fan_in).map(|_| if rng.gen() { 1 } else { -1 }).collect();
    let span = if cfg.first_layer {
        cfg.fan_in as i64 * cfg.z as i64
    } else {
        cfg.fan_in as i64
    };
    let d = if rng.gen() { Direction::Pos } else { Direction::Neg };
    DenseNeuron::new(weights, rng.gen_range(-span..=span), d, cfg.first_layer, cfg.z)
}

/// Odometer over all inputs: `{−1, +1}^n` or `{0..Z}^n`.
fn next_input(x: &mut [i64], first_layer: bool, z: i64) -> bool {
    for v in x.iter_mut() {
        if first_layer {
            if *v < z {
                *v += 1;
                return true;
            }
            *v = 0;
        } else {
            if *v == -1 {
                *v = 1;
                return true;
            }
            *v = -1;
        }
    }
    false
}

/// Checks every random neuron against every possible input and every `b`.
pub fn run_theorem_harness(cfg: &HarnessConfig) -> Result<HarnessReport, OracleError> {
    if cfg.fan_in > 16 {
        // the subset-sum table is 2^n entries per input
        return Err(OracleError::FanInTooLarge(cfg.fan_in));
    }
    if cfg.first_layer && cfg.target == FlipTarget::Inputs {
        return Err(OracleError::FirstLayerInputFlip);
    }
    let mut rng = StreamId::derive(cfg.seed, Domain::Harness, 0, 0, 0).rng();
    let inputs_per_neuron = if cfg.first_layer {
        (cfg.z as u64 + 1).pow(cfg.fan_in as u32)
    } else {
        1u64 << cfg.fan_in
    };
    let mut report = HarnessReport {
        config: cfg.clone(),
        inputs_per_neuron,
        checked: 0,
        skipped: 0,
        witnesses: Vec::new(),
        bound_not_tight: 0,
        unchangeable: 0,
    };
    let min_b = cfg.grid.iter().cloned().fold(f64::INFINITY, f64::min);
    // hidden neurons get the exact minimum for the tightness count; the
    // first-layer search only needs to look past the largest tested ⌊b/2⌋
    let cap = if cfg.first_layer {
        cfg.grid.iter().map(|b| (b / 2.0).floor() as usize).max().unwrap_or(0)
    } else {
        cfg.fan_in
    };
    let mut table = SubsetSums::new(cfg.fan_in, cap)?;
    for _ in 0..cfg.neurons {
        let neuron = random_neuron(cfg, &mut rng)?;
        let start = if cfg.first_layer { 0 } else { -1 };
        let mut x = vec![start; cfg.fan_in];
        loop {
            if !neuron.tolerance_at_least(&x, min_b) {
                report.skipped += cfg.grid.len() as u64;
            } else {
                // input flips on ±1 inputs act on the same products as weight flips
                let flips_on = match cfg.target {
                    FlipTarget::Weights => neuron.clone(),
                    FlipTarget::Inputs => DenseNeuron {
                        weights: x.clone(),
                        ..neuron.clone()
                    },
                };
                let operand: Vec<i64> = match cfg.target {
                    FlipTarget::Weights => x.clone(),
                    FlipTarget::Inputs => neuron.weights.clone(),
                };
                let min = table.min_flips(&flips_on, &operand);
                if !cfg.first_layer {
                    let twice = (2 * neuron.pre_activation(&x) - 2 * neuron.s - 1).unsigned_abs();
                    // ⌊T/2⌋ + 1 with T = twice / 2
                    let predicted = (twice / 4 + 1) as usize;
                    if min > cfg.fan_in {
                        report.unchangeable += 1;
                    } else if min != predicted {
                        report.bound_not_tight += 1;
                    }
                }
                for &b in &cfg.grid {
                    if !neuron.tolerance_at_least(&x, b) {
                        report.skipped += 1;
                        continue;
                    }
                    report.checked += 1;
                    let k = (b / 2.0).floor() as usize;
                    if min <= k {
                        let flips = neuron
                            .find_witness(&x, k, cfg.target)?
                            .unwrap_or_default();
                        report.witnesses.push(Witness {
                            neuron: neuron.clone(),
                            input: x.clone(),
                            b,
                            flips,
                        });
                    }
                }
            }
            if !next_input(&mut x, cfg.first_layer, cfg.z as i64) {
                break;
            }
        }
    }
    Ok(report)
}
