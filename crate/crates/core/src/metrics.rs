//! Bit error tolerance metrics.
//!
//! The margin metric counts, per neuron and input, the fraction of output
//! positions whose pre-activation sits at least `b` away from the threshold,
//! then averages over neurons and inputs. The importance metric inverts one
//! neuron's binary output and measures the relative accuracy drop; its
//! population variance over all non-output neurons is `VAR(Π)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Dataset;
use crate::fault::{FaultConfig, FaultError, FaultScope};
use crate::model::{argmax, BnnModel, ForwardTrace, Inversion, ModelError, ReadFault, TraceLayer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("b grid must be non-empty, positive and strictly ascending, got {0:?}")]
    Grid(Vec<f64>),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("clean accuracy is zero, relative importance is undefined")]
    ZeroAccuracy,
    #[error("at least one trial is required")]
    NoTrials,
    #[error("dataset shape {data} does not match model input {model}")]
    ShapeMismatch { data: String, model: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fault(#[from] FaultError),
}

/// Ascending tolerance thresholds `b_1 < … < b_B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BGrid(Vec<f64>);

impl BGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricsError> {
        let ok = !values.is_empty()
            && values.iter().all(|b| b.is_finite() && *b > 0.0)
            && values.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self(values))
        } else {
            Err(MetricsError::Grid(values))
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for BGrid {
    fn default() -> Self {
        Self(vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0])
    }
}

impl TryFrom<Vec<f64>> for BGrid {
    type Error = MetricsError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BGrid> for Vec<f64> {
    fn from(g: BGrid) -> Self {
        g.0
    }
}

// ---------------------------------------------------------------------------
// Margin metric
// ---------------------------------------------------------------------------

/// `|h − s − 1/2| / scale` held exactly as `numer / denom`
/// with `numer = |2h − 2s − 1|` and `denom = 2·scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionTolerance {
    pub numer: u64,
    pub denom: u64,
}

impl PositionTolerance {
    pub fn value(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }

    /// Exact `self ≥ b` for any `b` whose product with `denom` is representable.
    pub fn at_least(&self, b: f64) -> bool {
        self.numer as f64 >= b * self.denom as f64
    }
}

/// Distance of a pre-activation from its threshold; first-layer values are
/// scaled down by the input range `Z`.
pub fn position_tolerance(h: i64, s: i64, first_layer: bool, z: u32) -> PositionTolerance {
    let scale = if first_layer { z.max(1) as u64 } else { 1 };
    PositionTolerance {
        numer: (2 * h - 2 * s - 1).unsigned_abs(),
        denom: 2 * scale,
    }
}

/// Fraction of positions with tolerance at least `b`.
pub fn neuron_tolerance(positions: &[PositionTolerance], b: f64) -> Result<f64, MetricsError> {
    if positions.is_empty() {
        return Err(MetricsError::Empty("position list"));
    }
    let hits = positions.iter().filter(|t| t.at_least(b)).count();
    Ok(hits as f64 / positions.len() as f64)
}

/// Fraction of one neuron's positions at least `b_k` away, for every `k`.
fn neuron_row(layer: &TraceLayer, n: usize, z: u32, grid: &BGrid) -> Vec<f64> {
    let s = layer.thresholds[n] as i64;
    let mut hits = vec![0u64; grid.len()];
    for &h in layer.neuron(n) {
        let t = position_tolerance(h, s, layer.first_layer, z);
        // grid is ascending, so the hits form a prefix
        for (k, &b) in grid.values().iter().enumerate() {
            if !t.at_least(b) {
                break;
            }
            hits[k] += 1;
        }
    }
    hits.iter().map(|&c| c as f64 / layer.positions as f64).collect()
}

/// Tolerances of one input: `T_{i,n}^b` for every neuron (rows in layer
/// order) and their neuron average `T_i^b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InputTolerance {
    pub per_neuron: Vec<Vec<f64>>,
    pub tuple: Vec<f64>,
}

pub fn input_tolerance(
    trace: &ForwardTrace,
    z: u32,
    grid: &BGrid,
) -> Result<InputTolerance, MetricsError> {
    let per_neuron: Vec<Vec<f64>> = trace
        .layers
        .iter()
        .flat_map(|l| (0..l.neurons).map(move |n| neuron_row(l, n, z, grid)))
        .collect();
    if per_neuron.is_empty() {
        return Err(MetricsError::Empty("hidden neuron set"));
    }
    let tuple = mean_columns(&per_neuron, grid.len());
    Ok(InputTolerance { per_neuron, tuple })
}

fn mean_columns(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToleranceReport {
    pub grid: BGrid,
    /// `(T^{b_1}, …, T^{b_B})` over the whole dataset.
    pub tuple: Vec<f64>,
    /// Mean of the tuple entries.
    pub tbar: f64,
    /// `T_i^b` for every input.
    pub per_input: Vec<Vec<f64>>,
    /// `T_{i,n}^b` averaged over inputs, one row per non-output neuron.
    pub per_neuron: Vec<Vec<f64>>,
}

fn check_data(model: &BnnModel, data: &Dataset) -> Result<(), MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::Empty("dataset"));
    }
    if data.shape() != model.input_shape() {
        return Err(MetricsError::ShapeMismatch {
            data: data.shape().to_string(),
            model: model.input_shape().to_string(),
        });
    }
    Ok(())
}

/// Margin metric over a dataset, from clean forward traces.
pub fn dataset_tolerance(
    model: &BnnModel,
    data: &Dataset,
    grid: &BGrid,
) -> Result<ToleranceReport, MetricsError> {
    check_data(model, data)?;
    let inputs: Vec<InputTolerance> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let out = model.forward(data.image(i), None, true)?;
            input_tolerance(out.trace.as_ref().expect("trace requested"), model.z(), grid)
        })
        .collect::<Result<_, _>>()?;
    Ok(aggregate(inputs, grid))
}

/// Dataset-level aggregation of per-input tolerances, in input order.
pub fn aggregate(inputs: Vec<InputTolerance>, grid: &BGrid) -> ToleranceReport {
    let b = grid.len();
    let per_input: Vec<Vec<f64>> = inputs.iter().map(|t| t.tuple.clone()).collect();
    let tuple = mean_columns(&per_input, b);
    let neurons = inputs.first().map_or(0, |t| t.per_neuron.len());
    let mut per_neuron = vec![vec![0.0; b]; neurons];
    for t in &inputs {
        for (acc, row) in per_neuron.iter_mut().zip(&t.per_neuron) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    for row in &mut per_neuron {
        for a in row.iter_mut() {
            *a /= inputs.len() as f64;
        }
    }
    ToleranceReport {
        grid: grid.clone(),
        tbar: summary_tbar(&tuple),
        tuple,
        per_input,
        per_neuron,
    }
}

/// Mean of the tolerance tuple; zero for an empty tuple.
pub fn summary_tbar(tuple: &[f64]) -> f64 {
    if tuple.is_empty() {
        return 0.0;
    }
    tuple.iter().sum::<f64>() / tuple.len() as f64
}

// ---------------------------------------------------------------------------
// Importance metric
// ---------------------------------------------------------------------------

/// What "the activation output of neuron n" means for a convolutional filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceUnit {
    /// One value per filter; its whole feature map is inverted.
    #[default]
    Neuron,
    /// One value per filter and output position.
    Position,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct UnitId {
    pub layer: usize,
    pub neuron: usize,
    pub position: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub unit: ImportanceUnit,
    pub clean_accuracy: f64,
    pub units: Vec<UnitId>,
    /// `Π[n] = (A − A*) / A`.
    pub values: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

fn units(model: &BnnModel, unit: ImportanceUnit) -> Vec<(UnitId, Inversion)> {
    let mut out = Vec::new();
    for (layer, t) in model.threshold_layers() {
        let pos = t.shape.positions();
        for neuron in 0..t.shape.c {
            match unit {
                ImportanceUnit::Neuron => out.push((
                    UnitId {
                        layer,
                        neuron,
                        position: None,
                    },
                    Inversion {
                        layer,
                        bits: (neuron * pos..(neuron + 1) * pos).collect(),
                    },
                )),
                ImportanceUnit::Position => out.extend((0..pos).map(|p| {
                    (
                        UnitId {
                            layer,
                            neuron,
                            position: Some(p),
                        },
                        Inversion {
                            layer,
                            bits: vec![neuron * pos + p],
                        },
                    )
                })),
            }
        }
    }
    out
}

/// Relative accuracy drop for every non-output unit.
pub fn neuron_importance(
    model: &BnnModel,
    data: &Dataset,
    unit: ImportanceUnit,
) -> Result<ImportanceReport, MetricsError> {
    check_data(model, data)?;
    let units = units(model, unit);
    if units.is_empty() {
        return Err(MetricsError::Empty("hidden neuron set"));
    }
    // correct[0] is the clean count, correct[1 + u] the count with unit u inverted
    let correct = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<u64>, MetricsError> {
            let x = data.image(i);
            let y = data.label(i);
            let clean = model.threshold_outputs(x)?;
            let mut hits = vec![0u64; units.len() + 1];
            hits[0] = (model.predict(x)? == y) as u64;
            for (u, (_, inv)) in units.iter().enumerate() {
                let (_, bits) = clean
                    .iter()
                    .find(|(l, _)| *l == inv.layer)
                    .expect("unit lies on a threshold layer");
                let mut act = bits.clone();
                for &b in &inv.bits {
                    act.flip(0, b);
                }
                hits[u + 1] = (argmax(&model.resume(x, inv.layer, act)?) == y) as u64;
            }
            Ok(hits)
        })
        .try_reduce(
            || vec![0u64; units.len() + 1],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let clean = correct[0];
    if clean == 0 {
        return Err(MetricsError::ZeroAccuracy);
    }
    let values: Vec<f64> = correct[1..]
        .iter()
        .map(|&c| (clean as f64 - c as f64) / clean as f64)
        .collect();
    let variance = importance_variance(&values)?;
    Ok(ImportanceReport {
        unit,
        clean_accuracy: clean as f64 / data.len() as f64,
        units: units.into_iter().map(|(id, _)| id).collect(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        values,
        variance,
    })
}

/// Population variance (divisor `N`), single pass.
pub fn importance_variance(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty("importance list"));
    }
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (k, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    Ok(m2 / values.len() as f64)
}

// ---------------------------------------------------------------------------
// Accuracy under bit errors
// ---------------------------------------------------------------------------

pub const DEFAULT_TRIALS: usize = 10;

pub fn accuracy(model: &BnnModel, data: &Dataset) -> Result<f64, MetricsError> {
    check_data(model, data)?;
    let hits: u64 = (0..data.len())
        .into_par_iter()
        .map(|i| Ok((model.predict(data.image(i))? == data.label(i)) as u64))
        .sum::<Result<u64, MetricsError>>()?;
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerAccuracy {
    pub p: f64,
    pub mean: f64,
    pub per_trial: Vec<f64>,
}

/// Accuracy with every weight read corrupted independently at rate `p`.
/// Trial `t` reads sample `i` through stream `(seed, t, layer, i)`.
pub fn accuracy_under_ber(
    model: &BnnModel,
    data: &Dataset,
    p: f64,
    trials: usize,
    seed: u64,
    scope: FaultScope,
) -> Result<BerAccuracy, MetricsError> {
    check_data(model, data)?;
    if trials == 0 {
        return Err(MetricsError::NoTrials);
    }
    let cfg = FaultConfig::new(p, seed)?.with_scope(scope);
    let per_trial = (0..trials)
        .map(|t| {
            let hits: u64 = (0..data.len())
                .into_par_iter()
                .map(|i| {
                    let fault = ReadFault {
                        cfg,
                        trial: t as u64,
                        sample: i as u64,
                    };
                    let out = model.forward(data.image(i), Some(&fault), false)?;
                    Ok((out.predicted() == data.label(i)) as u64)
                })
                .sum::<Result<u64, MetricsError>>()?;
            Ok(hits as f64 / data.len() as f64)
        })
        .collect::<Result<Vec<f64>, MetricsError>>()?;
    Ok(BerAccuracy {
        p,
        mean: per_trial.iter().sum::<f64>() / trials as f64,
        per_trial,
    })
}

pub fn ber_sweep(
    model: &BnnModel,
    data: &Dataset,
    bers: &[f64],
    trials: usize,
    seed: u64,
    scope: FaultScope,
) -> Result<Vec<BerAccuracy>, MetricsError> {
    bers.iter()
        .map(|&p| accuracy_under_ber(model, data, p, trials, seed, scope))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Split;
    use crate::model::{Architecture, Direction, Shape3};
    use crate::oracle::naive_variance;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace_of(h: Vec<i64>, s: i32, neurons: usize, positions: usize, first_layer: bool) -> ForwardTrace {
        ForwardTrace {
            layers: vec![TraceLayer {
                layer: 1,
                first_layer,
                neurons,
                positions,
                h,
                thresholds: vec![s; neurons],
                directions: vec![Direction::Pos; neurons],
            }],
        }
    }

    fn random_data(model: &BnnModel, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = model.input_shape();
        let z = model.z();
        let images = (0..n * shape.len()).map(|_| rng.gen_range(0..=z) as u8).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..model.classes()) as u8).collect();
        Dataset::new(shape, model.classes(), z, Split::Test, images, labels).unwrap()
    }

    #[test]
    fn position_tolerance_examples() {
        assert_eq!(position_tolerance(5, 0, false, 255).value(), 4.5);
        assert_eq!(position_tolerance(7, 7, false, 255).value(), 0.5);
        let t = position_tolerance(510, 0, true, 255);
        assert_eq!((t.numer, t.denom), (1019, 510));
        assert!((t.value() - 509.5 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn exact_comparison_at_equality() {
        // 2.5 is exactly reachable: h − s − 1/2 = 2.5 at h = 3, s = 0
        let t = position_tolerance(3, 0, false, 1);
        assert!(t.at_least(2.5));
        assert!(!t.at_least(2.5000001));
        // first layer: |2·6 − 0 − 1| / (2·3) = 11/6
        let t = position_tolerance(6, 0, true, 3);
        assert!(t.at_least(11.0 / 6.0 - 1e-12) && !t.at_least(1.84));
    }

    #[test]
    fn neuron_tolerance_examples() {
        let ts: Vec<_> = [(5, 0), (0, 0), (3, 0)]
            .iter()
            .map(|&(h, s)| position_tolerance(h, s, false, 1))
            .collect();
        assert_eq!(ts.iter().map(|t| t.value()).collect::<Vec<_>>(), [4.5, 0.5, 2.5]);
        assert!((neuron_tolerance(&ts, 2.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(neuron_tolerance(&ts, 0.0).unwrap(), 1.0);
        assert_eq!(neuron_tolerance(&[], 1.0), Err(MetricsError::Empty("position list")));
    }

    #[test]
    fn single_neuron_tuple() {
        let grid = BGrid::new(vec![2.0, 4.0, 8.0]).unwrap();
        let it = input_tolerance(&trace_of(vec![5], 0, 1, 1, false), 255, &grid).unwrap();
        assert_eq!(it.tuple, [1.0, 1.0, 0.0]);
        let report = aggregate(vec![it.clone(), it], &grid);
        assert_eq!(report.tuple, [1.0, 1.0, 0.0]);
        assert!((report.tbar - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tbar_examples() {
        assert!((summary_tbar(&[1.0, 1.0, 0.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(summary_tbar(&[0.0; 6]), 0.0);
    }

    #[test]
    fn grid_validation() {
        assert!(BGrid::new(vec![]).is_err());
        assert!(BGrid::new(vec![2.0, 2.0]).is_err());
        assert!(BGrid::new(vec![4.0, 2.0]).is_err());
        assert!(BGrid::new(vec![0.0, 2.0]).is_err());
        assert_eq!(BGrid::default().values(), [2.0, 4.0, 8.0, 16.0, 32.0, 64.0]);
        let g: BGrid = serde_json::from_str("[1.5, 3]").unwrap();
        assert_eq!(g.values(), [1.5, 3.0]);
        assert!(serde_json::from_str::<BGrid>("[3, 1]").is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(importance_variance(&[0.1, 0.1]).unwrap(), 0.0);
        assert!((importance_variance(&[0.0, 0.2]).unwrap() - 0.01).abs() < 1e-15);
        assert!(importance_variance(&[]).is_err());
    }

    #[test]
    fn variance_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen_range(-0.5..1.0)).collect();
        let (a, b) = (importance_variance(&v).unwrap(), naive_variance(&v).unwrap());
        assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
    }

    #[test]
    fn importance_formula() {
        // Π = (A − A*)/A on exact counts
        let pi = |a: f64, a_star: f64| (a - a_star) / a;
        assert!((pi(0.9, 0.45) - 0.5).abs() < 1e-15);
        assert_eq!(pi(0.9, 0.9), 0.0);
        assert!((pi(0.9, 0.92) + 0.0222).abs() < 1e-4);
    }

    #[test]
    fn importance_counts_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = Architecture::parse("In-C2-MP2-FC3-4").unwrap();
        let model = BnnModel::random(&arch, Shape3::new(1, 4, 4), 3, &mut rng).unwrap();
        // labels = clean predictions, so A = 1
        let probe = random_data(&model, 40, 6);
        let labels = (0..probe.len()).map(|i| model.predict(probe.image(i)).unwrap() as u8).collect();
        let data = Dataset::new(probe.shape(), 4, 3, Split::Test, probe.pixels().to_vec(), labels).unwrap();
        let r = neuron_importance(&model, &data, ImportanceUnit::Neuron).unwrap();
        assert_eq!(r.values.len(), model.hidden_neurons());
        assert_eq!(r.clean_accuracy, 1.0);
        // recompute each Π with the public inverted forward
        for (id, &v) in r.units.iter().zip(&r.values) {
            let pos = if id.layer == 1 { 16 } else { 1 };
            let inv = Inversion {
                layer: id.layer,
                bits: (id.neuron * pos..(id.neuron + 1) * pos).collect(),
            };
            let hits = (0..data.len())
                .filter(|&i| argmax(&model.forward_inverted(data.image(i), &inv).unwrap()) == data.label(i))
                .count();
            assert!((v - (40.0 - hits as f64) / 40.0).abs() < 1e-15);
        }
        let per_pos = neuron_importance(&model, &data, ImportanceUnit::Position).unwrap();
        assert_eq!(per_pos.values.len(), 2 * 16 + 3);
    }

    #[test]
    fn zero_accuracy_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = BnnModel::random(&Architecture::parse("In-FC4-3").unwrap(), Shape3::flat(5), 3, &mut rng).unwrap();
        let probe = random_data(&model, 10, 1);
        let labels = (0..10)
            .map(|i| ((model.predict(probe.image(i)).unwrap() + 1) % 3) as u8)
            .collect();
        let data = Dataset::new(probe.shape(), 3, 3, Split::Test, probe.pixels().to_vec(), labels).unwrap();
        assert_eq!(
            neuron_importance(&model, &data, ImportanceUnit::Neuron),
            Err(MetricsError::ZeroAccuracy)
        );
    }

    #[test]
    fn zero_ber_is_clean_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = BnnModel::random(&Architecture::parse("In-FC16-FC16-4").unwrap(), Shape3::flat(20), 255, &mut rng).unwrap();
        let data = random_data(&model, 200, 4);
        let clean = accuracy(&model, &data).unwrap();
        let r = accuracy_under_ber(&model, &data, 0.0, 3, 1, FaultScope::Weights).unwrap();
        assert!(r.per_trial.iter().all(|&a| a == clean));
        assert_eq!(r.mean, clean);
    }

    #[test]
    fn half_ber_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = BnnModel::random(&Architecture::parse("In-FC32-FC32-10").unwrap(), Shape3::flat(30), 255, &mut rng).unwrap();
        let data = random_data(&model, 500, 3);
        let r = accuracy_under_ber(&model, &data, 0.5, 4, 8, FaultScope::Weights).unwrap();
        assert!((r.mean - 0.10).abs() < 0.03, "{}", r.mean);
    }

    #[test]
    fn ber_runs_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = BnnModel::random(&Architecture::parse("In-FC8-FC8-3").unwrap(), Shape3::flat(12), 255, &mut rng).unwrap();
        let data = random_data(&model, 100, 2);
        let a = ber_sweep(&model, &data, &[0.05, 0.2], 2, 77, FaultScope::Weights).unwrap();
        let b = ber_sweep(&model, &data, &[0.05, 0.2], 2, 77, FaultScope::Weights).unwrap();
        assert_eq!(a, b);
    }

    fn monotone(rows: &[Vec<f64>]) -> bool {
        rows.iter().all(|r| r.windows(2).all(|w| w[0] >= w[1]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tolerance_monotone_in_b(seed in any::<u64>(), conv in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (arch, shape) = if conv {
                ("In-C3-MP2-FC5-3", Shape3::new(1, 4, 4))
            } else {
                ("In-FC6-FC4-3", Shape3::flat(10))
            };
            let model = BnnModel::random(&Architecture::parse(arch).unwrap(), shape, 7, &mut rng).unwrap();
            let data = random_data(&model, 8, seed ^ 1);
            let grid = BGrid::new(vec![0.5, 1.0, 2.0, 3.0, 5.0]).unwrap();
            let r = dataset_tolerance(&model, &data, &grid).unwrap();
            prop_assert!(monotone(&[r.tuple.clone()]));
            prop_assert!(monotone(&r.per_input));
            prop_assert!(monotone(&r.per_neuron));
            prop_assert!(r.tuple.iter().all(|t| (0.0..=1.0).contains(t)));
        }

        #[test]
        fn neuron_tolerance_matches_recount(
            hs in proptest::collection::vec(-40i64..40, 1..30),
            s in -10i64..10,
            b in 0.0f64..20.0,
        ) {
            let ts: Vec<_> = hs.iter().map(|&h| position_tolerance(h, s, false, 1)).collect();
            let naive = hs.iter().filter(|&&h| (h as f64 - s as f64 - 0.5).abs() >= b).count();
            prop_assert_eq!(neuron_tolerance(&ts, b).unwrap(), naive as f64 / hs.len() as f64);
        }

        #[test]
        fn variance_order_invariant(mut v in proptest::collection::vec(-1.0f64..1.0, 1..200), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = importance_variance(&v).unwrap();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = importance_variance(&v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }
}
