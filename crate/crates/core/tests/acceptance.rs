//! Acceptance gate. Runs every criterion at its pinned tolerance, prints one
//! PASS/FAIL line per criterion and fails if any gated criterion fails.
//!
//! Criteria 6 to 8 train on FashionMNIST from `BITTOL_FASHION_DIR` or
//! `<workspace>/data/fashion`. Without the data they fail, unless
//! `BITTOL_SKIP_DATASET_CRITERIA=1` turns them into SKIP lines.

use std::path::PathBuf;
use std::time::Instant;

use bittol::bitcore::apply_mask_xor;
use bittol::dataio::{load_fashion_dir, Dataset, Split};
use bittol::fault::{sample_flip_mask, sample_flip_mask_for, Domain, FaultScope, StreamId};
use bittol::metrics::{
    ber_sweep, dataset_tolerance, importance_variance, neuron_importance, BGrid, ImportanceUnit,
};
use bittol::oracle::{dense_forward, naive_variance, run_theorem_harness, DenseModel, FlipTarget, HarnessConfig};
use bittol::trainer::{train, TrainConfig};
use bittol::{Architecture, BitMatrix, BnnModel, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
    Logged,
}

struct Line {
    id: &'static str,
    status: Status,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: &'static str, ok: bool, detail: String) {
    let status = if ok { Status::Pass } else { Status::Fail };
    print_line(id, &status, &detail);
    lines.push(Line { id, status, detail });
}

fn print_line(id: &str, status: &Status, detail: &str) {
    let tag = match status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
        Status::Logged => "LOG ",
    };
    println!("[{tag}] {id}: {detail}");
}

// ---------------------------------------------------------------------------
// 1. exhaustive flip-bound certification
// ---------------------------------------------------------------------------

fn theorem(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let base = run_theorem_harness(&HarnessConfig::default()).unwrap();
    let base_secs = start.elapsed().as_secs_f64();
    let inputs = run_theorem_harness(&HarnessConfig {
        target: FlipTarget::Inputs,
        ..HarnessConfig::default()
    })
    .unwrap();
    let first = run_theorem_harness(&HarnessConfig {
        first_layer: true,
        z: 3,
        ..HarnessConfig::default()
    })
    .unwrap();
    let witnesses = base.witnesses.len() + inputs.witnesses.len() + first.witnesses.len();
    let ok = witnesses == 0 && base_secs < 60.0 && base.checked > 0 && first.checked > 0;
    report(
        lines,
        "1 flip bound certification",
        ok,
        format!(
            "witnesses {witnesses}; checked {} hidden / {} input-flip / {} first-layer (b, input, neuron) triples; \
             hidden run {base_secs:.2}s, all {:.1}s",
            base.checked,
            inputs.checked,
            first.checked,
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. packed vs dense forward
// ---------------------------------------------------------------------------

fn random_input(model: &BnnModel, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..model.input_shape().len())
        .map(|_| rng.gen_range(0..=model.z()) as u8)
        .collect()
}

fn kernel_equivalence(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let widths = |rng: &mut ChaCha8Rng| -> usize {
        if rng.gen_bool(0.3) {
            [63, 64, 65][rng.gen_range(0..3)]
        } else {
            rng.gen_range(1..=70)
        }
    };
    let mut mismatches = 0;
    let mut boundary = 0;
    for _ in 0..1000 {
        let inputs = widths(&mut rng);
        let hidden: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| widths(&mut rng)).collect();
        boundary += hidden.iter().chain([&inputs]).filter(|w| (63..=65).contains(*w)).count();
        let arch: String = std::iter::once("In".to_string())
            .chain(hidden.iter().map(|h| format!("FC{h}")))
            .chain(std::iter::once(rng.gen_range(2..=10).to_string()))
            .collect::<Vec<_>>()
            .join("-");
        let z = if rng.gen_bool(0.5) { 255 } else { rng.gen_range(1..=255) };
        let model = BnnModel::random(&Architecture::parse(&arch).unwrap(), Shape3::flat(inputs), z, &mut rng).unwrap();
        let dense = DenseModel::from_model(&model);
        for _ in 0..3 {
            let x = random_input(&model, &mut rng);
            if model.forward(&x, None, false).unwrap().scores != dense_forward(&dense, &x) {
                mismatches += 1;
            }
        }
    }
    let conv_archs = [
        "In-C3-MP2-FC8-4",
        "In-C4-C2-MP2-FC5-3",
        "In-C2-MP2-C3-MP2-FC6-5",
        "In-C5-FC4-2",
        "In-C8-MP2-C8-FC65-10",
    ];
    let mut conv_mismatches = 0;
    for k in 0..100 {
        let arch = Architecture::parse(conv_archs[k % conv_archs.len()]).unwrap();
        let c = rng.gen_range(1..=3);
        let side = 4 * rng.gen_range(1..=2);
        let z = rng.gen_range(1..=255);
        let model = BnnModel::random(&arch, Shape3::new(c, side, side + 4), z, &mut rng).unwrap();
        let dense = DenseModel::from_model(&model);
        for _ in 0..3 {
            let x = random_input(&model, &mut rng);
            if model.forward(&x, None, false).unwrap().scores != dense_forward(&dense, &x) {
                conv_mismatches += 1;
            }
        }
    }
    report(
        lines,
        "2 kernel equivalence",
        mismatches == 0 && conv_mismatches == 0 && boundary > 0,
        format!(
            "1000 FCBNNs x 3 inputs: {mismatches} mismatches ({boundary} layers at fan-in 63/64/65); \
             100 CBNNs x 3 inputs: {conv_mismatches} mismatches"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. fault statistics
// ---------------------------------------------------------------------------

fn fault_statistics(lines: &mut Vec<Line>) {
    let n = 1_000_000f64;
    let mut details = Vec::new();
    let mut ok = true;
    for (k, p) in [0.01, 0.05, 0.20].into_iter().enumerate() {
        let id = StreamId::derive(99, Domain::Inference, 0, k as u64, 0);
        let mask = sample_flip_mask(1000, 1000, p, &mut id.rng()).unwrap();
        let frac = mask.count() as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        let within = (frac - p).abs() <= 3.0 * sigma;
        ok &= within;
        details.push(format!("p={p}: {frac:.6} ({:+.2} sigma)", (frac - p) / sigma));
        // same stream, same mask
        ok &= sample_flip_mask(1000, 1000, p, &mut id.rng()).unwrap() == mask;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..40), rng.gen_range(1..200));
        let w = BitMatrix::from_fn(r, c, |_, _| rng.gen());
        let mask = sample_flip_mask_for(&w, rng.gen_range(0.0..1.0), StreamId(rng.gen())).unwrap();
        ok &= apply_mask_xor(&apply_mask_xor(&w, &mask).unwrap(), &mask).unwrap() == w;
    }
    report(
        lines,
        "3 fault statistics",
        ok,
        format!("{}; determinism and involution exact", details.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 4. variance oracle
// ---------------------------------------------------------------------------

fn variance_oracle(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f64;
    for k in 0..100 {
        let len = if k == 0 { 10_000 } else { rng.gen_range(2..=10_000) };
        let (centre, spread) = (rng.gen_range(-1.0..1.0), 10f64.powf(rng.gen_range(-4.0..0.0)));
        let v: Vec<f64> = (0..len).map(|_| centre + spread * rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (importance_variance(&v).unwrap(), naive_variance(&v).unwrap());
        worst = worst.max((a - b).abs() / b.abs());
    }
    report(
        lines,
        "4 variance oracle agreement",
        worst < 1e-12,
        format!("max relative error {worst:.3e} over 100 inputs up to length 1e4"),
    );
}

// ---------------------------------------------------------------------------
// 5. monotonicity in b
// ---------------------------------------------------------------------------

fn monotone(rows: &[Vec<f64>]) -> bool {
    rows.iter().all(|r| r.windows(2).all(|w| w[0] >= w[1]))
}

fn monotonicity(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let archs = [
        ("In-FC16-FC8-4", Shape3::flat(30)),
        ("In-FC40-3", Shape3::flat(12)),
        ("In-C4-MP2-FC6-3", Shape3::new(1, 6, 6)),
        ("In-C3-C3-MP2-FC5-4", Shape3::new(2, 4, 4)),
    ];
    let grid = BGrid::new(vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]).unwrap();
    let mut violations = 0;
    for k in 0..50 {
        let (arch, shape) = archs[k % archs.len()];
        let arch = Architecture::parse(arch).unwrap();
        let z = rng.gen_range(1..=255);
        let model = BnnModel::random(&arch, shape, z, &mut rng).unwrap();
        let images = (0..20 * shape.len()).map(|_| rng.gen_range(0..=z) as u8).collect();
        let labels = (0..20).map(|_| rng.gen_range(0..arch.classes) as u8).collect();
        let data = Dataset::new(shape, arch.classes, z, Split::Test, images, labels).unwrap();
        let r = dataset_tolerance(&model, &data, &grid).unwrap();
        if !(monotone(&[r.tuple.clone()]) && monotone(&r.per_input) && monotone(&r.per_neuron)) {
            violations += 1;
        }
    }
    report(
        lines,
        "5 monotonicity in b",
        violations == 0,
        format!("{violations} violations over 50 random models at tuple, input and neuron level"),
    );
}

// ---------------------------------------------------------------------------
// 6 to 8. trained FCBNNs on FashionMNIST
// ---------------------------------------------------------------------------

const SWEEP: [f64; 5] = [0.0, 0.01, 0.05, 0.1, 0.2];
const TRIALS: usize = 10;

struct Trained {
    tbar: f64,
    var_pi: f64,
    sweep: Vec<f64>,
    clean: f64,
}

fn train_and_measure(arch: &str, ber: f64, seed: u64, train_set: &Dataset, test_set: &Dataset) -> Trained {
    let cfg = TrainConfig {
        ber_train: ber,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&Architecture::parse(arch).unwrap(), train_set, None, &cfg, |_| {}).unwrap();
    let model = out.model;
    let tol = dataset_tolerance(&model, test_set, &BGrid::default()).unwrap();
    let imp = neuron_importance(&model, test_set, ImportanceUnit::Neuron).unwrap();
    let sweep = ber_sweep(&model, test_set, &SWEEP, TRIALS, 1000 + seed, FaultScope::Weights).unwrap();
    Trained {
        tbar: tol.tbar,
        var_pi: imp.variance,
        sweep: sweep.iter().map(|b| b.mean).collect(),
        clean: imp.clean_accuracy,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn within_envelope(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo / 3.0 && x <= hi * 3.0
}

fn fashion_dir() -> PathBuf {
    std::env::var_os("BITTOL_FASHION_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion"))
}

fn trained_criteria(lines: &mut Vec<Line>) {
    let ids = [
        "6a tolerance trend (T-bar)",
        "6b importance variance trend",
        "7 accuracy over BER",
        "8 size boundary (64,64)",
    ];
    let (train_set, test_set) = match load_fashion_dir(&fashion_dir()) {
        Ok(d) => d,
        Err(e) => {
            let skip = std::env::var("BITTOL_SKIP_DATASET_CRITERIA").is_ok_and(|v| v == "1");
            for id in ids {
                let detail = format!("FashionMNIST not available ({e})");
                if skip {
                    print_line(id, &Status::Skip, &detail);
                    lines.push(Line { id, status: Status::Skip, detail });
                } else {
                    report(lines, id, false, detail);
                }
            }
            return;
        }
    };

    let start = Instant::now();
    let seeds = [1u64, 2, 3];
    let base: Vec<Trained> = seeds.iter().map(|&s| train_and_measure("In-FC8-FC8-10", 0.0, s, &train_set, &test_set)).collect();
    let flip: Vec<Trained> = seeds.iter().map(|&s| train_and_measure("In-FC8-FC8-10", 0.2, s, &train_set, &test_set)).collect();
    for (name, runs) in [("0%", &base), ("20%", &flip)] {
        for (s, r) in seeds.iter().zip(runs.iter()) {
            println!(
                "       8,8 trained at {name:>3}, seed {s}: clean {:.4}  T-bar {:.4}  VAR(Pi) {:.3e}  sweep {:?}",
                r.clean,
                r.tbar,
                r.var_pi,
                r.sweep.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
            );
        }
    }
    let (t0, t20) = (mean(base.iter().map(|r| r.tbar)), mean(flip.iter().map(|r| r.tbar)));
    let (v0, v20) = (mean(base.iter().map(|r| r.var_pi)), mean(flip.iter().map(|r| r.var_pi)));
    let envelope = [
        within_envelope(t0, 0.210, 0.245),
        within_envelope(t20, 0.260, 0.369),
        within_envelope(v0, 0.00795, 0.0222),
        within_envelope(v20, 0.000627, 0.00265),
    ];
    report(
        lines,
        ids[0],
        t20 > t0,
        format!("mean T-bar {t20:.4} (20%) vs {t0:.4} (0%); within x3 of reference envelope: {}/{}", envelope[0], envelope[1]),
    );
    report(
        lines,
        ids[1],
        v20 < v0,
        format!("mean VAR(Pi) {v20:.3e} (20%) vs {v0:.3e} (0%); within x3 of reference envelope: {}/{}", envelope[2], envelope[3]),
    );

    let at10 = SWEEP.iter().position(|&p| p == 0.1).unwrap();
    let (a0, a20) = (mean(base.iter().map(|r| r.sweep[at10])), mean(flip.iter().map(|r| r.sweep[at10])));
    let non_increasing = base
        .iter()
        .chain(flip.iter())
        .all(|r| r.sweep.windows(2).all(|w| w[1] <= w[0] + 0.01));
    report(
        lines,
        ids[2],
        a20 > a0 && non_increasing,
        format!(
            "mean accuracy at 10% test BER ({TRIALS} trials): {a20:.4} (20%-trained) vs {a0:.4} (0%-trained); \
             all six sweeps non-increasing within 1 pp: {non_increasing}"
        ),
    );
    println!("       8,8 runs took {:.0}s", start.elapsed().as_secs_f64());

    let big0 = train_and_measure("In-FC64-FC64-10", 0.0, 1, &train_set, &test_set);
    let big20 = train_and_measure("In-FC64-FC64-10", 0.2, 1, &train_set, &test_set);
    let detail = format!(
        "not gated; VAR(Pi) {:.3e} (20%) vs {:.3e} (0%), T-bar {:.4} vs {:.4}; smaller under flip training: {}; \
         accuracy at 10% test BER {:.4} vs {:.4}",
        big20.var_pi,
        big0.var_pi,
        big20.tbar,
        big0.tbar,
        big20.var_pi < big0.var_pi,
        big20.sweep[at10],
        big0.sweep[at10]
    );
    print_line(ids[3], &Status::Logged, &detail);
    lines.push(Line {
        id: ids[3],
        status: Status::Logged,
        detail,
    });
    println!("       trained criteria took {:.0}s", start.elapsed().as_secs_f64());
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    theorem(&mut lines);
    kernel_equivalence(&mut lines);
    fault_statistics(&mut lines);
    variance_oracle(&mut lines);
    monotonicity(&mut lines);
    trained_criteria(&mut lines);

    println!("\nsummary:");
    for l in &lines {
        print_line(l.id, &l.status, &l.detail);
    }
    let failed: Vec<&str> = lines.iter().filter(|l| l.status == Status::Fail).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
