//! `bittol` subcommands. Every command that writes files also writes a
//! `manifest.json` recording the exact flags, so a run can be repeated.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 verification witness found.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataio::{
    load_cifar10_dir, load_fashion_dir, load_model, read_json, save_model, synth_blobs, write_csv,
    write_json, DataError, Dataset,
};
use crate::fault::FaultScope;
use crate::metrics::{
    accuracy, accuracy_under_ber, ber_sweep, dataset_tolerance, neuron_importance, BGrid,
    ImportanceReport, ImportanceUnit, MetricsError, ToleranceReport,
};
use crate::model::{Architecture, BnnModel, ModelError};
use crate::oracle::{run_theorem_harness, FlipTarget, HarnessConfig, OracleError};
use crate::trainer::{train, TrainConfig, TrainError, TrainingLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_WITNESS: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Witness(usize),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Witness(_) => EXIT_WITNESS,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Witness(n) => write!(f, "{n} counterexample(s) found"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "bittol", version, about = "Bit error tolerance of binarized neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train a BNN, optionally with bit flips injected during training.
    Train(TrainArgs),
    /// Test accuracy of a model, optionally under a bit error rate.
    Eval(EvalArgs),
    /// Accuracy over a list of bit error rates, several trials each.
    SweepBer(SweepArgs),
    /// Tolerance tuple, T-bar and neuron importance of a model.
    Metrics(MetricsArgs),
    /// Neuron importance values and their variance.
    Importance(ImportanceArgs),
    /// Exhaustively check the flip bound on random neurons.
    VerifyTheorem(VerifyArgs),
    /// Summarise metrics.json files grouped by label.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::SweepBer(_) => "sweep-ber",
            Command::Metrics(_) => "metrics",
            Command::Importance(_) => "importance",
            Command::VerifyTheorem(_) => "verify-theorem",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// `fashion`, `cifar10`, `blobs`, or a directory holding IDX or CIFAR-10 binary files.
    #[arg(long, default_value = "fashion")]
    pub data: String,
    /// Directory for `fashion` / `cifar10`; defaults to $BITTOL_FASHION_DIR,
    /// $BITTOL_CIFAR_DIR or data/<name>.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N evaluation images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Architecture such as In-FC8-FC8-10 or In-C64-MP2-FC2048-10.
    #[arg(long)]
    pub arch: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.0)]
    pub ber_train: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 25)]
    pub lr_halving: usize,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeArg {
    Weights,
    WeightsAndActivations,
}

impl From<ScopeArg> for FaultScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Weights => FaultScope::Weights,
            ScopeArg::WeightsAndActivations => FaultScope::WeightsAndActivations,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.0)]
    pub ber: f64,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ScopeArg::Weights)]
    pub scope: ScopeArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.2")]
    pub bers: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ScopeArg::Weights)]
    pub scope: ScopeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitArg {
    /// Invert a whole feature map per filter.
    Neuron,
    /// Invert one output position per filter.
    Position,
}

impl From<UnitArg> for ImportanceUnit {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::Neuron => ImportanceUnit::Neuron,
            UnitArg::Position => ImportanceUnit::Position,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct MetricsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    pub grid: Vec<f64>,
    /// Compute tolerance only.
    #[arg(long)]
    pub skip_importance: bool,
    #[arg(long, value_enum, default_value_t = UnitArg::Neuron)]
    pub unit: UnitArg,
    /// Group key used by `report`.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = UnitArg::Neuron)]
    pub unit: UnitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    pub neurons: usize,
    #[arg(long, default_value_t = 9)]
    pub fan_in: usize,
    /// Integer first-layer neurons with inputs in 0..=Z.
    #[arg(long)]
    pub first_layer: bool,
    #[arg(long, default_value_t = 3)]
    pub z: u32,
    /// Flip binary inputs instead of weights.
    #[arg(long)]
    pub flip_inputs: bool,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// metrics.json files or directories containing one.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub arch: Option<String>,
    pub data: Vec<String>,
    pub out: Option<PathBuf>,
    pub flags: Value,
}

impl RunManifest {
    fn new(cmd: &Command) -> Self {
        let flags = serde_json::to_value(cmd).expect("flags serialize");
        let flags = flags.get(cmd.name()).cloned().unwrap_or(flags);
        let (seed, arch, data, out) = match cmd {
            Command::Train(a) => (Some(a.seed), Some(a.arch.clone()), data_desc(&a.data), Some(a.out.clone())),
            Command::Eval(a) => (Some(a.seed), None, data_desc(&a.data), a.out.clone()),
            Command::SweepBer(a) => (Some(a.seed), None, data_desc(&a.data), Some(a.out.clone())),
            Command::Metrics(a) => (None, None, data_desc(&a.data), Some(a.out.clone())),
            Command::Importance(a) => (None, None, data_desc(&a.data), Some(a.out.clone())),
            Command::VerifyTheorem(a) => (Some(a.seed), None, vec![], a.out.clone()),
            Command::Report(a) => (None, None, a.inputs.iter().map(|p| p.display().to_string()).collect(), a.out.clone()),
        };
        Self {
            tool: "bittol".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: cmd.name().into(),
            seed,
            arch,
            data,
            out,
            flags,
        }
    }

    fn with_arch(mut self, arch: &Architecture) -> Self {
        self.arch = Some(arch.to_string());
        self
    }
}

fn data_desc(d: &DataArgs) -> Vec<String> {
    match &d.data_dir {
        Some(dir) => vec![format!("{}:{}", d.data, dir.display())],
        None => vec![d.data.clone()],
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("bittol: {e}");
            e.code()
        }
    }
}

/// Caps the global worker pool at `$BITTOL_THREADS`.
fn configure_threads() {
    if let Some(n) = std::env::var("BITTOL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    let manifest = RunManifest::new(cmd);
    match cmd {
        Command::Train(a) => cmd_train(a, manifest),
        Command::Eval(a) => cmd_eval(a, manifest),
        Command::SweepBer(a) => cmd_sweep_ber(a, manifest),
        Command::Metrics(a) => cmd_metrics(a, manifest),
        Command::Importance(a) => cmd_importance(a, manifest),
        Command::VerifyTheorem(a) => cmd_verify_theorem(a, manifest),
        Command::Report(a) => cmd_report(a, manifest),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn env_dir(var: &str, fallback: &str) -> PathBuf {
    std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(fallback))
}

/// Loads `(train, test)` for a dataset name or directory.
pub fn load_data(args: &DataArgs) -> Result<(Dataset, Dataset)> {
    let (train, test) = match args.data.as_str() {
        "fashion" => load_fashion_dir(&args.data_dir.clone().unwrap_or_else(|| env_dir("BITTOL_FASHION_DIR", "data/fashion")))?,
        "cifar10" => load_cifar10_dir(&args.data_dir.clone().unwrap_or_else(|| env_dir("BITTOL_CIFAR_DIR", "data/cifar10")))?,
        "blobs" => {
            // fixed data seed so every model sees the same problem
            let all = synth_blobs(10, 3000, 16, 8.0, 0)?;
            let idx: Vec<usize> = (0..all.len()).collect();
            (all.select(&idx[..2500]), all.select(&idx[2500..]))
        }
        other => {
            let dir = Path::new(other);
            if dir.join("train-images-idx3-ubyte").exists() {
                load_fashion_dir(dir)?
            } else if dir.join("data_batch_1.bin").exists() {
                load_cifar10_dir(dir)?
            } else {
                return Err(CliError::Usage(format!(
                    "unknown dataset {other:?}: expected fashion, cifar10, blobs or a dataset directory"
                )));
            }
        }
    };
    let test = match args.limit {
        Some(n) => test.head(n),
        None => test,
    };
    Ok((train, test))
}

fn parse_arch(s: &str) -> Result<Architecture> {
    Architecture::parse(s).map_err(|e: ModelError| CliError::Usage(e.to_string()))
}

fn open_model(path: &Path) -> Result<BnnModel> {
    Ok(load_model(path)?)
}

fn check_ber(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("bit error rate {p} outside [0, 1]")))
    }
}

fn cmd_train(a: &TrainArgs, manifest: RunManifest) -> Result<()> {
    let arch = parse_arch(&a.arch)?;
    check_ber(a.ber_train)?;
    let (train_set, test_set) = load_data(&a.data)?;
    let train_set = match a.train_limit {
        Some(n) => train_set.head(n),
        None => train_set,
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        lr_halving: a.lr_halving,
        ber_train: a.ber_train,
        seed: a.seed,
        ..TrainConfig::default()
    };
    prepare_out(&a.out)?;
    let quiet = a.quiet;
    let out = train(&arch, &train_set, Some(&test_set), &cfg, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  train {:.4}  test {:.4}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_acc,
                e.test_acc.unwrap_or(f64::NAN)
            );
        }
    })?;
    save_model(&out.model, &a.out.join("model.bnn"))?;
    write_csv(&a.out.join("train_log.csv"), &TrainingLog::HEADER, &out.log.rows())?;
    write_json(&a.out.join("manifest.json"), &manifest.with_arch(&arch))?;
    let last = out.log.epochs.last();
    println!(
        "trained {} for {} epochs at BER {}: test accuracy {:.4}",
        arch,
        a.epochs,
        a.ber_train,
        last.and_then(|e| e.test_acc).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, manifest: RunManifest) -> Result<()> {
    check_ber(a.ber)?;
    let model = open_model(&a.model)?;
    let (_, test) = load_data(&a.data)?;
    let clean = accuracy(&model, &test)?;
    let report = if a.ber > 0.0 {
        let r = accuracy_under_ber(&model, &test, a.ber, a.trials, a.seed, a.scope.into())?;
        json!({ "clean_accuracy": clean, "ber": a.ber, "trials": a.trials, "mean": r.mean, "per_trial": r.per_trial })
    } else {
        json!({ "clean_accuracy": clean, "ber": 0.0 })
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("eval.json"), &report)?;
        write_json(&out.join("manifest.json"), &manifest.with_arch(model.arch()))?;
    }
    Ok(())
}

fn cmd_sweep_ber(a: &SweepArgs, manifest: RunManifest) -> Result<()> {
    for &p in &a.bers {
        check_ber(p)?;
    }
    let model = open_model(&a.model)?;
    let (_, test) = load_data(&a.data)?;
    let sweep = ber_sweep(&model, &test, &a.bers, a.trials, a.seed, a.scope.into())?;
    let mut rows = Vec::new();
    for s in &sweep {
        for (t, acc) in s.per_trial.iter().enumerate() {
            rows.push(vec![s.p.to_string(), t.to_string(), acc.to_string()]);
        }
        rows.push(vec![s.p.to_string(), "mean".into(), s.mean.to_string()]);
        println!("ber {:<6} mean accuracy {:.4}", s.p, s.mean);
    }
    prepare_out(&a.out)?;
    write_csv(&a.out.join("sweep.csv"), &["ber", "trial", "accuracy"], &rows)?;
    write_json(&a.out.join("manifest.json"), &manifest.with_arch(model.arch()))?;
    Ok(())
}

fn grid_header(grid: &BGrid) -> Vec<String> {
    grid.values().iter().map(|b| format!("T^{b}")).collect()
}

fn neuron_ids(model: &BnnModel) -> Vec<(usize, usize)> {
    model
        .threshold_layers()
        .flat_map(|(l, t)| (0..t.shape.c).map(move |n| (l, n)))
        .collect()
}

fn tolerance_json(model: &BnnModel, r: &ToleranceReport) -> Value {
    let neurons: Vec<Value> = neuron_ids(model)
        .into_iter()
        .zip(&r.per_neuron)
        .map(|((layer, neuron), t)| json!({ "layer": layer, "neuron": neuron, "tolerance": t }))
        .collect();
    json!({ "grid": r.grid.values(), "tuple": r.tuple, "tbar": r.tbar, "inputs": r.per_input.len(), "neurons": neurons })
}

fn write_tolerance_csv(path: &Path, model: &BnnModel, r: &ToleranceReport) -> Result<()> {
    let mut header = vec!["layer".to_string(), "neuron".to_string()];
    header.extend(grid_header(&r.grid));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut rows = vec![[vec!["all".to_string(), "all".to_string()], fmt(&r.tuple)].concat()];
    for ((layer, neuron), t) in neuron_ids(model).into_iter().zip(&r.per_neuron) {
        rows.push([vec![layer.to_string(), neuron.to_string()], fmt(t)].concat());
    }
    Ok(write_csv(path, &header, &rows)?)
}

fn write_importance_csv(path: &Path, r: &ImportanceReport) -> Result<()> {
    let rows: Vec<Vec<String>> = r
        .units
        .iter()
        .zip(&r.values)
        .map(|(u, v)| {
            vec![
                u.layer.to_string(),
                u.neuron.to_string(),
                u.position.map_or(String::new(), |p| p.to_string()),
                v.to_string(),
            ]
        })
        .collect();
    Ok(write_csv(path, &["layer", "neuron", "position", "importance"], &rows)?)
}

fn cmd_metrics(a: &MetricsArgs, manifest: RunManifest) -> Result<()> {
    let grid = BGrid::new(a.grid.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = open_model(&a.model)?;
    let (_, test) = load_data(&a.data)?;
    let tol = dataset_tolerance(&model, &test, &grid)?;
    let imp = if a.skip_importance {
        None
    } else {
        Some(neuron_importance(&model, &test, a.unit.into())?)
    };
    prepare_out(&a.out)?;
    write_tolerance_csv(&a.out.join("tolerance.csv"), &model, &tol)?;
    if let Some(imp) = &imp {
        write_importance_csv(&a.out.join("importance.csv"), imp)?;
    }
    let label = a.label.clone().unwrap_or_else(|| model.arch().to_string());
    let doc = json!({
        "label": label,
        "arch": model.arch().to_string(),
        "model": a.model,
        "tolerance": tolerance_json(&model, &tol),
        "importance": imp,
    });
    write_json(&a.out.join("metrics.json"), &doc)?;
    write_json(&a.out.join("manifest.json"), &manifest.with_arch(model.arch()))?;
    println!(
        "T = ({})  T-bar {:.4}",
        tol.tuple.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(", "),
        tol.tbar
    );
    if let Some(imp) = &imp {
        println!("{} importance values, VAR(Pi) {:.6e}", imp.values.len(), imp.variance);
    }
    Ok(())
}

fn cmd_importance(a: &ImportanceArgs, manifest: RunManifest) -> Result<()> {
    let model = open_model(&a.model)?;
    let (_, test) = load_data(&a.data)?;
    let imp = neuron_importance(&model, &test, a.unit.into())?;
    prepare_out(&a.out)?;
    write_importance_csv(&a.out.join("importance.csv"), &imp)?;
    write_json(&a.out.join("importance.json"), &imp)?;
    write_json(&a.out.join("manifest.json"), &manifest.with_arch(model.arch()))?;
    println!(
        "clean accuracy {:.4}, {} values, mean {:.6}, VAR(Pi) {:.6e}",
        imp.clean_accuracy,
        imp.values.len(),
        imp.mean,
        imp.variance
    );
    Ok(())
}

fn cmd_verify_theorem(a: &VerifyArgs, manifest: RunManifest) -> Result<()> {
    if a.first_layer && a.flip_inputs {
        return Err(CliError::Usage("--flip-inputs is undefined for first-layer integer inputs".into()));
    }
    let cfg = HarnessConfig {
        neurons: a.neurons,
        fan_in: a.fan_in,
        first_layer: a.first_layer,
        z: a.z,
        grid: a.grid.clone(),
        target: if a.flip_inputs { FlipTarget::Inputs } else { FlipTarget::Weights },
        seed: a.seed,
    };
    let report = run_theorem_harness(&cfg)?;
    let status = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{status}: {} neurons, fan-in {}, {} checked, {} skipped, {} witnesses",
        cfg.neurons,
        cfg.fan_in,
        report.checked,
        report.skipped,
        report.witnesses.len()
    );
    let mut stdout = std::io::stdout().lock();
    for w in &report.witnesses {
        let _ = writeln!(stdout, "{}", serde_json::to_string(w).expect("json"));
    }
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("verify.json"), &report)?;
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Witness(report.witnesses.len()))
    }
}

#[derive(Default)]
struct Group {
    tbar: Vec<f64>,
    var: Vec<f64>,
    acc: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

fn cmd_report(a: &ReportArgs, manifest: RunManifest) -> Result<()> {
    let mut groups: Vec<(String, Group)> = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() { input.join("metrics.json") } else { input.clone() };
        let doc: Value = read_json(&path)?;
        let bad = || CliError::Data(format!("{}: not a metrics.json file", path.display()));
        let label = doc["label"].as_str().ok_or_else(bad)?.to_string();
        let tbar = doc["tolerance"]["tbar"].as_f64().ok_or_else(bad)?;
        let idx = match groups.iter().position(|(l, _)| *l == label) {
            Some(i) => i,
            None => {
                groups.push((label, Group::default()));
                groups.len() - 1
            }
        };
        let g = &mut groups[idx].1;
        g.tbar.push(tbar);
        if let Some(v) = doc["importance"]["variance"].as_f64() {
            g.var.push(v);
        }
        if let Some(c) = doc["importance"]["clean_accuracy"].as_f64() {
            g.acc.push(c);
        }
    }
    let header = ["label", "runs", "tbar_mean", "tbar_std", "var_pi_mean", "var_pi_std", "accuracy_mean"];
    let mut rows = Vec::new();
    println!("{}", header.join("\t"));
    for (label, g) in &groups {
        let (tm, ts) = mean_std(&g.tbar);
        let (vm, vs) = mean_std(&g.var);
        let (am, _) = mean_std(&g.acc);
        let row = vec![
            label.clone(),
            g.tbar.len().to_string(),
            tm.to_string(),
            ts.to_string(),
            vm.to_string(),
            vs.to_string(),
            am.to_string(),
        ];
        println!("{}", row.join("\t"));
        rows.push(row);
    }
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            prepare_out(dir)?;
        }
        write_csv(out, &header, &rows)?;
        write_json(&out.with_extension("manifest.json"), &manifest)?;
    }
    Ok(())
}
