//! Experiment runner: configuration, dataset ingestion and report emission.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use interspace::costs::{cost_report, model_forward_flops, pruning_rate, LayerCost, PruningRates};
use interspace::data::{load_idx, synth_dataset, Dataset, SynthSpec};
use interspace::model::{
    streams, BuildOptions, InitScheme, MetricsRow, Mode, ModelSpec, ModelState, Sharing, TrainConfig,
};
use interspace::schedules::{run_schedule, ScheduleConfig};
use interspace::sdl::{montecarlo_verify, theorem1_delta};
use interspace::sparsexec::{bench_speedup, BenchLayer, BenchRow};
use interspace::Rng;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, configuration or input files.
    #[error("{0}")]
    Usage(String),
    /// Failure while running a valid configuration.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Classifies a library error raised while executing a command.
fn classify(e: interspace::Error) -> CliError {
    use interspace::Error as E;
    match e {
        E::Param(_) | E::Config(_) | E::Format { .. } | E::Json(_) => usage(e),
        E::Numeric(_) | E::Shape(_) | E::Io(_) => runtime(e),
    }
}

#[derive(Debug, Parser)]
#[command(name = "interspace", version, about = "Interspace and standard pruning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune and train a model; writes metrics.csv, checkpoint/ and cost-report.json.
    Train(Overrides),
    /// Monte-Carlo comparison of interspace and spatial sparse approximation errors.
    SdlVerify(SdlArgs),
    /// FLOP table per layer and pruning rate.
    CostReport(Overrides),
    /// Dense vs. CSR matrix-vector timings.
    Bench(Overrides),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, value_parser = parse_sharing)]
    pub sharing: Option<Sharing>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SdlArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    parse_enum(s)
}

fn parse_sharing(s: &str) -> Result<Sharing, String> {
    parse_enum(s)
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

fn base_dir(o: &Overrides) -> PathBuf {
    o.config.as_deref().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Paths are relative to the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    Synthetic {
        classes: usize,
        train_samples: usize,
        #[serde(default)]
        test_samples: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        noise: f64,
    },
}

fn default_size() -> usize {
    12
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_sharing() -> Sharing {
    Sharing::Fine
}

fn default_init() -> InitScheme {
    InitScheme::Standard
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Defaults to the miniature VGG sized to the dataset.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub mode: Mode,
    #[serde(default = "default_sharing")]
    pub sharing: Sharing,
    #[serde(default)]
    pub basis_size: Option<usize>,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default = "yes")]
    pub train_basis: bool,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            mode: self.mode,
            sharing: self.sharing,
            init: self.init,
            basis_size: self.basis_size,
            train_basis: self.train_basis,
        }
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.p {
            self.schedule.set_target_rate(p);
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(s) = o.sharing {
            self.sharing = s;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }
}

/// Loads the train and (possibly empty) test splits.
pub fn load_datasets(src: &DatasetSource, base: &Path, seed: u64) -> Result<(Dataset, Option<Dataset>), CliError> {
    match src {
        DatasetSource::Idx { train_images, train_labels, test_images, test_labels } => {
            let load = |i: &Path, l: &Path| {
                let (i, l) = (base.join(i), base.join(l));
                for p in [&i, &l] {
                    if !p.is_file() {
                        return Err(usage(format!("dataset file not found: {}", p.display())));
                    }
                }
                load_idx(&i, &l).map_err(usage)
            };
            let train = load(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load(i, l)?),
                (None, None) => None,
                _ => return Err(usage("test_images and test_labels must be given together")),
            };
            Ok((train, test))
        }
        DatasetSource::Synthetic { classes, train_samples, test_samples, size, noise } => {
            let spec = |samples| SynthSpec { classes: *classes, samples, size: *size, noise: *noise };
            let train = synth_dataset(&spec(*train_samples), &mut Rng::new(seed, streams::DATA_TRAIN)).map_err(usage)?;
            let test = if *test_samples > 0 {
                Some(synth_dataset(&spec(*test_samples), &mut Rng::new(seed, streams::DATA_TEST)).map_err(usage)?)
            } else {
                None
            };
            Ok((train, test))
        }
    }
}

/// Contents of `cost-report.json` written by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCostReport {
    pub pruning_rate: PruningRates,
    /// Sum of the per-layer forward formulas at each layer's own mask rate.
    pub forward_flops: u64,
    pub layers: Vec<LayerCost>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub test_accuracy: Option<f64>,
    pub train_accuracy: f64,
    pub pruning_rate: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

pub fn cmd_train(o: &Overrides) -> Result<TrainSummary, CliError> {
    let path = o.config.as_deref().ok_or_else(|| usage("train requires --config"))?;
    let mut cfg: ExperimentConfig = read_config(path)?;
    cfg.apply(o);
    let (train, test) = load_datasets(&cfg.dataset, &base_dir(o), cfg.seed)?;
    let spec = match &cfg.model {
        Some(m) => m.clone(),
        None => {
            let shape = train.input_shape().ok_or_else(|| usage("empty training set"))?;
            ModelSpec::mini_vgg(shape[0], shape[1], train.classes)
        }
    };
    let mut model = ModelState::build(&spec, &cfg.build_options(), cfg.seed).map_err(usage)?;
    let history = run_schedule(&mut model, &cfg.schedule, &cfg.train, &train, test.as_ref(), cfg.seed).map_err(classify)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(runtime)?;
    write_metrics(&out.join("metrics.csv"), &history)?;
    model.save_checkpoint(&out.join("checkpoint")).map_err(runtime)?;
    let mut layers = Vec::new();
    for g in model.conv_geometry() {
        let p = model.mask(g.layer).map_or(0.0, |m| m.sparsity());
        layers.extend(cost_report(&[g], &[p]).map_err(runtime)?.layers);
    }
    let report = TrainCostReport { pruning_rate: pruning_rate(&model), forward_flops: model_forward_flops(&model), layers };
    fs::write(out.join("cost-report.json"), serde_json::to_string_pretty(&report).map_err(runtime)?).map_err(runtime)?;

    let train_accuracy = model.evaluate(&train).map_err(runtime)?.1;
    let test_accuracy = test.as_ref().map(|t| model.evaluate(t).map(|r| r.1)).transpose().map_err(runtime)?;
    let rate = match cfg.mode {
        Mode::Sp => report.pruning_rate.sp,
        Mode::Ip => report.pruning_rate.ip,
    };
    Ok(TrainSummary { test_accuracy, train_accuracy, pruning_rate: rate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdlConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Sparsity as a count; takes precedence over `p`.
    #[serde(default)]
    pub s: Option<usize>,
    /// Sparsity as a pruning rate, `s = round((1 - p) m n)`.
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_m() -> usize {
    9
}
fn default_n() -> usize {
    100
}
fn default_trials() -> usize {
    50
}
fn default_iters() -> usize {
    50
}

impl Default for SdlConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdlRow {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub delta: f64,
    pub trials: usize,
    pub frac_strict: f64,
    pub mean_gap: f64,
    pub frac_strict_fixed: f64,
    pub mean_gap_fixed: f64,
}

pub fn cmd_sdl_verify(a: &SdlArgs) -> Result<SdlRow, CliError> {
    let mut c: SdlConfig = load_or_default(a.common.config.as_deref())?;
    if let Some(v) = a.m {
        c.m = v;
    }
    if let Some(v) = a.n {
        c.n = v;
    }
    if let Some(v) = a.s {
        c.s = Some(v);
    }
    if let Some(v) = a.common.p {
        c.p = Some(v);
        c.s = a.s;
    }
    if let Some(v) = a.trials {
        c.trials = v;
    }
    if let Some(v) = a.common.seed {
        c.seed = v;
    }
    let mn = c.m * c.n;
    let s = match (c.s, c.p) {
        (Some(s), _) => s,
        (None, Some(p)) if (0.0..=1.0).contains(&p) => ((1.0 - p) * mn as f64).round() as usize,
        (None, Some(p)) => return Err(usage(format!("p = {p} outside [0, 1]"))),
        (None, None) => mn / 2,
    };
    if s == 0 || s >= mn {
        return Err(usage(format!("s = {s} must lie strictly between 0 and m n = {mn}")));
    }
    let delta = theorem1_delta(c.m, c.n, s).map_err(classify)?;
    let stats = montecarlo_verify(c.m, c.n, s, c.trials, c.iters, &Rng::new(c.seed, streams::SCORES)).map_err(classify)?;
    let row = SdlRow {
        m: c.m,
        n: c.n,
        s,
        delta,
        trials: c.trials,
        frac_strict: stats.frac_strict_free,
        mean_gap: stats.mean_gap_free,
        frac_strict_fixed: stats.frac_strict_fixed,
        mean_gap_fixed: stats.mean_gap_fixed,
    };
    emit_csv(std::slice::from_ref(&row), a.common.out.as_deref(), "sdl-verify.csv")?;
    Ok(row)
}

/// Writes rows to stdout and, with an output directory, to `name` inside it.
fn emit_csv<T: Serialize>(rows: &[T], out: Option<&Path>, name: &str) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(runtime)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(runtime)?;
        fs::write(dir.join(name), &bytes).map_err(runtime)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub model: ModelSpec,
    #[serde(default = "default_grid")]
    pub rates: Vec<f64>,
}

fn default_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99]
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { model: ModelSpec::mini_vgg(1, 12, 4), rates: default_grid() }
    }
}

/// Flat cost-report row for one (layer, p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: usize,
    pub p: f64,
    pub co: usize,
    pub ci: usize,
    pub k: usize,
    pub d1: usize,
    pub d2: usize,
    pub sp_forward: u64,
    pub ip_forward: u64,
    pub sp_backward_input: u64,
    pub ip_backward_input: u64,
    pub sp_backward_coeffs: u64,
    pub ip_backward_coeffs: u64,
    pub ip_backward_basis: u64,
}

impl From<&LayerCost> for CostRow {
    fn from(c: &LayerCost) -> Self {
        Self {
            layer: c.layer,
            p: c.p,
            co: c.dims.co,
            ci: c.dims.ci,
            k: c.dims.k,
            d1: c.dims.d1,
            d2: c.dims.d2,
            sp_forward: c.sp.forward,
            ip_forward: c.ip.forward,
            sp_backward_input: c.sp.backward_input,
            ip_backward_input: c.ip.backward_input,
            sp_backward_coeffs: c.sp.backward_coeffs,
            ip_backward_coeffs: c.ip.backward_coeffs,
            ip_backward_basis: c.ip.backward_basis,
        }
    }
}

pub fn cmd_cost_report(o: &Overrides) -> Result<Vec<CostRow>, CliError> {
    let mut c: CostConfig = load_or_default(o.config.as_deref())?;
    if let Some(p) = o.p {
        c.rates = vec![p];
    }
    // geometry only depends on the spec, so a standard SP build suffices
    let model = ModelState::build(&c.model, &BuildOptions::new(Mode::Sp, Sharing::Fine), 0).map_err(usage)?;
    let report = cost_report(&model.conv_geometry(), &c.rates).map_err(classify)?;
    let rows: Vec<CostRow> = report.layers.iter().map(CostRow::from).collect();
    emit_csv(&rows, o.out.as_deref(), "cost-report.csv")?;
    if let Some(dir) = &o.out {
        fs::write(dir.join("cost-report.json"), serde_json::to_string_pretty(&report).map_err(runtime)?).map_err(runtime)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub layers: Vec<BenchLayer>,
    pub sparsities: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Also write raw per-repetition samples to `bench-samples.json`.
    #[serde(default)]
    pub raw_samples: bool,
}

fn default_reps() -> usize {
    25
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            layers: vec![BenchLayer::from_conv("conv16x8", 16, 8, 3, 6, 6)],
            sparsities: vec![0.0, 0.5, 0.75, 0.9, 0.95, 0.99],
            reps: default_reps(),
            seed: 0,
            raw_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCsvRow {
    pub layer: String,
    pub p: f64,
    pub t_dense: f64,
    pub t_csr: f64,
    pub speedup: f64,
    pub t_dense_median: f64,
    pub t_csr_median: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
struct BenchSamples<'a> {
    layer: &'a str,
    p: f64,
    inner: usize,
    dense: &'a [f64],
    csr: &'a [f64],
}

pub fn cmd_bench(o: &Overrides) -> Result<Vec<BenchRow>, CliError> {
    let mut c: BenchConfig = load_or_default(o.config.as_deref())?;
    if let Some(p) = o.p {
        c.sparsities = vec![p];
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    interspace::sparsexec::pin_to_one_core();
    let rows = bench_speedup(&c.layers, &c.sparsities, c.reps, &mut Rng::new(c.seed, streams::SCHEDULE)).map_err(classify)?;
    let csv_rows: Vec<BenchCsvRow> = rows
        .iter()
        .map(|r| BenchCsvRow {
            layer: r.layer.clone(),
            p: r.p,
            t_dense: r.t_dense,
            t_csr: r.t_csr,
            speedup: r.speedup,
            t_dense_median: r.t_dense_median,
            t_csr_median: r.t_csr_median,
            max_abs_err: r.max_abs_err,
        })
        .collect();
    emit_csv(&csv_rows, o.out.as_deref(), "bench.csv")?;
    if let (Some(dir), true) = (&o.out, c.raw_samples) {
        let samples: Vec<BenchSamples> = rows
            .iter()
            .map(|r| BenchSamples { layer: &r.layer, p: r.p, inner: r.inner, dense: &r.dense_samples, csr: &r.csr_samples })
            .collect();
        fs::write(dir.join("bench-samples.json"), serde_json::to_string_pretty(&samples).map_err(runtime)?)
            .map_err(runtime)?;
    }
    Ok(rows)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(o) => {
            let s = cmd_train(o)?;
            match s.test_accuracy {
                Some(a) => println!("final test accuracy: {a:.4}"),
                None => println!("final train accuracy: {:.4}", s.train_accuracy),
            }
            println!("pruning rate: {:.6}", s.pruning_rate);
        }
        Command::SdlVerify(a) => {
            cmd_sdl_verify(a)?;
        }
        Command::CostReport(o) => {
            cmd_cost_report(o)?;
        }
        Command::Bench(o) => {
            cmd_bench(o)?;
        }
    }
    Ok(())
}
