//! Command-line front end: dataset synthesis, label corruption, training,
//! evaluation, partitioning, gradient checks, theory checks and sweeps.

pub mod output;

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use visprompt_core::config::RunConfig;
use visprompt_core::data::{
    generate_synthetic, inject_noise, load_features, save_features, synthetic_test_set, FeatureDataset,
    NoiseType, SyntheticSpec,
};
use visprompt_core::gradcheck::{gradient_check, GradCheckConfig};
use visprompt_core::pipeline::{ContextMode, FrozenEncoders, Trainable, Variant};
use visprompt_core::tensor::Mat;
use visprompt_core::theory::{run_theory_suite, TheoryReport, TheorySuiteConfig};
use visprompt_core::trainer::{
    build_encoders, evaluate_accuracy, image_features, refresh_partition, run_experiment, ExperimentReport,
    ParameterCounts,
};

use output::{emit_results, json_string, metrics_csv, write_file, MeanStd, ResultRecord};

/// Fallback seed source when neither a flag nor a config file sets one.
pub const SEED_ENV: &str = "VISPROMPT_SEED";
/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 1,
            CliError::Internal(_) | CliError::CheckFailed(_) => 2,
        }
    }
}

impl From<visprompt_core::Error> for CliError {
    fn from(e: visprompt_core::Error) -> Self {
        use visprompt_core::Error as E;
        match e {
            E::Config(_)
            | E::Format { .. }
            | E::Io(_)
            | E::Json(_)
            | E::Dimension { .. }
            | E::IndexOutOfRange { .. }
            | E::InsufficientClass { .. }
            | E::EmptyDataset
            | E::Generation(_) => CliError::Input(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "visprompt", version, about = "Vision-guided noisy-label prompt learning on feature files")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature file (plus a `.json` spec sidecar).
    Synth(SynthArgs),
    /// Corrupt the observed labels of a feature file.
    Noise(NoiseArgs),
    /// Train over the configured seeds and write metrics and a report.
    Train(TrainArgs),
    /// Accuracy of a saved model against clean labels.
    Eval(EvalArgs),
    /// Dump the transport partition of a feature file as JSON.
    Partition(PartitionArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Run the attention-margin property checks.
    VerifyTheory(TheoryArgs),
    /// Train every (variant, noise rate, seed) cell on synthetic data.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 48)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub n_informative: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eps_v: f64,
    #[arg(long, default_value_t = 1.0)]
    pub margin_scale: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "type", default_value = "sym")]
    pub kind: NoiseType,
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by every config-driven subcommand. Flags override the
/// config file, which overrides defaults.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Flat JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub objective: Option<visprompt_core::trainer::Objective>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out feature file; defaults to fresh samples from the data's spec sidecar.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `model.json` written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use a trained context instead of a fresh initialization.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// A single variant; all three by default.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, default_value = "class-shared")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    pub grid_delta: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
    pub grid_epsv: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub trend_seeds: usize,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Comma-separated variants, or `all`.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub noise_type: Option<NoiseType>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Noise(a) => noise(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Partition(a) => partition_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::VerifyTheory(a) => verify_theory(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Input(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

/// Defaults, then the config file, then the environment seed (only when
/// the file sets no seed), then flags.
pub fn effective_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let (mut cfg, keys) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
            let raw: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let keys: HashSet<String> = raw.as_object().map(|m| m.keys().cloned().collect()).unwrap_or_default();
            let cfg: RunConfig = serde_json::from_value(raw)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            (cfg, keys)
        }
        None => (RunConfig::default(), HashSet::new()),
    };
    if !keys.contains("seed") {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
            if !keys.contains("seeds") {
                cfg.seeds = vec![s];
            }
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(o) = args.objective {
        cfg.objective = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_sidecar(data: &Path) -> CliResult<Option<SyntheticSpec>> {
    let path = sidecar_path(data);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(Some(spec))
}

fn load(path: &Path) -> CliResult<FeatureDataset> {
    load_features(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        per_class: a.shots,
        tokens: a.tokens,
        dim: a.dim,
        n_informative: a.n_informative,
        eps_v: a.eps_v,
        margin_scale: a.margin_scale,
        seed: resolve_seed(a.seed)?,
    };
    let ds = generate_synthetic(&spec)?;
    save_features(&ds, &a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    write_file(&sidecar_path(&a.out), &json_string(&spec)?)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn noise(a: NoiseArgs) -> CliResult<()> {
    let ds = load(&a.input)?;
    let noisy = inject_noise(&ds, a.kind, a.rate, resolve_seed(a.seed)?)?;
    save_features(&noisy, &a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    if let Some(spec) = read_sidecar(&a.input)? {
        write_file(&sidecar_path(&a.out), &json_string(&spec)?)?;
    }
    println!(
        "flipped {} of {} labels ({} noise)",
        noisy.noisy_count(),
        noisy.len(),
        a.kind
    );
    Ok(())
}

/// Class anchors for the frozen towers: the spec's prototypes when a
/// sidecar exists, otherwise the observed-label centroids of the data.
fn anchors(ds: &FeatureDataset, spec: Option<&SyntheticSpec>) -> CliResult<Mat> {
    Ok(match spec {
        Some(s) => s.prototypes()?,
        None => ds.observed_centroids()?,
    })
}

fn required_path(flag: Option<PathBuf>, from_cfg: &Option<String>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| from_cfg.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set `{name}` in the config)")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub variant: Variant,
    pub seed: u64,
    pub model: Trainable,
    pub encoders: FrozenEncoders,
}

#[derive(Debug, Serialize)]
pub struct GroupCount {
    pub group: String,
    pub parameters: usize,
}

#[derive(Debug, Serialize)]
pub struct ParameterReport {
    pub trainable: usize,
    pub frozen: usize,
    pub trainable_to_frozen_ratio: f64,
    pub trainable_groups: Vec<GroupCount>,
}

impl From<&ParameterCounts> for ParameterReport {
    fn from(p: &ParameterCounts) -> Self {
        Self {
            trainable: p.trainable,
            frozen: p.frozen,
            trainable_to_frozen_ratio: p.ratio,
            trainable_groups: p
                .trainable_groups
                .iter()
                .map(|(g, c)| GroupCount { group: g.clone(), parameters: *c })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_reliable_count: Option<usize>,
    pub unconverged_partitions: usize,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub dataset: String,
    pub variant: Variant,
    pub objective: visprompt_core::trainer::Objective,
    pub train_samples: usize,
    pub test_samples: usize,
    pub final_accuracy: MeanStd,
    pub initial_accuracy: MeanStd,
    pub runs: Vec<SeedRun>,
    pub parameters: ParameterReport,
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = effective_config(&a.cfg)?;
    let data = required_path(a.data, &cfg.data, "data")?;
    let out = required_path(a.out, &cfg.out, "out")?;
    let test_path = a.test.or_else(|| cfg.test.as_ref().map(PathBuf::from));
    cfg.data = Some(data.display().to_string());
    cfg.out = Some(out.display().to_string());
    cfg.test = test_path.as_ref().map(|p| p.display().to_string());

    let ds = load(&data)?;
    let spec = read_sidecar(&data)?;
    let test = match (&test_path, &spec) {
        (Some(p), _) => load(p)?,
        (None, Some(s)) => synthetic_test_set(s, cfg.test_per_class)?,
        (None, None) => {
            return Err(CliError::Usage(
                "no --test file given and the data has no spec sidecar to draw a test set from".into(),
            ))
        }
    };
    let anchor = anchors(&ds, spec.as_ref())?;
    create_dir(&out)?;
    write_file(&out.join("config.json"), &cfg.to_json()?)?;

    let outcomes = cfg
        .seeds
        .iter()
        .map(|&seed| run_experiment(&cfg.model_config(), &cfg.train_config(seed), &ds, &test, Some(&anchor)))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &outcomes[0];
    write_file(&out.join("metrics.csv"), &metrics_csv(&first.report.metrics)?)?;
    if outcomes.len() > 1 {
        for o in &outcomes {
            write_file(&out.join(format!("metrics-seed-{}.csv", o.report.seed)), &metrics_csv(&o.report.metrics)?)?;
        }
    }
    let finals: Vec<f64> = outcomes.iter().map(|o| o.report.final_accuracy).collect();
    let inits: Vec<f64> = outcomes.iter().map(|o| o.report.initial_accuracy).collect();
    let report = TrainReport {
        dataset: cfg.dataset.clone(),
        variant: cfg.variant,
        objective: cfg.objective,
        train_samples: ds.len(),
        test_samples: test.len(),
        final_accuracy: MeanStd::of(&finals),
        initial_accuracy: MeanStd::of(&inits),
        runs: outcomes.iter().map(|o| seed_run(&o.report)).collect(),
        parameters: (&first.report.parameters).into(),
    };
    write_file(&out.join("report.json"), &json_string(&report)?)?;
    let saved = SavedModel {
        variant: cfg.variant,
        seed: first.report.seed,
        model: first.model.clone(),
        encoders: first.encoders.clone(),
    };
    write_file(&out.join("model.json"), &json_string(&saved)?)?;
    println!(
        "final accuracy {:.4} ± {:.4} over {} seed(s)",
        report.final_accuracy.mean,
        report.final_accuracy.std,
        finals.len()
    );
    Ok(())
}

fn seed_run(r: &ExperimentReport) -> SeedRun {
    SeedRun {
        seed: r.seed,
        initial_accuracy: r.initial_accuracy,
        final_accuracy: r.final_accuracy,
        final_reliable_count: r.final_partition.as_ref().map(|p| p.reliable.len()),
        unconverged_partitions: r.unconverged_partitions,
    }
}

fn load_model(path: &Path) -> CliResult<SavedModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    variant: Variant,
    samples: usize,
    accuracy: f64,
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let saved = load_model(&a.model)?;
    let ds = load(&a.data)?;
    let variant = a.variant.unwrap_or(saved.variant);
    let accuracy = evaluate_accuracy(&saved.model, &saved.encoders, variant, &ds)?;
    print!("{}", json_string(&EvalOutput { variant, samples: ds.len(), accuracy })?);
    Ok(())
}

fn partition_cmd(a: PartitionArgs) -> CliResult<()> {
    let cfg = effective_config(&a.cfg)?;
    let data = required_path(a.data, &cfg.data, "data")?;
    let ds = load(&data)?;
    let (model, enc) = match &a.model {
        Some(p) => {
            let saved = load_model(p)?;
            (saved.model, saved.encoders)
        }
        None => {
            let spec = read_sidecar(&data)?;
            let dims = cfg.model_config().dims(ds.token_dim(), ds.classes())?;
            let enc = build_encoders(&cfg.model_config(), &dims, Some(&anchors(&ds, spec.as_ref())?))?;
            (Trainable::init(&dims, cfg.context_mode, cfg.seed)?, enc)
        }
    };
    let feats = image_features(&enc, &ds.samples()?)?;
    let (part, converged) = refresh_partition(&model, &enc, &feats, ds.observed_labels(), &cfg.sinkhorn_settings())?;
    if !converged {
        eprintln!("warning: transport solver did not reach tolerance");
    }
    let text = json_string(&part)?;
    match a.out {
        Some(p) => write_file(&p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    let mode = match a.mode.as_str() {
        "class-shared" | "shared" => ContextMode::ClassShared,
        "class-specific" | "specific" => ContextMode::ClassSpecific,
        other => return Err(CliError::Usage(format!("unknown context mode `{other}`"))),
    };
    let variants = match a.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut worst: f64 = 0.0;
    for v in variants {
        let report = gradient_check(&GradCheckConfig::small(v, mode, seed))?;
        println!(
            "{:<15} {} tensors  max relative error {:.3e}",
            v.name(),
            report.tensors.len(),
            report.max_relative_error
        );
        worst = worst.max(report.max_relative_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}")))
    }
}

fn print_theory(report: &TheoryReport) {
    let mark = |b: bool| if b { "PASS" } else { "FAIL" };
    println!(
        "{} softmax-tail bound: {} violations in {} vectors",
        mark(report.mass_bound_pass),
        report.mass_bound_violations,
        report.mass_bound_vectors
    );
    let fmt = |pts: &[visprompt_core::theory::TrendPoint]| {
        pts.iter().map(|p| format!("{}:{:.4}", p.value, p.mean_deviation)).collect::<Vec<_>>().join(" ")
    };
    println!("{} deviation vs margin: {}", mark(report.delta_trend_pass), fmt(&report.delta_trend));
    println!("{} deviation vs dispersion: {}", mark(report.eps_trend_pass), fmt(&report.eps_trend));
    println!(
        "{} margin preservation: {}/{} preserved ({} draws)",
        mark(report.margin_pass),
        report.margin_preserved,
        report.margin_premise_held,
        report.margin_draws
    );
}

fn verify_theory(a: TheoryArgs) -> CliResult<()> {
    if a.grid_delta.iter().chain(&a.grid_epsv).any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(CliError::Input("grid values must be finite and nonnegative".into()));
    }
    let cfg = TheorySuiteConfig {
        seed: resolve_seed(a.seed)?,
        grid_delta: a.grid_delta,
        grid_eps_v: a.grid_epsv,
        trend_seeds: a.trend_seeds,
        ..TheorySuiteConfig::default()
    };
    let report = run_theory_suite(&cfg)?;
    write_file(&a.out, &json_string(&report)?)?;
    print_theory(&report);
    if report.pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed("one or more theory properties failed".into()))
    }
}

fn parse_variants(raw: Option<&str>, default: Variant) -> CliResult<Vec<Variant>> {
    match raw {
        None => Ok(vec![default]),
        Some("all") => Ok(Variant::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<Variant>().map_err(|e| CliError::Usage(e.to_string())))
            .collect(),
    }
}

/// Final accuracy of one synthetic cell: a fresh few-shot set drawn with
/// `seed`, corrupted at `rate`, trained with `variant`.
pub fn synthetic_cell(cfg: &RunConfig, variant: Variant, rate: f64, seed: u64) -> visprompt_core::Result<f64> {
    let spec = cfg.synthetic_spec(seed);
    let train = inject_noise(&generate_synthetic(&spec)?, cfg.noise_type, rate, seed)?;
    let test = synthetic_test_set(&spec, cfg.test_per_class)?;
    let tcfg = visprompt_core::trainer::TrainConfig { variant, ..cfg.train_config(seed) };
    let out = run_experiment(&cfg.model_config(), &tcfg, &train, &test, Some(&spec.prototypes()?))?;
    Ok(out.report.final_accuracy)
}

/// Every (variant, rate, seed) cell, in that nesting order.
pub fn sweep_records(cfg: &RunConfig, variants: &[Variant], rates: &[f64], jobs: usize) -> CliResult<Vec<ResultRecord>> {
    let cells: Vec<(Variant, f64, u64)> = variants
        .iter()
        .flat_map(|&v| rates.iter().flat_map(move |&r| cfg.seeds.iter().map(move |&s| (v, r, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let accs = pool.install(|| {
        cells
            .par_iter()
            .map(|&(v, r, s)| synthetic_cell(cfg, v, r, s))
            .collect::<visprompt_core::Result<Vec<_>>>()
    })?;
    Ok(cells
        .iter()
        .zip(accs)
        .map(|(&(variant, noise_rate, seed), accuracy)| ResultRecord {
            dataset: cfg.dataset.clone(),
            variant,
            noise_type: cfg.noise_type,
            noise_rate,
            seed,
            accuracy,
        })
        .collect())
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let mut cfg = effective_config(&a.cfg)?;
    if let Some(t) = a.noise_type {
        cfg.noise_type = t;
    }
    let rates = a.rates.unwrap_or_else(|| vec![cfg.noise_rate]);
    if rates.is_empty() || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CliError::Input("noise rates must lie in [0, 1]".into()));
    }
    let variants = parse_variants(a.variants.as_deref(), cfg.variant)?;
    let out = required_path(a.out, &cfg.out, "out")?;
    cfg.out = Some(out.display().to_string());
    create_dir(&out)?;
    write_file(&out.join("config.json"), &cfg.to_json()?)?;
    let records = sweep_records(&cfg, &variants, &rates, a.jobs)?;
    let summary = emit_results(&records, &out)?;
    for v in &summary.variant_averages {
        println!("{:<15} average accuracy {:.4}", v.variant.name(), v.average);
    }
    println!("wrote {} rows to {}", records.len(), out.join("results.csv").display());
    Ok(())
}
