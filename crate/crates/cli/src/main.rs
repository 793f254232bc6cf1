//! `awe`: train, weight and evaluate affinity-weighted embedding models.
//!
//! Exit codes are a stable contract for scripting: 0 success, 2 usage
//! error, 3 artifact or validation error, 4 I/O error. Reports and
//! predictions go to stdout, diagnostics to stderr. Every subcommand is
//! deterministic given identical inputs and seeds.

// Validators use negated comparisons (`!(x > 0.0)`) on purpose: the negation
// is true for NaN, so out-of-range and NaN inputs fail the same check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use awe_core::affinity::{
    build_affinity_cache, lambda_raw_median_heuristic, lambda_x_median_heuristic, AffinityCache,
    AffinityError, AffinityWeighter, Agg, KernelConfig, Mode,
};
use awe_core::data::{parse_dataset, DataError, Dataset, ParseOptions};
use awe_core::eval::{
    evaluate, truth_counts, EvalError, EvalReport, KnnRanker, LinearRanker, WeightedRanker,
};
use awe_core::linear::{
    mean_hinge_loss, rank_labels, train_warp, train_warp_from, EmbeddingModel, ModelError,
    TrainConfig, TrainError, UnitWeighter, Weighter,
};
use awe_core::pipeline::{
    make_test_weighter, run_pipeline, ManifestEntry, PipelineConfig, PipelineError,
};
use awe_core::util::fmt_f64;

#[derive(Parser)]
#[command(
    name = "awe",
    version,
    about = "Affinity-weighted embedding models: WARP training, kernel neighbor weighting, evaluation",
    after_help = "Exit codes: 0 success, 2 usage error, 3 artifact/validation error, 4 I/O error."
)]
struct Cli {
    /// Optional key=value file supplying defaults for the tuning flags
    /// (keys named after the flags, e.g. `dim=64`). Explicit flags win.
    /// Input and output paths are never read from this file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an unweighted bilinear model with the WARP loss.
    Train(TrainArgs),
    /// Build an affinity cache (neighbor lists) from a model over a training set.
    Affinity(AffinityArgs),
    /// Train a weighted model, with weights read off an affinity cache.
    Retrain(RetrainArgs),
    /// Evaluate precision@k for one or more algorithms on a test set.
    Eval(EvalArgs),
    /// Rank labels for query examples and print the top scores.
    Predict(PredictArgs),
    /// Run the full train / weight / retrain procedure for a number of rounds.
    Pipeline(PipelineArgs),
}

/// Training knobs shared by train, retrain and pipeline. Unset flags fall
/// back to the config file, then to the library defaults.
#[derive(Args, Default)]
struct TrainFlags {
    /// Embedding dimension d.
    #[arg(long)]
    dim: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Hinge margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Passes over the training set.
    #[arg(long)]
    epochs: Option<usize>,
    /// Cap on negative draws per step (default: label count minus one).
    #[arg(long)]
    max_neg: Option<usize>,
    /// Column norm cap for both factor matrices.
    #[arg(long)]
    max_norm: Option<f64>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Kernel knobs shared by affinity and pipeline.
#[derive(Args, Default)]
struct KernelFlags {
    /// Neighbors kept per query.
    #[arg(long)]
    n: Option<usize>,
    /// Aggregation over neighbor weights: sum or max.
    #[arg(long)]
    agg: Option<String>,
    /// Distance space: embedded-x, embedded-xy or raw.
    #[arg(long)]
    mode: Option<String>,
    /// Constant added to every G value.
    #[arg(long)]
    bias: Option<f64>,
    /// Drop the neighbor whose id equals the query id: 0 or 1.
    #[arg(long)]
    exclude_self: Option<String>,
    /// Input-side kernel bandwidth. Default: median distance heuristic.
    #[arg(long)]
    lambda_x: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (every example labeled).
    #[arg(long)]
    data: PathBuf,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct AffinityArgs {
    /// Model whose embedding defines the neighbor space.
    #[arg(long)]
    model: PathBuf,
    /// Training dataset the neighbor lists are built over.
    #[arg(long)]
    train: PathBuf,
    /// Output cache path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    kernel: KernelFlags,
    /// Worker threads. Cache bytes do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RetrainArgs {
    /// Affinity cache supplying the weights.
    #[arg(long)]
    cache: PathBuf,
    /// Model the cache was built from.
    #[arg(long)]
    base: PathBuf,
    /// Training dataset (must be covered by the cache).
    #[arg(long)]
    data: PathBuf,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Start from the base model's parameters instead of a fresh init.
    #[arg(long)]
    warm_start: bool,
    /// Label-side bandwidth for an embedded-xy cache. Default: median heuristic.
    #[arg(long)]
    lambda_y: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Test dataset; examples without labels are skipped and counted.
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated precision cutoffs, e.g. 1,3.
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated algorithms: linear, affinity, knn-raw, knn-embed.
    #[arg(long)]
    algo: Option<String>,
    /// Scoring model (linear, affinity, knn-embed).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training dataset (affinity, knn-raw, knn-embed).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Cache whose kernel settings drive the test-time weighter (affinity).
    #[arg(long)]
    cache_config_from: Option<PathBuf>,
    /// Model the cache was built from (affinity).
    #[arg(long)]
    cache_model: Option<PathBuf>,
    /// Neighbor count for the knn baselines.
    #[arg(long)]
    n: Option<usize>,
    /// Kernel bandwidth for the knn baselines. Default: median heuristic.
    #[arg(long)]
    lambda_x: Option<f64>,
    /// Label-side bandwidth for an embedded-xy cache. Default: median heuristic.
    #[arg(long)]
    lambda_y: Option<f64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Query dataset; labels optional and ignored.
    #[arg(long)]
    queries: PathBuf,
    /// Scoring model.
    #[arg(long)]
    model: PathBuf,
    /// Labels printed per query.
    #[arg(long)]
    top: Option<usize>,
    /// Scoring algorithm: linear or affinity.
    #[arg(long)]
    algo: Option<String>,
    /// Training dataset (affinity).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Cache whose kernel settings drive the test-time weighter (affinity).
    #[arg(long)]
    cache_config_from: Option<PathBuf>,
    /// Model the cache was built from (affinity).
    #[arg(long)]
    cache_model: Option<PathBuf>,
    /// Label-side bandwidth for an embedded-xy cache. Default: median heuristic.
    #[arg(long)]
    lambda_y: Option<f64>,
    /// Worker threads. Output does not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Training dataset (every example labeled).
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving models, caches and the manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Rounds to run; round 0 is the unweighted base model.
    #[arg(long)]
    rounds: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    kernel: KernelFlags,
    /// Warm-start each round from the previous round's model.
    #[arg(long)]
    warm_start: bool,
    /// Label-side bandwidth for mode embedded-xy. Default: median heuristic.
    #[arg(long)]
    lambda_y: Option<f64>,
    /// Worker threads. Artifact bytes do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

/// Error carrying its exit code. Usage errors are bad flag or config-file
/// values; artifact errors are malformed or inconsistent files; I/O errors
/// are failures of the filesystem itself.
enum CliError {
    Usage(String),
    Artifact(String),
    Io(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Artifact(m) | CliError::Io(m) => m,
        }
    }

    /// Prefixes the offending path so multi-file subcommands stay legible.
    fn in_file(self, path: &Path) -> Self {
        let tag = |m: String| format!("{}: {}", path.display(), m);
        match self {
            CliError::Usage(m) => CliError::Usage(tag(m)),
            CliError::Artifact(m) => CliError::Artifact(tag(m)),
            CliError::Io(m) => CliError::Io(tag(m)),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<AffinityError> for CliError {
    fn from(e: AffinityError) -> Self {
        match e {
            AffinityError::Io(io) => CliError::Io(io.to_string()),
            AffinityError::Model(inner) => inner.into(),
            AffinityError::BadConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io(io) => CliError::Io(io.to_string()),
            PipelineError::Train(inner) => inner.into(),
            PipelineError::Model(inner) => inner.into(),
            PipelineError::Affinity(inner) => inner.into(),
            PipelineError::BadConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Affinity(inner) => inner.into(),
            EvalError::Model(inner) => inner.into(),
            EvalError::ZeroK | EvalError::NoKs => CliError::Usage(e.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

/// Defaults file: `key=value` lines, `#` comments, later lines win.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {}", path.display(), e)))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::usage(format!(
                        "{}:{}: expected key=value, got {:?}",
                        path.display(),
                        i + 1,
                        line
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

/// Flag if given, else the config-file value parsed with `parse`.
fn resolve<T>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Option<T>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        None => Ok(None),
        Some(raw) => parse(raw).map(Some).ok_or_else(|| {
            CliError::usage(format!("config file: bad value {:?} for key {}", raw, key))
        }),
    }
}

fn p_usize(s: &str) -> Option<usize> {
    s.parse().ok()
}

fn p_u64(s: &str) -> Option<u64> {
    s.parse().ok()
}

fn p_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn p_bool01(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

/// Flag string if given, else the config-file value; parsed once, with a
/// usage error naming the key on failure.
fn pick_parsed<T>(
    flag: Option<&str>,
    file: &FileConfig,
    key: &str,
    expected: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Option<T>, CliError> {
    let raw = match flag {
        Some(s) => Some(s),
        None => file.get(key),
    };
    match raw {
        None => Ok(None),
        Some(s) => parse(s).map(Some).ok_or_else(|| {
            CliError::usage(format!(
                "bad value {:?} for {} (expected {})",
                s, key, expected
            ))
        }),
    }
}

fn resolved_train_config(flags: &TrainFlags, file: &FileConfig) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        dim: resolve(flags.dim, file, "dim", p_usize)?.unwrap_or(d.dim),
        learning_rate: resolve(flags.lr, file, "lr", p_f64)?.unwrap_or(d.learning_rate),
        margin: resolve(flags.margin, file, "margin", p_f64)?.unwrap_or(d.margin),
        epochs: resolve(flags.epochs, file, "epochs", p_usize)?.unwrap_or(d.epochs),
        max_negative_trials: resolve(flags.max_neg, file, "max-neg", p_usize)?,
        max_norm: resolve(flags.max_norm, file, "max-norm", p_f64)?.unwrap_or(d.max_norm),
        seed: resolve(flags.seed, file, "seed", p_u64)?.unwrap_or(d.seed),
        ..d
    };
    config.validate()?;
    Ok(config)
}

/// Kernel settings with the bandwidth left optional: `None` means apply the
/// median heuristic once the model and data are in hand.
struct KernelSettings {
    template: KernelConfig,
    lambda_x: Option<f64>,
}

fn resolved_kernel(flags: &KernelFlags, file: &FileConfig) -> Result<KernelSettings, CliError> {
    let d = KernelConfig::default();
    let lambda_x = resolve(flags.lambda_x, file, "lambda-x", p_f64)?;
    let template = KernelConfig {
        n: resolve(flags.n, file, "n", p_usize)?.unwrap_or(d.n),
        agg: pick_parsed(flags.agg.as_deref(), file, "agg", "sum or max", Agg::parse)?
            .unwrap_or(d.agg),
        mode: pick_parsed(
            flags.mode.as_deref(),
            file,
            "mode",
            "embedded-x, embedded-xy or raw",
            Mode::parse,
        )?
        .unwrap_or(d.mode),
        bias: resolve(flags.bias, file, "bias", p_f64)?.unwrap_or(d.bias),
        exclude_self: pick_parsed(
            flags.exclude_self.as_deref(),
            file,
            "exclude-self",
            "0 or 1",
            p_bool01,
        )?
        .unwrap_or(d.exclude_self),
        // Placeholder keeps validate applicable before the heuristic runs.
        lambda_x: lambda_x.unwrap_or(1.0),
    };
    template.validate()?;
    Ok(KernelSettings { template, lambda_x })
}

fn resolved_workers(flag: Option<usize>, file: &FileConfig) -> Result<usize, CliError> {
    let workers = resolve(flag, file, "workers", p_usize)?.unwrap_or(1);
    if workers == 0 {
        return Err(CliError::usage("workers must be at least 1"));
    }
    Ok(workers)
}

fn resolved_lambda_y(flag: Option<f64>, file: &FileConfig) -> Result<Option<f64>, CliError> {
    let lambda_y = resolve(flag, file, "lambda-y", p_f64)?;
    if let Some(l) = lambda_y {
        if !(l > 0.0) {
            return Err(CliError::usage("lambda-y must be positive"));
        }
    }
    Ok(lambda_y)
}

fn parse_k_list(s: &str) -> Option<Vec<usize>> {
    let ks: Option<Vec<usize>> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&k| k >= 1))
        .collect();
    ks.filter(|v| !v.is_empty())
}

const ALGOS: [&str; 4] = ["linear", "affinity", "knn-raw", "knn-embed"];

fn parse_algo_list(s: &str) -> Option<Vec<String>> {
    let algos: Vec<String> = s.split(',').map(|t| t.trim().to_string()).collect();
    if algos.is_empty() || algos.iter().any(|a| !ALGOS.contains(&a.as_str())) {
        return None;
    }
    Some(algos)
}

fn open_reader(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {}", path.display(), e)))
}

fn read_dataset(path: &Path, options: ParseOptions) -> Result<Dataset, CliError> {
    let reader = open_reader(path)?;
    parse_dataset(reader, options).map_err(|e| CliError::from(e).in_file(path))
}

fn load_model(path: &Path) -> Result<(EmbeddingModel, String), CliError> {
    EmbeddingModel::load(path).map_err(|e| CliError::from(e).in_file(path))
}

fn load_cache(path: &Path) -> Result<(AffinityCache, String), CliError> {
    AffinityCache::load(path).map_err(|e| CliError::from(e).in_file(path))
}

/// Query files are parsed against the scoring model's dimensions so a
/// mismatch surfaces as a parse error on the offending line.
fn query_options(model: &EmbeddingModel) -> ParseOptions {
    ParseOptions {
        labels_optional: true,
        declared_dims: Some((model.x_dim(), model.y_dim())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(args) => cmd_train(args, &file),
        Command::Affinity(args) => cmd_affinity(args, &file),
        Command::Retrain(args) => cmd_retrain(args, &file),
        Command::Eval(args) => cmd_eval(args, &file),
        Command::Predict(args) => cmd_predict(args, &file),
        Command::Pipeline(args) => cmd_pipeline(args, &file),
    }
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = resolved_train_config(&args.train, file)?;
    let data = read_dataset(&args.data, ParseOptions::default())?;
    let model = train_warp(&data, &config, &UnitWeighter)?;
    let hash = model
        .save(&args.out)
        .map_err(|e| CliError::from(e).in_file(&args.out))?;
    let loss = mean_hinge_loss(&model, &data, &UnitWeighter, config.margin);
    println!("final-train-loss {}", fmt_f64(loss));
    eprintln!("wrote model {} sha256={}", args.out.display(), hash);
    Ok(())
}

fn cmd_affinity(args: AffinityArgs, file: &FileConfig) -> Result<(), CliError> {
    let settings = resolved_kernel(&args.kernel, file)?;
    let workers = resolved_workers(args.workers, file)?;
    let (model, _) = load_model(&args.model)?;
    // Unlabeled rows are legal here: neighbor lists store ids, not labels.
    let train = read_dataset(&args.train, query_options(&model))?;
    let lambda_x = match settings.lambda_x {
        Some(l) => l,
        None => lambda_x_median_heuristic(&model, &train, settings.template.mode)?,
    };
    let kernel = KernelConfig {
        lambda_x,
        ..settings.template
    };
    let cache = build_affinity_cache(&model, &train, &train, &kernel, workers)?;
    let hash = cache
        .save(&args.out)
        .map_err(|e| CliError::from(e).in_file(&args.out))?;
    eprintln!(
        "wrote cache {} sha256={} (queries={}, n={}, lambda_x={})",
        args.out.display(),
        hash,
        train.len(),
        kernel.n,
        fmt_f64(kernel.lambda_x)
    );
    Ok(())
}

fn cmd_retrain(args: RetrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = resolved_train_config(&args.train, file)?;
    let lambda_y = resolved_lambda_y(args.lambda_y, file)?;
    let warm_start = args.warm_start
        || pick_parsed(None, file, "warm-start", "0 or 1", p_bool01)?.unwrap_or(false);

    let (base, base_hash) = load_model(&args.base)?;
    let (cache, _) = load_cache(&args.cache)?;
    cache
        .check_model(&base_hash)
        .map_err(|e| CliError::from(e).in_file(&args.cache))?;
    let data = read_dataset(
        &args.data,
        ParseOptions {
            declared_dims: Some((base.x_dim(), base.y_dim())),
            ..Default::default()
        },
    )?;
    cache
        .ensure_covers(&data)
        .map_err(|e| CliError::from(e).in_file(&args.cache))?;

    let smooth = match cache.kernel_config.mode {
        Mode::EmbeddedXY => Some((
            &base,
            lambda_y.unwrap_or_else(|| awe_core::affinity::lambda_y_median_heuristic(&base)),
        )),
        _ => None,
    };
    let weighter = AffinityWeighter::new(&cache, &data, smooth)?;
    let model = if warm_start {
        train_warp_from(base.clone(), &data, &config, &weighter)?
    } else {
        train_warp(&data, &config, &weighter)?
    };
    let hash = model
        .save(&args.out)
        .map_err(|e| CliError::from(e).in_file(&args.out))?;
    let loss = mean_hinge_loss(&model, &data, &weighter, config.margin);
    println!("final-train-loss {}", fmt_f64(loss));
    eprintln!("wrote model {} sha256={}", args.out.display(), hash);
    Ok(())
}

/// Artifacts the affinity algorithm needs beyond the scoring model.
struct AffinitySource {
    cache: AffinityCache,
    source: EmbeddingModel,
    source_hash: String,
}

fn load_affinity_source(
    cache_path: Option<&Path>,
    source_path: Option<&Path>,
) -> Result<AffinitySource, CliError> {
    let cache_path = cache_path
        .ok_or_else(|| CliError::usage("--cache-config-from is required for algo affinity"))?;
    let source_path = source_path
        .ok_or_else(|| CliError::usage("--cache-model is required for algo affinity"))?;
    let (cache, _) = load_cache(cache_path)?;
    let (source, source_hash) = load_model(source_path)?;
    Ok(AffinitySource {
        cache,
        source,
        source_hash,
    })
}

fn cmd_eval(args: EvalArgs, file: &FileConfig) -> Result<(), CliError> {
    let ks = pick_parsed(
        args.k.as_deref(),
        file,
        "k",
        "comma-separated cutoffs >= 1",
        parse_k_list,
    )?
    .unwrap_or_else(|| vec![1, 3]);
    let algos = pick_parsed(
        args.algo.as_deref(),
        file,
        "algo",
        "comma-separated subset of linear, affinity, knn-raw, knn-embed",
        parse_algo_list,
    )?
    .unwrap_or_else(|| vec!["linear".to_string()]);
    let n = resolve(args.n, file, "n", p_usize)?.unwrap_or(20);
    if n == 0 {
        return Err(CliError::usage("n must be at least 1"));
    }
    let lambda_x = resolve(args.lambda_x, file, "lambda-x", p_f64)?;
    if let Some(l) = lambda_x {
        if !(l > 0.0) {
            return Err(CliError::usage("lambda-x must be positive"));
        }
    }
    let lambda_y = resolved_lambda_y(args.lambda_y, file)?;
    let workers = resolved_workers(args.workers, file)?;

    let needs_model = algos.iter().any(|a| a != "knn-raw");
    let needs_train = algos.iter().any(|a| a != "linear");
    let model = match (&args.model, needs_model) {
        (Some(path), _) => Some(load_model(path)?),
        (None, true) => {
            return Err(CliError::usage(
                "--model is required for algos other than knn-raw",
            ))
        }
        (None, false) => None,
    };
    let train = match (&args.train, needs_train) {
        (Some(path), _) => {
            // Unlabeled rows contribute nothing to votes or G; allow them.
            let declared = model.as_ref().map(|(m, _)| (m.x_dim(), m.y_dim()));
            Some(read_dataset(
                path,
                ParseOptions {
                    labels_optional: true,
                    declared_dims: declared,
                },
            )?)
        }
        (None, true) => {
            return Err(CliError::usage(
                "--train is required for algos other than linear",
            ))
        }
        (None, false) => None,
    };
    let affinity_source = if algos.iter().any(|a| a == "affinity") {
        Some(load_affinity_source(
            args.cache_config_from.as_deref(),
            args.cache_model.as_deref(),
        )?)
    } else {
        None
    };

    let test_options = match (&model, &train) {
        (Some((m, _)), _) => query_options(m),
        (None, Some(t)) => ParseOptions {
            labels_optional: true,
            declared_dims: Some((t.x_dim(), t.y_dim())),
        },
        (None, None) => ParseOptions {
            labels_optional: true,
            declared_dims: None,
        },
    };
    let test = read_dataset(&args.test, test_options)?;

    let mut rows = Vec::new();
    for algo in &algos {
        let row = match algo.as_str() {
            "linear" => {
                let (m, _) = model.as_ref().expect("required above");
                evaluate("linear", &LinearRanker { model: m }, &test, &ks, workers)?
            }
            "affinity" => {
                let (m, _) = model.as_ref().expect("required above");
                let t = train.as_ref().expect("required above");
                let s = affinity_source.as_ref().expect("loaded above");
                let weighter = make_test_weighter(
                    &s.source,
                    &s.source_hash,
                    &s.cache,
                    t,
                    &test,
                    lambda_y,
                    workers,
                )?;
                let ranker = WeightedRanker {
                    model: m,
                    weighter: &weighter,
                };
                evaluate("affinity", &ranker, &test, &ks, workers)?
            }
            "knn-raw" => {
                let t = train.as_ref().expect("required above");
                let ranker = KnnRanker {
                    train: t,
                    model: None,
                    k: n,
                    lambda_x: lambda_x.unwrap_or_else(|| lambda_raw_median_heuristic(t)),
                };
                evaluate("knn-raw", &ranker, &test, &ks, workers)?
            }
            "knn-embed" => {
                let (m, _) = model.as_ref().expect("required above");
                let t = train.as_ref().expect("required above");
                let lambda = match lambda_x {
                    Some(l) => l,
                    None => lambda_x_median_heuristic(m, t, Mode::EmbeddedX)?,
                };
                let ranker = KnnRanker {
                    train: t,
                    model: Some(m),
                    k: n,
                    lambda_x: lambda,
                };
                evaluate("knn-embed", &ranker, &test, &ks, workers)?
            }
            _ => unreachable!("algo list validated"),
        };
        rows.push(row);
    }

    let (evaluated, skipped) = truth_counts(&test);
    let report = EvalReport {
        rows,
        evaluated,
        skipped,
    };
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_predict(args: PredictArgs, file: &FileConfig) -> Result<(), CliError> {
    let top = resolve(args.top, file, "top", p_usize)?.unwrap_or(10);
    if top == 0 {
        return Err(CliError::usage("top must be at least 1"));
    }
    let algo = pick_parsed(
        args.algo.as_deref(),
        file,
        "algo",
        "linear or affinity",
        |s| match s {
            "linear" | "affinity" => Some(s.to_string()),
            _ => None,
        },
    )?
    .unwrap_or_else(|| "linear".to_string());
    let lambda_y = resolved_lambda_y(args.lambda_y, file)?;
    let workers = resolved_workers(args.workers, file)?;

    let (model, _) = load_model(&args.model)?;
    if top > model.y_dim() {
        return Err(CliError::Artifact(format!(
            "top {} exceeds the model's label count {}",
            top,
            model.y_dim()
        )));
    }
    let queries = read_dataset(&args.queries, query_options(&model))?;

    // Both hold borrowed state the weighter needs for the whole print loop.
    let train;
    let source;
    let weighter = if algo == "affinity" {
        let path = args
            .train
            .as_deref()
            .ok_or_else(|| CliError::usage("--train is required for algo affinity"))?;
        let s = load_affinity_source(
            args.cache_config_from.as_deref(),
            args.cache_model.as_deref(),
        )?;
        // Unlabeled rows contribute nothing to G; allow them.
        train = read_dataset(path, query_options(&s.source))?;
        source = s;
        Some(make_test_weighter(
            &source.source,
            &source.source_hash,
            &source.cache,
            &train,
            &queries,
            lambda_y,
            workers,
        )?)
    } else {
        None
    };

    let mut out = String::new();
    for ex in queries.examples() {
        let embedding = model.embed_x(&ex.features)?;
        let score = |label: usize| {
            let f = model.score_from_embedding(&embedding, label);
            let s = match &weighter {
                Some(w) => w.weight(ex, label) * f,
                None => f,
            };
            // Keep the printed value on the same total order the ranking
            // uses: a zero score is zero, whatever its sign bit.
            if s == 0.0 {
                0.0
            } else {
                s
            }
        };
        let ranked = rank_labels(model.y_dim(), score);
        out.push_str(&ex.id.to_string());
        for &label in ranked.iter().take(top) {
            out.push('\t');
            out.push_str(&label.to_string());
            out.push(':');
            out.push_str(&fmt_f64(score(label)));
        }
        out.push('\n');
    }
    print!("{}", out);
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs, file: &FileConfig) -> Result<(), CliError> {
    let train_config = resolved_train_config(&args.train, file)?;
    let settings = resolved_kernel(&args.kernel, file)?;
    let lambda_y = resolved_lambda_y(args.lambda_y, file)?;
    let workers = resolved_workers(args.workers, file)?;
    let rounds = resolve(args.rounds, file, "rounds", p_usize)?.unwrap_or(2);
    let warm_start = args.warm_start
        || pick_parsed(None, file, "warm-start", "0 or 1", p_bool01)?.unwrap_or(false);

    let config = PipelineConfig {
        rounds,
        train: train_config,
        kernel: settings.template,
        lambda_x: settings.lambda_x,
        lambda_y,
        warm_start,
        out_dir: args.out_dir.clone(),
        workers,
    };
    config.validate()?;
    let data = read_dataset(&args.data, ParseOptions::default())?;
    let artifacts = run_pipeline(&data, &config)?;

    let mut out = String::new();
    for entry in artifacts.manifest.entries() {
        match entry {
            ManifestEntry::Model { round, path, hash } => {
                out.push_str(&format!("model {} {} sha256={}\n", round, path, hash));
            }
            ManifestEntry::Cache { round, path, hash } => {
                out.push_str(&format!("cache {} {} sha256={}\n", round, path, hash));
            }
            ManifestEntry::Cfg { .. } => {}
        }
    }
    out.push_str(&format!("manifest {}\n", artifacts.manifest_path.display()));
    print!("{}", out);
    Ok(())
}
