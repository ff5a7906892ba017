//! `mbvr`: generate synthetic data, train, evaluate, analyze and ablate
//! query–video bi-encoders.
//!
//! Settings come from built-in defaults, then an optional TOML file with
//! `[data]` and `[train]` tables, then command-line flags. Every command
//! writes under `<runs-dir>/<hash>/`, prints one JSON summary line on
//! success, and on failure prints `{"error": {"kind": ..., "message": ...}}`
//! to stderr and exits nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mbvr_core::datagen::{self, Dataset, DatasetSpec};
use mbvr_core::encoders::ModelParams;
use mbvr_core::harness::{self, AnalyzeOptions, OptimizerKind, TrainConfig, Variant};
use mbvr_core::losses::MsSampling;
use mbvr_core::MbvrError;
use serde::Deserialize;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(
    name = "mbvr",
    version,
    about = "Modality-balanced query-video retrieval on synthetic data"
)]
struct Cli {
    /// TOML file with optional `[data]` and `[train]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        data: DataFlags,
        /// Output path; defaults to `<runs-dir>/data-<hash>/dataset.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant; writes per-epoch checkpoints and the loss curve.
    Train {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Retrieval metrics of a checkpoint over the evaluation queries.
    Eval {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the last epoch checkpoint of the matching run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Cutoffs, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Modality-balance diagnostics of a checkpoint.
    Analyze {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the last epoch checkpoint of the matching run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Width of the R_vt histogram bins.
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        /// R_vt below which a video counts as text-dominated.
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        /// MS negatives scored per judged positive.
        #[arg(long, default_value_t = 4)]
        ms_per_positive: usize,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train, evaluate and analyze all six variants.
    Ablate {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
}

#[derive(Debug, Default, Args)]
struct DataFlags {
    /// Number of topics shared by text and vision.
    #[arg(long)]
    num_topics: Option<usize>,
    /// Videos in the corpus.
    #[arg(long)]
    corpus_size: Option<usize>,
    /// Training queries.
    #[arg(long)]
    num_queries: Option<usize>,
    /// Training positives per query.
    #[arg(long)]
    pairs_per_query: Option<usize>,
    /// Probability that a training positive matches the query in text only.
    #[arg(long)]
    p_bias: Option<f64>,
    /// Standard deviation of the vision feature noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Seed of the dataset generator.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Token vocabulary size.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Width of the raw vision features.
    #[arg(long)]
    vision_dim: Option<usize>,
    /// Evaluation queries.
    #[arg(long)]
    eval_queries: Option<usize>,
    /// Judged positives per evaluation query.
    #[arg(long)]
    eval_positives_per_query: Option<usize>,
    /// Judged negatives per judged positive.
    #[arg(long)]
    eval_negative_ratio: Option<usize>,
}

#[derive(Debug, Default, Args)]
struct TrainFlags {
    /// text_only, vision_only, base, base+ms, base+dm or mbvr.
    #[arg(long)]
    variant: Option<Variant>,
    /// Passes over the training pairs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training pairs per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer step size.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// adam or sgd.
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    /// Seed for initialization, shuffling and MS sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Weight of the query-vision auxiliary loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the query-text auxiliary loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the MS-negative loss.
    #[arg(long)]
    gamma: Option<f64>,
    /// Scale of the visual-relevance margin.
    #[arg(long)]
    margin_w: Option<f64>,
    /// Shift of the visual-relevance margin.
    #[arg(long, allow_hyphen_values = true)]
    margin_b: Option<f64>,
    /// MS negatives per video.
    #[arg(long)]
    ms_count: Option<usize>,
    /// uniform or derangement.
    #[arg(long, value_parser = parse_ms_sampling)]
    ms_sampling: Option<MsSampling>,
    /// Drop in-batch negatives that share the query's topic.
    #[arg(long)]
    exclude_same_topic: bool,
    /// Token embedding width.
    #[arg(long)]
    token_dim: Option<usize>,
    /// Hidden width of the vision encoder.
    #[arg(long)]
    vision_hidden: Option<usize>,
    /// Shared embedding width.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Attention heads in the fusion module.
    #[arg(long)]
    heads: Option<usize>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
    }
}

fn parse_ms_sampling(s: &str) -> Result<MsSampling, String> {
    match s {
        "uniform" => Ok(MsSampling::Uniform),
        "derangement" => Ok(MsSampling::Derangement),
        _ => Err(format!("unknown MS sampling {s:?} (expected uniform or derangement)")),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: DatasetSpec,
    train: TrainConfig,
}

fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| MbvrError::Config(format!("{}: {e}", path.display())).into())
}

macro_rules! overlay {
    ($target:expr, $flags:expr, { $($field:ident => $dst:ident),* $(,)? }) => {
        $(if let Some(v) = $flags.$field { $target.$dst = v; })*
    };
}

impl DataFlags {
    fn apply(&self, spec: &mut DatasetSpec) {
        overlay!(spec, self, {
            num_topics => num_topics,
            corpus_size => corpus_size,
            num_queries => num_queries,
            pairs_per_query => pairs_per_query,
            p_bias => p_bias,
            noise_sigma => noise_sigma,
            data_seed => seed,
            vocab_size => vocab_size,
            vision_dim => vision_dim,
            eval_queries => eval_queries,
            eval_positives_per_query => eval_positives_per_query,
            eval_negative_ratio => eval_negative_ratio,
        });
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        overlay!(cfg, self, {
            variant => variant,
            epochs => epochs,
            batch_size => batch_size,
            learning_rate => learning_rate,
            optimizer => optimizer,
            seed => seed,
            ms_sampling => ms_sampling,
        });
        overlay!(cfg.loss, self, {
            tau => tau,
            alpha => alpha,
            beta => beta,
            gamma => gamma,
            margin_w => w,
            margin_b => b,
            ms_count => m,
        });
        overlay!(cfg.model, self, {
            token_dim => token_dim,
            vision_hidden => vision_hidden,
            embed_dim => embed_dim,
            heads => heads,
        });
        if self.exclude_same_topic {
            cfg.exclude_same_topic = true;
        }
    }
}

/// Effective training configuration: the model's input sizes always follow
/// the dataset.
fn train_config(file: &FileConfig, flags: &TrainFlags, dataset: &Dataset) -> anyhow::Result<TrainConfig> {
    let mut cfg = file.train.clone();
    flags.apply(&mut cfg);
    cfg.model.vocab_size = dataset.spec.vocab_size;
    cfg.model.vision_input_dim = dataset.spec.vision_dim;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(runs: &Path, cfg: &TrainConfig) -> anyhow::Result<PathBuf> {
    let dir = runs.join(cfg.hash());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), format!("{}\n{}", cfg.stamp(), cfg.to_toml()))?;
    Ok(dir)
}

fn final_checkpoint(dir: &Path, cfg: &TrainConfig) -> anyhow::Result<PathBuf> {
    if cfg.epochs == 0 {
        bail!(MbvrError::Config("no checkpoint: the run has zero epochs".into()));
    }
    Ok(dir.join(format!("epoch_{}.ckpt", cfg.epochs - 1)))
}

fn load_checkpoint(explicit: Option<&Path>, dir: &Path, cfg: &TrainConfig) -> anyhow::Result<ModelParams> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => final_checkpoint(dir, cfg)?,
    };
    ModelParams::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { data, out } => {
            let mut spec = file.data.clone();
            data.apply(&mut spec);
            let dataset = datagen::generate(&spec)?;
            let out = out.unwrap_or_else(|| cli.runs_dir.join(format!("data-{}", spec.hash())).join("dataset.bin"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            datagen::write_dataset(&out, &dataset)?;
            Ok(json!({
                "command": "gen-data",
                "path": out,
                "spec_hash": spec.hash(),
                "corpus": dataset.corpus.len(),
                "train_pairs": dataset.train_pairs.len(),
                "eval_pairs": dataset.eval_pairs.len(),
            }))
        }
        Command::Train { data, train } => {
            let dataset = datagen::read_dataset(&data)?;
            let cfg = train_config(&file, &train, &dataset)?;
            let dir = run_dir(&cli.runs_dir, &cfg)?;
            let outcome = harness::train(&cfg, &dataset, Some(&dir))?;
            Ok(json!({
                "command": "train",
                "run_dir": dir,
                "config_hash": cfg.hash(),
                "checkpoints": outcome.checkpoints,
                "epoch_mean_loss": outcome.epoch_means,
            }))
        }
        Command::Eval {
            data,
            checkpoint,
            k,
            train,
        } => {
            let dataset = datagen::read_dataset(&data)?;
            let cfg = train_config(&file, &train, &dataset)?;
            let dir = run_dir(&cli.runs_dir, &cfg)?;
            let params = load_checkpoint(checkpoint.as_deref(), &dir, &cfg)?;
            let eval = harness::evaluate(&params, &dataset, cfg.variant.repr(), &k)?;
            let path = dir.join("metrics.tsv");
            fs::write(&path, format!("{}\n{}", cfg.stamp(), eval.report.to_tsv()))?;
            let rows: Vec<_> = eval
                .report
                .rows
                .iter()
                .map(|r| json!({"metric": r.metric, "variant": r.variant, "k": r.k, "value": r.value}))
                .collect();
            Ok(json!({"command": "eval", "report": path, "rows": rows}))
        }
        Command::Analyze {
            data,
            checkpoint,
            bin_width,
            threshold,
            ms_per_positive,
            train,
        } => {
            let dataset = datagen::read_dataset(&data)?;
            let cfg = train_config(&file, &train, &dataset)?;
            let dir = run_dir(&cli.runs_dir, &cfg)?;
            let params = load_checkpoint(checkpoint.as_deref(), &dir, &cfg)?;
            let opts = AnalyzeOptions {
                bin_width,
                threshold,
                ms_per_positive,
                seed: cfg.seed,
            };
            let diag = harness::analyze(&params, &dataset, &opts)?;
            diag.write(&dir, &cfg.stamp())?;
            Ok(json!({
                "command": "analyze",
                "run_dir": dir,
                "rvt_below_fraction": diag.rvt.below_fraction,
                "rvt_median": diag.rvt.median,
                "rvt_undefined": diag.rvt.undefined,
                "overlap_stat": diag.overlap,
            }))
        }
        Command::Ablate { data, train } => {
            let dataset = datagen::read_dataset(&data)?;
            let cfg = train_config(&file, &train, &dataset)?;
            let dir = cli.runs_dir.join(format!("ablate-{}", cfg.hash()));
            let table = harness::ablate(&cfg, &dataset, Some(&dir))?;
            let failed: Vec<String> = table
                .rows
                .iter()
                .filter(|r| r.result.is_err())
                .map(|r| r.variant.to_string())
                .collect();
            Ok(json!({"command": "ablate", "table": dir.join("ablation.tsv"), "failed_variants": failed}))
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<MbvrError>())
        .map_or("internal", MbvrError::kind)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": "usage", "message": e.to_string().trim()}})
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": error_kind(&e), "message": format!("{e:#}")}})
            );
            ExitCode::FAILURE
        }
    }
}
