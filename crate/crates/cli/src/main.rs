//! Command-line front end for the unlearning laboratory.
//!
//! One JSON config file drives a run; flags override individual fields. Every
//! artifact embeds the hash of the effective configuration, and downstream
//! commands refuse artifacts produced under a different one.

mod pipeline;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use unlearn_core::config::RunConfig;
use unlearn_core::error::Error;

#[derive(Parser)]
#[command(
    name = "unlearnlab",
    about = "Single-layer gradient unlearning on a miniature contrastive dual encoder",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the target concepts (comma-separated ids).
    #[arg(long, global = true, value_delimiter = ',')]
    concepts: Option<Vec<u32>>,

    /// Override the selection strategy (pareto, importance_only,
    /// alignment_only, random_layer, all_pareto, all_layers,
    /// distributed_weights).
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Override the number of binary-search steps.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Override the validation fraction used by the search evaluator.
    #[arg(long, global = true)]
    val_fraction: Option<f64>,

    /// Override the top-k used for the search's forget accuracy (1 or 5).
    #[arg(long, global = true)]
    topk: Option<usize>,

    /// Step-size grid for `sweep` (comma-separated, ascending).
    #[arg(long, global = true, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic concept dataset.
    GenData,
    /// Pretrain the dual encoder on the train pool.
    Train,
    /// Compute the one-time forget/retain gradient snapshot.
    Grad,
    /// Export layer metrics, the Pareto front, and the strategy's selection.
    Select,
    /// Run the unlearning pipeline with the configured strategy.
    Unlearn,
    /// Jointly unlearn every target concept with per-concept edits.
    JointUnlearn,
    /// Run the configured GA/FT/GAFT baseline.
    Baseline,
    /// Zero-shot evaluation and similarity matrices for the stored models.
    Eval,
    /// Forget/test accuracy along a step-size grid for one layer.
    Sweep {
        /// Layer to sweep (defaults to the delta artifact's layer).
        #[arg(long)]
        layer: Option<String>,
    },
    /// Evaluation wall-clock against validation size.
    EvalScaling {
        /// Validation fractions to time.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,1.0")]
        fractions: Vec<f64>,
    },
    /// Gap-ratio summary of a benchmark results CSV.
    Gapratio {
        /// Benchmark CSV (orientation line, header, one row per method).
        input: PathBuf,
    },
    /// The full pipeline: gen-data, train, grad, select, unlearn, eval.
    Run,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnknownLayer(_) => 3,
        Error::Io(_) | Error::CorruptArtifact(_) | Error::UnsupportedVersion { .. } => 4,
        Error::FingerprintMismatch { .. } | Error::ConfigHashMismatch { .. } => 5,
        Error::NoCandidateLayers
        | Error::DegenerateVector { .. }
        | Error::DegenerateEmbedding { .. }
        | Error::EmptyBatch(_)
        | Error::MissingPrototype(_)
        | Error::UndefinedGapRatio(_) => 6,
        Error::SearchAborted { source, .. } => exit_code_for(source),
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(concepts) = &cli.concepts {
        config.unlearn.target_concepts = concepts.clone();
    }
    if let Some(strategy) = &cli.strategy {
        config.unlearn.strategy = strategy.parse()?;
    }
    if let Some(steps) = cli.steps {
        config.unlearn.search_steps = steps;
    }
    if let Some(fraction) = cli.val_fraction {
        config.unlearn.validation_fraction = fraction;
    }
    if let Some(topk) = cli.topk {
        config.unlearn.search_top_k = topk;
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    let paths = pipeline::Paths::new(std::path::Path::new(&config.out_dir));
    std::fs::create_dir_all(&paths.out)?;
    match &cli.command {
        Command::GenData => pipeline::gen_data(&config, &paths),
        Command::Train => pipeline::train(&config, &paths).map(|_| ()),
        Command::Grad => pipeline::grad(&config, &paths),
        Command::Select => pipeline::select_stage(&config, &paths),
        Command::Unlearn => pipeline::unlearn(&config, &paths),
        Command::JointUnlearn => pipeline::joint(&config, &paths),
        Command::Baseline => pipeline::baseline(&config, &paths),
        Command::Eval => pipeline::eval(&config, &paths).map(|_| ()),
        Command::Sweep { layer } => {
            pipeline::sweep(&config, &paths, layer.as_deref(), cli.lambda_grid.clone())
        }
        Command::EvalScaling { fractions } => pipeline::scaling(&config, &paths, fractions),
        Command::Gapratio { input } => pipeline::gapratio(&paths, input),
        Command::Run => pipeline::run(&config, &paths),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
