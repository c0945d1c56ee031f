use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use olica_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use olica_core::config::{Propagation, PruneConfig, VoMode};
use olica_core::error::{OlicaError, Result};
use olica_core::model::tokenize_bytes;
use olica_core::{data, eval_model, inspect, prune_model, sample_calibration};

#[derive(Parser)]
#[command(name = "olica", version, about = "Retraining-free structured pruning of transformer checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Prune a dense checkpoint to a target sparsity
    Prune(PruneArgs),
    /// Perplexity of a checkpoint on a text corpus
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the bundled held-out corpus
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
    },
    /// Structure, parameter counts and pruning metadata of a checkpoint
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON prune config; flags given on the command line override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    mode: Option<VoMode>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    rank_ratio: Option<f64>,
    #[arg(long)]
    calib_layers: Option<usize>,
    /// Calibration text; defaults to the bundled training corpus
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    propagate: Option<Propagation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the JSON report (stdout when absent)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Corpus for the before/after perplexity; defaults to the bundled held-out corpus
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    /// Skip the before/after perplexity
    #[arg(long)]
    no_eval: bool,
}

fn read_tokens(path: Option<&Path>, fallback: &[u8]) -> Result<Vec<u32>> {
    match path {
        Some(p) => Ok(tokenize_bytes(&std::fs::read(p).map_err(|e| OlicaError::Io {
            path: p.to_path_buf(),
            source: e,
        })?)),
        None => Ok(tokenize_bytes(fallback)),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| OlicaError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn prune(args: PruneArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => PruneConfig::from_file(p)?,
        None => PruneConfig::default(),
    };
    if let Some(v) = args.sparsity {
        config.sparsity = v;
    }
    if let Some(v) = args.mode {
        config.mode = v;
    }
    if let Some(v) = args.lambda0 {
        config.lambda0 = v;
    }
    if let Some(v) = args.rank_ratio {
        config.rank_ratio = v;
    }
    if let Some(v) = args.calib_layers {
        config.calib_layers = Some(v);
    }
    if let Some(v) = args.calib {
        config.calib = Some(v);
    }
    if let Some(v) = args.n_samples {
        config.n_samples = v;
    }
    if let Some(v) = args.seq_len {
        config.seq_len = v;
    }
    if let Some(v) = args.propagate {
        config.propagate = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let model = load_checkpoint(&args.model)?;
    // Budget problems surface before the corpus is even read.
    olica_core::pipeline::plan(&model, &config)?;
    let tokens = read_tokens(config.calib.as_deref(), data::TRAIN)?;
    let calib = sample_calibration(&tokens, config.n_samples, config.seq_len, config.seed)?;
    let (pruned, mut report) = prune_model(&model, &config, &calib)?;
    if !args.no_eval {
        let held = read_tokens(args.eval_corpus.as_deref(), data::HELDOUT)?;
        report.ppl_before = Some(eval_model(&model, &held, config.seq_len)?.perplexity);
        report.ppl_after = Some(eval_model(&pruned, &held, config.seq_len)?.perplexity);
    }
    save_checkpoint(&pruned, &args.out)?;
    let json = to_json(&report);
    match &args.report {
        Some(p) => write_text(p, &json)?,
        None => println!("{json}"),
    }
    eprintln!(
        "pruned {} -> {} parameters (sparsity {:.4}), wrote {}",
        report.params_before,
        report.params_after,
        report.achieved_sparsity,
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prune(args) => prune(args),
        Command::Eval { model, corpus, seq_len } => {
            let m = load_checkpoint(&model)?;
            let tokens = read_tokens(corpus.as_deref(), data::HELDOUT)?;
            println!("{}", to_json(&eval_model(&m, &tokens, seq_len)?));
            Ok(())
        }
        Command::Inspect { model } => {
            println!("{}", to_json(&inspect(&read_manifest(&model)?)));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
