mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ringformer::model::Variant;

#[derive(Parser, Debug)]
#[command(name = "ringformer", version, about = "Ring-type transformer for heterogeneous graphs")]
struct Cli {
    /// Worker threads for preprocessing, training and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a graph directory and report its shape.
    Validate(ValidateArgs),
    /// Precompute ring tokens for every target node.
    Preprocess(PreprocessArgs),
    /// Train a model and write checkpoints plus history.
    Train(Box<TrainArgs>),
    /// Write embeddings of all target nodes from a trained run.
    Embed(EmbedArgs),
    /// Score embeddings with a linear probe or k-means.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write a synthetic graph directory.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
pub struct GraphArgs {
    /// Directory with nodes.csv, edges.csv, features.bin|features.csv and optional labels.csv.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub allow_self_loops: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Target,
    All,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Outermost ring index.
    #[arg(long = "K", alias = "k", default_value_t = 2)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ScopeArg::Target)]
    pub scope: ScopeArg,
    /// Output directory; receives tokens.cache and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Token cache from `preprocess`; computed into the run directory when absent.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// JSON file with optional `model` and `train` sections, or a
    /// `train.manifest.json` from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Seed for both initialization and training; falls back to RINGFORMER_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "K", alias = "k")]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub type_layers: Option<usize>,
    #[arg(long)]
    pub ring_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub attn_dropout: Option<f64>,
    #[arg(long)]
    pub ff_mult: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub mask_empty: Option<bool>,
    #[arg(long)]
    pub per_ring_type_encoder: Option<bool>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EmbFormat {
    Bin,
    Csv,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Graph directory; defaults to the one recorded by `train`.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Output file; defaults to `<run>/embeddings.bin`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to csv for `.csv` paths and bin otherwise.
    #[arg(long, value_enum)]
    pub format: Option<EmbFormat>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Args, Debug)]
pub struct EvalCommon {
    /// Embedding file (binary or CSV).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// `node_id,class_id` file.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Falls back to RINGFORMER_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Row label in the text table.
    #[arg(long, default_value = "ringformer")]
    pub method: String,
    /// Directory for report.json, table.txt and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProbeArg {
    Svm,
    Logreg,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Repeated stratified linear-probe classification.
    Classify {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, value_enum, default_value_t = ProbeArg::Svm)]
        probe: ProbeArg,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
    },
    /// Repeated k-means with k = number of classes.
    Cluster {
        #[command(flatten)]
        common: EvalCommon,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenKind {
    RingDistance,
    TypeMix,
    Bibliographic,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to RINGFORMER_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub types: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Write features.csv instead of features.bin.
    #[arg(long)]
    pub csv_features: bool,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(commands::EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Validate(a) => commands::validate(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Eval(c) => commands::eval(&c),
        Command::Generate(a) => commands::generate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
