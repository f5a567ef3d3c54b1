mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Entity labeling for media search queries: LLM annotation, persona
/// routing, classifier distillation, evaluation and serving.
#[derive(Parser, Debug)]
#[command(name = "querylabel", version)]
pub struct Cli {
    /// Entity registry (JSON Lines); defaults to the shipped registry.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the entity registry and its hash.
    Taxonomy {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Normalize and deduplicate raw queries (`text\tfrequency` or JSON Lines).
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic train/dev/test split manifest.
    Split {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Train, dev and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
        ratios: Vec<f64>,
    },
    /// Annotate queries with an LLM endpoint or the mock annotator.
    Annotate(AnnotateArgs),
    /// Build per-query confidence matrices from persona annotations.
    Matrix {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        personas: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the persona router on matrices and gold labels.
    RouterTrain(RouterTrainArgs),
    /// Rank personas for queries with a trained router.
    RouterSelect {
        #[arg(long)]
        router: PathBuf,
        /// One query; otherwise every query in --queries.
        #[arg(long, conflicts_with = "queries")]
        query: Option<String>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Aggregate confidence matrices into one annotation per query.
    Aggregate {
        #[arg(long)]
        matrices: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Aggregate only the router's top-k personas (needs --queries).
        #[arg(long, requires = "queries")]
        router: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = querylabel::personas::DEFAULT_AGGREGATION_THRESHOLD)]
        threshold: f64,
    },
    /// Turn annotations into weak labels at a confidence cut-off.
    Labels {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "high")]
        min_confidence: String,
        /// Keep only records from this annotator.
        #[arg(long)]
        annotator: Option<String>,
    },
    /// Train the multi-label classifier on weak labels.
    Train(TrainArgs),
    /// Tune per-entity thresholds on the dev split.
    Tune(TuneArgs),
    /// Evaluate predictions against gold, optionally against the lexical baseline.
    Eval(EvalArgs),
    /// Prompt-variant grid and random-k vs router-k comparison on generated data.
    Ablation(AblationArgs),
    /// Answer newline-delimited queries over stdio or TCP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Listen on this TCP port instead of stdio.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Run every stage from a JSON config and write a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Generate a synthetic query set with gold labels and dictionaries.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Jsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TuneModeArg {
    MaxF1,
    MatchRecall,
    MatchPrecision,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Annotator config (JSON, `{"kind": "http" | "mock", ...}`).
    #[arg(long)]
    pub annotator: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "confidence-cot-icl")]
    pub variant: String,
    /// Persona ids, or `all`; without this flag no persona preamble is used.
    #[arg(long, value_delimiter = ',')]
    pub personas: Vec<String>,
    #[arg(long)]
    pub personas_file: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RouterTrainArgs {
    #[arg(long)]
    pub matrices: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train only on the train part of this split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub encoder_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Rebalance training queries so no entity exceeds this share.
    #[arg(long)]
    pub rebalance_cap: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1024)]
    pub encoder_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Reference annotations for the dev queries.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum, default_value_t = TuneModeArg::MaxF1)]
    pub mode: TuneModeArg,
    /// Lexical baseline dictionary; required by the match modes.
    #[arg(long)]
    pub baseline_gazetteer: Option<PathBuf>,
    #[arg(long)]
    pub weighted: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    /// Candidate annotations.
    #[arg(long, conflicts_with = "model")]
    pub pred: Option<PathBuf>,
    /// Candidate classifier (needs --queries).
    #[arg(long, requires = "queries")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub thresholds: Option<PathBuf>,
    /// Query texts and frequencies.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Restrict to the test part of this split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Lexical baseline dictionary for gains and matched operating points.
    #[arg(long)]
    pub baseline_gazetteer: Option<PathBuf>,
    #[arg(long)]
    pub weighted: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long, default_value_t = 500)]
    pub queries: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_rate: f64,
    /// Personas kept per query in the selection comparison.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub random_draws: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Real-word dictionary to draw phrases from; pseudo-words otherwise.
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.4)]
    pub baseline_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
