mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use commands::Run;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "dwl", version, about = "Joint word embeddings and Wasserstein topics for token-sequence records")]
struct Cli {
    /// Seed for generation, splitting and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// File of `key = value` settings for `train` or `synth`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every output and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus from planted topics.
    Synth(SynthArgs),
    /// Train embeddings and topics.
    Train(TrainArgs),
    /// k-NN classification accuracy of held-out documents.
    Eval(EvalArgs),
    /// Top-L procedure recommendation for held-out admissions.
    Recommend(RecommendArgs),
    /// Nearest-neighbor graph over the vocabulary embeddings.
    ExportGraph(GraphArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub documents: Option<usize>,
    #[arg(long)]
    pub doc_length: Option<usize>,
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Tag the last P vocabulary tokens as procedures and the rest as diseases.
    #[arg(long)]
    pub procedures: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Vocabulary file; inferred from the records when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override one setting, e.g. `--set tau=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue a previous run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Label whose classes are spread proportionally over the splits.
    #[arg(long)]
    pub stratify: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Label holding the class of each document.
    #[arg(long)]
    pub label: String,
    /// ave_pool, topic_weight or word_distribution.
    #[arg(long, value_delimiter = ',', default_value = "ave_pool")]
    pub feature: Vec<String>,
    /// euclidean or wasserstein.
    #[arg(long, value_delimiter = ',', default_value = "euclidean")]
    pub metric: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub knn: Vec<usize>,
    /// Classify the training documents against themselves.
    #[arg(long)]
    pub allow_overlap: bool,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub top: Vec<usize>,
    /// mean or min distance to the admission's diseases.
    #[arg(long, default_value = "mean")]
    pub aggregation: String,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
}

fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<dwl::Error>(),
            Some(dwl::Error::Divergence { .. } | dwl::Error::Numerical { .. })
        )
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: {}: {e}", cli.out.display());
        return ExitCode::from(1);
    }
    let start = Instant::now();
    let mut run = Run::new(cli.out.clone(), cli.seed, cli.config.clone());
    let (name, result) = match &cli.command {
        Command::Synth(a) => ("synth", commands::synth(&mut run, a)),
        Command::Train(a) => ("train", commands::train(&mut run, a)),
        Command::Eval(a) => ("eval", commands::eval(&mut run, a)),
        Command::Recommend(a) => ("recommend", commands::recommend(&mut run, a)),
        Command::ExportGraph(a) => ("export-graph", commands::export_graph(&mut run, a)),
    };
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(e)
        }
    };
    let manifest = RunManifest {
        command: name.into(),
        status: if code == 0 { "ok" } else { "failed" },
        exit_code: code,
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        config: run.config.take().unwrap_or(serde_json::Value::Null),
        inputs: run.inputs,
        outputs: run.outputs,
        wall_time_secs: start.elapsed().as_secs_f64(),
        versions: manifest::versions(),
    };
    if let Err(e) = manifest.write(&cli.out) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::from(code as u8)
}
