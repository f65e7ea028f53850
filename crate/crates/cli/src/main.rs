use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "pagesum",
    version,
    about = "Page-wise long-document summarisation toolkit"
)]
struct Cli {
    /// Seed for every random choice; falls back to $PAGESUM_SEED.
    #[arg(long, global = true, env = "PAGESUM_SEED")]
    seed: Option<u64>,

    /// Write results here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints; prints the training report as JSON.
    Train(commands::TrainArgs),
    /// Summarise every document of a corpus; prints JSON lines.
    Summarize(commands::SummarizeArgs),
    /// Score hypothesis summaries against corpus references.
    EvalRouge(commands::EvalRougeArgs),
    /// Corpus and model analyses, emitted as CSV.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        what: BenchCommand,
    },
    /// Self-checks.
    Check {
        #[command(subcommand)]
        what: CheckCommand,
    },
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Sentence similarity against index distance.
    Locality(commands::LocalityArgs),
    /// Per-step page weights while teacher-forcing a reference summary.
    Importance(commands::ImportanceArgs),
    /// Source-sentence pairs fused into one summary sentence.
    Fusion(commands::FusionArgs),
    /// Mean next-sentence probability of each summary.
    Coherence(commands::CoherenceArgs),
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Count encoder attention-score cells for paged and full encoding.
    Memory(commands::MemoryArgs),
}

#[derive(Subcommand, Debug)]
enum CheckCommand {
    /// Compare reverse-mode gradients with central finite differences.
    Grads(commands::GradsArgs),
}

/// Flags shared by every command that splits documents into pages.
#[derive(Args, Debug, Clone)]
pub struct PagingArgs {
    /// spatial, discourse or document
    #[arg(long, default_value = "spatial")]
    pub locality: String,
    #[arg(long, default_value_t = 1024)]
    pub page_size: usize,
    #[arg(long)]
    pub num_pages: Option<usize>,
    #[arg(long, default_value_t = 7168)]
    pub max_total_tokens: usize,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::input("--threads must be at least 1"));
    }
    let mut out: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| {
            Failure::input(format!("cannot create {}: {e}", path.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => commands::train(a, seed, &mut out),
        Command::Summarize(a) => commands::summarize(a, &mut out),
        Command::EvalRouge(a) => commands::eval_rouge(a, &mut out),
        Command::Analyze { what } => match what {
            AnalyzeCommand::Locality(a) => commands::locality(a, &mut out),
            AnalyzeCommand::Importance(a) => commands::importance(a, &mut out),
            AnalyzeCommand::Fusion(a) => commands::fusion(a, &mut out),
            AnalyzeCommand::Coherence(a) => commands::coherence(a, &mut out),
        },
        Command::Bench {
            what: BenchCommand::Memory(a),
        } => commands::memory(a, seed.unwrap_or(0), &mut out),
        Command::Check {
            what: CheckCommand::Grads(a),
        } => commands::grads(a, seed.unwrap_or(0), &mut out),
    }?;
    out.flush()
        .map_err(|e| Failure::input(format!("writing output: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
