mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use commands::{BuildArgs, EvalArgs, FilterArgs, GradcheckArgs, ScoreArgs, SynthArgs, TrainArgs, ValidateArgs};

/// Cross-modal consistency filtering for image/caption/QA corpora.
#[derive(Debug, Parser, Serialize)]
#[command(name = "hicqa", version, about)]
struct Cli {
    /// Directory that receives `run.json`.
    #[arg(long, global = true, default_value = ".")]
    run_dir: PathBuf,

    /// Log filter (overrides HICQA_LOG), e.g. `info` or `hicqa=debug`.
    #[arg(long, global = true)]
    log_level: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
enum Command {
    /// Generate a synthetic corpus with planted noise and its oracle.
    Synth(SynthArgs),
    /// Check a corpus manifest and report every issue.
    Validate(ValidateArgs),
    /// Build the heterogeneous graph from a corpus.
    Build(BuildArgs),
    /// Train the hetero-GNN on the graph's weak labels.
    Train(TrainArgs),
    /// Score QA nodes with a checkpoint or a baseline.
    Score(ScoreArgs),
    /// Keep the top fraction of QAs by score.
    Filter(FilterArgs),
    /// Detection metrics of a score set against an oracle.
    Eval(EvalArgs),
    /// Compare model gradients with finite differences on a toy graph.
    Gradcheck(GradcheckArgs),
}

#[derive(Serialize)]
struct RunRecord<'a> {
    program: &'static str,
    version: &'static str,
    argv: Vec<String>,
    started: String,
    finished: String,
    exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    threads: usize,
    config: &'a Cli,
}

/// The error and its causes, skipping causes already quoted by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::new().filter_or("HICQA_LOG", "info");
    let mut builder = env_logger::Builder::from_env(env);
    if let Some(level) = level {
        builder.parse_filters(level);
    }
    builder.format_timestamp(None).init();
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("HICQA_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("HICQA_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.log_level.as_deref());
    let started = chrono::Utc::now().to_rfc3339();

    let result = init_threads().map_err(commands::Failure::invalid).and_then(|()| match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Validate(a) => commands::validate(a),
        Command::Build(a) => commands::build(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Filter(a) => commands::filter(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    let (exit_code, error) = match result {
        Ok(()) => (0, None),
        Err(f) => {
            let message = render_error(&f.error);
            log::error!("{message}");
            (f.code, Some(message))
        }
    };

    let record = RunRecord {
        program: "hicqa",
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        exit_code,
        error,
        threads: rayon::current_num_threads(),
        config: &cli,
    };
    if let Err(e) = commands::write_run_record(&cli.run_dir, &record) {
        log::error!("could not write run.json: {e:#}");
        return ExitCode::from(exit_code.max(commands::EXIT_RUNTIME));
    }
    ExitCode::from(exit_code)
}
