use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use hicqa::checkpoint::{Checkpoint, CheckpointError};
use hicqa::corpus::{load_corpus, write_corpus, CorpusError};
use hicqa::filter::{
    eval_detection, filter_corpus, filter_topk, read_json, score_baseline, score_hicqa, synth_corpus, write_json,
    FilterError, Method, NoiseKind, Oracle, ScoreSet, SynthConfig,
};
use hicqa::graph::{build_graph_with, read_graph, write_graph, Ablation, GraphConfig, GraphError, DEFAULT_ALPHA};
use hicqa::model::{HyperParams, ModelError};
use hicqa::train::{
    model_grad_check, train as train_model, OptimizerKind, TrainConfig, TrainError, TrainOutcome, TrainReport,
};
use hicqa::{Precision, Scalar};

pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

/// An error together with the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_INVALID, error: error.into() }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(e) = e.downcast_ref::<TrainError>() {
        return match e {
            TrainError::Diverged { .. } => EXIT_DIVERGED,
            TrainError::Config(_) | TrainError::Model(ModelError::Hyper(_) | ModelError::FeatureDim { .. }) => {
                EXIT_INVALID
            }
            _ => EXIT_RUNTIME,
        };
    }
    if let Some(e) = e.downcast_ref::<CorpusError>() {
        return if matches!(e, CorpusError::Io { .. }) { EXIT_RUNTIME } else { EXIT_INVALID };
    }
    if let Some(e) = e.downcast_ref::<GraphError>() {
        return if matches!(e, GraphError::Io { .. }) { EXIT_RUNTIME } else { EXIT_INVALID };
    }
    if let Some(e) = e.downcast_ref::<CheckpointError>() {
        return if matches!(e, CheckpointError::Io { .. }) { EXIT_RUNTIME } else { EXIT_INVALID };
    }
    if let Some(e) = e.downcast_ref::<FilterError>() {
        return match e {
            FilterError::Io { .. } | FilterError::Model(_) => EXIT_RUNTIME,
            FilterError::Checkpoint(CheckpointError::Io { .. }) => EXIT_RUNTIME,
            _ => EXIT_INVALID,
        };
    }
    if let Some(e) = e.downcast_ref::<ModelError>() {
        return if matches!(e, ModelError::Hyper(_) | ModelError::FeatureDim { .. }) {
            EXIT_INVALID
        } else {
            EXIT_RUNTIME
        };
    }
    EXIT_RUNTIME
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure { code: exit_code(&error), error }
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn write_run_record<T: Serialize>(dir: &Path, record: &T) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("run.json");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, record)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `dir/stem.json` → `dir/stem.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 3)]
    pub qas_min: usize,
    #[arg(long, default_value_t = 3)]
    pub qas_max: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 64)]
    pub f: usize,
    #[arg(long, default_value_t = 0.25, value_parser = parse_unit)]
    pub noise_rate: f64,
    /// Comma-separated subset of caption_contradiction, image_misalignment, duplicate_qa.
    #[arg(long, value_delimiter = ',', default_value = "image_misalignment,caption_contradiction,duplicate_qa")]
    pub noise_kinds: Vec<NoiseKind>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Corpus manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Oracle labels; defaults to `<out stem>.oracle.json`.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_samples: a.n_samples,
        qas_min: a.qas_min,
        qas_max: a.qas_max,
        f: a.f,
        noise_rate: a.noise_rate,
        noise_kinds: a.noise_kinds.clone(),
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (corpus, oracle) = synth_corpus(&cfg)?;
    write_corpus(&corpus, &a.out)?;
    let oracle_path = a.oracle.clone().unwrap_or_else(|| sibling(&a.out, "oracle.json"));
    write_json(&oracle, &oracle_path)?;
    println!(
        "wrote {} samples / {} QAs ({} corrupt) to {}; oracle {}",
        corpus.samples.len(),
        corpus.n_qas(),
        oracle.n_corrupt(),
        a.out.display(),
        oracle_path.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write the validation report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn validate(a: &ValidateArgs) -> CmdResult {
    let report = match load_corpus(&a.corpus) {
        Ok(corpus) => hicqa::corpus::validate_corpus(&corpus),
        Err(CorpusError::Invalid(report)) => report,
        Err(e) => {
            println!("{}: 1 error", a.corpus.display());
            println!("  error: {e}");
            return Err(Failure::invalid(e));
        }
    };
    if let Some(path) = &a.report {
        write_json(&report, path)?;
    }
    println!(
        "{}: {} samples, {} QAs, {} error(s), {} warning(s)",
        a.corpus.display(),
        report.n_samples,
        report.n_qas,
        report.errors.len(),
        report.warnings.len()
    );
    for i in &report.errors {
        println!("  error [{}] {}: {}", i.code, i.sample_id, i.message);
    }
    for i in &report.warnings {
        println!("  warning [{}] {}: {}", i.code, i.sample_id, i.message);
    }
    if report.is_ok() {
        Ok(())
    } else {
        Err(Failure::invalid(anyhow::anyhow!("{} validation error(s)", report.errors.len())))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BuildArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Weight of CLIP consistency in the keep label.
    #[arg(long, default_value_t = DEFAULT_ALPHA, value_parser = parse_unit)]
    pub alpha: f64,
    /// Zero the consistency tokens and supervise keep with NLI only.
    #[arg(long)]
    pub no_clip_token: bool,
    /// Supervise keep with CLIP only; supports-edge attributes become 1.
    #[arg(long)]
    pub no_nli: bool,
    /// Zero the consistency tokens, keeping the fused keep label.
    #[arg(long)]
    pub no_token: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn build(a: &BuildArgs) -> CmdResult {
    let corpus = load_corpus(&a.corpus)?;
    let cfg = GraphConfig {
        alpha: a.alpha,
        ablation: Ablation { no_clip_token: a.no_clip_token, no_nli: a.no_nli, no_token: a.no_token },
    };
    let graph = build_graph_with(&corpus, &cfg)?;
    write_graph(&graph, &a.out)?;
    let edges: Vec<String> =
        graph.relations.iter().map(|r| format!("{}={}", r.relation.name(), r.edges.len())).collect();
    println!(
        "graph {}: {} images, {} captions, {} QAs; edges {}; hash {}",
        a.out.display(),
        graph.image.len(),
        graph.caption.len(),
        graph.qa.len(),
        edges.join(" "),
        graph.content_hash()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 256)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.2)]
    pub leaky_slope: f64,
    /// single or double.
    #[arg(long, default_value_t = Precision::Single)]
    pub precision: Precision,
}

impl HyperArgs {
    fn hyper(&self) -> HyperParams {
        HyperParams {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
            precision: self.precision,
            ..HyperParams::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Final checkpoint; the best-loss checkpoint goes to `<stem>.best.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch report; defaults to `<out stem>.report.jsonl`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long = "lr", default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    /// Keep-loss weight; 1 disables capacity supervision.
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub lambda: f64,
    /// Capacity class weights EU,HG,EP; inverse frequency when omitted.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub class_weights: Option<Vec<f64>>,
    /// adamw or sgd.
    #[arg(long, default_value_t = OptimizerKind::AdamW)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn write_report(report: &TrainReport, path: &Path) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    report.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_training<T: Scalar>(a: &TrainArgs, report_path: &Path) -> CmdResult {
    let graph = read_graph(&a.graph)?;
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        clip_norm: a.clip_norm,
        lambda: a.lambda,
        class_weights_cap: a.class_weights.as_ref().map(|w| [w[0], w[1], w[2]]),
        seed: a.seed,
        optimizer: a.optimizer,
        eval_every: a.eval_every,
        ..TrainConfig::default()
    };
    let outcome: TrainOutcome<T> = match train_model::<T>(&graph, &a.hyper.hyper(), &config) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, what, last_finite, report }) => {
            let path = sibling(&a.out, "last_finite.json");
            last_finite.write(&path)?;
            write_report(&report, report_path)?;
            println!("diverged at epoch {epoch} (non-finite {what}); last finite weights in {}", path.display());
            return Err(Failure {
                code: EXIT_DIVERGED,
                error: anyhow::anyhow!("training diverged at epoch {epoch}: non-finite {what}"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    outcome.final_checkpoint.write(&a.out)?;
    let best = sibling(&a.out, "best.json");
    outcome.best_checkpoint.write(&best)?;
    write_report(&outcome.report, report_path)?;
    match outcome.report.epochs.last() {
        Some(last) => println!(
            "trained {} epochs ({} parameters): total loss {:.5}, keep AUROC vs weak labels {}, best epoch {:?}",
            outcome.report.epochs.len(),
            outcome.model.parameter_count(),
            last.total_loss,
            last.keep_auroc.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            outcome.best_epoch
        ),
        None => println!("0 epochs: checkpoint holds the initialization"),
    }
    println!("checkpoint {}, best {}, report {}", a.out.display(), best.display(), report_path.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.out, "report.jsonl"));
    match a.hyper.precision {
        Precision::Single => run_training::<f32>(a, &report_path),
        Precision::Double => run_training::<f64>(a, &report_path),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// hicqa, nli, clip or nclip.
    #[arg(long, default_value_t = Method::Hicqa)]
    pub method: Method,
    /// Required for `--method hicqa`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CLIP share of the NCLIP mixture.
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub nclip_weight: f64,
    /// Score even if the checkpoint was trained on a different graph.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn score(a: &ScoreArgs) -> CmdResult {
    let graph = read_graph(&a.graph)?;
    let scores = match a.method {
        Method::Hicqa => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Failure::invalid(anyhow::anyhow!("--method hicqa needs --checkpoint")))?;
            score_hicqa(&graph, &Checkpoint::read(path)?, a.force)?
        }
        m => score_baseline(&graph, m, a.nclip_weight)?,
    };
    write_json(&scores, &a.out)?;
    let v = scores.scores();
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("{} scores for {} QAs (mean {:.4}) written to {}", scores.method, v.len(), mean, a.out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Keep ratios in (0, 1]; one manifest per ratio.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub ratios: Vec<f64>,
    /// Also write the filtered corpus for each ratio.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Receives `manifest_<ratio>.json` (and `corpus_<ratio>.jsonl`).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Leave the timestamp out of manifests so reruns are byte-identical.
    #[arg(long)]
    pub no_timestamp: bool,
}

pub fn filter(a: &FilterArgs) -> CmdResult {
    let scores: ScoreSet = read_json(&a.scores)?;
    let corpus = a.corpus.as_ref().map(load_corpus).transpose()?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let timestamp = (!a.no_timestamp).then(|| chrono::Utc::now().to_rfc3339());
    for &ratio in &a.ratios {
        let mut manifest = filter_topk(&scores, ratio)?;
        manifest.timestamp = timestamp.clone();
        let path = a.out_dir.join(format!("manifest_{ratio}.json"));
        write_json(&manifest, &path)?;
        print!("ratio {ratio}: kept {} / {} -> {}", manifest.kept.len(), manifest.n_total, path.display());
        if let Some(corpus) = &corpus {
            let kept = filter_corpus(corpus, &manifest);
            let cpath = a.out_dir.join(format!("corpus_{ratio}.jsonl"));
            write_corpus(&kept, &cpath)?;
            print!(", corpus {} ({} samples)", cpath.display(), kept.samples.len());
        }
        println!();
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Graph the scores were computed on; checked against the score set's hash.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub oracle: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let scores: ScoreSet = read_json(&a.scores)?;
    let oracle: Oracle = read_json(&a.oracle)?;
    if let Some(path) = &a.graph {
        let hash = read_graph(path)?.content_hash();
        if hash != scores.graph_hash {
            return Err(Failure::invalid(anyhow::anyhow!(
                "score set was computed on graph {}, not {} ({hash})",
                scores.graph_hash,
                path.display()
            )));
        }
    }
    let metrics = eval_detection(&scores, &oracle, &a.ratios)?;
    write_json(&metrics, &a.out)?;
    let auroc = metrics.auroc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("{}: AUROC {auroc} over {} QAs ({} corrupt)", metrics.method, metrics.n, metrics.n_corrupt);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    for r in &metrics.at_ratio {
        println!(
            "  keep {:.2}: dropped {:>5}  precision {}  recall {}",
            r.keep_ratio,
            r.n_dropped,
            fmt(r.precision),
            fmt(r.recall)
        );
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// single (checked against a double-precision reference) or double.
    #[arg(long, default_value_t = Precision::Double)]
    pub precision: Precision,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    #[arg(long, default_value_t = 3)]
    pub qas: usize,
    #[arg(long, default_value_t = 8)]
    pub f: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Maximum relative error; defaults to 1e-5 (double) or 1e-3 (single).
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_samples: a.samples,
        qas_min: a.qas,
        qas_max: a.qas,
        f: a.f,
        noise_rate: 0.0,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (corpus, _) = synth_corpus(&cfg)?;
    let graph = build_graph_with(&corpus, &GraphConfig::default())?;
    let hyper =
        HyperParams { d: a.d, layers: a.layers, heads: a.heads, precision: a.precision, ..HyperParams::default() };
    let started = std::time::Instant::now();
    let (report, tolerance) = match a.precision {
        Precision::Double => {
            (model_grad_check::<f64, f64>(&graph, &hyper, a.seed, a.step)?, a.tolerance.unwrap_or(1e-5))
        }
        Precision::Single => {
            (model_grad_check::<f32, f64>(&graph, &hyper, a.seed, a.step)?, a.tolerance.unwrap_or(1e-3))
        }
    };
    let ok = report.max_rel_err < tolerance;
    println!(
        "{} precision: {} gradients checked, max relative error {:.3e}, max absolute error {:.3e} ({:.2}s) -> {}",
        a.precision,
        report.checked,
        report.max_rel_err,
        report.max_abs_err,
        started.elapsed().as_secs_f64(),
        if ok { "ok" } else { "FAILED" }
    );
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RUNTIME,
            error: anyhow::anyhow!("max relative error {:.3e} exceeds {tolerance:.1e}", report.max_rel_err),
        })
    }
}
