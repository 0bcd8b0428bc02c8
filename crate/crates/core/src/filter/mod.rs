//! Scoring QA items, keeping the top fraction, and measuring detection
//! quality on corpora with planted noise.

pub mod metrics;
pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{auroc, eval_detection, DetectionMetrics, Histogram, RatioMetrics};
pub use synth::{synth_corpus, NoiseKind, SynthConfig};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::Corpus;
use crate::graph::{HeteroGraph, NodeId};
use crate::model::{model_forward, ModelError};
use crate::scalar::{Precision, Scalar};
use crate::train::keep_probabilities;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint was trained on graph {checkpoint}, scoring graph {graph}")]
    GraphHashMismatch { checkpoint: String, graph: String },
    #[error("keep ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("NCLIP weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("method {0} is not a baseline")]
    NotBaseline(Method),
    #[error("non-finite score for QA {0}")]
    NonFiniteScore(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("synthetic corpus: {0}")]
    Synth(String),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hicqa,
    Nli,
    Clip,
    Nclip,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Hicqa, Method::Nli, Method::Clip, Method::Nclip];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hicqa => "hicqa",
            Method::Nli => "nli",
            Method::Clip => "clip",
            Method::Nclip => "nclip",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method `{s}` (expected hicqa, nli, clip or nclip)"))
    }
}

/// Identifies a QA item across files.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QaKey {
    pub sample_id: String,
    pub qa_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: String,
    pub qa_id: String,
    pub score: f64,
}

impl ScoreEntry {
    pub fn key(&self) -> QaKey {
        QaKey { sample_id: self.sample_id.clone(), qa_id: self.qa_id.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    /// CLIP weight of the NCLIP mixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nclip_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
}

/// Per-QA keep scores in graph row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub method: Method,
    pub params: ScoreParams,
    pub graph_hash: String,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    fn from_scores(method: Method, params: ScoreParams, graph: &HeteroGraph, scores: Vec<f64>) -> Result<Self> {
        let entries = graph
            .qa_ids()
            .iter()
            .zip(scores)
            .map(|(id, score)| {
                let qa_id = id.qa_id.clone().unwrap_or_default();
                if score.is_finite() {
                    Ok(ScoreEntry { sample_id: id.sample_id.clone(), qa_id, score })
                } else {
                    Err(FilterError::NonFiniteScore(qa_id))
                }
            })
            .collect::<Result<_>>()?;
        Ok(ScoreSet { method, params, graph_hash: graph.content_hash(), entries })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }
}

fn hicqa_scores<T: Scalar>(graph: &HeteroGraph, ckpt: &Checkpoint) -> Result<Vec<f64>> {
    let model = ckpt.to_model::<T>()?;
    let out = model_forward(graph, &model)?;
    Ok(keep_probabilities(&out.z_keep))
}

/// Keep probability from a trained checkpoint, evaluated in eval mode at the
/// checkpoint's precision. Refuses a checkpoint trained on a different graph
/// unless `force` is set.
pub fn score_hicqa(graph: &HeteroGraph, ckpt: &Checkpoint, force: bool) -> Result<ScoreSet> {
    let graph_hash = graph.content_hash();
    if ckpt.graph_hash != graph_hash {
        if !force {
            return Err(FilterError::GraphHashMismatch { checkpoint: ckpt.graph_hash.clone(), graph: graph_hash });
        }
        log::warn!("scoring graph {graph_hash} with checkpoint trained on {}", ckpt.graph_hash);
    }
    let scores = match ckpt.hyper.precision {
        Precision::Single => hicqa_scores::<f32>(graph, ckpt)?,
        Precision::Double => hicqa_scores::<f64>(graph, ckpt)?,
    };
    let params = ScoreParams { nclip_weight: None, checkpoint_hash: Some(ckpt.content_hash()) };
    ScoreSet::from_scores(Method::Hicqa, params, graph, scores)
}

/// Scores read straight from the graph's unablated signals. `nclip_weight`
/// is the CLIP share of the NCLIP mixture and is ignored otherwise.
pub fn score_baseline(graph: &HeteroGraph, method: Method, nclip_weight: f64) -> Result<ScoreSet> {
    let labels = &graph.labels;
    let (scores, params) = match method {
        Method::Hicqa => return Err(FilterError::NotBaseline(method)),
        Method::Nli => (labels.nli_entailment.clone(), ScoreParams::default()),
        Method::Clip => (labels.clip_consistency.clone(), ScoreParams::default()),
        Method::Nclip => {
            if !(0.0..=1.0).contains(&nclip_weight) {
                return Err(FilterError::InvalidWeight(nclip_weight));
            }
            let w = nclip_weight;
            let s = labels
                .clip_consistency
                .iter()
                .zip(&labels.nli_entailment)
                .map(|(c, n)| w * c + (1.0 - w) * n)
                .collect();
            (s, ScoreParams { nclip_weight: Some(w), checkpoint_hash: None })
        }
    };
    ScoreSet::from_scores(method, params, graph, scores)
}

/// Number of items kept at `ratio`: `ceil(ratio · n)`, with products within
/// rounding error of an integer treated as that integer.
pub fn keep_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(FilterError::InvalidRatio(ratio));
    }
    if n == 0 {
        return Ok(0);
    }
    let x = ratio * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    Ok((k as usize).clamp(1, n))
}

/// Outcome of a top-k filtering pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterManifest {
    pub method: Method,
    pub keep_ratio: f64,
    pub n_total: usize,
    /// Kept QAs, best score first.
    pub kept: Vec<QaKey>,
    /// Dropped QAs, best score first.
    pub dropped: Vec<QaKey>,
    pub graph_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nclip_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// Keeps the `ceil(ratio · n)` highest-scoring QAs. Equal scores are ordered
/// by ascending `qa_id`, then `sample_id`.
pub fn filter_topk(scores: &ScoreSet, ratio: f64) -> Result<FilterManifest> {
    let n = scores.entries.len();
    let k = keep_count(n, ratio)?;
    let mut order: Vec<&ScoreEntry> = scores.entries.iter().collect();
    order.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| a.qa_id.cmp(&b.qa_id)).then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    let keys: Vec<QaKey> = order.into_iter().map(ScoreEntry::key).collect();
    let (kept, dropped) = keys.split_at(k);
    Ok(FilterManifest {
        method: scores.method,
        keep_ratio: ratio,
        n_total: n,
        kept: kept.to_vec(),
        dropped: dropped.to_vec(),
        graph_hash: scores.graph_hash.clone(),
        checkpoint_hash: scores.params.checkpoint_hash.clone(),
        nclip_weight: scores.params.nclip_weight,
        timestamp: None,
    })
}

/// The corpus restricted to the kept QAs; samples left without QAs are dropped.
pub fn filter_corpus(corpus: &Corpus, manifest: &FilterManifest) -> Corpus {
    let kept: HashSet<&QaKey> = manifest.kept.iter().collect();
    let mut out = Corpus { f: corpus.f, samples: Vec::new(), source_meta: corpus.source_meta.clone() };
    for s in &corpus.samples {
        let qas: Vec<_> = s
            .qas
            .iter()
            .filter(|q| kept.contains(&QaKey { sample_id: s.sample_id.clone(), qa_id: q.qa_id.clone() }))
            .cloned()
            .collect();
        if !qas.is_empty() {
            out.samples.push(crate::corpus::Sample { qas, ..s.clone() });
        }
    }
    out
}

/// Ground truth for one QA of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub sample_id: String,
    pub qa_id: String,
    pub corrupt: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<NoiseKind>,
    /// For duplicates, the QA that was copied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_qa_id: Option<String>,
}

impl OracleEntry {
    pub fn key(&self) -> QaKey {
        QaKey { sample_id: self.sample_id.clone(), qa_id: self.qa_id.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub seed: u64,
    pub noise_rate: f64,
    pub entries: Vec<OracleEntry>,
}

impl Oracle {
    pub fn n_corrupt(&self) -> usize {
        self.entries.iter().filter(|e| e.corrupt).count()
    }
}

/// Pretty-printed JSON file.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| FilterError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| FilterError::Io { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

impl From<&NodeId> for QaKey {
    fn from(id: &NodeId) -> Self {
        QaKey { sample_id: id.sample_id.clone(), qa_id: id.qa_id.clone().unwrap_or_default() }
    }
}
