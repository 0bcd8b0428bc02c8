//! Corpus manifests: precomputed image/caption/QA embeddings plus NLI scores
//! and capacity labels, stored as JSONL.
//!
//! Line 1 is a header object, every following non-empty line is one sample.
//! Embedding fields are either inline float arrays or `{"ref": row}` pointers
//! into a packed little-endian `.f32` sidecar named by the header.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CORPUS_FORMAT: &str = "hicqa-corpus";
pub const CORPUS_VERSION: u32 = 1;
/// Embedding width of CLIP ViT-L/14.
pub const DEFAULT_EMBED_DIM: usize = 768;
/// Longest text (in whitespace tokens) the CLIP text tower sees without truncation.
pub const CLIP_TEXT_TOKEN_LIMIT: usize = 75;

/// Vectors whose norm is already this close to one are left untouched on load,
/// which keeps load/write/load bit-exact.
const UNIT_NORM_SLACK: f64 = 1e-9;
/// Tolerance `validate_corpus` accepts for in-memory unit vectors.
const VALIDATE_NORM_TOL: f64 = 1e-4;

/// The three question capacities: expert visual understanding, hypothesis
/// generation and experiment proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Capacity {
    EU,
    HG,
    EP,
}

impl Capacity {
    pub const ALL: [Capacity; 3] = [Capacity::EU, Capacity::HG, Capacity::EP];

    pub fn index(self) -> usize {
        match self {
            Capacity::EU => 0,
            Capacity::HG => 1,
            Capacity::EP => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Capacity::EU => "EU",
            Capacity::HG => "HG",
            Capacity::EP => "EP",
        }
    }
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Capacity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "EU" => Ok(Capacity::EU),
            "HG" => Ok(Capacity::HG),
            "EP" => Ok(Capacity::EP),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qa_id: String,
    pub question_text: String,
    pub answer_text: String,
    pub qa_embedding: Vec<f64>,
    /// Probability that the caption entails the answer.
    pub nli_entailment: f64,
    pub capacity_label: Capacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub image_embedding: Vec<f64>,
    pub caption_embedding: Vec<f64>,
    pub caption_text: String,
    pub qas: Vec<QaRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Embedding dimension shared by every vector.
    pub f: usize,
    pub samples: Vec<Sample>,
    pub source_meta: BTreeMap<String, String>,
}

impl Corpus {
    pub fn new(f: usize) -> Self {
        Corpus { f, samples: Vec::new(), source_meta: BTreeMap::new() }
    }

    pub fn n_qas(&self) -> usize {
        self.samples.iter().map(|s| s.qas.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub sample_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_samples: usize,
    pub n_qas: usize,
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, sample_id: &str, code: &str, message: impl Into<String>) {
        self.errors.push(Issue { sample_id: sample_id.to_string(), code: code.to_string(), message: message.into() });
    }

    fn warn(&mut self, sample_id: &str, code: &str, message: impl Into<String>) {
        self.warnings.push(Issue { sample_id: sample_id.to_string(), code: code.to_string(), message: message.into() });
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad header: {0}")]
    Header(String),
    #[error("sample `{sample_id}`: {field} has length {got}, expected f = {expected}")]
    Dimension { sample_id: String, field: String, expected: usize, got: usize },
    #[error("sample `{sample_id}`, qa `{qa_id}`: nli_entailment {value} outside [0, 1]")]
    NliRange { sample_id: String, qa_id: String, value: f64 },
    #[error("line {line}: unknown capacity label `{label}` (expected EU, HG or EP)")]
    UnknownCapacity { line: usize, label: String },
    #[error("sample `{sample_id}`: {field} has zero norm")]
    ZeroNorm { sample_id: String, field: String },
    #[error("sample `{sample_id}`: {field} contains a non-finite value")]
    NonFinite { sample_id: String, field: String },
    #[error("sample `{sample_id}`: {message}")]
    Sidecar { sample_id: String, message: String },
    #[error("corpus failed validation with {} error(s); first: {}", .0.errors.len(), .0.errors.first().map(|e| e.message.as_str()).unwrap_or(""))]
    Invalid(ValidationReport),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    f: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar_index: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    source_meta: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RowRef {
    Row(usize),
    Id(String),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EmbeddingField {
    Inline(Vec<f64>),
    Packed {
        #[serde(rename = "ref")]
        row: RowRef,
    },
}

#[derive(Debug, Deserialize)]
struct RawQa {
    qa_id: String,
    question_text: String,
    answer_text: String,
    qa_embedding: EmbeddingField,
    nli_entailment: f64,
    capacity_label: String,
}

#[derive(Debug, Deserialize)]
struct RawSample {
    sample_id: String,
    image_embedding: EmbeddingField,
    caption_embedding: EmbeddingField,
    caption_text: String,
    qas: Vec<RawQa>,
}

/// Packed `.f32` matrix backing `{"ref": ..}` embedding fields.
struct Sidecar {
    rows: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl Sidecar {
    fn open(manifest: &Path, header: &Header) -> Result<Option<Sidecar>> {
        let Some(name) = &header.sidecar else { return Ok(None) };
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let path = base.join(name);
        let bytes = std::fs::read(&path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
        let row_bytes = header.f * 4;
        if row_bytes == 0 || bytes.len() % row_bytes != 0 {
            return Err(CorpusError::Header(format!(
                "sidecar {} has {} bytes, not a multiple of f*4 = {row_bytes}",
                path.display(),
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let index = match &header.sidecar_index {
            Some(idx) => {
                let p = base.join(idx);
                let file = File::open(&p).map_err(|source| CorpusError::Io { path: p.clone(), source })?;
                serde_json::from_reader(BufReader::new(file))
                    .map_err(|e| CorpusError::Header(format!("sidecar index {}: {e}", p.display())))?
            }
            None => HashMap::new(),
        };
        Ok(Some(Sidecar { rows: bytes.len() / row_bytes, data, index }))
    }

    fn row(&self, f: usize, r: usize) -> Option<Vec<f64>> {
        (r < self.rows).then(|| self.data[r * f..(r + 1) * f].iter().map(|&v| v as f64).collect())
    }
}

fn resolve(
    field: EmbeddingField,
    sidecar: Option<&Sidecar>,
    f: usize,
    sample_id: &str,
    what: &str,
) -> Result<Vec<f64>> {
    match field {
        EmbeddingField::Inline(v) => Ok(v),
        EmbeddingField::Packed { row } => {
            let side = sidecar.ok_or_else(|| CorpusError::Sidecar {
                sample_id: sample_id.to_string(),
                message: format!("{what} refers to a sidecar row but the header names no sidecar"),
            })?;
            let r = match row {
                RowRef::Row(r) => r,
                RowRef::Id(id) => *side.index.get(&id).ok_or_else(|| CorpusError::Sidecar {
                    sample_id: sample_id.to_string(),
                    message: format!("{what} refers to unknown sidecar id `{id}`"),
                })?,
            };
            side.row(f, r).ok_or_else(|| CorpusError::Sidecar {
                sample_id: sample_id.to_string(),
                message: format!("{what} refers to row {r}, sidecar has {} rows", side.rows),
            })
        }
    }
}

/// Checks dimension and finiteness, then scales to unit L2 norm.
fn normalized(mut v: Vec<f64>, f: usize, sample_id: &str, field: &str) -> Result<Vec<f64>> {
    if v.len() != f {
        return Err(CorpusError::Dimension {
            sample_id: sample_id.to_string(),
            field: field.to_string(),
            expected: f,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CorpusError::NonFinite { sample_id: sample_id.to_string(), field: field.to_string() });
    }
    let norm = l2_norm(&v);
    if norm == 0.0 {
        return Err(CorpusError::ZeroNorm { sample_id: sample_id.to_string(), field: field.to_string() });
    }
    if (norm - 1.0).abs() > UNIT_NORM_SLACK {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn parse_sample(raw: RawSample, line: usize, f: usize, sidecar: Option<&Sidecar>) -> Result<Sample> {
    let sid = raw.sample_id;
    let image = resolve(raw.image_embedding, sidecar, f, &sid, "image_embedding")?;
    let caption = resolve(raw.caption_embedding, sidecar, f, &sid, "caption_embedding")?;
    let image_embedding = normalized(image, f, &sid, "image_embedding")?;
    let caption_embedding = normalized(caption, f, &sid, "caption_embedding")?;
    let mut qas = Vec::with_capacity(raw.qas.len());
    for qa in raw.qas {
        let field = format!("qas[{}].qa_embedding", qa.qa_id);
        let emb = resolve(qa.qa_embedding, sidecar, f, &sid, &field)?;
        let qa_embedding = normalized(emb, f, &sid, &field)?;
        if !(0.0..=1.0).contains(&qa.nli_entailment) {
            return Err(CorpusError::NliRange { sample_id: sid, qa_id: qa.qa_id, value: qa.nli_entailment });
        }
        let capacity_label = qa.capacity_label.parse().map_err(|label| CorpusError::UnknownCapacity { line, label })?;
        qas.push(QaRecord {
            qa_id: qa.qa_id,
            question_text: qa.question_text,
            answer_text: qa.answer_text,
            qa_embedding,
            nli_entailment: qa.nli_entailment,
            capacity_label,
        });
    }
    Ok(Sample { sample_id: sid, image_embedding, caption_embedding, caption_text: raw.caption_text, qas })
}

/// Reads a corpus manifest, re-normalizing every embedding to unit norm.
/// Any per-line or corpus-level validation error rejects the whole file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = reader.lines().enumerate();

    let header: Header = loop {
        match lines.next() {
            None => return Err(CorpusError::Header("empty manifest".into())),
            Some((i, line)) => {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
            }
        }
    };
    if header.format != CORPUS_FORMAT {
        return Err(CorpusError::Header(format!("format `{}`, expected `{CORPUS_FORMAT}`", header.format)));
    }
    if header.version != CORPUS_VERSION {
        return Err(CorpusError::Header(format!("unsupported version {}", header.version)));
    }
    if header.f == 0 {
        return Err(CorpusError::Header("f must be positive".into()));
    }
    let sidecar = Sidecar::open(path, &header)?;

    let mut corpus = Corpus { f: header.f, samples: Vec::new(), source_meta: header.source_meta };
    for (i, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
        corpus.samples.push(parse_sample(raw, i + 1, header.f, sidecar.as_ref())?);
    }
    let report = validate_corpus(&corpus);
    if !report.is_ok() {
        return Err(CorpusError::Invalid(report));
    }
    Ok(corpus)
}

fn whitespace_tokens(s: &str) -> usize {
    s.split_whitespace().count()
}

fn check_vector(report: &mut ValidationReport, f: usize, sample_id: &str, field: &str, v: &[f64]) {
    if v.len() != f {
        report.error(sample_id, "DIM_MISMATCH", format!("{field} has length {}, expected {f}", v.len()));
        return;
    }
    if v.iter().any(|x| !x.is_finite()) {
        report.error(sample_id, "NON_FINITE", format!("{field} contains a non-finite value"));
        return;
    }
    let norm = l2_norm(v);
    if norm == 0.0 {
        report.error(sample_id, "ZERO_NORM", format!("{field} has zero norm"));
    } else if (norm - 1.0).abs() > VALIDATE_NORM_TOL {
        report.error(sample_id, "NOT_UNIT_NORM", format!("{field} has norm {norm}"));
    }
}

/// Enumerates every violated corpus invariant. Never fails.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport { n_samples: corpus.samples.len(), n_qas: corpus.n_qas(), ..Default::default() };
    if corpus.f == 0 {
        report.error("", "BAD_DIM", "embedding dimension f must be positive");
    }
    let mut seen = HashSet::new();
    for s in &corpus.samples {
        let sid = s.sample_id.as_str();
        if !seen.insert(sid) {
            report.error(sid, "DUP_ID", format!("sample_id `{sid}` appears more than once"));
        }
        check_vector(&mut report, corpus.f, sid, "image_embedding", &s.image_embedding);
        check_vector(&mut report, corpus.f, sid, "caption_embedding", &s.caption_embedding);
        if whitespace_tokens(&s.caption_text) > CLIP_TEXT_TOKEN_LIMIT {
            report.warn(
                sid,
                "TEXT_OVER_CLIP_LIMIT",
                format!("caption_text has {} tokens (> {CLIP_TEXT_TOKEN_LIMIT})", whitespace_tokens(&s.caption_text)),
            );
        }
        if s.qas.is_empty() {
            report.error(sid, "NO_QA", "sample has no QA records");
        }
        let mut qa_seen = HashSet::new();
        for qa in &s.qas {
            if !qa_seen.insert(qa.qa_id.as_str()) {
                report.error(sid, "DUP_QA_ID", format!("qa_id `{}` appears more than once", qa.qa_id));
            }
            check_vector(&mut report, corpus.f, sid, &format!("qas[{}].qa_embedding", qa.qa_id), &qa.qa_embedding);
            if !(0.0..=1.0).contains(&qa.nli_entailment) {
                report.error(
                    sid,
                    "NLI_RANGE",
                    format!("qa `{}` nli_entailment {} outside [0, 1]", qa.qa_id, qa.nli_entailment),
                );
            }
            let qa_tokens = whitespace_tokens(&qa.question_text) + whitespace_tokens(&qa.answer_text);
            if qa_tokens > CLIP_TEXT_TOKEN_LIMIT {
                report.warn(
                    sid,
                    "TEXT_OVER_CLIP_LIMIT",
                    format!("qa `{}` question+answer has {qa_tokens} tokens (> {CLIP_TEXT_TOKEN_LIMIT})", qa.qa_id),
                );
            }
        }
    }
    report
}

/// Serializes a corpus to the JSONL manifest format with inline embeddings.
pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_corpus_to(corpus, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, w: &mut W) -> std::io::Result<()> {
    let header = Header {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        f: corpus.f,
        sidecar: None,
        sidecar_index: None,
        source_meta: corpus.source_meta.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for s in &corpus.samples {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
