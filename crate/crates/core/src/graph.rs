//! Heterogeneous Image / Caption / QA graph construction.
//!
//! Node rows follow manifest order (samples, then QAs in listed order) and
//! every relation stores its edges src-major, so two builds of the same
//! corpus are bit-identical and hash identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{validate_corpus, Capacity, Corpus, Sample};

pub const GRAPH_VERSION: u32 = 1;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("corpus is invalid: {0} error(s)")]
    InvalidCorpus(usize),
    #[error("ablating both the CLIP and the NLI signal leaves no keep label")]
    EmptyAblation,
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("graph json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(GraphError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = crate::corpus::l2_norm(u);
    let nv = crate::corpus::l2_norm(v);
    let denom = nu * nv;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// Cosine similarity mapped from [-1, 1] onto [0, 1].
pub fn cosine_consistency(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok((cosine(u, v)? + 1.0) / 2.0)
}

/// Cosine similarity with negative values clamped to zero.
pub fn nonneg_cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(cosine(u, v)?.max(0.0))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(GraphError::InvalidAlpha(alpha))
    }
}

/// Weak keep label: `alpha * clip + (1 - alpha) * nli`.
pub fn keep_score(clip_consistency: f64, nli_entailment: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * clip_consistency + (1.0 - alpha) * nli_entailment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Image,
    Caption,
    Qa,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Image, NodeType::Caption, NodeType::Qa];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Image => "image",
            NodeType::Caption => "caption",
            NodeType::Qa => "qa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    DescribedBy,
    AskedAbout,
    Supports,
    Similar,
}

impl Relation {
    /// Fixed order used for storage and for summing relation outputs.
    pub const ALL: [Relation; 4] = [Relation::DescribedBy, Relation::AskedAbout, Relation::Supports, Relation::Similar];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn src_type(self) -> NodeType {
        match self {
            Relation::DescribedBy | Relation::AskedAbout => NodeType::Image,
            Relation::Supports => NodeType::Caption,
            Relation::Similar => NodeType::Qa,
        }
    }

    pub fn dst_type(self) -> NodeType {
        match self {
            Relation::DescribedBy => NodeType::Caption,
            Relation::AskedAbout | Relation::Supports | Relation::Similar => NodeType::Qa,
        }
    }

    /// Whether edges carry a scalar attribute (and hence use attention).
    pub fn has_attr(self) -> bool {
        matches!(self, Relation::Supports | Relation::Similar)
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::DescribedBy => "described_by",
            Relation::AskedAbout => "asked_about",
            Relation::Supports => "supports",
            Relation::Similar => "similar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTable {
    pub node_type: NodeType,
    pub dim: usize,
    /// Row-major `len × dim`.
    pub features: Vec<f64>,
    pub node_ids: Vec<NodeId>,
}

impl NodeTable {
    fn new(node_type: NodeType, dim: usize) -> Self {
        NodeTable { node_type, dim, features: Vec::new(), node_ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRelation {
    pub relation: Relation,
    pub src_type: NodeType,
    pub dst_type: NodeType,
    /// `(src_row, dst_row)` pairs, sorted src-major.
    pub edges: Vec<(usize, usize)>,
    /// One scalar per edge for attributed relations, empty otherwise.
    pub edge_attr: Vec<f64>,
}

impl EdgeRelation {
    fn new(relation: Relation) -> Self {
        EdgeRelation {
            relation,
            src_type: relation.src_type(),
            dst_type: relation.dst_type(),
            edges: Vec::new(),
            edge_attr: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabels {
    pub keep_soft: Vec<f64>,
    pub capacity: Vec<Capacity>,
    /// Unablated image–QA consistency per QA row (the CLIP baseline score).
    pub clip_consistency: Vec<f64>,
    /// Unablated caption→answer entailment per QA row (the NLI baseline score).
    pub nli_entailment: Vec<f64>,
}

/// Ablation switches applied at construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// Zero the consistency tokens and supervise keep with NLI only.
    pub no_clip_token: bool,
    /// Supervise keep with CLIP consistency only; supports attributes become 1.0.
    pub no_nli: bool,
    /// Zero the consistency tokens but keep the fused weak label.
    #[serde(default)]
    pub no_token: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub alpha: f64,
    pub ablation: Ablation,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { alpha: DEFAULT_ALPHA, ablation: Ablation::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub version: u32,
    pub f: usize,
    pub alpha: f64,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub header: GraphHeader,
    pub image: NodeTable,
    pub caption: NodeTable,
    pub qa: NodeTable,
    /// Indexed by `Relation::index`.
    pub relations: Vec<EdgeRelation>,
    pub labels: WeakLabels,
}

impl HeteroGraph {
    pub fn f(&self) -> usize {
        self.header.f
    }

    pub fn alpha(&self) -> f64 {
        self.header.alpha
    }

    pub fn nodes(&self, t: NodeType) -> &NodeTable {
        match t {
            NodeType::Image => &self.image,
            NodeType::Caption => &self.caption,
            NodeType::Qa => &self.qa,
        }
    }

    pub fn relation(&self, r: Relation) -> &EdgeRelation {
        &self.relations[r.index()]
    }

    pub fn n_qa(&self) -> usize {
        self.qa.len()
    }

    pub fn qa_ids(&self) -> &[NodeId] {
        &self.qa.node_ids
    }

    /// Canonical serialization: compact JSON with struct field order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("graph serialization is infallible")
    }

    /// Lowercase hex SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.canonical_bytes())
    }

    /// Structural checks for graphs read from disk.
    pub fn check(&self) -> Result<()> {
        let f = self.header.f;
        check_alpha(self.header.alpha)?;
        for (t, want_dim) in [(NodeType::Image, f + 1), (NodeType::Caption, f), (NodeType::Qa, f + 1)] {
            let table = self.nodes(t);
            if table.node_type != t || table.dim != want_dim || table.features.len() != table.len() * table.dim {
                return Err(GraphError::Malformed(format!("{} table has inconsistent shape", t.name())));
            }
        }
        if self.relations.len() != Relation::ALL.len() {
            return Err(GraphError::Malformed(format!("expected 4 relations, found {}", self.relations.len())));
        }
        for r in Relation::ALL {
            let rel = self.relation(r);
            if rel.relation != r || rel.src_type != r.src_type() || rel.dst_type != r.dst_type() {
                return Err(GraphError::Malformed(format!("relation slot {} holds {:?}", r.index(), rel.relation)));
            }
            let (ns, nd) = (self.nodes(r.src_type()).len(), self.nodes(r.dst_type()).len());
            if let Some(&(s, d)) = rel.edges.iter().find(|&&(s, d)| s >= ns || d >= nd) {
                return Err(GraphError::Malformed(format!("{} edge ({s}, {d}) references a missing node", r.name())));
            }
            let want_attr = if r.has_attr() { rel.edges.len() } else { 0 };
            if rel.edge_attr.len() != want_attr {
                return Err(GraphError::Malformed(format!(
                    "{} has {} attributes for {} edges",
                    r.name(),
                    rel.edge_attr.len(),
                    rel.edges.len()
                )));
            }
        }
        let n = self.qa.len();
        let l = &self.labels;
        if l.keep_soft.len() != n
            || l.capacity.len() != n
            || l.clip_consistency.len() != n
            || l.nli_entailment.len() != n
        {
            return Err(GraphError::Malformed("label vectors do not align with QA rows".into()));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Everything one sample contributes, with sample-local row numbers.
struct SamplePart {
    image_row: Vec<f64>,
    caption_row: Vec<f64>,
    qa_rows: Vec<Vec<f64>>,
    similar: Vec<(usize, usize, f64)>,
    supports_attr: Vec<f64>,
    keep: Vec<f64>,
    clip: Vec<f64>,
}

fn build_sample(s: &Sample, cfg: &GraphConfig) -> Result<SamplePart> {
    let ab = cfg.ablation;
    let zero_tokens = ab.no_clip_token || ab.no_token;
    let token = |c: f64| if zero_tokens { 0.0 } else { c };

    let c_img_cap = cosine_consistency(&s.image_embedding, &s.caption_embedding)?;
    let mut image_row = s.image_embedding.clone();
    image_row.push(token(c_img_cap));

    let mut qa_rows = Vec::with_capacity(s.qas.len());
    let mut keep = Vec::with_capacity(s.qas.len());
    let mut clip = Vec::with_capacity(s.qas.len());
    let mut supports_attr = Vec::with_capacity(s.qas.len());
    for qa in &s.qas {
        let c = cosine_consistency(&s.image_embedding, &qa.qa_embedding)?;
        let mut row = qa.qa_embedding.clone();
        row.push(token(c));
        qa_rows.push(row);
        clip.push(c);
        let y = if ab.no_clip_token {
            qa.nli_entailment
        } else if ab.no_nli {
            c
        } else {
            keep_score(c, qa.nli_entailment, cfg.alpha)?
        };
        keep.push(y);
        supports_attr.push(if ab.no_nli { 1.0 } else { qa.nli_entailment });
    }

    let k = s.qas.len();
    let mut similar = Vec::with_capacity(k * k.saturating_sub(1));
    for a in 0..k {
        for b in 0..k {
            if a != b {
                similar.push((a, b, nonneg_cosine(&s.qas[a].qa_embedding, &s.qas[b].qa_embedding)?));
            }
        }
    }
    Ok(SamplePart { image_row, caption_row: s.caption_embedding.clone(), qa_rows, similar, supports_attr, keep, clip })
}

/// Builds the graph with default ablation settings.
pub fn build_graph(corpus: &Corpus, alpha: f64) -> Result<HeteroGraph> {
    build_graph_with(corpus, &GraphConfig { alpha, ablation: Ablation::default() })
}

pub fn build_graph_with(corpus: &Corpus, cfg: &GraphConfig) -> Result<HeteroGraph> {
    check_alpha(cfg.alpha)?;
    if cfg.ablation.no_clip_token && cfg.ablation.no_nli {
        return Err(GraphError::EmptyAblation);
    }
    let report = validate_corpus(corpus);
    if !report.is_ok() {
        return Err(GraphError::InvalidCorpus(report.errors.len()));
    }
    let f = corpus.f;
    let parts: Vec<SamplePart> = corpus.samples.par_iter().map(|s| build_sample(s, cfg)).collect::<Result<_>>()?;

    let mut image = NodeTable::new(NodeType::Image, f + 1);
    let mut caption = NodeTable::new(NodeType::Caption, f);
    let mut qa = NodeTable::new(NodeType::Qa, f + 1);
    let mut relations: Vec<EdgeRelation> = Relation::ALL.iter().map(|&r| EdgeRelation::new(r)).collect();
    let n_qa = corpus.n_qas();
    let mut labels = WeakLabels {
        keep_soft: Vec::with_capacity(n_qa),
        capacity: Vec::with_capacity(n_qa),
        clip_consistency: Vec::with_capacity(n_qa),
        nli_entailment: Vec::with_capacity(n_qa),
    };

    for (i, (s, part)) in corpus.samples.iter().zip(parts).enumerate() {
        image.features.extend_from_slice(&part.image_row);
        image.node_ids.push(NodeId { sample_id: s.sample_id.clone(), qa_id: None });
        caption.features.extend_from_slice(&part.caption_row);
        caption.node_ids.push(NodeId { sample_id: s.sample_id.clone(), qa_id: None });

        let base = qa.len();
        relations[Relation::DescribedBy.index()].edges.push((i, i));
        for (k, (rec, row)) in s.qas.iter().zip(&part.qa_rows).enumerate() {
            qa.features.extend_from_slice(row);
            qa.node_ids.push(NodeId { sample_id: s.sample_id.clone(), qa_id: Some(rec.qa_id.clone()) });
            relations[Relation::AskedAbout.index()].edges.push((i, base + k));
            let sup = &mut relations[Relation::Supports.index()];
            sup.edges.push((i, base + k));
            sup.edge_attr.push(part.supports_attr[k]);
            labels.capacity.push(rec.capacity_label);
            labels.nli_entailment.push(rec.nli_entailment);
        }
        let sim = &mut relations[Relation::Similar.index()];
        for (a, b, w) in part.similar {
            sim.edges.push((base + a, base + b));
            sim.edge_attr.push(w);
        }
        labels.keep_soft.extend(part.keep);
        labels.clip_consistency.extend(part.clip);
    }

    Ok(HeteroGraph {
        header: GraphHeader { version: GRAPH_VERSION, f, alpha: cfg.alpha, ablation: cfg.ablation },
        image,
        caption,
        qa,
        relations,
        labels,
    })
}

pub fn write_graph(graph: &HeteroGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| GraphError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(&graph.canonical_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<HeteroGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| GraphError::Io { path: path.to_path_buf(), source })?;
    let graph: HeteroGraph = serde_json::from_reader(BufReader::new(file))?;
    graph.check()?;
    Ok(graph)
}
