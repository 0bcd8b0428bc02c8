//! The HiCQA hetero-GNN: per-type input projections, SAGE convolutions on the
//! image→caption / image→QA relations, edge-aware multi-head GATv2 on the
//! caption→QA and QA→QA relations, relation-sum fusion with
//! residual + LayerNorm + dropout, and the keep / capacity heads.

mod params;

use std::sync::Arc;

use thiserror::Error;

pub use params::{GatHead, HyperParams, LayerParams, Linear, Mlp, ModelParams, NormParams, SageParams};

use crate::autodiff::{Matrix, Mode, Tape, TensorError, Var};
use crate::graph::{HeteroGraph, NodeType, Relation};
use crate::rng::RngKey;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("graph has f = {graph}, model expects f = {model}")]
    FeatureDim { graph: usize, model: usize },
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: (usize, usize), got: (usize, usize) },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Edge index arrays of one relation, ready for gathers and segment ops.
#[derive(Debug, Clone)]
pub struct RelationIndex<T> {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// `E × 1` edge attributes for attention relations.
    pub attr: Option<Matrix<T>>,
    pub n_src: usize,
    pub n_dst: usize,
}

/// A graph converted to working precision.
#[derive(Debug, Clone)]
pub struct GraphTensors<T> {
    pub f: usize,
    /// Indexed by `NodeType::index`.
    pub features: Vec<Matrix<T>>,
    /// Indexed by `Relation::index`.
    pub relations: Vec<RelationIndex<T>>,
}

impl<T: Scalar> GraphTensors<T> {
    pub fn from_graph(graph: &HeteroGraph) -> Self {
        let features = NodeType::ALL
            .iter()
            .map(|&t| {
                let tbl = graph.nodes(t);
                Matrix::from_vec(tbl.len(), tbl.dim, tbl.features.iter().map(|&v| T::of(v)).collect())
                    .expect("node table shape")
            })
            .collect();
        let relations = Relation::ALL
            .iter()
            .map(|&r| {
                let rel = graph.relation(r);
                RelationIndex {
                    src: rel.edges.iter().map(|e| e.0).collect(),
                    dst: rel.edges.iter().map(|e| e.1).collect(),
                    attr: r.has_attr().then(|| {
                        Matrix::from_vec(rel.len(), 1, rel.edge_attr.iter().map(|&v| T::of(v)).collect())
                            .expect("edge attributes")
                    }),
                    n_src: graph.nodes(r.src_type()).len(),
                    n_dst: graph.nodes(r.dst_type()).len(),
                }
            })
            .collect();
        GraphTensors { f: graph.f(), features, relations }
    }

    pub fn n(&self, t: NodeType) -> usize {
        self.features[t.index()].rows()
    }

    pub fn relation(&self, r: Relation) -> &RelationIndex<T> {
        &self.relations[r.index()]
    }
}

/// Attention coefficients of one head (`E × 1`), in edge order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub relation: Relation,
    pub head: usize,
    pub weights: Var,
}

/// Handles of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Final hidden states, indexed by `NodeType::index`.
    pub hidden: Vec<Var>,
    pub z_keep: Var,
    pub z_cap: Var,
    pub attention: Vec<AttentionRecord>,
}

/// Materialized outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub hidden: Vec<Matrix<T>>,
    /// `n_qa × 2` keep logits.
    pub z_keep: Matrix<T>,
    /// `n_qa × 3` capacity logits (EU, HG, EP).
    pub z_cap: Matrix<T>,
    /// `(layer, relation, head, weights)` for every attention head.
    pub attention: Vec<(usize, Relation, usize, Vec<T>)>,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, l: &Linear<Var>) -> Result<Var> {
    Ok(tape.affine(x, l.weight, l.bias)?)
}

/// Per-type input projections into the hidden space.
pub fn project_inputs<T: Scalar>(tape: &mut Tape<T>, features: &[Var], params: &ModelParams<Var>) -> Result<Vec<Var>> {
    features.iter().zip(&params.proj).map(|(&x, p)| linear(tape, x, p)).collect()
}

/// `ReLU(W_self h_u + W_neigh · mean{h_v})`; destinations without incoming
/// edges get a zero neighbor term.
pub fn sage_conv<T: Scalar>(
    tape: &mut Tape<T>,
    h_src: Var,
    h_dst: Var,
    rel: &RelationIndex<T>,
    p: &SageParams<Var>,
) -> Result<Var> {
    let gathered = tape.gather_rows(h_src, rel.src.clone())?;
    let mean = tape.segment_mean(gathered, rel.dst.clone(), rel.n_dst)?;
    let own = linear(tape, h_dst, &p.w_self)?;
    let neigh = tape.matmul(mean, p.w_neigh)?;
    let sum = tape.add(own, neigh)?;
    Ok(tape.relu(sum))
}

/// Edge-aware multi-head GATv2. Per head the score of edge `v → u` is
/// `aᵀ LeakyReLU([W h_u ‖ W h_v ‖ w_e e_uv])`, normalized by softmax over the
/// incoming edges of `u`; messages `W h_v` are attention-weighted and summed,
/// heads are averaged, then ReLU. Returns the output and one attention
/// column per head.
pub fn gatv2_conv<T: Scalar>(
    tape: &mut Tape<T>,
    h_src: Var,
    h_dst: Var,
    rel: &RelationIndex<T>,
    heads: &[GatHead<Var>],
    leaky_slope: T,
) -> Result<(Var, Vec<Var>)> {
    let attr = rel
        .attr
        .as_ref()
        .ok_or_else(|| TensorError::Shape { op: "gatv2_conv", detail: "relation has no edge attributes".into() })?;
    if attr.rows() != rel.src.len() {
        return Err(
            TensorError::Shape { op: "gatv2_conv", detail: "edge attributes misaligned with edges".into() }.into()
        );
    }
    let attr = tape.constant(attr.clone());
    let mut total: Option<Var> = None;
    let mut attention = Vec::with_capacity(heads.len());
    for head in heads {
        let wh_src = linear(tape, h_src, &head.w)?;
        let wh_dst = if h_src == h_dst { wh_src } else { linear(tape, h_dst, &head.w)? };
        let at_dst = tape.gather_rows(wh_dst, rel.dst.clone())?;
        let at_src = tape.gather_rows(wh_src, rel.src.clone())?;
        let edge = tape.matmul(attr, head.w_edge)?;
        let cat = tape.concat_cols(&[at_dst, at_src, edge])?;
        let act = tape.leaky_relu(cat, leaky_slope);
        let score = tape.matmul(act, head.att)?;
        let alpha = tape.segment_softmax(score, rel.dst.clone(), rel.n_dst)?;
        let msg = tape.scale_rows(at_src, alpha)?;
        let agg = tape.segment_sum(msg, rel.dst.clone(), rel.n_dst)?;
        total = Some(match total {
            Some(t) => tape.add(t, agg)?,
            None => agg,
        });
        attention.push(alpha);
    }
    let total = total.ok_or_else(|| ModelError::Hyper("attention needs at least one head".into()))?;
    let mean = tape.scale(total, T::one() / T::of(heads.len() as f64));
    Ok((tape.relu(mean), attention))
}

/// One heterogeneous layer: relation outputs are summed per destination type
/// in `Relation::ALL` order, then `Dropout(LN(ReLU(sum) + h))` per type.
/// Image nodes receive no relation and update through the residual path only.
#[allow(clippy::too_many_arguments)]
pub fn hetero_layer<T: Scalar>(
    tape: &mut Tape<T>,
    h: &[Var],
    gt: &GraphTensors<T>,
    lp: &LayerParams<Var>,
    layer: usize,
    hyper: &HyperParams,
    mode: Mode,
    dropout_key: RngKey,
    attention: &mut Vec<AttentionRecord>,
) -> Result<Vec<Var>> {
    let (img, cap, qa) = (h[NodeType::Image.index()], h[NodeType::Caption.index()], h[NodeType::Qa.index()]);
    let slope = T::of(hyper.leaky_slope);

    let mut fused: Vec<Option<Var>> = vec![None; 3];
    for r in Relation::ALL {
        let rel = gt.relation(r);
        let (src, dst) = (h[r.src_type().index()], h[r.dst_type().index()]);
        let out = match r {
            Relation::DescribedBy => sage_conv(tape, src, dst, rel, &lp.described_by)?,
            Relation::AskedAbout => sage_conv(tape, src, dst, rel, &lp.asked_about)?,
            Relation::Supports | Relation::Similar => {
                let heads = if r == Relation::Supports { &lp.supports } else { &lp.similar };
                let (out, att) = gatv2_conv(tape, src, dst, rel, heads, slope)?;
                attention.extend(att.into_iter().enumerate().map(|(head, weights)| AttentionRecord {
                    layer,
                    relation: r,
                    head,
                    weights,
                }));
                out
            }
        };
        let slot = &mut fused[r.dst_type().index()];
        *slot = Some(match *slot {
            Some(acc) => tape.add(acc, out)?,
            None => out,
        });
    }

    let mut next = Vec::with_capacity(3);
    for (t, &hv) in NodeType::ALL.iter().zip([img, cap, qa].iter()) {
        let pre = match fused[t.index()] {
            Some(sum) => {
                let act = tape.relu(sum);
                tape.add(act, hv)?
            }
            None => hv,
        };
        let norm = &lp.norm[t.index()];
        let normed = tape.layer_norm(pre, norm.gamma, norm.beta, T::of(hyper.ln_eps))?;
        let mut rng = dropout_key.split(t.index() as u64).rng();
        next.push(tape.dropout(normed, hyper.dropout, mode, &mut rng)?);
    }
    Ok(next)
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, m: &Mlp<Var>) -> Result<Var> {
    let hidden = linear(tape, x, &m.hidden)?;
    let act = tape.relu(hidden);
    linear(tape, act, &m.out)
}

/// Records the full model on `tape`. `dropout_key` seeds the per-layer,
/// per-type dropout streams and is unused in eval mode.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    gt: &GraphTensors<T>,
    params: &ModelParams<Var>,
    hyper: &HyperParams,
    mode: Mode,
    dropout_key: RngKey,
) -> Result<TapeForward> {
    let features: Vec<Var> = gt.features.iter().map(|m| tape.constant(m.clone())).collect();
    let mut h = project_inputs(tape, &features, params)?;
    let mut attention = Vec::new();
    for (l, lp) in params.layers.iter().enumerate() {
        h = hetero_layer(tape, &h, gt, lp, l, hyper, mode, dropout_key.split(l as u64), &mut attention)?;
        if h.iter().any(|&v| !tape.value(v).is_finite()) {
            return Err(ModelError::NonFinite { layer: l });
        }
    }
    let qa = h[NodeType::Qa.index()];
    let z_keep = mlp(tape, qa, &params.keep)?;
    let z_cap = mlp(tape, qa, &params.cap)?;
    if !tape.value(z_keep).is_finite() || !tape.value(z_cap).is_finite() {
        return Err(ModelError::NonFinite { layer: params.layers.len() });
    }
    Ok(TapeForward { hidden: h, z_keep, z_cap, attention })
}

/// Hyperparameters plus weights for a graph with embedding width `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub f: usize,
    pub hyper: HyperParams,
    pub params: ModelParams<Matrix<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init(f: usize, hyper: HyperParams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let params = ModelParams::init(f, &hyper, RngKey::new(seed).named("init"));
        Ok(Model { f, hyper, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Checks that every leaf matches the shape implied by `(f, hyper)`.
    pub fn check_shapes(&self) -> Result<()> {
        let want = ModelParams::<Matrix<T>>::zeros(self.f, &self.hyper);
        let want: Vec<(String, (usize, usize))> =
            want.map(|n, m| (n.to_string(), m.shape())).leaves().into_iter().cloned().collect();
        let got: Vec<(String, (usize, usize))> =
            self.params.map(|n, m| (n.to_string(), m.shape())).leaves().into_iter().cloned().collect();
        for ((wn, ws), (gn, gs)) in want.iter().zip(&got) {
            if wn != gn {
                return Err(ModelError::UnexpectedParam(gn.clone()));
            }
            if ws != gs {
                return Err(ModelError::ParamShape { name: wn.clone(), expected: *ws, got: *gs });
            }
        }
        if want.len() != got.len() {
            return Err(ModelError::Hyper("parameter tree does not match hyperparameters".into()));
        }
        Ok(())
    }

    pub fn forward(&self, gt: &GraphTensors<T>, mode: Mode, dropout_key: RngKey) -> Result<ForwardOutput<T>> {
        if gt.f != self.f {
            return Err(ModelError::FeatureDim { graph: gt.f, model: self.f });
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let out = forward_on_tape(&mut tape, gt, &vars, &self.hyper, mode, dropout_key)?;
        Ok(ForwardOutput {
            hidden: out.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            z_keep: tape.value(out.z_keep).clone(),
            z_cap: tape.value(out.z_cap).clone(),
            attention: out
                .attention
                .iter()
                .map(|a| (a.layer, a.relation, a.head, tape.value(a.weights).data().to_vec()))
                .collect(),
        })
    }
}

/// Eval-mode forward pass over a graph.
pub fn model_forward<T: Scalar>(graph: &HeteroGraph, model: &Model<T>) -> Result<ForwardOutput<T>> {
    model.forward(&GraphTensors::from_graph(graph), Mode::Eval, RngKey::new(0))
}
