//! Parameter tree of the HiCQA model.
//!
//! The same structure is instantiated with `Matrix<T>` (stored weights),
//! `Var` (weights registered on a tape) and optimizer state, and every leaf
//! carries a stable dotted name used by checkpoints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Matrix, Tape, Var};
use crate::graph::{NodeType, Relation, DEFAULT_ALPHA};
use crate::rng::RngKey;
use crate::scalar::{Precision, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Hidden width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Negative slope of the attention nonlinearity.
    pub leaky_slope: f64,
    /// Keep-label fusion weight of the graph the model is trained on.
    pub alpha: f64,
    pub precision: Precision,
    /// Include bias vectors in the linear maps.
    pub bias: bool,
    pub ln_eps: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            d: 256,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            leaky_slope: 0.2,
            alpha: DEFAULT_ALPHA,
            precision: Precision::Single,
            bias: true,
            ln_eps: 1e-5,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Hyper(m.to_string()));
        if self.d == 0 || self.heads == 0 {
            return fail("d and heads must be positive");
        }
        if self.d % self.heads != 0 {
            return fail("d must be divisible by heads");
        }
        if self.layers == 0 {
            return fail("at least one layer is required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if !(self.ln_eps > 0.0) || !self.leaky_slope.is_finite() {
            return fail("ln_eps must be positive and leaky_slope finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageParams<P> {
    pub w_self: Linear<P>,
    pub w_neigh: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead<P> {
    /// Shared projection for both endpoints.
    pub w: Linear<P>,
    /// Attention vector over `[W h_dst ‖ W h_src ‖ w_edge e]`, shape `3d × 1`.
    pub att: P,
    /// Edge-attribute projection, shape `1 × d`.
    pub w_edge: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    pub described_by: SageParams<P>,
    pub asked_about: SageParams<P>,
    pub supports: Vec<GatHead<P>>,
    pub similar: Vec<GatHead<P>>,
    /// Indexed by `NodeType::index`.
    pub norm: Vec<NormParams<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<P> {
    pub hidden: Linear<P>,
    pub out: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    /// Indexed by `NodeType::index`.
    pub proj: Vec<Linear<P>>,
    pub layers: Vec<LayerParams<P>>,
    pub keep: Mlp<P>,
    pub cap: Mlp<P>,
}

type MapResult<Q, E> = Result<Q, E>;

impl<P> Linear<P> {
    fn try_map<'a, Q, E>(
        &'a self,
        name: &str,
        f: &mut impl FnMut(&str, &'a P) -> MapResult<Q, E>,
    ) -> MapResult<Linear<Q>, E> {
        Ok(Linear {
            weight: f(&format!("{name}.weight"), &self.weight)?,
            bias: match &self.bias {
                Some(b) => Some(f(&format!("{name}.bias"), b)?),
                None => None,
            },
        })
    }

    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut P)) {
        f(&format!("{name}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{name}.bias"), b);
        }
    }
}

impl<P> SageParams<P> {
    fn try_map<'a, Q, E>(
        &'a self,
        name: &str,
        f: &mut impl FnMut(&str, &'a P) -> MapResult<Q, E>,
    ) -> MapResult<SageParams<Q>, E> {
        Ok(SageParams {
            w_self: self.w_self.try_map(&format!("{name}.w_self"), f)?,
            w_neigh: f(&format!("{name}.w_neigh"), &self.w_neigh)?,
        })
    }

    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut P)) {
        self.w_self.visit_mut(&format!("{name}.w_self"), f);
        f(&format!("{name}.w_neigh"), &mut self.w_neigh);
    }
}

impl<P> GatHead<P> {
    fn try_map<'a, Q, E>(
        &'a self,
        name: &str,
        f: &mut impl FnMut(&str, &'a P) -> MapResult<Q, E>,
    ) -> MapResult<GatHead<Q>, E> {
        Ok(GatHead {
            w: self.w.try_map(&format!("{name}.w"), f)?,
            att: f(&format!("{name}.att"), &self.att)?,
            w_edge: f(&format!("{name}.w_edge"), &self.w_edge)?,
        })
    }

    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut P)) {
        self.w.visit_mut(&format!("{name}.w"), f);
        f(&format!("{name}.att"), &mut self.att);
        f(&format!("{name}.w_edge"), &mut self.w_edge);
    }
}

impl<P> Mlp<P> {
    fn try_map<'a, Q, E>(
        &'a self,
        name: &str,
        f: &mut impl FnMut(&str, &'a P) -> MapResult<Q, E>,
    ) -> MapResult<Mlp<Q>, E> {
        Ok(Mlp {
            hidden: self.hidden.try_map(&format!("{name}.0"), f)?,
            out: self.out.try_map(&format!("{name}.1"), f)?,
        })
    }

    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut P)) {
        self.hidden.visit_mut(&format!("{name}.0"), f);
        self.out.visit_mut(&format!("{name}.1"), f);
    }
}

impl<P> LayerParams<P> {
    fn try_map<'a, Q, E>(
        &'a self,
        name: &str,
        f: &mut impl FnMut(&str, &'a P) -> MapResult<Q, E>,
    ) -> MapResult<LayerParams<Q>, E> {
        let heads = |rel: Relation, hs: &'a [GatHead<P>], f: &mut _| -> MapResult<Vec<GatHead<Q>>, E> {
            hs.iter().enumerate().map(|(h, head)| head.try_map(&format!("{name}.{}.head{h}", rel.name()), f)).collect()
        };
        let described_by = self.described_by.try_map(&format!("{name}.{}", Relation::DescribedBy.name()), f)?;
        let asked_about = self.asked_about.try_map(&format!("{name}.{}", Relation::AskedAbout.name()), f)?;
        let supports = heads(Relation::Supports, &self.supports, f)?;
        let similar = heads(Relation::Similar, &self.similar, f)?;
        Ok(LayerParams {
            described_by,
            asked_about,
            supports,
            similar,
            norm: self
                .norm
                .iter()
                .zip(NodeType::ALL)
                .map(|(n, t)| {
                    Ok(NormParams {
                        gamma: f(&format!("{name}.norm.{}.gamma", t.name()), &n.gamma)?,
                        beta: f(&format!("{name}.norm.{}.beta", t.name()), &n.beta)?,
                    })
                })
                .collect::<MapResult<_, E>>()?,
        })
    }

    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut P)) {
        self.described_by.visit_mut(&format!("{name}.{}", Relation::DescribedBy.name()), f);
        self.asked_about.visit_mut(&format!("{name}.{}", Relation::AskedAbout.name()), f);
        for (h, head) in self.supports.iter_mut().enumerate() {
            head.visit_mut(&format!("{name}.{}.head{h}", Relation::Supports.name()), f);
        }
        for (h, head) in self.similar.iter_mut().enumerate() {
            head.visit_mut(&format!("{name}.{}.head{h}", Relation::Similar.name()), f);
        }
        for (n, t) in self.norm.iter_mut().zip(NodeType::ALL) {
            f(&format!("{name}.norm.{}.gamma", t.name()), &mut n.gamma);
            f(&format!("{name}.norm.{}.beta", t.name()), &mut n.beta);
        }
    }
}

impl<P> ModelParams<P> {
    /// Maps every leaf, in canonical order, through `f(name, leaf)`.
    pub fn try_map<'a, Q, E>(
        &'a self,
        mut f: impl FnMut(&str, &'a P) -> MapResult<Q, E>,
    ) -> MapResult<ModelParams<Q>, E> {
        let f = &mut f;
        Ok(ModelParams {
            proj: self
                .proj
                .iter()
                .zip(NodeType::ALL)
                .map(|(p, t)| p.try_map(&format!("proj.{}", t.name()), f))
                .collect::<MapResult<_, E>>()?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, lp)| lp.try_map(&format!("layer{l}"), f))
                .collect::<MapResult<_, E>>()?,
            keep: self.keep.try_map("head.keep", f)?,
            cap: self.cap.try_map("head.cap", f)?,
        })
    }

    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> ModelParams<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p))).unwrap_or_else(|e| match e {})
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a P)) {
        self.map(|n, p| f(n, p));
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut P)) {
        let f = &mut f;
        for (p, t) in self.proj.iter_mut().zip(NodeType::ALL) {
            p.visit_mut(&format!("proj.{}", t.name()), f);
        }
        for (l, lp) in self.layers.iter_mut().enumerate() {
            lp.visit_mut(&format!("layer{l}"), f);
        }
        self.keep.visit_mut("head.keep", f);
        self.cap.visit_mut("head.cap", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n.to_string()));
        out
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(|_, p| out.push(p));
        out
    }

    /// Mutable leaves in canonical order.
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(|_, p| out.push(p));
        out
    }
}

impl<T: Scalar> ModelParams<Matrix<T>> {
    /// Shape skeleton (all zeros) implied by `(f, hyper)`.
    pub fn zeros(f: usize, hyper: &HyperParams) -> Self {
        let d = hyper.d;
        let lin =
            |i: usize, o: usize| Linear { weight: Matrix::zeros(i, o), bias: hyper.bias.then(|| Matrix::zeros(1, o)) };
        let head = || GatHead { w: lin(d, d), att: Matrix::zeros(3 * d, 1), w_edge: Matrix::zeros(1, d) };
        let sage = || SageParams { w_self: lin(d, d), w_neigh: Matrix::zeros(d, d) };
        ModelParams {
            proj: vec![lin(f + 1, d), lin(f, d), lin(f + 1, d)],
            layers: (0..hyper.layers)
                .map(|_| LayerParams {
                    described_by: sage(),
                    asked_about: sage(),
                    supports: (0..hyper.heads).map(|_| head()).collect(),
                    similar: (0..hyper.heads).map(|_| head()).collect(),
                    norm: (0..3)
                        .map(|_| NormParams { gamma: Matrix::zeros(1, d), beta: Matrix::zeros(1, d) })
                        .collect(),
                })
                .collect(),
            keep: Mlp { hidden: lin(d, d), out: lin(d, 2) },
            cap: Mlp { hidden: lin(d, d), out: lin(d, 3) },
        }
    }

    /// Glorot-uniform weights and attention vectors, zero biases and betas,
    /// unit gammas. Each leaf draws from its own named stream.
    pub fn init(f: usize, hyper: &HyperParams, key: RngKey) -> Self {
        let mut p = Self::zeros(f, hyper);
        p.visit_mut(|name, m| {
            if name.ends_with(".gamma") {
                m.data_mut().iter_mut().for_each(|v| *v = T::one());
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
            } else {
                let (fan_in, fan_out) = m.shape();
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = key.named(name).rng();
                m.data_mut().iter_mut().for_each(|v| *v = T::of(rng.random_range(-a..a)));
            }
        });
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|m| m.is_finite())
    }

    /// Registers every leaf on `tape` as a trainable (or constant) value.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ModelParams<Var> {
        self.map(|_, m| tape.leaf(m.clone(), trainable))
    }
}
