//! Full-graph multi-task training on the weak labels: soft-target keep
//! cross-entropy mixed with class-weighted capacity cross-entropy.

mod gradcheck;
mod optim;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{model_grad_check, ModelLoss};
pub use optim::{clip_gradients, Optimizer, OptimizerKind};

use crate::autodiff::{Matrix, Mode, Tape, TensorError, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::Capacity;
use crate::filter::metrics::auroc;
use crate::graph::{HeteroGraph, WeakLabels};
use crate::model::{forward_on_tape, GraphTensors, HyperParams, Model, ModelError, ModelParams};
use crate::rng::RngKey;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Weight of the keep loss; the capacity loss gets `1 - lambda`.
    pub lambda: f64,
    /// Per-class capacity weights (EU, HG, EP); inverse frequency when `None`.
    pub class_weights_cap: Option<[f64; 3]>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Run an eval-mode pass for the report every this many epochs (and after the last).
    pub eval_every: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            lambda: 0.5,
            class_weights_cap: None,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            eval_every: 10,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) {
            return fail("learning_rate must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.class_weights_cap.is_some_and(|w| w.iter().any(|&v| !(v >= 0.0) || !v.is_finite())) {
            return fail("class weights must be finite and non-negative");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive");
        }
        Ok(())
    }

    /// Whether the capacity head is supervised at all.
    pub fn uses_capacity(&self) -> bool {
        self.lambda < 1.0
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Diverged { epoch: usize, what: String, last_finite: Box<Checkpoint>, report: TrainReport },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub keep_loss: f64,
    /// Absent when the capacity head is unsupervised (`lambda = 1`).
    pub cap_loss: Option<f64>,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub cap_accuracy: Option<f64>,
    /// Eval-mode AUROC of keep probabilities against weak labels binarized at 0.5.
    pub keep_auroc: Option<f64>,
    pub step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn total_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total_loss).collect()
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Handles to the loss components on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub keep: Var,
    pub cap: Option<Var>,
}

/// Inverse-frequency weights `n / (3 · count_c)`; absent classes get 0.
pub fn inverse_frequency_weights(labels: &[Capacity]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    labels.iter().for_each(|c| counts[c.index()] += 1);
    let n = labels.len() as f64;
    counts.map(|c| if c == 0 { 0.0 } else { n / (3.0 * c as f64) })
}

/// `lambda · CE(z_keep, (1 - y, y)) + (1 - lambda) · weighted CE(z_cap, y_cap)`.
/// With `lambda = 1` the capacity labels are never read.
pub fn multitask_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z_keep: Var,
    z_cap: Var,
    labels: &WeakLabels,
    lambda: f64,
    class_weights: [f64; 3],
) -> Result<LossVars, TrainError> {
    let n = labels.keep_soft.len();
    let targets = Matrix::from_fn(n, 2, |i, j| {
        let y = T::of(labels.keep_soft[i]);
        if j == 1 {
            y
        } else {
            T::one() - y
        }
    });
    let keep = tape.cross_entropy(z_keep, targets, vec![T::one(); n])?;
    if lambda >= 1.0 {
        return Ok(LossVars { total: keep, keep, cap: None });
    }
    let onehot = Matrix::from_fn(n, 3, |i, j| if labels.capacity[i].index() == j { T::one() } else { T::zero() });
    let weights = labels.capacity.iter().map(|c| T::of(class_weights[c.index()])).collect();
    let cap = tape.cross_entropy(z_cap, onehot, weights)?;
    let a = tape.scale(keep, T::of(lambda));
    let b = tape.scale(cap, T::of(1.0 - lambda));
    let total = tape.add(a, b)?;
    Ok(LossVars { total, keep, cap: Some(cap) })
}

/// Probability of the "keep" class per row of `n × 2` logits.
pub fn keep_probabilities<T: Scalar>(z_keep: &Matrix<T>) -> Vec<f64> {
    (0..z_keep.rows())
        .map(|i| {
            let (a, b) = (z_keep.get(i, 0).as_f64(), z_keep.get(i, 1).as_f64());
            1.0 / (1.0 + (a - b).exp())
        })
        .collect()
}

fn capacity_accuracy<T: Scalar>(z_cap: &Matrix<T>, labels: &[Capacity]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            let row = z_cap.row(*i);
            let arg = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == c.index()
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub final_checkpoint: Checkpoint,
    /// Weights with the lowest training total loss seen.
    pub best_checkpoint: Checkpoint,
    pub best_epoch: Option<usize>,
    pub report: TrainReport,
}

/// Trains from a fresh initialization seeded by `config.seed`. The model's
/// `alpha` is taken from the graph.
pub fn train<T: Scalar>(
    graph: &HeteroGraph,
    hyper: &HyperParams,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    let hyper = HyperParams { alpha: graph.alpha(), precision: T::PRECISION, ..hyper.clone() };
    let model = Model::<T>::init(graph.f(), hyper, config.seed)?;
    train_from(graph, model, config)
}

/// Continues training an existing model.
pub fn train_from<T: Scalar>(
    graph: &HeteroGraph,
    mut model: Model<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    model.hyper.validate()?;
    if graph.f() != model.f {
        return Err(ModelError::FeatureDim { graph: graph.f(), model: model.f }.into());
    }
    let gt = GraphTensors::<T>::from_graph(graph);
    let graph_hash = graph.content_hash();
    let labels = &graph.labels;
    let class_weights = config.class_weights_cap.unwrap_or_else(|| inverse_frequency_weights(&labels.capacity));
    let positives: Vec<bool> = labels.keep_soft.iter().map(|&y| y >= 0.5).collect();
    let dropout_root = RngKey::new(config.seed).named("dropout");
    let mut optimizer = Optimizer::new(config, &model.params);

    let mut report = TrainReport::default();
    let mut best_loss = f64::INFINITY;
    let mut best_checkpoint = Checkpoint::from_model(&model, &graph_hash, config.seed, 0);
    let mut best_epoch = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let snapshot = |m: &Model<T>| Checkpoint::from_model(m, &graph_hash, config.seed, epoch);
        let diverged = |what: &str, m: &Model<T>, report: &TrainReport| TrainError::Diverged {
            epoch,
            what: what.to_string(),
            last_finite: Box::new(snapshot(m)),
            report: report.clone(),
        };

        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, true);
        let fwd =
            match forward_on_tape(&mut tape, &gt, &vars, &model.hyper, Mode::Train, dropout_root.split(epoch as u64)) {
                Ok(f) => f,
                Err(ModelError::NonFinite { .. }) => return Err(diverged("activation", &model, &report)),
                Err(e) => return Err(e.into()),
            };
        let loss = match multitask_loss(&mut tape, fwd.z_keep, fwd.z_cap, labels, config.lambda, class_weights) {
            Ok(l) => l,
            Err(TrainError::Tensor(TensorError::NonFinite(_))) => return Err(diverged("logits", &model, &report)),
            Err(e) => return Err(e),
        };
        let total = tape.value(loss.total).get(0, 0).as_f64();
        if !total.is_finite() {
            return Err(diverged("loss", &model, &report));
        }
        tape.backward(loss.total)?;
        let mut grads: ModelParams<Matrix<T>> = vars.map(|_, &v| tape.grad_or_zeros(v));
        let (clip_scale, grad_norm) = clip_gradients(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(diverged("gradient", &model, &report));
        }

        if total < best_loss {
            best_loss = total;
            best_checkpoint = snapshot(&model);
            best_epoch = Some(epoch);
        }
        let before_step = model.params.clone();
        optimizer.step(&mut model.params, &grads);
        if !model.params.is_finite() {
            let last = Model { params: before_step, ..model.clone() };
            return Err(diverged("parameter update", &last, &report));
        }

        let last = epoch + 1 == config.epochs;
        let (cap_accuracy, keep_auroc) = if last || epoch % config.eval_every == 0 {
            let out = match model.forward(&gt, Mode::Eval, RngKey::new(0)) {
                Ok(o) => o,
                Err(ModelError::NonFinite { .. }) => return Err(diverged("activation", &model, &report)),
                Err(e) => return Err(e.into()),
            };
            let acc = config.uses_capacity().then(|| capacity_accuracy(&out.z_cap, &labels.capacity));
            (acc, auroc(&keep_probabilities(&out.z_keep), &positives))
        } else {
            (None, None)
        };
        report.epochs.push(EpochRecord {
            epoch,
            keep_loss: tape.value(loss.keep).get(0, 0).as_f64(),
            cap_loss: loss.cap.map(|c| tape.value(c).get(0, 0).as_f64()),
            total_loss: total,
            grad_norm,
            clip_scale,
            cap_accuracy,
            keep_auroc,
            step_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("epoch {epoch}: total {total:.6} grad_norm {grad_norm:.4}");
    }

    let final_checkpoint = Checkpoint::from_model(&model, &graph_hash, config.seed, config.epochs);
    Ok(TrainOutcome { model, final_checkpoint, best_checkpoint, best_epoch, report })
}
