use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::Matrix;
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer `{other}` (expected adamw or sgd)")),
        }
    }
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns `(scale, norm before clipping)`.
pub fn clip_gradients<T: Scalar>(grads: &mut ModelParams<Matrix<T>>, max_norm: f64) -> (f64, f64) {
    let norm = grads.leaves().iter().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale < 1.0 {
        grads.visit_mut(|_, g| g.scale_assign(T::of(scale)));
    }
    (scale, norm)
}

/// AdamW with decoupled weight decay, or plain SGD with the same decoupled
/// decay term.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
    step: u64,
    moments: Option<(ModelParams<Matrix<T>>, ModelParams<Matrix<T>>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: &TrainConfig, params: &ModelParams<Matrix<T>>) -> Self {
        let moments = (config.optimizer == OptimizerKind::AdamW).then(|| {
            let zeros = params.map(|_, p| Matrix::zeros(p.rows(), p.cols()));
            (zeros.clone(), zeros)
        });
        Optimizer {
            kind: config.optimizer,
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            betas: config.betas,
            eps: config.adam_eps,
            step: 0,
            moments,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<Matrix<T>>, grads: &ModelParams<Matrix<T>>) {
        self.step += 1;
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        let lr = T::of(self.lr);
        let grads = grads.leaves();
        match &mut self.moments {
            None => {
                for (p, g) in params.leaves_mut().into_iter().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv = *pv * decay - lr * gv;
                    }
                }
            }
            Some((m, v)) => {
                let (b1, b2) = self.betas;
                let t = self.step as i32;
                let c1 = T::of(1.0 / (1.0 - b1.powi(t)));
                let c2 = T::of(1.0 / (1.0 - b2.powi(t)));
                let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(self.eps));
                let leaves = params.leaves_mut().into_iter().zip(grads).zip(m.leaves_mut()).zip(v.leaves_mut());
                for (((p, g), m), v) in leaves {
                    let it =
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut());
                    for (((pv, &gv), mv), vv) in it {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let update = (*mv * c1) / ((*vv * c2).sqrt() + eps);
                        *pv = *pv * decay - lr * update;
                    }
                }
            }
        }
    }
}
