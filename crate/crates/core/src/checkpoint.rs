//! Portable JSON checkpoints: hyperparameters, training origin and named tensors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::graph::sha256_hex;
use crate::model::{HyperParams, Model, ModelError, ModelParams};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "hicqa-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_SCHEME: &str = "glorot_uniform(weights, att, w_edge); zeros(bias, beta); ones(gamma)";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hyper: HyperParams,
    pub f: usize,
    pub graph_hash: String,
    pub seed: u64,
    pub init: String,
    /// Epochs of optimization the weights have seen.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, graph_hash: &str, seed: u64, epoch: usize) -> Self {
        let mut tensors = Vec::new();
        model.params.visit(|name, m| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
                data: m.data().iter().map(|v| v.as_f64()).collect(),
            })
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            hyper: model.hyper.clone(),
            f: model.f,
            graph_hash: graph_hash.to_string(),
            seed,
            init: INIT_SCHEME.to_string(),
            epoch,
            tensors,
        }
    }

    /// Rebuilds the model at precision `T`; every expected tensor must be
    /// present with the expected shape and no extra tensors are allowed.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>, CheckpointError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!("{} v{}", self.format, self.version)));
        }
        self.hyper.validate()?;
        let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
        for t in &self.tensors {
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(CheckpointError::Format(format!("duplicate tensor `{}`", t.name)));
            }
        }
        let template = ModelParams::<Matrix<T>>::zeros(self.f, &self.hyper);
        let params = template.try_map(|name, m| {
            let e = by_name.remove(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            let got = (e.shape[0], e.shape[1]);
            if got != m.shape() || e.data.len() != m.len() {
                return Err(ModelError::ParamShape { name: name.to_string(), expected: m.shape(), got });
            }
            Ok(Matrix::from_vec(got.0, got.1, e.data.iter().map(|&v| T::of(v)).collect()).expect("shape checked"))
        })?;
        if let Some(extra) = by_name.keys().min() {
            return Err(ModelError::UnexpectedParam(extra.to_string()).into());
        }
        Ok(Model { f: self.f, hyper: self.hyper.clone(), params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serialization is infallible")
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(&self.to_bytes()).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(ck.format));
        }
        Ok(ck)
    }
}
