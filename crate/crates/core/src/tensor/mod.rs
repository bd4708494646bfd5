// SPDX-License-Identifier: Apache-2.0

//! Minimal dataflow tensor engine.
//!
//! A model is a named, acyclic graph of operations over 32-bit float
//! tensors. A session owns the mutable state around a graph: variable
//! values, simulated heap placement, and any input queues bound to reader
//! nodes. Evaluation walks the graph in dependency order, charges the
//! enclave for arithmetic and memory traffic, and rejects non-finite
//! results at the node that produced them.
//!
//! The engine is deliberately small: dense and convolutional layers with
//! reverse-mode gradients and plain SGD, an image input pipeline with
//! augmentation, and two self-describing file formats (frozen graphs and
//! checkpoints). Numeric results depend only on graph, seeds, and inputs,
//! never on the enclave mode, so shielding can be judged by cost counters
//! while outputs stay bitwise stable.

pub mod data;
pub mod graph;
pub mod grad;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod session;
mod wire;

#[cfg(test)]
mod tests;

pub use data::{decode_record, encode_record, separable_set, synthetic_dataset, RECORD_LEN};
pub use graph::{Graph, InitKind, Node, OpKind};
pub use model::{build_cifar_model, ModelConfig};
pub use pipeline::{augment, center_crop, Pipeline, Sample};
pub use session::Session;

use thiserror::Error;

use crate::enclave::EnclaveError;
use crate::fs_shield::FsError;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown node \"{0}\"")]
    UnknownNode(String),
    #[error("duplicate node \"{0}\"")]
    DuplicateNode(String),
    #[error("cycle through node \"{0}\"")]
    CycleDetected(String),
    #[error("placeholder \"{0}\" has no feed")]
    MissingFeed(String),
    #[error("non-finite value out of node \"{0}\"")]
    NonFinite(String),
    #[error("variable \"{0}\" read before initialization")]
    Uninitialized(String),
    #[error("node \"{0}\" cannot be evaluated directly")]
    UnsupportedFetch(String),
    #[error("unknown format version {0}")]
    FormatVersionUnknown(u32),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("record truncated")]
    RecordTruncated,
    #[error("label byte {0} outside the ten classes")]
    LabelOutOfRange(u8),
    #[error("input queue closed")]
    QueueClosed,
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Fs(#[from] FsError),
}

/// Dense row-major array of 32-bit floats. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ShapeMismatch(format!(
                "zero dimension in {shape:?}"
            )));
        }
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} wants {want} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element count; never zero, a scalar has one element.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64 * 4
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let want: usize = shape.iter().product();
        if want != self.data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot view {:?} as {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a full multi-index; test convenience, not a hot path.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of dim {dim} at axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }
}
