// SPDX-License-Identifier: Apache-2.0

//! The small image classifier used by the benchmark workloads: two
//! convolution blocks with 2x2 pooling, then three dense layers over
//! 24x24 RGB crops. Widths are configurable so tests can shrink the
//! network without changing its shape.

use super::graph::{Graph, InitKind, Node, OpKind};
use super::TensorError;

/// Input crop side length, in pixels.
pub const CROP_SIDE: usize = 24;

/// Layer widths for [`build_cifar_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub conv1: usize,
    pub conv2: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// Full-width configuration.
    pub fn full() -> ModelConfig {
        ModelConfig {
            conv1: 64,
            conv2: 64,
            fc1: 384,
            fc2: 192,
            classes: 10,
        }
    }

    /// Narrow configuration for fast tests and training smoke runs.
    pub fn narrow() -> ModelConfig {
        ModelConfig {
            conv1: 16,
            conv2: 16,
            fc1: 64,
            fc2: 32,
            classes: 10,
        }
    }

    /// Flattened feature count after both pooling stages.
    pub fn flat_features(&self) -> usize {
        (CROP_SIDE / 4) * (CROP_SIDE / 4) * self.conv2
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        let c1 = 5 * 5 * 3 * self.conv1 + self.conv1;
        let c2 = 5 * 5 * self.conv1 * self.conv2 + self.conv2;
        let f1 = self.flat_features() * self.fc1 + self.fc1;
        let f2 = self.fc1 * self.fc2 + self.fc2;
        let f3 = self.fc2 * self.classes + self.classes;
        c1 + c2 + f1 + f2 + f3
    }
}

/// Build the classifier graph.
///
/// Node names are part of the contract: `input` and `labels` are the
/// feed points, `logits`/`prob`/`loss` the usual fetches, and
/// `train_op` runs one SGD step when fetched. `enqueue` and `dequeue`
/// describe the ingest pipeline for runners that stream records from
/// `record_path`.
pub fn build_cifar_model(
    cfg: &ModelConfig,
    lr: f32,
    record_path: &str,
    cycle: bool,
    batch: usize,
) -> Result<Graph, TensorError> {
    let mut g = Graph::default();
    let init = InitKind::TruncatedNormal { stddev: 0.05 };

    g.add(Node::new(
        "input",
        OpKind::Placeholder {
            shape: vec![0, CROP_SIDE, CROP_SIDE, 3],
        },
        &[],
    ))?;
    g.add(Node::new(
        "labels",
        OpKind::Placeholder {
            shape: vec![0, cfg.classes],
        },
        &[],
    ))?;

    g.add(Node::new(
        "conv1_w",
        OpKind::Variable {
            shape: vec![5, 5, 3, cfg.conv1],
            init,
        },
        &[],
    ))?;
    g.add(Node::new(
        "conv1_b",
        OpKind::Variable {
            shape: vec![cfg.conv1],
            init: InitKind::Zeros,
        },
        &[],
    ))?;
    g.add(Node::new("conv1", OpKind::Conv2d, &["input", "conv1_w"]))?;
    g.add(Node::new("conv1_bias", OpKind::Add, &["conv1", "conv1_b"]))?;
    g.add(Node::new("conv1_relu", OpKind::Relu, &["conv1_bias"]))?;
    g.add(Node::new("pool1", OpKind::MaxPool2x2, &["conv1_relu"]))?;

    g.add(Node::new(
        "conv2_w",
        OpKind::Variable {
            shape: vec![5, 5, cfg.conv1, cfg.conv2],
            init,
        },
        &[],
    ))?;
    g.add(Node::new(
        "conv2_b",
        OpKind::Variable {
            shape: vec![cfg.conv2],
            init: InitKind::Zeros,
        },
        &[],
    ))?;
    g.add(Node::new("conv2", OpKind::Conv2d, &["pool1", "conv2_w"]))?;
    g.add(Node::new("conv2_bias", OpKind::Add, &["conv2", "conv2_b"]))?;
    g.add(Node::new("conv2_relu", OpKind::Relu, &["conv2_bias"]))?;
    g.add(Node::new("pool2", OpKind::MaxPool2x2, &["conv2_relu"]))?;

    g.add(Node::new(
        "flat",
        OpKind::Reshape {
            dims: vec![-1, cfg.flat_features() as i64],
        },
        &["pool2"],
    ))?;

    dense(&mut g, "fc1", "flat", cfg.flat_features(), cfg.fc1, init, true)?;
    dense(&mut g, "fc2", "fc1_relu", cfg.fc1, cfg.fc2, init, true)?;

    g.add(Node::new(
        "fc3_w",
        OpKind::Variable {
            shape: vec![cfg.fc2, cfg.classes],
            init,
        },
        &[],
    ))?;
    g.add(Node::new(
        "fc3_b",
        OpKind::Variable {
            shape: vec![cfg.classes],
            init: InitKind::Zeros,
        },
        &[],
    ))?;
    g.add(Node::new("fc3", OpKind::MatMul, &["fc2_relu", "fc3_w"]))?;
    g.add(Node::new("logits", OpKind::Add, &["fc3", "fc3_b"]))?;
    g.add(Node::new("prob", OpKind::Softmax, &["logits"]))?;
    g.add(Node::new(
        "loss",
        OpKind::SoftmaxXentLoss,
        &["logits", "labels"],
    ))?;
    g.add(Node::new("train_op", OpKind::SgdApply { lr }, &["loss"]))?;

    g.add(Node::new(
        "enqueue",
        OpKind::RecordReader {
            path: record_path.to_string(),
            cycle,
        },
        &[],
    ))?;
    g.add(Node::new(
        "dequeue",
        OpKind::FifoQueue {
            capacity: 512,
            batch,
        },
        &["enqueue"],
    ))?;

    Ok(g)
}

fn dense(
    g: &mut Graph,
    name: &str,
    input: &str,
    fan_in: usize,
    fan_out: usize,
    init: InitKind,
    relu: bool,
) -> Result<(), TensorError> {
    let w = format!("{name}_w");
    let b = format!("{name}_b");
    g.add(Node::new(
        &w,
        OpKind::Variable {
            shape: vec![fan_in, fan_out],
            init,
        },
        &[],
    ))?;
    g.add(Node::new(
        &b,
        OpKind::Variable {
            shape: vec![fan_out],
            init: InitKind::Zeros,
        },
        &[],
    ))?;
    g.add(Node::new(name, OpKind::MatMul, &[input, &w]))?;
    let bias = format!("{name}_bias");
    g.add(Node::new(bias.clone(), OpKind::Add, &[name, &b]))?;
    if relu {
        g.add(Node::new(
            format!("{name}_relu"),
            OpKind::Relu,
            &[&bias],
        ))?;
    }
    Ok(())
}
