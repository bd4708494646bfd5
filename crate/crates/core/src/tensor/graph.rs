// SPDX-License-Identifier: Apache-2.0

//! Named operation graphs and the frozen-graph file format.
//!
//! A graph is append-only: every node's inputs must already be present
//! when the node is added, so a well-formed graph is acyclic by
//! construction and node indices are already in dependency order. The
//! serialized form (magic "TSCG") preserves insertion order and can carry
//! a folded set of variable values, so a trained model travels as one
//! self-contained file.

use std::collections::{BTreeMap, HashMap};

use super::wire::{Reader, Writer};
use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"TSCG";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    Zeros,
    TruncatedNormal { stddev: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Const(Tensor),
    Variable { shape: Vec<usize>, init: InitKind },
    /// A zero dimension accepts any size on that axis at feed time.
    Placeholder { shape: Vec<usize> },
    MatMul,
    Add,
    Relu,
    Softmax,
    SoftmaxXentLoss,
    Conv2d,
    MaxPool2x2,
    SgdApply { lr: f32 },
    Reshape { dims: Vec<i64> },
    Crop { top: usize, left: usize, height: usize, width: usize },
    FlipH,
    Brightness { delta: f32 },
    Saturation { scale: f32 },
    RecordReader { path: String, cycle: bool },
    FifoQueue { capacity: usize, batch: usize },
}

impl OpKind {
    pub fn arity(&self) -> usize {
        match self {
            OpKind::Const(_)
            | OpKind::Variable { .. }
            | OpKind::Placeholder { .. }
            | OpKind::RecordReader { .. } => 0,
            OpKind::Relu
            | OpKind::Softmax
            | OpKind::MaxPool2x2
            | OpKind::SgdApply { .. }
            | OpKind::Reshape { .. }
            | OpKind::Crop { .. }
            | OpKind::FlipH
            | OpKind::Brightness { .. }
            | OpKind::Saturation { .. }
            | OpKind::FifoQueue { .. } => 1,
            OpKind::MatMul | OpKind::Add | OpKind::Conv2d | OpKind::SoftmaxXentLoss => 2,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            OpKind::Const(_) => "const",
            OpKind::Variable { .. } => "variable",
            OpKind::Placeholder { .. } => "placeholder",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxXentLoss => "softmax_xent_loss",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2x2 => "maxpool2x2",
            OpKind::SgdApply { .. } => "sgd_apply",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Crop { .. } => "crop",
            OpKind::FlipH => "flip",
            OpKind::Brightness { .. } => "brightness",
            OpKind::Saturation { .. } => "saturation",
            OpKind::RecordReader { .. } => "record_reader",
            OpKind::FifoQueue { .. } => "fifo_queue",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: OpKind, inputs: &[&str]) -> Node {
        Node {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Graph) -> bool {
        self.nodes == other.nodes
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// Append a node. Its inputs must already exist, which keeps the
    /// graph acyclic and indices dependency-ordered.
    pub fn add(&mut self, node: Node) -> Result<(), TensorError> {
        if node.name.is_empty() {
            return Err(TensorError::UnknownNode(String::new()));
        }
        if self.index.contains_key(&node.name) {
            return Err(TensorError::DuplicateNode(node.name));
        }
        if node.inputs.len() != node.op.arity() {
            return Err(TensorError::ShapeMismatch(format!(
                "node \"{}\" ({}) wants {} inputs, got {}",
                node.name,
                node.op.kind_name(),
                node.op.arity(),
                node.inputs.len()
            )));
        }
        for input in &node.inputs {
            if !self.index.contains_key(input) {
                return Err(TensorError::UnknownNode(input.clone()));
            }
        }
        self.index.insert(node.name.clone(), self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.index.get(name).map(|&i| &self.nodes[i])
    }

    pub(crate) fn idx(&self, name: &str) -> Result<usize, TensorError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownNode(name.to_string()))
    }

    /// Indices of every node the fetches depend on, in dependency order.
    pub(crate) fn plan(&self, fetches: &[&str]) -> Result<Vec<usize>, TensorError> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = Vec::with_capacity(fetches.len());
        for name in fetches {
            stack.push(self.idx(name)?);
        }
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            for input in &self.nodes[i].inputs {
                stack.push(self.index[input]);
            }
        }
        Ok((0..self.nodes.len()).filter(|&i| needed[i]).collect())
    }

    /// Serialize, optionally folding in variable values so the file is a
    /// complete trained model rather than a blank slate.
    pub fn to_bytes(&self, folded: Option<&BTreeMap<String, Tensor>>) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.nodes.len() as u32);
        for node in &self.nodes {
            w.str(&node.name);
            write_op(&mut w, &node.op);
            w.u32(node.inputs.len() as u32);
            for input in &node.inputs {
                w.str(input);
            }
        }
        let empty = BTreeMap::new();
        let folded = folded.unwrap_or(&empty);
        w.u32(folded.len() as u32);
        for (name, value) in folded {
            w.str(name);
            w.tensor(value);
        }
        w.buf
    }

    pub fn from_bytes(raw: &[u8]) -> Result<(Graph, BTreeMap<String, Tensor>), TensorError> {
        let mut r = Reader::new(raw);
        if r.take(4)? != MAGIC {
            return Err(TensorError::CorruptFile("graph magic".to_string()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TensorError::FormatVersionUnknown(version));
        }
        let count = r.u32()? as usize;
        let mut graph = Graph::new();
        for _ in 0..count {
            let name = r.str()?;
            let op = read_op(&mut r)?;
            let input_count = r.u32()? as usize;
            let mut inputs = Vec::with_capacity(input_count);
            for _ in 0..input_count {
                inputs.push(r.str()?);
            }
            graph.add(Node { name, op, inputs })?;
        }
        let folded_count = r.u32()? as usize;
        let mut folded = BTreeMap::new();
        for _ in 0..folded_count {
            let name = r.str()?;
            let value = r.tensor()?;
            if !matches!(
                graph.node(&name).map(|n| &n.op),
                Some(OpKind::Variable { .. })
            ) {
                return Err(TensorError::CorruptFile(format!(
                    "folded value for non-variable \"{name}\""
                )));
            }
            folded.insert(name, value);
        }
        r.done()?;
        Ok((graph, folded))
    }
}

fn write_op(w: &mut Writer, op: &OpKind) {
    match op {
        OpKind::Const(t) => {
            w.u8(0);
            w.tensor(t);
        }
        OpKind::Variable { shape, init } => {
            w.u8(1);
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u32(d as u32);
            }
            match init {
                InitKind::Zeros => w.u8(0),
                InitKind::TruncatedNormal { stddev } => {
                    w.u8(1);
                    w.f32(*stddev);
                }
            }
        }
        OpKind::Placeholder { shape } => {
            w.u8(2);
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u32(d as u32);
            }
        }
        OpKind::MatMul => w.u8(3),
        OpKind::Add => w.u8(4),
        OpKind::Relu => w.u8(5),
        OpKind::Softmax => w.u8(6),
        OpKind::SoftmaxXentLoss => w.u8(7),
        OpKind::Conv2d => w.u8(8),
        OpKind::MaxPool2x2 => w.u8(9),
        OpKind::SgdApply { lr } => {
            w.u8(10);
            w.f32(*lr);
        }
        OpKind::Reshape { dims } => {
            w.u8(11);
            w.u32(dims.len() as u32);
            for &d in dims {
                w.buf.extend_from_slice(&(d as i32).to_le_bytes());
            }
        }
        OpKind::Crop {
            top,
            left,
            height,
            width,
        } => {
            w.u8(12);
            w.u32(*top as u32);
            w.u32(*left as u32);
            w.u32(*height as u32);
            w.u32(*width as u32);
        }
        OpKind::FlipH => w.u8(13),
        OpKind::Brightness { delta } => {
            w.u8(14);
            w.f32(*delta);
        }
        OpKind::Saturation { scale } => {
            w.u8(15);
            w.f32(*scale);
        }
        OpKind::RecordReader { path, cycle } => {
            w.u8(16);
            w.str(path);
            w.u8(*cycle as u8);
        }
        OpKind::FifoQueue { capacity, batch } => {
            w.u8(17);
            w.u32(*capacity as u32);
            w.u32(*batch as u32);
        }
    }
}

fn read_op(r: &mut Reader) -> Result<OpKind, TensorError> {
    let read_dims = |r: &mut Reader| -> Result<Vec<usize>, TensorError> {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(TensorError::CorruptFile("shape rank out of range".into()));
        }
        (0..rank).map(|_| Ok(r.u32()? as usize)).collect()
    };
    Ok(match r.u8()? {
        0 => OpKind::Const(r.tensor()?),
        1 => {
            let shape = read_dims(r)?;
            let init = match r.u8()? {
                0 => InitKind::Zeros,
                1 => InitKind::TruncatedNormal { stddev: r.f32()? },
                _ => return Err(TensorError::CorruptFile("initializer tag".into())),
            };
            OpKind::Variable { shape, init }
        }
        2 => OpKind::Placeholder { shape: read_dims(r)? },
        3 => OpKind::MatMul,
        4 => OpKind::Add,
        5 => OpKind::Relu,
        6 => OpKind::Softmax,
        7 => OpKind::SoftmaxXentLoss,
        8 => OpKind::Conv2d,
        9 => OpKind::MaxPool2x2,
        10 => OpKind::SgdApply { lr: r.f32()? },
        11 => {
            let count = r.u32()? as usize;
            if count > 8 {
                return Err(TensorError::CorruptFile("reshape rank out of range".into()));
            }
            let mut dims = Vec::with_capacity(count);
            for _ in 0..count {
                dims.push(i32::from_le_bytes(r.take(4)?.try_into().unwrap()) as i64);
            }
            OpKind::Reshape { dims }
        }
        12 => OpKind::Crop {
            top: r.u32()? as usize,
            left: r.u32()? as usize,
            height: r.u32()? as usize,
            width: r.u32()? as usize,
        },
        13 => OpKind::FlipH,
        14 => OpKind::Brightness { delta: r.f32()? },
        15 => OpKind::Saturation { scale: r.f32()? },
        16 => OpKind::RecordReader {
            path: r.str()?,
            cycle: r.u8()? != 0,
        },
        17 => OpKind::FifoQueue {
            capacity: r.u32()? as usize,
            batch: r.u32()? as usize,
        },
        other => {
            return Err(TensorError::CorruptFile(format!(
                "unknown op tag {other}"
            )))
        }
    })
}
