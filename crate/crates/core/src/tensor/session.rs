// SPDX-License-Identifier: Apache-2.0

//! Session: mutable state around a graph, and the evaluator.
//!
//! A session owns the variable values plus their simulated heap
//! placement. Variables live in stable low heap; every run claims the
//! rest of the enclave heap once as a scratch arena and replays
//! intermediate allocations from its base, so repeated runs touch the
//! same pages and the paging model sees a stable working set. Arithmetic
//! is charged per node in flops, memory traffic as page touches on
//! inputs and outputs; charges never change the computed values, so
//! results are identical across enclave modes.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, InitKind, Node, OpKind};
use super::wire::{Reader, Writer};
use super::{grad, ops, Tensor, TensorError};
use crate::enclave::Enclave;

const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
const CHECKPOINT_VERSION: u32 = 1;
const SLOT_ALIGN: u64 = 64;

struct VarSlot {
    value: Option<Tensor>,
    addr: u64,
    bytes: u64,
}

/// A computed value and where it lives in the simulated heap.
#[derive(Clone)]
struct Value {
    t: Tensor,
    addr: u64,
}

pub struct Session {
    enclave: Arc<Enclave>,
    graph: Arc<Graph>,
    vars: HashMap<usize, VarSlot>,
    scratch_base: u64,
    scratch_len: u64,
    scratch_peak: u64,
}

impl Session {
    /// Bind a graph to an enclave: variables get stable low-heap
    /// placements and all remaining heap becomes the run arena, so one
    /// enclave hosts one session.
    pub fn new(enclave: Arc<Enclave>, graph: Arc<Graph>) -> Result<Session, TensorError> {
        let mut vars = HashMap::new();
        for (i, node) in graph.nodes().iter().enumerate() {
            if let OpKind::Variable { shape, .. } = &node.op {
                let bytes = shape.iter().product::<usize>() as u64 * 4;
                let addr = enclave.alloc_low(bytes, SLOT_ALIGN)?;
                vars.insert(
                    i,
                    VarSlot {
                        value: None,
                        addr,
                        bytes,
                    },
                );
            }
        }
        let scratch_len = enclave.heap_available();
        let scratch_base = enclave.alloc_high(scratch_len, 1)?;
        Ok(Session {
            enclave,
            graph,
            vars,
            scratch_base,
            scratch_len,
            scratch_peak: 0,
        })
    }

    /// Most scratch-arena bytes any run so far has claimed; together with
    /// the variable footprint this bounds the heap the session needs.
    pub fn scratch_peak(&self) -> u64 {
        self.scratch_peak
    }

    /// Bytes of low heap holding variable values, alignment included.
    pub fn vars_bytes(&self) -> u64 {
        self.vars
            .values()
            .map(|s| s.bytes.next_multiple_of(SLOT_ALIGN))
            .sum()
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn enclave(&self) -> &Arc<Enclave> {
        &self.enclave
    }

    /// Draw every variable's initial value. Sampling order is node
    /// order, so the same graph and seed always produce the same model.
    pub fn initialize(&mut self, seed: u64) -> Result<(), TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = self.graph.clone();
        for (i, node) in graph.nodes().iter().enumerate() {
            let OpKind::Variable { shape, init } = &node.op else {
                continue;
            };
            let len = shape.iter().product();
            let value = match *init {
                InitKind::Zeros => Tensor::zeros(shape),
                InitKind::TruncatedNormal { stddev } => {
                    let data = (0..len).map(|_| truncated_normal(&mut rng, stddev)).collect();
                    Tensor::new(shape.clone(), data)?
                }
            };
            self.store_variable(i, value)?;
        }
        Ok(())
    }

    fn store_variable(&mut self, idx: usize, value: Tensor) -> Result<(), TensorError> {
        let slot = self.vars.get_mut(&idx).expect("variable slot exists");
        self.enclave.mem_access(slot.addr, slot.bytes)?;
        slot.value = Some(value);
        Ok(())
    }

    pub fn set_variable(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let idx = self.graph.idx(name)?;
        let OpKind::Variable { shape, .. } = &self.graph.nodes()[idx].op else {
            return Err(TensorError::ShapeMismatch(format!(
                "\"{name}\" is not a variable"
            )));
        };
        if value.shape() != &shape[..] {
            return Err(TensorError::ShapeMismatch(format!(
                "variable \"{name}\" is {shape:?}, got {:?}",
                value.shape()
            )));
        }
        self.store_variable(idx, value)
    }

    pub fn variable(&self, name: &str) -> Result<&Tensor, TensorError> {
        let idx = self.graph.idx(name)?;
        self.vars
            .get(&idx)
            .and_then(|s| s.value.as_ref())
            .ok_or_else(|| TensorError::Uninitialized(name.to_string()))
    }

    /// Snapshot of every initialized variable, sorted by name.
    pub fn variables(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (&i, slot) in &self.vars {
            if let Some(v) = &slot.value {
                out.insert(self.graph.nodes()[i].name.clone(), v.clone());
            }
        }
        out
    }

    /// Install a set of named variable values (a restored checkpoint or
    /// the folded section of a frozen graph).
    pub fn restore_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<(), TensorError> {
        for (name, value) in values {
            self.set_variable(name, value.clone())?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>, TensorError> {
        for (&i, slot) in &self.vars {
            if slot.value.is_none() {
                return Err(TensorError::Uninitialized(
                    self.graph.nodes()[i].name.clone(),
                ));
            }
        }
        let snapshot = self.variables();
        let mut w = Writer::default();
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(snapshot.len() as u32);
        for (name, value) in &snapshot {
            w.str(name);
            w.tensor(value);
        }
        Ok(w.buf)
    }

    pub fn restore_checkpoint(&mut self, raw: &[u8]) -> Result<(), TensorError> {
        let mut r = Reader::new(raw);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TensorError::CorruptFile("checkpoint magic".to_string()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::FormatVersionUnknown(version));
        }
        let count = r.u32()? as usize;
        let mut values = BTreeMap::new();
        for _ in 0..count {
            let name = r.str()?;
            values.insert(name, r.tensor()?);
        }
        r.done()?;
        self.restore_values(&values)
    }

    /// Serialize the graph with current variable values folded in.
    pub fn export_frozen(&self) -> Result<Vec<u8>, TensorError> {
        for (&i, slot) in &self.vars {
            if slot.value.is_none() {
                return Err(TensorError::Uninitialized(
                    self.graph.nodes()[i].name.clone(),
                ));
            }
        }
        Ok(self.graph.to_bytes(Some(&self.variables())))
    }

    /// Evaluate the fetches. Placeholder feeds are copied into the run
    /// arena; an `sgd_apply` fetch additionally backpropagates from its
    /// loss input and steps every variable it reaches.
    pub fn run(
        &mut self,
        fetches: &[&str],
        feeds: &[(&str, &Tensor)],
    ) -> Result<Vec<Tensor>, TensorError> {
        let plan = self.graph.plan(fetches)?;
        let mut arena = Arena {
            base: self.scratch_base,
            len: self.scratch_len,
            off: 0,
        };
        let mut feed_map: HashMap<&str, &Tensor> = HashMap::new();
        for &(name, t) in feeds {
            let idx = self.graph.idx(name)?;
            if !matches!(self.graph.nodes()[idx].op, OpKind::Placeholder { .. }) {
                return Err(TensorError::ShapeMismatch(format!(
                    "feed target \"{name}\" is not a placeholder"
                )));
            }
            feed_map.insert(name, t);
        }

        let graph = self.graph.clone();
        let mut values: HashMap<usize, Value> = HashMap::new();
        for &i in &plan {
            let node = &graph.nodes()[i];
            let value = self.eval_node(i, node, &feed_map, &values, &plan, &mut arena)?;
            values.insert(i, value);
        }

        let mut out = Vec::with_capacity(fetches.len());
        for name in fetches {
            let idx = self.graph.idx(name)?;
            let v = &values[&idx];
            self.enclave.mem_access(v.addr, v.t.byte_len())?;
            out.push(v.t.clone());
        }
        self.scratch_peak = self.scratch_peak.max(arena.off);
        Ok(out)
    }

    fn eval_node(
        &mut self,
        idx: usize,
        node: &Node,
        feeds: &HashMap<&str, &Tensor>,
        values: &HashMap<usize, Value>,
        plan: &[usize],
        arena: &mut Arena,
    ) -> Result<Value, TensorError> {
        let in_idx: Vec<usize> = node
            .inputs
            .iter()
            .map(|n| self.graph.idx(n).expect("validated at add"))
            .collect();

        match &node.op {
            OpKind::Const(t) => return self.place(arena, t.clone()),
            OpKind::Placeholder { shape } => {
                let fed = feeds
                    .get(node.name.as_str())
                    .ok_or_else(|| TensorError::MissingFeed(node.name.clone()))?;
                if fed.rank() != shape.len()
                    || fed
                        .shape()
                        .iter()
                        .zip(shape)
                        .any(|(&got, &want)| want != 0 && got != want)
                {
                    return Err(TensorError::ShapeMismatch(format!(
                        "feed for \"{}\" is {:?}, placeholder wants {:?}",
                        node.name,
                        fed.shape(),
                        shape
                    )));
                }
                return self.place(arena, (*fed).clone());
            }
            OpKind::Variable { .. } => {
                let slot = &self.vars[&idx];
                let t = slot
                    .value
                    .clone()
                    .ok_or_else(|| TensorError::Uninitialized(node.name.clone()))?;
                return Ok(Value { t, addr: slot.addr });
            }
            OpKind::RecordReader { .. } | OpKind::FifoQueue { .. } => {
                return Err(TensorError::UnsupportedFetch(node.name.clone()));
            }
            OpKind::SgdApply { lr } => {
                let loss = values[&in_idx[0]].clone();
                let lr = *lr;
                self.apply_sgd(plan, values, in_idx[0], lr, arena)?;
                return Ok(loss);
            }
            _ => {}
        }

        for &k in &in_idx {
            let v = &values[&k];
            self.enclave.mem_access(v.addr, v.t.byte_len())?;
        }
        let iv = |k: usize| &values[&in_idx[k]].t;
        let out = match &node.op {
            OpKind::MatMul => ops::matmul(iv(0), iv(1))?,
            OpKind::Add => ops::add(iv(0), iv(1))?,
            OpKind::Relu => ops::relu(iv(0)),
            OpKind::Softmax => ops::softmax(iv(0))?,
            OpKind::SoftmaxXentLoss => ops::softmax_xent(iv(0), iv(1))?,
            OpKind::Conv2d => ops::conv2d_same(iv(0), iv(1))?,
            OpKind::MaxPool2x2 => ops::maxpool2x2(iv(0))?,
            OpKind::Reshape { dims } => ops::reshape(iv(0), dims)?,
            OpKind::Crop {
                top,
                left,
                height,
                width,
            } => ops::crop(iv(0), *top, *left, *height, *width)?,
            OpKind::FlipH => ops::flip_h(iv(0))?,
            OpKind::Brightness { delta } => ops::brightness(iv(0), *delta),
            OpKind::Saturation { scale } => ops::saturation(iv(0), *scale)?,
            _ => unreachable!("handled above"),
        };
        if !out.is_finite() {
            return Err(TensorError::NonFinite(node.name.clone()));
        }
        self.enclave
            .charge_compute_flops(node_flops(node, values, &self.graph));
        if matches!(node.op, OpKind::Reshape { .. }) {
            // A reshape is a view: same bytes, same address, no traffic.
            return Ok(Value {
                t: out,
                addr: values[&in_idx[0]].addr,
            });
        }
        self.place(arena, out)
    }

    /// Reverse pass from `loss_idx` over the planned subgraph, then one
    /// SGD step on every variable that received a gradient.
    fn apply_sgd(
        &mut self,
        plan: &[usize],
        values: &HashMap<usize, Value>,
        loss_idx: usize,
        lr: f32,
        arena: &mut Arena,
    ) -> Result<(), TensorError> {
        let graph = self.graph.clone();
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        grads.insert(loss_idx, Tensor::scalar(1.0));

        for &i in plan.iter().rev() {
            let Some(g) = grads.remove(&i) else { continue };
            let node = &graph.nodes()[i];
            if let OpKind::Variable { .. } = node.op {
                // Step immediately: with append-only indices no gradient
                // for this variable can still arrive later in the walk.
                self.step_variable(i, &g, lr)?;
                continue;
            }
            if node.op.arity() == 0 {
                continue;
            }
            let input_idx: Vec<usize> = node
                .inputs
                .iter()
                .map(|n| graph.idx(n).expect("validated at add"))
                .collect();
            let iv = |k: usize| &values[&input_idx[k]].t;
            for &k in &input_idx {
                let v = &values[&k];
                self.enclave.mem_access(v.addr, v.t.byte_len())?;
            }

            let input_grads: Vec<(usize, Tensor)> = match &node.op {
                OpKind::MatMul => {
                    let (da, db) = grad::matmul(iv(0), iv(1), &g);
                    vec![(input_idx[0], da), (input_idx[1], db)]
                }
                OpKind::Add => {
                    let (da, db) = grad::add(iv(0), iv(1), &g);
                    vec![(input_idx[0], da), (input_idx[1], db)]
                }
                OpKind::Relu => vec![(input_idx[0], grad::relu(iv(0), &g))],
                OpKind::Softmax => {
                    let y = &values[&i].t;
                    vec![(input_idx[0], grad::softmax(y, &g))]
                }
                OpKind::SoftmaxXentLoss => {
                    let (dl, dt) = grad::softmax_xent(iv(0), iv(1), &g);
                    vec![(input_idx[0], dl), (input_idx[1], dt)]
                }
                OpKind::Conv2d => {
                    let (dx, dw) = grad::conv2d_same(iv(0), iv(1), &g);
                    vec![(input_idx[0], dx), (input_idx[1], dw)]
                }
                OpKind::MaxPool2x2 => vec![(input_idx[0], grad::maxpool2x2(iv(0), &g))],
                OpKind::Reshape { .. } => vec![(input_idx[0], grad::reshape(iv(0), &g))],
                OpKind::Crop { top, left, .. } => {
                    vec![(input_idx[0], grad::crop(iv(0), *top, *left, &g))]
                }
                OpKind::FlipH => vec![(input_idx[0], grad::flip_h(&g))],
                OpKind::Brightness { delta } => {
                    vec![(input_idx[0], grad::brightness(iv(0), *delta, &g))]
                }
                OpKind::Saturation { scale } => {
                    vec![(input_idx[0], grad::saturation(iv(0), *scale, &g))]
                }
                OpKind::SgdApply { .. } => Vec::new(),
                _ => unreachable!("leaf kinds handled above"),
            };

            self.enclave
                .charge_compute_flops(node_flops(node, values, &graph) * input_grads.len() as u64);
            for (target, gt) in input_grads {
                if !gt.is_finite() {
                    return Err(TensorError::NonFinite(format!(
                        "gradient through \"{}\"",
                        node.name
                    )));
                }
                let placed = self.place(arena, gt)?;
                match grads.get_mut(&target) {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(placed.t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(target, placed.t);
                    }
                }
            }
        }
        Ok(())
    }

    fn step_variable(&mut self, idx: usize, g: &Tensor, lr: f32) -> Result<(), TensorError> {
        let name = &self.graph.nodes()[idx].name;
        let slot = self.vars.get_mut(&idx).expect("variable slot exists");
        let value = slot
            .value
            .as_mut()
            .ok_or_else(|| TensorError::Uninitialized(name.clone()))?;
        if value.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "gradient for \"{name}\" is {:?}, variable is {:?}",
                g.shape(),
                value.shape()
            )));
        }
        for (v, &gv) in value.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * gv;
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("update of \"{name}\"")));
        }
        let (addr, bytes) = (slot.addr, slot.bytes);
        self.enclave.mem_access(addr, bytes)?;
        self.enclave.charge_compute_flops(2 * (bytes / 4));
        Ok(())
    }

    fn place(&self, arena: &mut Arena, t: Tensor) -> Result<Value, TensorError> {
        let addr = arena.claim(t.byte_len())?;
        self.enclave.mem_access(addr, t.byte_len())?;
        Ok(Value { t, addr })
    }
}

struct Arena {
    base: u64,
    len: u64,
    off: u64,
}

impl Arena {
    fn claim(&mut self, bytes: u64) -> Result<u64, TensorError> {
        let off = self.off.next_multiple_of(SLOT_ALIGN);
        if off + bytes > self.len {
            return Err(TensorError::Enclave(
                crate::enclave::EnclaveError::OutOfMemory {
                    requested: bytes,
                    available: self.len.saturating_sub(off),
                },
            ));
        }
        self.off = off + bytes;
        Ok(self.base + off)
    }
}

/// One sample from an N(0, stddev) with anything beyond two standard
/// deviations redrawn.
fn truncated_normal(rng: &mut ChaCha8Rng, stddev: f32) -> f32 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        let v = (z * stddev as f64) as f32;
        if v.abs() <= 2.0 * stddev {
            return v;
        }
    }
}

fn node_flops(node: &Node, values: &HashMap<usize, Value>, graph: &Graph) -> u64 {
    let in_shape = |k: usize| -> &[usize] {
        let idx = graph.idx(&node.inputs[k]).expect("validated at add");
        values[&idx].t.shape()
    };
    let in_len = |k: usize| -> u64 {
        let idx = graph.idx(&node.inputs[k]).expect("validated at add");
        values[&idx].t.len() as u64
    };
    match &node.op {
        OpKind::MatMul => {
            let a = in_shape(0);
            let b = in_shape(1);
            2 * a[0] as u64 * a[1] as u64 * b[1] as u64
        }
        OpKind::Conv2d => {
            let x = in_shape(0);
            let w = in_shape(1);
            2 * x.iter().product::<usize>() as u64 * (w[0] * w[1] * w[3]) as u64
        }
        OpKind::Add | OpKind::Relu | OpKind::FlipH | OpKind::Crop { .. } => in_len(0),
        OpKind::Brightness { .. } => 2 * in_len(0),
        OpKind::MaxPool2x2 => in_len(0),
        OpKind::Softmax => 5 * in_len(0),
        OpKind::SoftmaxXentLoss => 8 * in_len(0),
        OpKind::Saturation { .. } => 8 * in_len(0),
        _ => 0,
    }
}
