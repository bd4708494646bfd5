// SPDX-License-Identifier: Apache-2.0

//! Record ingest: a reader thread decodes protected record files,
//! preprocesses each image, and feeds a bounded queue that the compute
//! loop drains in batches. The queue is the only structure shared
//! between the two sides. A decode or shield failure closes the queue,
//! so a consumer never sees samples from a damaged file.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{decode_record, one_hot, CLASSES, IMAGE_SIDE, RECORD_LEN};
use super::graph::{Graph, OpKind};
use super::model::CROP_SIDE;
use super::{ops, Tensor, TensorError};
use crate::enclave::Enclave;
use crate::fs_shield::FsShield;
use crate::sched::{BoundedChannel, JoinHandle, Scheduler};

/// One decoded, preprocessed training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub label: u8,
    pub pixels: Tensor,
}

/// A running ingest pipeline bound to one queue node.
pub struct Pipeline {
    queue: BoundedChannel<Sample>,
    readers: Vec<JoinHandle<Result<(), TensorError>>>,
    batch: usize,
}

/// Random crop, horizontal flip, brightness and saturation jitter.
/// Draw order is fixed, so one seed fully determines a record stream.
pub fn augment(image: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor, TensorError> {
    let margin = IMAGE_SIDE - CROP_SIDE;
    let top = rng.gen_range(0..=margin);
    let left = rng.gen_range(0..=margin);
    let flip = rng.gen_bool(0.5);
    let delta = rng.gen_range(-0.25..0.25);
    let scale = rng.gen_range(0.6..1.4);

    let mut out = ops::crop(image, top, left, CROP_SIDE, CROP_SIDE)?;
    if flip {
        out = ops::flip_h(&out)?;
    }
    out = ops::brightness(&out, delta);
    ops::saturation(&out, scale)
}

/// The deterministic evaluation-time crop.
pub fn center_crop(image: &Tensor) -> Result<Tensor, TensorError> {
    let margin = (IMAGE_SIDE - CROP_SIDE) / 2;
    ops::crop(image, margin, margin, CROP_SIDE, CROP_SIDE)
}

impl Pipeline {
    /// Start the reader thread for the queue node named `queue_name`.
    /// The node's input names the record file; `train` selects random
    /// augmentation over the plain center crop.
    pub fn start(
        sched: &Scheduler,
        enclave: Arc<Enclave>,
        shield: Arc<FsShield>,
        graph: &Graph,
        queue_name: &str,
        train: bool,
        seed: u64,
    ) -> Result<Pipeline, TensorError> {
        Pipeline::start_pool(sched, enclave, shield, graph, queue_name, train, seed, 1)
    }

    /// Like [`Pipeline::start`], but with `workers` reader threads feeding
    /// the one queue. Each worker streams the whole record file under its
    /// own augmentation seed, so more workers mean more contention on the
    /// queue, not more distinct data.
    #[allow(clippy::too_many_arguments)]
    pub fn start_pool(
        sched: &Scheduler,
        enclave: Arc<Enclave>,
        shield: Arc<FsShield>,
        graph: &Graph,
        queue_name: &str,
        train: bool,
        seed: u64,
        workers: usize,
    ) -> Result<Pipeline, TensorError> {
        assert!(workers >= 1, "a pipeline needs at least one reader");
        let queue_node = graph
            .node(queue_name)
            .ok_or_else(|| TensorError::UnknownNode(queue_name.to_string()))?;
        let OpKind::FifoQueue { capacity, batch } = &queue_node.op else {
            return Err(TensorError::UnsupportedFetch(format!(
                "\"{queue_name}\" is not a queue"
            )));
        };
        let reader_node = graph
            .node(&queue_node.inputs[0])
            .ok_or_else(|| TensorError::UnknownNode(queue_node.inputs[0].clone()))?;
        let OpKind::RecordReader { path, cycle } = &reader_node.op else {
            return Err(TensorError::UnsupportedFetch(format!(
                "\"{}\" is not a record reader",
                reader_node.name
            )));
        };

        let queue = BoundedChannel::new(sched, *capacity);
        let batch = *batch;
        let cycle = *cycle;
        let mut readers = Vec::with_capacity(workers);
        for w in 0..workers {
            let enclave = enclave.clone();
            let shield = shield.clone();
            let path = path.clone();
            let feed = queue.clone();
            let name = format!("ingest-{queue_name}-{w}");
            readers.push(sched.spawn(&name, move || {
                let seed = seed.wrapping_add(w as u64);
                let result = pump(&enclave, &shield, &feed, &path, cycle, train, seed);
                if result.is_err() {
                    feed.close();
                }
                result
            }));
        }
        Ok(Pipeline {
            queue,
            readers,
            batch,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// A handle onto the sample queue, e.g. to close it from another
    /// thread while a consumer is still blocked on it.
    pub fn queue_handle(&self) -> BoundedChannel<Sample> {
        self.queue.clone()
    }

    /// Pop one batch and assemble the feed tensors: images as
    /// `[batch, 24, 24, 3]` and labels one-hot. Blocks until enough
    /// samples arrive; a closed, drained queue is an error.
    pub fn next_batch(&self) -> Result<(Tensor, Tensor), TensorError> {
        let pixel_count = CROP_SIDE * CROP_SIDE * 3;
        let mut pixels = Vec::with_capacity(self.batch * pixel_count);
        let mut labels = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let sample = self.queue.pop().ok_or(TensorError::QueueClosed)?;
            pixels.extend_from_slice(sample.pixels.data());
            labels.push(sample.label);
        }
        let images = Tensor::new(vec![self.batch, CROP_SIDE, CROP_SIDE, 3], pixels)?;
        Ok((images, one_hot(&labels, CLASSES)))
    }

    /// Stop the readers and collect their result. Safe at any point: a
    /// reader blocked on a full queue wakes when the queue closes.
    pub fn finish(self) -> Result<(), TensorError> {
        self.queue.close();
        let mut outcome = Ok(());
        for reader in self.readers {
            let result = match reader.join() {
                Ok(result) => result,
                Err(_) => Err(TensorError::QueueClosed),
            };
            if outcome.is_ok() {
                outcome = result;
            }
        }
        outcome
    }
}

fn pump(
    enclave: &Enclave,
    shield: &FsShield,
    queue: &BoundedChannel<Sample>,
    path: &str,
    cycle: bool,
    train: bool,
    seed: u64,
) -> Result<(), TensorError> {
    let raw = shield.read_all(path)?;
    if raw.is_empty() || raw.len() % RECORD_LEN != 0 {
        return Err(TensorError::RecordTruncated);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        for record in raw.chunks_exact(RECORD_LEN) {
            let (label, image) = decode_record(record)?;
            let pixels = if train {
                augment(&image, &mut rng)?
            } else {
                center_crop(&image)?
            };
            // Preprocessing arithmetic runs on this thread inside the
            // enclave; bill it like any other kernel.
            enclave.charge_compute_flops(12 * pixels.len() as u64);
            if queue.push(Sample { label, pixels }).is_err() {
                return Ok(());
            }
        }
        if !cycle {
            return Ok(());
        }
    }
}
