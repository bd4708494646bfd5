// SPDX-License-Identifier: Apache-2.0

//! The canned workloads behind the benchmark verbs.
//!
//! Classification and training drive the tensor engine through the full
//! stack: records are written and read through the file shield over the
//! bridge, samples flow through the bounded queue, and the evaluator
//! charges compute and page traffic to the enclave clock. The sweep
//! bypasses the engine and touches raw heap pages to expose the paging
//! cost curve by itself.
//!
//! Each run stands up one enclave. Setup (dataset and model files) runs
//! before the measured window; the window covers exactly the classify or
//! train phase.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{cost_delta, merge_profiles, on_off, BenchError, BenchReport, StepRow};
use crate::enclave::{Enclave, EnclaveConfig, Mode, PAGE_SIZE};
use crate::fs_shield::{FsShield, PathPolicy, ShieldMode};
use crate::runtime::Runtime;
use crate::tensor::{
    build_cifar_model, synthetic_dataset, Graph, ModelConfig, Pipeline, Session, Tensor,
};

const CODE_CLASSIFY: &[u8] = b"bench classify workload v1";
const CODE_TRAIN: &[u8] = b"bench train workload v1";
const CODE_SWEEP: &[u8] = b"bench page sweep v1";

/// Benchmark model: the compact convolution widths with the full dense
/// widths, so the working set is dominated by fully connected weights.
pub fn default_model() -> ModelConfig {
    ModelConfig {
        conv1: 16,
        conv2: 16,
        fc1: 384,
        fc2: 192,
        classes: 10,
    }
}

/// Settings for one classification run.
#[derive(Debug, Clone)]
pub struct ClassifyOpts {
    pub mode: Mode,
    pub fs_shield_on: bool,
    pub images: u64,
    pub batch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub heap_limit: u64,
    pub epc_limit: u64,
    pub data_samples: usize,
    /// Directory for the run's dataset and model files.
    pub dir: PathBuf,
    /// Load this frozen model instead of generating one. The graph's
    /// embedded record path must name a readable dataset.
    pub model_file: Option<String>,
}

impl ClassifyOpts {
    pub fn new(dir: impl Into<PathBuf>) -> ClassifyOpts {
        ClassifyOpts {
            mode: Mode::HardwareSim,
            fs_shield_on: true,
            images: 200,
            batch: 1,
            seed: 7,
            model: default_model(),
            heap_limit: 32 << 20,
            epc_limit: 8 << 20,
            data_samples: 512,
            dir: dir.into(),
            model_file: None,
        }
    }
}

/// Settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub mode: Mode,
    pub fs_shield_on: bool,
    pub steps: u64,
    pub threads: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub model: ModelConfig,
    pub heap_limit: u64,
    pub epc_limit: u64,
    pub data_samples: usize,
    /// Batches of the evaluation pass that scores accuracy after training.
    pub eval_batches: usize,
    pub dir: PathBuf,
}

impl TrainOpts {
    pub fn new(dir: impl Into<PathBuf>) -> TrainOpts {
        TrainOpts {
            mode: Mode::HardwareSim,
            fs_shield_on: true,
            steps: 50,
            threads: 1,
            batch: 16,
            lr: 0.05,
            seed: 7,
            model: default_model(),
            heap_limit: 64 << 20,
            epc_limit: 8 << 20,
            data_samples: 512,
            eval_batches: 8,
            dir: dir.into(),
        }
    }
}

struct Rig {
    rt: Runtime,
    enclave: Arc<Enclave>,
    shield: Arc<FsShield>,
}

/// Stand a runtime up over `dir` with the shield policy the flag asks
/// for. The file key is derived from the seed, standing in for a
/// provisioned secret.
fn rig(
    code: &[u8],
    dir: &Path,
    mode: Mode,
    fs_on: bool,
    heap: u64,
    epc: u64,
    seed: u64,
) -> Result<Rig, BenchError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| BenchError::SelfCheck(format!("cannot create {}: {e}", dir.display())))?;
    let prefix = dir.to_string_lossy().into_owned();
    let policy = if fs_on {
        ShieldMode::EncryptAuth
    } else {
        ShieldMode::Passthrough
    };
    let cfg = EnclaveConfig {
        heap_limit: heap,
        epc_limit: epc,
        mode,
        shield_policies: vec![PathPolicy::new(prefix, policy)],
        fs_key: fs_on.then(|| derive_key(seed)),
        ..EnclaveConfig::default()
    };
    let rt = Runtime::new(code, cfg)?;
    let enclave = rt.enclave().clone();
    let shield = rt.shield().clone();
    Ok(Rig {
        rt,
        enclave,
        shield,
    })
}

fn derive_key(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"bench file shield key");
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

fn digest_hex(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    let out = h.finalize();
    out.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Indices of the row maxima of a `[batch, classes]` tensor.
fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let classes = *t.shape().last().expect("rank >= 1");
    t.data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
                .map(|(i, _)| i)
                .expect("non-empty row")
        })
        .collect()
}

fn count_correct(prob: &Tensor, labels: &Tensor) -> u64 {
    argmax_rows(prob)
        .into_iter()
        .zip(argmax_rows(labels))
        .filter(|(p, l)| p == l)
        .count() as u64
}

/// The first row's top `k` labels with scores, best first.
fn top_k(prob: &Tensor, k: usize) -> String {
    let classes = *prob.shape().last().expect("rank >= 1");
    let row = &prob.data()[..classes];
    let mut ranked: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked
        .iter()
        .take(k)
        .map(|(label, score)| format!("{label}:{score:.6}"))
        .collect::<Vec<_>>()
        .join("|")
}

/// Join the pipeline readers, preferring their root failure over the
/// consumer's bare closed-queue symptom.
fn finish_or_root(
    pipeline: Pipeline,
    consumer_failure: Option<crate::tensor::TensorError>,
) -> Result<(), BenchError> {
    match (pipeline.finish(), consumer_failure) {
        (Err(root), _) => Err(root.into()),
        (Ok(()), Some(e)) => Err(e.into()),
        (Ok(()), None) => Ok(()),
    }
}

struct Window {
    now: u64,
    costs: crate::enclave::CostTotals,
    entries: u64,
    exits: u64,
}

fn snapshot(enclave: &Enclave) -> Window {
    Window {
        now: enclave.virtual_now(),
        costs: enclave.cost_totals(),
        entries: enclave.transitions().entries(),
        exits: enclave.transitions().exits(),
    }
}

/// Classify `images` samples streamed from the record pipeline,
/// reporting virtual throughput and a digest of the first batch's
/// class scores.
pub fn run_classify(opts: &ClassifyOpts) -> Result<BenchReport, BenchError> {
    if opts.batch == 0 || opts.images == 0 || !opts.images.is_multiple_of(opts.batch as u64) {
        return Err(BenchError::SelfCheck(format!(
            "images ({}) must be a positive multiple of batch ({})",
            opts.images, opts.batch
        )));
    }
    let dir = opts.dir.join(format!(
        "classify-{}-{}",
        opts.mode,
        on_off(opts.fs_shield_on)
    ));
    let r = rig(
        CODE_CLASSIFY,
        &dir,
        opts.mode,
        opts.fs_shield_on,
        opts.heap_limit,
        opts.epc_limit,
        opts.seed,
    )?;
    let data_path = dir.join("dataset.tsrec").to_string_lossy().into_owned();
    let model_path = opts
        .model_file
        .clone()
        .unwrap_or_else(|| dir.join("model.tscg").to_string_lossy().into_owned());

    let graph = Arc::new(build_cifar_model(
        &opts.model,
        0.01,
        &data_path,
        true,
        opts.batch,
    )?);

    let setup = {
        let enclave = r.enclave.clone();
        let shield = r.shield.clone();
        let graph = graph.clone();
        let samples = opts.data_samples;
        let seed = opts.seed;
        let data_path = data_path.clone();
        let model_path = model_path.clone();
        let load_model = opts.model_file.is_some();
        r.rt.sched().spawn("setup", move || -> Result<Session, BenchError> {
            shield.write_all(&data_path, &synthetic_dataset(samples, seed))?;
            if load_model {
                let bytes = shield.read_all(&model_path)?;
                let (loaded, values) = Graph::from_bytes(&bytes)?;
                let mut session = Session::new(enclave, Arc::new(loaded))?;
                session.restore_values(&values)?;
                Ok(session)
            } else {
                let mut session = Session::new(enclave, graph)?;
                session.initialize(seed)?;
                let frozen = session.export_frozen()?;
                shield.write_all(&model_path, &frozen)?;
                Ok(session)
            }
        })
    };
    r.rt.run();
    let session = setup.join().map_err(|_| BenchError::Panicked)??;

    r.enclave.reset_paging_stats();
    let start = snapshot(&r.enclave);

    let pipeline = Pipeline::start(
        r.rt.sched(),
        r.enclave.clone(),
        r.shield.clone(),
        session.graph(),
        "dequeue",
        false,
        opts.seed.wrapping_add(1),
    )?;
    let batches = opts.images / opts.batch as u64;
    let consumer = r.rt.sched().spawn("classify", move || {
        let mut session = session;
        let mut correct = 0u64;
        let mut digest = String::new();
        let mut top4 = String::new();
        let mut failure = None;
        for b in 0..batches {
            let (images, labels) = match pipeline.next_batch() {
                Ok(batch) => batch,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            let fetched = session.run(&["prob"], &[("input", &images)])?;
            let prob = &fetched[0];
            correct += count_correct(prob, &labels);
            if b == 0 {
                digest = digest_hex(prob);
                top4 = top_k(prob, 4);
            }
        }
        finish_or_root(pipeline, failure)?;
        let ws = session.vars_bytes() + session.scratch_peak();
        Ok::<_, BenchError>((correct, digest, top4, ws))
    });
    r.rt.run();
    let (correct, digest, top4, ws) = consumer.join().map_err(|_| BenchError::Panicked)??;

    let end = snapshot(&r.enclave);
    let paging = r.enclave.paging_stats();
    let (syscalls, futex_bridge_calls) = merge_profiles(&r.rt.sched().profile(), &r.rt.bridge().profile());
    r.rt.shutdown();

    let report = BenchReport {
        workload: "classify",
        mode: opts.mode,
        fs_shield: opts.fs_shield_on,
        threads: 1,
        items: opts.images,
        virtual_units: end.now - start.now,
        costs: cost_delta(end.costs, start.costs),
        paging,
        entries: end.entries - start.entries,
        exits: end.exits - start.exits,
        syscalls,
        futex_bridge_calls,
        extras: vec![
            ("batch".into(), opts.batch.to_string()),
            ("data_samples".into(), opts.data_samples.to_string()),
            (
                "accuracy".into(),
                format!("{:.4}", correct as f64 / opts.images as f64),
            ),
            ("prob_digest".into(), digest),
            ("top4_first_image".into(), top4),
            ("working_set_bytes".into(), ws.to_string()),
            ("heap_bytes".into(), opts.heap_limit.to_string()),
            ("epc_bytes".into(), opts.epc_limit.to_string()),
        ],
        series: Vec::new(),
    };
    report.self_check().map_err(BenchError::SelfCheck)?;
    Ok(report)
}

/// Train for `steps` SGD steps on the streamed pipeline, then score
/// accuracy with an evaluation pass outside the measured window.
pub fn run_train(opts: &TrainOpts) -> Result<BenchReport, BenchError> {
    if opts.batch == 0 || opts.steps == 0 || opts.threads == 0 {
        return Err(BenchError::SelfCheck(
            "steps, batch, and threads must all be positive".into(),
        ));
    }
    let dir = opts.dir.join(format!(
        "train-{}-{}-t{}",
        opts.mode,
        on_off(opts.fs_shield_on),
        opts.threads
    ));
    let r = rig(
        CODE_TRAIN,
        &dir,
        opts.mode,
        opts.fs_shield_on,
        opts.heap_limit,
        opts.epc_limit,
        opts.seed,
    )?;
    let data_path = dir.join("dataset.tsrec").to_string_lossy().into_owned();

    let graph = Arc::new(build_cifar_model(
        &opts.model,
        opts.lr,
        &data_path,
        true,
        opts.batch,
    )?);

    let setup = {
        let enclave = r.enclave.clone();
        let shield = r.shield.clone();
        let graph = graph.clone();
        let samples = opts.data_samples;
        let seed = opts.seed;
        let data_path = data_path.clone();
        r.rt.sched().spawn("setup", move || -> Result<Session, BenchError> {
            shield.write_all(&data_path, &synthetic_dataset(samples, seed))?;
            let mut session = Session::new(enclave, graph)?;
            session.initialize(seed)?;
            Ok(session)
        })
    };
    r.rt.run();
    let session = setup.join().map_err(|_| BenchError::Panicked)??;

    r.enclave.reset_paging_stats();
    let start = snapshot(&r.enclave);

    let pipeline = Pipeline::start_pool(
        r.rt.sched(),
        r.enclave.clone(),
        r.shield.clone(),
        session.graph(),
        "dequeue",
        true,
        opts.seed.wrapping_add(1),
        opts.threads,
    )?;
    let steps = opts.steps;
    let enclave_for_steps = r.enclave.clone();
    let trainer = r.rt.sched().spawn("train", move || {
        let mut session = session;
        let mut series = Vec::with_capacity(steps as usize);
        let mut final_loss = f32::NAN;
        let mut failure = None;
        for step in 1..=steps {
            let t0 = enclave_for_steps.virtual_now();
            let (images, labels) = match pipeline.next_batch() {
                Ok(batch) => batch,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            let fetched = session.run(
                &["train_op"],
                &[("input", &images), ("labels", &labels)],
            )?;
            let loss = fetched[0].data()[0];
            final_loss = loss;
            series.push(StepRow {
                step,
                units: enclave_for_steps.virtual_now() - t0,
                loss,
            });
        }
        finish_or_root(pipeline, failure)?;
        Ok::<_, BenchError>((session, series, final_loss))
    });
    r.rt.run();
    let (session, series, final_loss) = trainer.join().map_err(|_| BenchError::Panicked)??;

    let end = snapshot(&r.enclave);
    let paging = r.enclave.paging_stats();

    let eval_pipeline = Pipeline::start(
        r.rt.sched(),
        r.enclave.clone(),
        r.shield.clone(),
        session.graph(),
        "dequeue",
        false,
        opts.seed.wrapping_add(2),
    )?;
    let eval_batches = opts.eval_batches;
    let batch = opts.batch;
    let evaluator = r.rt.sched().spawn("eval", move || {
        let mut session = session;
        let mut correct = 0u64;
        let mut failure = None;
        for _ in 0..eval_batches {
            let (images, labels) = match eval_pipeline.next_batch() {
                Ok(batch) => batch,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            let fetched = session.run(&["prob"], &[("input", &images)])?;
            correct += count_correct(&fetched[0], &labels);
        }
        finish_or_root(eval_pipeline, failure)?;
        let min_heap = session.vars_bytes() + session.scratch_peak() + PAGE_SIZE;
        let ws = session.vars_bytes() + session.scratch_peak();
        Ok::<_, BenchError>((correct, min_heap, ws))
    });
    r.rt.run();
    let (correct, min_heap, ws) = evaluator.join().map_err(|_| BenchError::Panicked)??;

    let (syscalls, futex_bridge_calls) = merge_profiles(&r.rt.sched().profile(), &r.rt.bridge().profile());
    r.rt.shutdown();

    let eval_n = (eval_batches * batch) as u64;
    let report = BenchReport {
        workload: "train",
        mode: opts.mode,
        fs_shield: opts.fs_shield_on,
        threads: opts.threads,
        items: opts.steps,
        virtual_units: end.now - start.now,
        costs: cost_delta(end.costs, start.costs),
        paging,
        entries: end.entries - start.entries,
        exits: end.exits - start.exits,
        syscalls,
        futex_bridge_calls,
        extras: vec![
            ("batch".into(), opts.batch.to_string()),
            ("lr".into(), format!("{:.6}", opts.lr)),
            ("data_samples".into(), opts.data_samples.to_string()),
            ("final_loss".into(), format!("{final_loss:.6}")),
            (
                "eval_accuracy".into(),
                format!("{:.4}", correct as f64 / eval_n.max(1) as f64),
            ),
            ("eval_samples".into(), eval_n.to_string()),
            ("working_set_bytes".into(), ws.to_string()),
            ("min_heap_bytes".into(), min_heap.to_string()),
            ("heap_bytes".into(), opts.heap_limit.to_string()),
            ("epc_bytes".into(), opts.epc_limit.to_string()),
        ],
        series,
    };
    report.self_check().map_err(BenchError::SelfCheck)?;
    Ok(report)
}

/// Settings for the raw page-touch sweep.
#[derive(Debug, Clone)]
pub struct SweepOpts {
    pub epc_bytes: u64,
    pub from_bytes: u64,
    pub to_bytes: u64,
    /// Timed passes over each working set, after one untimed warm pass.
    pub passes: u32,
}

impl Default for SweepOpts {
    fn default() -> Self {
        let epc = 4 << 20;
        SweepOpts {
            epc_bytes: epc,
            from_bytes: epc / 4,
            to_bytes: 3 * epc,
            passes: 3,
        }
    }
}

/// Mean page-touch cost for one working-set size.
#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub working_set: u64,
    pub accesses: u64,
    pub paging_units: u64,
}

impl SweepPoint {
    pub fn mean_cost(&self) -> f64 {
        self.paging_units as f64 / self.accesses.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub epc_bytes: u64,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Steady-state cost ratio between the 2x and 0.5x working sets,
    /// when the sweep covered both.
    pub fn cliff_ratio(&self) -> Option<f64> {
        let at = |ws: u64| {
            self.points
                .iter()
                .find(|p| p.working_set == ws)
                .map(SweepPoint::mean_cost)
        };
        let below = at(self.epc_bytes / 2)?;
        let above = at(self.epc_bytes * 2)?;
        Some(above / below)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "working_set_bytes,epc_bytes,accesses,paging_units,mean_units_per_access\n",
        );
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                p.working_set,
                self.epc_bytes,
                p.accesses,
                p.paging_units,
                p.mean_cost()
            ));
        }
        out
    }

    pub fn self_check(&self) -> Result<(), String> {
        if self.points.is_empty() {
            return Err("sweep produced no points".into());
        }
        if let Some(ratio) = self.cliff_ratio() {
            if ratio < 10.0 {
                return Err(format!(
                    "cost cliff ratio {ratio:.2} below 10 across the cache limit"
                ));
            }
        }
        Ok(())
    }
}

/// Walk working sets from `from_bytes` to `to_bytes` in quarter-cache
/// steps, measuring the steady-state mean cost of touching a page.
pub fn run_epc_sweep(opts: &SweepOpts) -> Result<SweepReport, BenchError> {
    if opts.from_bytes == 0 || opts.to_bytes < opts.from_bytes || opts.passes == 0 {
        return Err(BenchError::SelfCheck(
            "sweep range must be positive and ordered, with at least one pass".into(),
        ));
    }
    let step = (opts.epc_bytes / 4).max(PAGE_SIZE);
    let first = opts.from_bytes.div_ceil(step).max(1);
    let last = opts.to_bytes / step;
    if last < first {
        return Err(BenchError::SelfCheck(format!(
            "sweep range narrower than one {step}-byte step"
        )));
    }
    let span = last * step;
    let cfg = EnclaveConfig {
        heap_limit: span + PAGE_SIZE,
        epc_limit: opts.epc_bytes,
        mode: Mode::HardwareSim,
        ..EnclaveConfig::default()
    };
    let enclave = Enclave::create(CODE_SWEEP, cfg)?;
    let base = enclave.alloc_low(span, PAGE_SIZE)?;

    let mut points = Vec::new();
    for mult in first..=last {
        let ws = mult * step;
        touch_region(&enclave, base, ws)?;
        let t0 = enclave.paging_stats().touches();
        let c0 = enclave.cost_totals().paging;
        for _ in 0..opts.passes {
            touch_region(&enclave, base, ws)?;
        }
        let accesses = enclave.paging_stats().touches() - t0;
        let paging_units = enclave.cost_totals().paging - c0;
        points.push(SweepPoint {
            working_set: ws,
            accesses,
            paging_units,
        });
    }
    let report = SweepReport {
        epc_bytes: opts.epc_bytes,
        points,
    };
    report.self_check().map_err(BenchError::SelfCheck)?;
    Ok(report)
}

fn touch_region(enclave: &Enclave, base: u64, len: u64) -> Result<(), BenchError> {
    const STRIDE: u64 = 64 * PAGE_SIZE;
    let mut off = 0;
    while off < len {
        let chunk = STRIDE.min(len - off);
        enclave.mem_access(base + off, chunk)?;
        off += chunk;
    }
    Ok(())
}
