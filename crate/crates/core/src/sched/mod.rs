// SPDX-License-Identifier: Apache-2.0

//! Cooperative user-level threads multiplexed over a bounded set of enclave
//! contexts.
//!
//! Guest code runs on real OS threads, but exactly one executes at a time:
//! control passes by explicit handoff at scheduling points (yield, block,
//! exit), so a run's interleaving is a pure function of the guest code and
//! the scheduling policy. Blocking never leaves the runtime; waits park the
//! thread on an in-enclave wait queue, and the idle policy decides per wait
//! whether to spin (keeping the enclave context busy) or to exit and sleep
//! outside, paying two boundary transitions.
//!
//! The dispatcher also owns virtual time while everything is blocked: it
//! advances the clock to the next timer deadline or system-call completion
//! and wakes the owed thread, which is what makes reports reproducible.

mod policy;
mod sync;

pub use policy::{decide, IdleDecision, WaitEstimator};
pub use sync::{BoundedChannel, GreenMutex, GreenMutexGuard};

use std::any::Any;
use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::enclave::{CostKind, Enclave};

pub type Tid = u64;
pub type WqId = u64;

/// Order in which the dispatcher tries runnable threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedPolicy {
    /// Strict FIFO round-robin.
    RoundRobin,
    /// Uniformly random pick, deterministic for a given seed.
    Seeded(u64),
}

/// Profile row for one system-call class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassStat {
    pub time: u64,
    pub count: u64,
}

/// Where virtual time went from the host kernel's point of view.
///
/// `classes` is the strace-style table: every outside-sleep wait and every
/// bridged system call lands in a named row. Spins happen in user space and
/// are tracked separately because the host never sees them.
#[derive(Debug, Clone, Default)]
pub struct SchedProfile {
    pub classes: BTreeMap<&'static str, ClassStat>,
    pub spin_time: u64,
    pub spin_count: u64,
    pub wakeups: u64,
    pub downgrades: u64,
    pub max_held_slots: usize,
}

impl SchedProfile {
    pub fn class(&self, name: &str) -> ClassStat {
        self.classes.get(name).copied().unwrap_or_default()
    }

    pub fn total_class_time(&self) -> u64 {
        self.classes.values().map(|s| s.time).sum()
    }

    /// Fraction of host-visible wait time spent in futex, in [0, 1].
    pub fn futex_share(&self) -> f64 {
        let total = self.total_class_time();
        if total == 0 {
            return 0.0;
        }
        self.class("futex").time as f64 / total as f64
    }
}

/// A system-call completion owed to a blocked thread.
#[derive(Debug, Clone, Copy)]
pub struct Completion {
    pub tid: Tid,
}

/// Producer of completions the dispatcher folds into the schedule.
///
/// `collect_due` may block on the wall clock until results that are due in
/// virtual time actually exist; `next_ready` must be monotone under
/// repeated calls with no intervening submissions.
pub trait EventSource: Send + Sync {
    /// Virtual time of the earliest undelivered completion, if one exists
    /// with a known ready time.
    fn next_ready(&self) -> Option<u64>;
    /// Deliver every completion with ready time <= `now`, in (ready, id)
    /// order, waiting for late results if necessary.
    fn collect_due(&self, now: u64) -> Vec<Completion>;
    /// Completions pending with no virtual ready time (external I/O).
    fn pending_external(&self) -> bool;
    /// Block until at least one external completion exists, then deliver.
    fn wait_external(&self) -> Vec<Completion>;
}

const LABEL_FUTEX: &str = "futex";
const LABEL_SLEEP: &str = "nanosleep";

enum SlotCmd {
    Park,
    Go,
    Abort,
}

/// One-at-a-time execution gate; each thread (and the dispatcher) parks
/// here between turns.
struct Slot {
    cmd: Mutex<SlotCmd>,
    cv: Condvar,
}

impl Slot {
    fn new() -> Arc<Slot> {
        Arc::new(Slot {
            cmd: Mutex::new(SlotCmd::Park),
            cv: Condvar::new(),
        })
    }

    fn go(&self) {
        *self.cmd.lock().unwrap() = SlotCmd::Go;
        self.cv.notify_one();
    }

    fn abort(&self) {
        *self.cmd.lock().unwrap() = SlotCmd::Abort;
        self.cv.notify_one();
    }

    /// Park until released; false means the scheduler is tearing down.
    fn wait(&self) -> bool {
        let mut cmd = self.cmd.lock().unwrap();
        loop {
            match *cmd {
                SlotCmd::Park => cmd = self.cv.wait(cmd).unwrap(),
                SlotCmd::Go => {
                    *cmd = SlotCmd::Park;
                    return true;
                }
                SlotCmd::Abort => return false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WaitSite {
    Queue(WqId),
    Event,
    Timer,
}

enum ThreadState {
    Runnable,
    Running,
    Blocked {
        site: WaitSite,
        label: &'static str,
        spin: bool,
        since: u64,
    },
    Exited,
}

struct ThreadRec {
    name: String,
    state: ThreadState,
    slot: Arc<Slot>,
    exit_wq: WqId,
    entry_due: bool,
    joined: bool,
    panic_msg: Option<String>,
}

#[derive(Default)]
struct WqRec {
    waiters: VecDeque<Tid>,
    token: bool,
    estimator: WaitEstimator,
}

struct SchedState {
    threads: HashMap<Tid, ThreadRec>,
    run_queue: VecDeque<Tid>,
    wait_queues: HashMap<WqId, WqRec>,
    timers: BinaryHeap<Reverse<(u64, Tid)>>,
    held_slots: HashSet<Tid>,
    live: usize,
    next_wq: WqId,
    rng: Option<ChaCha8Rng>,
    profile: SchedProfile,
}

struct Shared {
    state: Mutex<SchedState>,
    enclave: Arc<Enclave>,
    dispatcher: Arc<Slot>,
    sources: Mutex<Vec<Arc<dyn EventSource>>>,
    next_tid: AtomicU64,
}

thread_local! {
    static CTX: RefCell<Option<GreenCtx>> = const { RefCell::new(None) };
}

#[derive(Clone)]
struct GreenCtx {
    shared: Arc<Shared>,
    tid: Tid,
    slot: Arc<Slot>,
}

fn with_ctx<R>(f: impl FnOnce(&GreenCtx) -> R) -> R {
    CTX.with(|c| {
        let b = c.borrow();
        let ctx = b
            .as_ref()
            .expect("operation requires a scheduler thread context");
        f(ctx)
    })
}

/// True when called from inside a scheduled thread.
pub fn in_green_ctx() -> bool {
    CTX.with(|c| c.borrow().is_some())
}

pub fn current_tid() -> Option<Tid> {
    CTX.with(|c| c.borrow().as_ref().map(|g| g.tid))
}

/// Hand the processor to the next runnable thread.
pub fn yield_now() {
    with_ctx(|ctx| {
        {
            let mut st = ctx.shared.state.lock().unwrap();
            let tid = ctx.tid;
            st.held_slots.remove(&tid);
            let rec = st.threads.get_mut(&tid).unwrap();
            rec.state = ThreadState::Runnable;
            st.run_queue.push_back(tid);
        }
        ctx.shared.dispatcher.go();
        if !ctx.slot.wait() {
            panic!("scheduler torn down while thread was parked");
        }
    })
}

/// Block for `duration` units of virtual time.
///
/// The duration is known up front, so the idle policy sees it exactly: a
/// short nap spins inside, a long one sleeps outside.
pub fn sleep(duration: u64) {
    with_ctx(|ctx| {
        let st = ctx.shared.state.lock().unwrap();
        let deadline = ctx.shared.enclave.virtual_now() + duration;
        block_current(
            ctx,
            st,
            WaitSite::Timer,
            LABEL_SLEEP,
            Some(duration),
            |st2, tid| st2.timers.push(Reverse((deadline, tid))),
        );
    })
}

/// Park the calling thread until an event source completes its request.
///
/// `expected_service` feeds the idle policy; the actual wake comes from the
/// source's completion, delivered by the dispatcher.
pub fn block_for_event(label: &'static str, expected_service: Option<u64>) {
    with_ctx(|ctx| {
        let st = ctx.shared.state.lock().unwrap();
        block_current(ctx, st, WaitSite::Event, label, expected_service, |_, _| {});
    })
}

/// Common block path; takes the state lock by value so enqueueing, the
/// idle decision, and the handoff happen without another thread running.
fn block_current(
    ctx: &GreenCtx,
    mut st: MutexGuard<'_, SchedState>,
    site: WaitSite,
    label: &'static str,
    expected: Option<u64>,
    enqueue: impl FnOnce(&mut SchedState, Tid),
) {
    let tid = ctx.tid;
    let enclave = &ctx.shared.enclave;
    let cpt = enclave.config().costs.cost_per_transition;
    let spin = decide(expected, cpt) == IdleDecision::SpinInside;
    if spin {
        st.profile.spin_count += 1;
    } else {
        st.held_slots.remove(&tid);
        enclave.exit_enclave();
        let rec = st.threads.get_mut(&tid).unwrap();
        rec.entry_due = true;
        st.profile.classes.entry(label).or_default().count += 1;
    }
    enqueue(&mut st, tid);
    let since = enclave.virtual_now();
    let rec = st.threads.get_mut(&tid).unwrap();
    rec.state = ThreadState::Blocked {
        site,
        label,
        spin,
        since,
    };
    drop(st);
    ctx.shared.dispatcher.go();
    if !ctx.slot.wait() {
        panic!("scheduler torn down while thread was parked");
    }
}

/// Move a blocked thread back to the run queue, attributing its wait.
fn wake_tid(shared: &Shared, st: &mut SchedState, tid: Tid, now: u64) {
    let held = st.held_slots.contains(&tid);
    let rec = st.threads.get_mut(&tid).unwrap();
    let ThreadState::Blocked {
        label, spin, since, ..
    } = rec.state
    else {
        panic!("woke thread {tid} ({}) that was not blocked", rec.name);
    };
    let dur = now.saturating_sub(since);
    if spin {
        st.profile.spin_time += dur;
    } else {
        st.profile.classes.entry(label).or_default().time += dur;
    }
    rec.state = ThreadState::Runnable;
    if held {
        st.run_queue.push_front(tid);
    } else {
        st.run_queue.push_back(tid);
    }
    st.profile.wakeups += 1;
    let _ = shared;
}

/// FIFO wait queue with a single sticky wake token.
///
/// A wake with no waiter is remembered (once): the next wait consumes the
/// token and returns immediately instead of blocking, so a wake can never
/// be lost to the gap between deciding to wait and waiting.
#[derive(Clone)]
pub struct WaitQueue {
    id: WqId,
    shared: Arc<Shared>,
}

impl WaitQueue {
    /// Block until woken. May return without a wake when a sticky token is
    /// pending, so callers must re-check their condition in a loop.
    pub fn wait(&self) {
        with_ctx(|ctx| {
            assert!(
                Arc::ptr_eq(&ctx.shared, &self.shared),
                "wait queue used from a different scheduler"
            );
            let mut st = ctx.shared.state.lock().unwrap();
            let wq = st.wait_queues.get_mut(&self.id).unwrap();
            if wq.token {
                wq.token = false;
                return;
            }
            let expected = wq.estimator.expected();
            let id = self.id;
            block_current(
                ctx,
                st,
                WaitSite::Queue(id),
                LABEL_FUTEX,
                expected,
                |st2, tid| {
                    st2.wait_queues.get_mut(&id).unwrap().waiters.push_back(tid);
                },
            );
        })
    }

    /// Wake the longest-waiting thread; with no waiter, set the sticky
    /// token. Returns true when a thread changed state.
    pub fn wake_one(&self) -> bool {
        let mut st = self.shared.state.lock().unwrap();
        let now = self.shared.enclave.virtual_now();
        let popped = st
            .wait_queues
            .get_mut(&self.id)
            .unwrap()
            .waiters
            .pop_front();
        match popped {
            Some(tid) => {
                let dur = now.saturating_sub(blocked_since(&st, tid));
                st.wait_queues
                    .get_mut(&self.id)
                    .unwrap()
                    .estimator
                    .record(dur);
                wake_tid(&self.shared, &mut st, tid, now);
                true
            }
            None => {
                st.wait_queues.get_mut(&self.id).unwrap().token = true;
                false
            }
        }
    }

    /// Wake every waiter; with none, set the sticky token. Returns the
    /// number of threads woken.
    pub fn wake_all(&self) -> usize {
        let mut st = self.shared.state.lock().unwrap();
        let now = self.shared.enclave.virtual_now();
        let waiters: Vec<Tid> = st
            .wait_queues
            .get_mut(&self.id)
            .unwrap()
            .waiters
            .drain(..)
            .collect();
        if waiters.is_empty() {
            st.wait_queues.get_mut(&self.id).unwrap().token = true;
            return 0;
        }
        for &tid in &waiters {
            let dur = now.saturating_sub(blocked_since(&st, tid));
            st.wait_queues
                .get_mut(&self.id)
                .unwrap()
                .estimator
                .record(dur);
            wake_tid(&self.shared, &mut st, tid, now);
        }
        waiters.len()
    }
}

fn blocked_since(st: &SchedState, tid: Tid) -> u64 {
    match st.threads[&tid].state {
        ThreadState::Blocked { since, .. } => since,
        _ => panic!("thread {tid} on a wait queue but not blocked"),
    }
}

/// Handle for collecting one thread's result.
pub struct JoinHandle<T> {
    tid: Tid,
    exit_wq: WaitQueue,
    result: Arc<Mutex<Option<std::thread::Result<T>>>>,
}

impl<T> JoinHandle<T> {
    pub fn tid(&self) -> Tid {
        self.tid
    }

    /// Wait for the thread to finish and take its result.
    ///
    /// Callable from another scheduled thread (blocks cooperatively) or
    /// after the dispatcher has drained every thread.
    pub fn join(self) -> std::thread::Result<T> {
        loop {
            if let Some(r) = self.result.lock().unwrap().take() {
                let mut st = self.exit_wq.shared.state.lock().unwrap();
                if let Some(rec) = st.threads.get_mut(&self.tid) {
                    rec.joined = true;
                }
                return r;
            }
            assert!(
                in_green_ctx(),
                "join outside the scheduler requires the thread to have finished"
            );
            self.exit_wq.wait();
        }
    }
}

/// The M:N scheduler: spawns threads, owns the dispatcher loop.
#[derive(Clone)]
pub struct Scheduler {
    shared: Arc<Shared>,
}

impl Scheduler {
    pub fn new(enclave: Arc<Enclave>, policy: SchedPolicy) -> Scheduler {
        let rng = match policy {
            SchedPolicy::RoundRobin => None,
            SchedPolicy::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Scheduler {
            shared: Arc::new(Shared {
                state: Mutex::new(SchedState {
                    threads: HashMap::new(),
                    run_queue: VecDeque::new(),
                    wait_queues: HashMap::new(),
                    timers: BinaryHeap::new(),
                    held_slots: HashSet::new(),
                    live: 0,
                    next_wq: 0,
                    rng,
                    profile: SchedProfile::default(),
                }),
                enclave,
                dispatcher: Slot::new(),
                sources: Mutex::new(Vec::new()),
                next_tid: AtomicU64::new(1),
            }),
        }
    }

    pub fn enclave(&self) -> &Arc<Enclave> {
        &self.shared.enclave
    }

    pub fn add_source(&self, src: Arc<dyn EventSource>) {
        self.shared.sources.lock().unwrap().push(src);
    }

    pub fn wait_queue(&self) -> WaitQueue {
        let mut st = self.shared.state.lock().unwrap();
        let id = st.next_wq;
        st.next_wq += 1;
        st.wait_queues.insert(id, WqRec::default());
        WaitQueue {
            id,
            shared: self.shared.clone(),
        }
    }

    pub fn profile(&self) -> SchedProfile {
        self.shared.state.lock().unwrap().profile.clone()
    }

    pub fn live_threads(&self) -> usize {
        self.shared.state.lock().unwrap().live
    }

    /// Start a thread; it runs only when the dispatcher schedules it.
    pub fn spawn<T, F>(&self, name: &str, f: F) -> JoinHandle<T>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        let tid = self.shared.next_tid.fetch_add(1, Ordering::Relaxed);
        let slot = Slot::new();
        let exit_wq = self.wait_queue();
        let result: Arc<Mutex<Option<std::thread::Result<T>>>> = Arc::new(Mutex::new(None));
        {
            let mut st = self.shared.state.lock().unwrap();
            st.threads.insert(
                tid,
                ThreadRec {
                    name: name.to_string(),
                    state: ThreadState::Runnable,
                    slot: slot.clone(),
                    exit_wq: exit_wq.id,
                    entry_due: false,
                    joined: false,
                    panic_msg: None,
                },
            );
            st.live += 1;
            st.run_queue.push_back(tid);
        }

        let shared = self.shared.clone();
        let result_slot = result.clone();
        let thread_slot = slot.clone();
        std::thread::Builder::new()
            .name(format!("green-{tid}-{name}"))
            .spawn(move || {
                let ctx = GreenCtx {
                    shared: shared.clone(),
                    tid,
                    slot: thread_slot.clone(),
                };
                CTX.with(|c| *c.borrow_mut() = Some(ctx));
                if !thread_slot.wait() {
                    finish_thread(&shared, tid, Some("aborted before first run".into()));
                    return;
                }
                let outcome = catch_unwind(AssertUnwindSafe(f));
                let msg = match &outcome {
                    Ok(_) => None,
                    Err(p) => Some(panic_text(p.as_ref())),
                };
                *result_slot.lock().unwrap() = Some(outcome);
                finish_thread(&shared, tid, msg);
            })
            .expect("spawn OS thread backing a scheduled thread");

        JoinHandle {
            tid,
            exit_wq,
            result,
        }
    }

    /// Drive the system until every thread has exited.
    ///
    /// Runs threads one at a time per the policy, folds in timer expiries
    /// and system-call completions, and advances the virtual clock when
    /// everyone is blocked. Panics if blocked threads remain with nothing
    /// left that could ever wake them, or if a thread panicked and nobody
    /// joined it.
    pub fn run_to_completion(&self) {
        let shared = &self.shared;
        let enclave = &shared.enclave;
        loop {
            let now = enclave.virtual_now();
            self.deliver_due(now);
            {
                let mut st = shared.state.lock().unwrap();
                expire_timers(shared, &mut st, now);
            }

            let picked = {
                let mut st = shared.state.lock().unwrap();
                pick_next(&mut st, shared)
            };
            if let Some(tid) = picked {
                self.dispatch(tid);
                continue;
            }

            let (live, next_timer) = {
                let st = shared.state.lock().unwrap();
                (st.live, st.timers.peek().map(|Reverse((t, _))| *t))
            };
            if live == 0 {
                self.check_unjoined_panics();
                return;
            }

            let next_ready = {
                let sources = shared.sources.lock().unwrap();
                sources.iter().filter_map(|s| s.next_ready()).min()
            };
            let next_event = match (next_timer, next_ready) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            if let Some(t) = next_event {
                enclave.advance_clock_to(t, CostKind::Idle);
                continue;
            }

            let external: Option<Arc<dyn EventSource>> = {
                let sources = shared.sources.lock().unwrap();
                sources.iter().find(|s| s.pending_external()).cloned()
            };
            if let Some(src) = external {
                let comps = src.wait_external();
                let now = enclave.virtual_now();
                let mut st = shared.state.lock().unwrap();
                for c in comps {
                    wake_tid(shared, &mut st, c.tid, now);
                }
                continue;
            }

            self.stall_dump();
        }
    }

    fn deliver_due(&self, now: u64) {
        let sources: Vec<Arc<dyn EventSource>> =
            self.shared.sources.lock().unwrap().clone();
        for src in sources {
            if src.next_ready().is_some_and(|r| r <= now) {
                let comps = src.collect_due(now);
                let mut st = self.shared.state.lock().unwrap();
                for c in comps {
                    wake_tid(&self.shared, &mut st, c.tid, now);
                }
            }
        }
    }

    fn dispatch(&self, tid: Tid) {
        let slot = {
            let mut st = self.shared.state.lock().unwrap();
            if st.threads.get(&tid).unwrap().entry_due {
                self.shared.enclave.enter_enclave();
                st.threads.get_mut(&tid).unwrap().entry_due = false;
            }
            let held = st.held_slots.len();
            st.profile.max_held_slots = st.profile.max_held_slots.max(held);
            assert!(
                held <= self.shared.enclave.config().tcs_count as usize,
                "more enclave contexts in use ({held}) than exist"
            );
            let rec = st.threads.get_mut(&tid).unwrap();
            rec.state = ThreadState::Running;
            rec.slot.clone()
        };
        slot.go();
        self.shared.dispatcher.wait();
    }

    fn check_unjoined_panics(&self) {
        let st = self.shared.state.lock().unwrap();
        for rec in st.threads.values() {
            if !rec.joined {
                if let Some(msg) = &rec.panic_msg {
                    panic!("thread {:?} panicked: {msg}", rec.name);
                }
            }
        }
    }

    fn stall_dump(&self) -> ! {
        let st = self.shared.state.lock().unwrap();
        let mut lines = Vec::new();
        for (tid, rec) in &st.threads {
            if let ThreadState::Blocked {
                site, label, since, ..
            } = rec.state
            {
                lines.push(format!(
                    "  thread {tid} ({}) blocked on {site:?} [{label}] since t={since}"
                    , rec.name));
            }
        }
        lines.sort();
        panic!(
            "scheduler stalled: {} blocked thread(s), no timers, no pending completions\n{}",
            lines.len(),
            lines.join("\n")
        );
    }
}

impl Scheduler {
    /// Abort every parked thread so its OS thread can unwind and exit.
    ///
    /// Threads hold the scheduler alive while parked, so teardown must be
    /// explicit; only call this when no more dispatching will happen.
    pub fn shutdown(&self) {
        let st = self.shared.state.lock().unwrap();
        for rec in st.threads.values() {
            if !matches!(rec.state, ThreadState::Exited) {
                rec.slot.abort();
            }
        }
    }

    /// Drop all registered event sources, releasing anything they own.
    pub fn clear_sources(&self) {
        self.shared.sources.lock().unwrap().clear();
    }
}

/// Pick the next thread that can actually hold an enclave context.
///
/// Spinning threads keep their context while blocked; when every context
/// is held and a contextless thread is due, the oldest spinner is demoted
/// to an outside sleep (charged its exit on the spot) to free one.
fn pick_next(st: &mut SchedState, shared: &Shared) -> Option<Tid> {
    if st.run_queue.is_empty() {
        return None;
    }
    let order: Vec<usize> = match &mut st.rng {
        None => (0..st.run_queue.len()).collect(),
        Some(rng) => {
            let mut idx: Vec<usize> = (0..st.run_queue.len()).collect();
            idx.shuffle(rng);
            idx
        }
    };
    let tcs = shared.enclave.config().tcs_count as usize;
    for i in order {
        let tid = st.run_queue[i];
        if ensure_slot(st, shared, tid, tcs) {
            st.run_queue.remove(i);
            return Some(tid);
        }
    }
    None
}

fn ensure_slot(st: &mut SchedState, shared: &Shared, tid: Tid, tcs: usize) -> bool {
    if st.held_slots.contains(&tid) {
        return true;
    }
    if st.held_slots.len() < tcs {
        st.held_slots.insert(tid);
        return true;
    }
    let victim = st
        .threads
        .iter()
        .filter(|(vt, rec)| {
            st.held_slots.contains(vt)
                && matches!(rec.state, ThreadState::Blocked { spin: true, .. })
        })
        .min_by_key(|(vt, rec)| match rec.state {
            ThreadState::Blocked { since, .. } => (since, **vt),
            _ => unreachable!(),
        })
        .map(|(vt, _)| *vt);
    let Some(victim) = victim else {
        return false;
    };
    let now = shared.enclave.virtual_now();
    st.held_slots.remove(&victim);
    shared.enclave.exit_enclave();
    let (spun, label) = {
        let rec = st.threads.get_mut(&victim).unwrap();
        let ThreadState::Blocked {
            ref mut spin,
            ref mut since,
            label,
            ..
        } = rec.state
        else {
            unreachable!()
        };
        *spin = false;
        let spun = now.saturating_sub(*since);
        *since = shared.enclave.virtual_now();
        rec.entry_due = true;
        (spun, label)
    };
    st.profile.spin_time += spun;
    st.profile.classes.entry(label).or_default().count += 1;
    st.profile.downgrades += 1;
    st.held_slots.insert(tid);
    true
}

fn expire_timers(shared: &Shared, st: &mut SchedState, now: u64) {
    while let Some(&Reverse((deadline, tid))) = st.timers.peek() {
        if deadline > now {
            break;
        }
        st.timers.pop();
        wake_tid(shared, st, tid, now);
    }
}

fn finish_thread(shared: &Arc<Shared>, tid: Tid, panic_msg: Option<String>) {
    let exit_wq = {
        let mut st = shared.state.lock().unwrap();
        st.held_slots.remove(&tid);
        st.live -= 1;
        let rec = st.threads.get_mut(&tid).unwrap();
        rec.state = ThreadState::Exited;
        rec.panic_msg = panic_msg;
        WaitQueue {
            id: rec.exit_wq,
            shared: shared.clone(),
        }
    };
    exit_wq.wake_all();
    shared.dispatcher.go();
}

fn panic_text(p: &(dyn Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic payload".to_string()
    }
}

#[cfg(test)]
mod tests;
