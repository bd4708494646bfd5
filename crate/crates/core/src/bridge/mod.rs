// SPDX-License-Identifier: Apache-2.0

//! Asynchronous system-call bridge.
//!
//! Threads never leave the enclave to make a system call. A call is placed
//! in a bounded request window and executed by outside worker threads; the
//! calling thread parks and other threads keep running. Each call carries a
//! virtual ready time (submit time plus a per-class service cost), and the
//! dispatcher delivers completions in (ready, id) order, waiting for the
//! host if a result is due but not yet materialized. That makes the
//! schedule independent of host timing for every file-class call. Socket
//! calls are the exception: they are marked external, complete whenever the
//! peer acts, and are only used by the attestation paths where wall-clock
//! nondeterminism is acceptable.
//!
//! Nothing the host returns is trusted. Every result is vetted against its
//! request (payload no larger than asked, result shape matching the call
//! class, error codes in the valid range, completion ids actually
//! outstanding) and a result that fails vetting reaches the caller as a
//! boundary violation, never as data.

mod backend;

pub use backend::{HostBackend, OsBackend};

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use crate::enclave::Enclave;
use crate::sched::{self, ClassStat, Completion, EventSource, Scheduler, Tid, WaitQueue};

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_WORKERS: usize = 2;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("host call made outside a runtime thread")]
    OutsideRuntime,
    #[error("bridge is shut down")]
    Closed,
    #[error("host boundary violation: {0}")]
    BoundaryViolation(String),
    #[error("host error on {op}: errno {errno}")]
    Host { op: &'static str, errno: i32 },
}

/// A system call as submitted by enclave code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostCall {
    Open { path: String, create: bool, write: bool },
    Read { fd: u64, offset: u64, len: u32 },
    Write { fd: u64, offset: u64, data: Vec<u8> },
    Flush { fd: u64 },
    FileLen { fd: u64 },
    Close { fd: u64 },
    Rename { from: String, to: String },
    Remove { path: String },
    TcpListen { addr: String },
    TcpConnect { addr: String },
    TcpAccept { sock: u64 },
    TcpSend { sock: u64, data: Vec<u8> },
    TcpRecv { sock: u64, max: u32 },
    TcpShutdown { sock: u64 },
}

/// What the host handed back, before any trust decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostResult {
    Fd(u64),
    Sock(u64),
    SockAddr(u64, String),
    Bytes(Vec<u8>),
    Written(u32),
    Len(u64),
    Unit,
    Err(i32),
}

/// Per-class name, virtual service cost, and whether completion depends on
/// an outside party (sockets) rather than on the host alone.
fn class_of(call: &HostCall) -> (&'static str, u64, bool) {
    match call {
        HostCall::Open { .. } => ("openat", 2_500, false),
        HostCall::Read { len, .. } => ("pread64", 1_000 + *len as u64 / 16, false),
        HostCall::Write { data, .. } => ("pwrite64", 1_200 + data.len() as u64 / 16, false),
        HostCall::Flush { .. } => ("fsync", 5_000, false),
        HostCall::FileLen { .. } => ("fstat", 500, false),
        HostCall::Close { .. } => ("close", 700, false),
        HostCall::Rename { .. } => ("rename", 3_000, false),
        HostCall::Remove { .. } => ("unlink", 2_500, false),
        HostCall::TcpListen { .. } => ("listen", 5_000, true),
        HostCall::TcpConnect { .. } => ("connect", 30_000, true),
        HostCall::TcpAccept { .. } => ("accept4", 20_000, true),
        HostCall::TcpSend { data, .. } => ("sendto", 1_500 + data.len() as u64 / 16, true),
        HostCall::TcpRecv { max, .. } => ("recvfrom", 1_500 + *max as u64 / 16, true),
        HostCall::TcpShutdown { .. } => ("shutdown", 1_000, true),
    }
}

/// Boundary check on a host result: shape must match the call class,
/// payloads must not exceed what was asked for, and error codes must be
/// plausible errnos.
fn vet(call: &HostCall, result: &HostResult) -> Result<(), String> {
    if let HostResult::Err(errno) = result {
        return if (1..=4095).contains(errno) {
            Ok(())
        } else {
            Err(format!("error code {errno} outside valid errno range"))
        };
    }
    let ok = match (call, result) {
        (HostCall::Open { .. }, HostResult::Fd(_)) => true,
        (HostCall::Read { len, .. }, HostResult::Bytes(b)) => b.len() <= *len as usize,
        (HostCall::Write { data, .. }, HostResult::Written(n)) => *n as usize <= data.len(),
        (HostCall::Flush { .. }, HostResult::Unit) => true,
        (HostCall::FileLen { .. }, HostResult::Len(_)) => true,
        (HostCall::Close { .. }, HostResult::Unit) => true,
        (HostCall::Rename { .. }, HostResult::Unit) => true,
        (HostCall::Remove { .. }, HostResult::Unit) => true,
        (HostCall::TcpListen { .. }, HostResult::SockAddr(_, a)) => a.len() <= 64,
        (HostCall::TcpConnect { .. }, HostResult::Sock(_)) => true,
        (HostCall::TcpAccept { .. }, HostResult::Sock(_)) => true,
        (HostCall::TcpSend { data, .. }, HostResult::Written(n)) => *n as usize <= data.len(),
        (HostCall::TcpRecv { max, .. }, HostResult::Bytes(b)) => b.len() <= *max as usize,
        (HostCall::TcpShutdown { .. }, HostResult::Unit) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err("result shape does not match the call class".to_string())
    }
}

/// Submission counts and service time per call class, plus violations.
#[derive(Debug, Clone, Default)]
pub struct BridgeProfile {
    pub calls: BTreeMap<&'static str, ClassStat>,
    pub violations: u64,
    pub max_outstanding: usize,
}

struct PoolJob {
    id: u64,
    ready: u64,
    tid: Tid,
    call: HostCall,
}

struct DoneRec {
    id: u64,
    ready: u64,
    tid: Tid,
    call: HostCall,
    result: HostResult,
}

struct BridgeState {
    queue: VecDeque<PoolJob>,
    results: BTreeMap<(u64, u64), DoneRec>,
    external_done: Vec<DoneRec>,
    bounded_ready: BTreeSet<(u64, u64)>,
    outstanding_bounded: usize,
    external_pending: usize,
    delivered: HashMap<u64, Result<HostResult, BridgeError>>,
    next_id: u64,
    shutdown: bool,
    profile: BridgeProfile,
}

struct BridgeShared {
    enclave: Arc<Enclave>,
    backend: Arc<dyn HostBackend>,
    state: Mutex<BridgeState>,
    work_cv: Condvar,
    done_cv: Condvar,
    full_wq: Mutex<Option<WaitQueue>>,
    window: usize,
}

impl BridgeShared {
    fn post_bounded(&self, rec: DoneRec) {
        let mut st = self.state.lock().unwrap();
        if !st.bounded_ready.contains(&(rec.ready, rec.id)) {
            st.profile.violations += 1;
            return;
        }
        st.results.insert((rec.ready, rec.id), rec);
        self.done_cv.notify_all();
    }

    fn post_external(&self, rec: DoneRec) {
        let mut st = self.state.lock().unwrap();
        st.external_done.push(rec);
        self.done_cv.notify_all();
    }

    fn finish(&self, st: &mut BridgeState, rec: DoneRec, out: &mut Vec<Completion>) {
        let vetted = match vet(&rec.call, &rec.result) {
            Ok(()) => match rec.result {
                HostResult::Err(errno) => Err(BridgeError::Host {
                    op: class_of(&rec.call).0,
                    errno,
                }),
                other => Ok(other),
            },
            Err(why) => {
                st.profile.violations += 1;
                Err(BridgeError::BoundaryViolation(why))
            }
        };
        st.delivered.insert(rec.id, vetted);
        out.push(Completion { tid: rec.tid });
    }
}

/// The bridge itself; register it as an event source on the scheduler that
/// runs the submitting threads.
pub struct Bridge {
    shared: Arc<BridgeShared>,
    workers: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

impl Bridge {
    pub fn new(
        sched: &Scheduler,
        backend: Arc<dyn HostBackend>,
        workers: usize,
        window: usize,
    ) -> Arc<Bridge> {
        assert!(window >= 1, "request window must hold at least one call");
        assert!(workers >= 1, "need at least one worker");
        let shared = Arc::new(BridgeShared {
            enclave: sched.enclave().clone(),
            backend,
            state: Mutex::new(BridgeState {
                queue: VecDeque::new(),
                results: BTreeMap::new(),
                external_done: Vec::new(),
                bounded_ready: BTreeSet::new(),
                outstanding_bounded: 0,
                external_pending: 0,
                delivered: HashMap::new(),
                next_id: 0,
                shutdown: false,
                profile: BridgeProfile::default(),
            }),
            work_cv: Condvar::new(),
            done_cv: Condvar::new(),
            full_wq: Mutex::new(Some(sched.wait_queue())),
            window,
        });
        let mut handles = Vec::new();
        for w in 0..workers {
            let shared = shared.clone();
            handles.push(
                std::thread::Builder::new()
                    .name(format!("bridge-worker-{w}"))
                    .spawn(move || worker_loop(shared))
                    .expect("spawn bridge worker"),
            );
        }
        let bridge = Arc::new(Bridge {
            shared,
            workers: Mutex::new(handles),
        });
        sched.add_source(bridge.clone());
        bridge
    }

    pub fn profile(&self) -> BridgeProfile {
        self.shared.state.lock().unwrap().profile.clone()
    }

    /// Stop the workers and break the scheduler link. Outstanding external
    /// calls are abandoned to their threads.
    pub fn shutdown(&self) {
        {
            let mut st = self.shared.state.lock().unwrap();
            st.shutdown = true;
        }
        self.shared.work_cv.notify_all();
        for h in self.workers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
        *self.shared.full_wq.lock().unwrap() = None;
    }

    /// Submit a call and park until its completion is delivered.
    ///
    /// Blocks cooperatively while the request window is full; window slots
    /// free at delivery, so occupancy is part of the deterministic
    /// schedule rather than of host timing.
    pub fn call(&self, call: HostCall) -> Result<HostResult, BridgeError> {
        let tid = sched::current_tid().ok_or(BridgeError::OutsideRuntime)?;
        let (label, service, external) = class_of(&call);
        let id = loop {
            let mut st = self.shared.state.lock().unwrap();
            if st.shutdown {
                return Err(BridgeError::Closed);
            }
            if external || st.outstanding_bounded < self.shared.window {
                let id = st.next_id;
                st.next_id += 1;
                let now = self.shared.enclave.virtual_now();
                let ready = now + service;
                let row = st.profile.calls.entry(label).or_default();
                row.count += 1;
                row.time += service;
                if external {
                    st.external_pending += 1;
                    drop(st);
                    let shared = self.shared.clone();
                    let call2 = call.clone();
                    std::thread::Builder::new()
                        .name(format!("bridge-ext-{id}"))
                        .spawn(move || {
                            let result = shared.backend.execute(&call2);
                            shared.post_external(DoneRec {
                                id,
                                ready,
                                tid,
                                call: call2,
                                result,
                            });
                        })
                        .expect("spawn external call thread");
                } else {
                    st.outstanding_bounded += 1;
                    st.profile.max_outstanding =
                        st.profile.max_outstanding.max(st.outstanding_bounded);
                    st.bounded_ready.insert((ready, id));
                    st.queue.push_back(PoolJob {
                        id,
                        ready,
                        tid,
                        call,
                    });
                    drop(st);
                    self.shared.work_cv.notify_one();
                }
                break id;
            }
            drop(st);
            let wq = self
                .shared
                .full_wq
                .lock()
                .unwrap()
                .clone()
                .ok_or(BridgeError::Closed)?;
            wq.wait();
        };
        sched::block_for_event("futex", Some(service));
        self.shared
            .state
            .lock()
            .unwrap()
            .delivered
            .remove(&id)
            .expect("completion delivered exactly once before resume")
    }

    pub fn open(&self, path: &str, create: bool, write: bool) -> Result<u64, BridgeError> {
        match self.call(HostCall::Open {
            path: path.to_string(),
            create,
            write,
        })? {
            HostResult::Fd(fd) => Ok(fd),
            other => Err(unexpected("openat", &other)),
        }
    }

    pub fn read(&self, fd: u64, offset: u64, len: u32) -> Result<Vec<u8>, BridgeError> {
        match self.call(HostCall::Read { fd, offset, len })? {
            HostResult::Bytes(b) => Ok(b),
            other => Err(unexpected("pread64", &other)),
        }
    }

    pub fn write(&self, fd: u64, offset: u64, data: Vec<u8>) -> Result<u32, BridgeError> {
        match self.call(HostCall::Write { fd, offset, data })? {
            HostResult::Written(n) => Ok(n),
            other => Err(unexpected("pwrite64", &other)),
        }
    }

    pub fn flush(&self, fd: u64) -> Result<(), BridgeError> {
        match self.call(HostCall::Flush { fd })? {
            HostResult::Unit => Ok(()),
            other => Err(unexpected("fsync", &other)),
        }
    }

    pub fn file_len(&self, fd: u64) -> Result<u64, BridgeError> {
        match self.call(HostCall::FileLen { fd })? {
            HostResult::Len(n) => Ok(n),
            other => Err(unexpected("fstat", &other)),
        }
    }

    pub fn close(&self, fd: u64) -> Result<(), BridgeError> {
        match self.call(HostCall::Close { fd })? {
            HostResult::Unit => Ok(()),
            other => Err(unexpected("close", &other)),
        }
    }

    pub fn rename(&self, from: &str, to: &str) -> Result<(), BridgeError> {
        match self.call(HostCall::Rename {
            from: from.to_string(),
            to: to.to_string(),
        })? {
            HostResult::Unit => Ok(()),
            other => Err(unexpected("rename", &other)),
        }
    }

    pub fn remove(&self, path: &str) -> Result<(), BridgeError> {
        match self.call(HostCall::Remove {
            path: path.to_string(),
        })? {
            HostResult::Unit => Ok(()),
            other => Err(unexpected("unlink", &other)),
        }
    }

    pub fn tcp_listen(&self, addr: &str) -> Result<(u64, String), BridgeError> {
        match self.call(HostCall::TcpListen {
            addr: addr.to_string(),
        })? {
            HostResult::SockAddr(sock, local) => Ok((sock, local)),
            other => Err(unexpected("listen", &other)),
        }
    }

    pub fn tcp_connect(&self, addr: &str) -> Result<u64, BridgeError> {
        match self.call(HostCall::TcpConnect {
            addr: addr.to_string(),
        })? {
            HostResult::Sock(s) => Ok(s),
            other => Err(unexpected("connect", &other)),
        }
    }

    pub fn tcp_accept(&self, sock: u64) -> Result<u64, BridgeError> {
        match self.call(HostCall::TcpAccept { sock })? {
            HostResult::Sock(s) => Ok(s),
            other => Err(unexpected("accept4", &other)),
        }
    }

    pub fn tcp_send(&self, sock: u64, data: Vec<u8>) -> Result<u32, BridgeError> {
        match self.call(HostCall::TcpSend { sock, data })? {
            HostResult::Written(n) => Ok(n),
            other => Err(unexpected("sendto", &other)),
        }
    }

    pub fn tcp_recv(&self, sock: u64, max: u32) -> Result<Vec<u8>, BridgeError> {
        match self.call(HostCall::TcpRecv { sock, max })? {
            HostResult::Bytes(b) => Ok(b),
            other => Err(unexpected("recvfrom", &other)),
        }
    }

    pub fn tcp_shutdown(&self, sock: u64) -> Result<(), BridgeError> {
        match self.call(HostCall::TcpShutdown { sock })? {
            HostResult::Unit => Ok(()),
            other => Err(unexpected("shutdown", &other)),
        }
    }

    #[cfg(test)]
    pub(crate) fn test_post_bounded(&self, ready: u64, id: u64, call: HostCall, result: HostResult) {
        self.shared.post_bounded(DoneRec {
            id,
            ready,
            tid: 0,
            call,
            result,
        });
    }
}

fn unexpected(op: &'static str, result: &HostResult) -> BridgeError {
    BridgeError::BoundaryViolation(format!("unexpected {result:?} for {op}"))
}

impl EventSource for Bridge {
    fn next_ready(&self) -> Option<u64> {
        let st = self.shared.state.lock().unwrap();
        st.bounded_ready.first().map(|&(r, _)| r)
    }

    fn collect_due(&self, now: u64) -> Vec<Completion> {
        let mut out = Vec::new();
        let mut st = self.shared.state.lock().unwrap();
        loop {
            let due = match st.bounded_ready.first() {
                Some(&(ready, id)) if ready <= now => (ready, id),
                _ => break,
            };
            if let Some(rec) = st.results.remove(&due) {
                st.bounded_ready.remove(&due);
                st.outstanding_bounded -= 1;
                self.shared.finish(&mut st, rec, &mut out);
            } else {
                st = self.shared.done_cv.wait(st).unwrap();
            }
        }
        let externals: Vec<DoneRec> = st.external_done.drain(..).collect();
        for rec in externals {
            st.external_pending -= 1;
            self.shared.finish(&mut st, rec, &mut out);
        }
        drop(st);
        if !out.is_empty() {
            if let Some(wq) = self.shared.full_wq.lock().unwrap().clone() {
                wq.wake_all();
            }
        }
        out
    }

    fn pending_external(&self) -> bool {
        self.shared.state.lock().unwrap().external_pending > 0
    }

    fn wait_external(&self) -> Vec<Completion> {
        let mut out = Vec::new();
        let mut st = self.shared.state.lock().unwrap();
        while st.external_done.is_empty() {
            if st.external_pending == 0 || st.shutdown {
                return out;
            }
            st = self.shared.done_cv.wait(st).unwrap();
        }
        let externals: Vec<DoneRec> = st.external_done.drain(..).collect();
        for rec in externals {
            st.external_pending -= 1;
            self.shared.finish(&mut st, rec, &mut out);
        }
        out
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: Arc<BridgeShared>) {
    loop {
        let job = {
            let mut st = shared.state.lock().unwrap();
            loop {
                if st.shutdown {
                    return;
                }
                if let Some(j) = st.queue.pop_front() {
                    break j;
                }
                st = shared.work_cv.wait(st).unwrap();
            }
        };
        let result = shared.backend.execute(&job.call);
        shared.post_bounded(DoneRec {
            id: job.id,
            ready: job.ready,
            tid: job.tid,
            call: job.call,
            result,
        });
    }
}
