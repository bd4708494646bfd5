// SPDX-License-Identifier: Apache-2.0

//! Benchmark harness: canned workloads over the full runtime stack and
//! the reports they emit.
//!
//! Every number a report carries is virtual time from the enclave's cost
//! ledger or a counter derived from it; wall-clock time never appears, so
//! identical seeds and configuration produce byte-identical CSV on any
//! machine. A report covers one workload on one enclave: a measured
//! window (items, virtual-time units, cost breakdown, paging and
//! transition deltas) plus whole-run system-call and wait profiles.
//!
//! Workloads live in [`workloads`]: image classification and training
//! over the record pipeline, and a raw page-touch sweep that exposes the
//! protected-cache cost cliff.

mod workloads;


use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::bridge::BridgeProfile;
use crate::enclave::{CostTotals, EnclaveError, Mode, PagingStats};
use crate::fs_shield::FsError;
use crate::sched::SchedProfile;
use crate::tensor::TensorError;

pub use workloads::{
    default_model, run_classify, run_epc_sweep, run_train, ClassifyOpts, SweepOpts, SweepPoint,
    SweepReport, TrainOpts,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("benchmark self-check failed: {0}")]
    SelfCheck(String),
    #[error("a workload thread panicked")]
    Panicked,
}

/// One row of the merged system-call table: scheduler wait classes and
/// bridged host calls side by side, strace-style.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallRow {
    pub class: String,
    pub count: u64,
    pub time: u64,
}

/// One training step in the latency series.
#[derive(Debug, Clone, Copy)]
pub struct StepRow {
    pub step: u64,
    pub units: u64,
    pub loss: f32,
}

/// Everything one benchmark run reports.
///
/// The window fields (`items` through `exits`) are deltas over the
/// measured phase; the profile table spans the whole run, matching what
/// the scheduler and bridge accumulate.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub workload: &'static str,
    pub mode: Mode,
    pub fs_shield: bool,
    pub threads: usize,
    pub items: u64,
    pub virtual_units: u64,
    pub costs: CostTotals,
    pub paging: PagingStats,
    pub entries: u64,
    pub exits: u64,
    pub syscalls: Vec<SyscallRow>,
    /// Submissions the bridge saw under the futex class; waits are
    /// handled entirely inside the enclave, so this stays zero.
    pub futex_bridge_calls: u64,
    pub extras: Vec<(String, String)>,
    pub series: Vec<StepRow>,
}

impl BenchReport {
    /// Items completed per thousand virtual-time units.
    pub fn throughput_per_kunit(&self) -> f64 {
        self.items as f64 * 1000.0 / self.virtual_units.max(1) as f64
    }

    /// Share of profile time in the futex class, in percent.
    pub fn futex_percent(&self) -> f64 {
        let total: u64 = self.syscalls.iter().map(|r| r.time).sum();
        if total == 0 {
            return 0.0;
        }
        let futex: u64 = self
            .syscalls
            .iter()
            .filter(|r| r.class == "futex")
            .map(|r| r.time)
            .sum();
        futex as f64 / total as f64 * 100.0
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Consistency conditions every report must satisfy; the command-line
    /// harness refuses to exit cleanly when one fails.
    pub fn self_check(&self) -> Result<(), String> {
        if self.items == 0 || self.virtual_units == 0 {
            return Err("report window is empty".into());
        }
        if self.mode == Mode::Native {
            if self.costs.paging != 0 {
                return Err(format!(
                    "native run charged {} paging units",
                    self.costs.paging
                ));
            }
            if self.costs.transition != 0 {
                return Err(format!(
                    "native run charged {} transition units",
                    self.costs.transition
                ));
            }
            if self.costs.shield != 0 {
                return Err(format!(
                    "native run charged {} shield units",
                    self.costs.shield
                ));
            }
        }
        if self.futex_bridge_calls != 0 {
            return Err(format!(
                "{} futex submissions crossed the bridge",
                self.futex_bridge_calls
            ));
        }
        if self.syscalls.is_empty() {
            return Err("profile table is empty".into());
        }
        Ok(())
    }

    /// Render the report as CSV sections: run metrics, the profile
    /// table, and (for training) the per-step series.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("metric,value\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k},{v}");
        };
        kv("workload", self.workload.to_string());
        kv("mode", self.mode.to_string());
        kv("fs_shield", on_off(self.fs_shield).to_string());
        kv("threads", self.threads.to_string());
        kv("items", self.items.to_string());
        kv("virtual_units", self.virtual_units.to_string());
        kv(
            "throughput_items_per_kunit",
            format!("{:.6}", self.throughput_per_kunit()),
        );
        kv("compute_units", self.costs.compute.to_string());
        kv("paging_units", self.costs.paging.to_string());
        kv("transition_units", self.costs.transition.to_string());
        kv("shield_units", self.costs.shield.to_string());
        kv("syscall_units", self.costs.syscall.to_string());
        kv("idle_units", self.costs.idle.to_string());
        kv("page_hits", self.paging.hits.to_string());
        kv("page_misses", self.paging.misses.to_string());
        kv("page_evictions", self.paging.evictions.to_string());
        kv("enclave_entries", self.entries.to_string());
        kv("enclave_exits", self.exits.to_string());
        kv("futex_bridge_calls", self.futex_bridge_calls.to_string());
        for (k, v) in &self.extras {
            kv(k, v.clone());
        }

        out.push_str("\nclass,count,time,percent\n");
        let total: u64 = self.syscalls.iter().map(|r| r.time).sum();
        for row in &self.syscalls {
            let percent = if total == 0 {
                0.0
            } else {
                row.time as f64 / total as f64 * 100.0
            };
            let _ = writeln!(
                out,
                "{},{},{},{percent:.2}",
                row.class, row.count, row.time
            );
        }

        if !self.series.is_empty() {
            out.push_str("\nstep,units,loss\n");
            for row in &self.series {
                let _ = writeln!(out, "{},{},{:.6}", row.step, row.units, row.loss);
            }
        }
        out
    }
}

pub fn on_off(flag: bool) -> &'static str {
    if flag {
        "on"
    } else {
        "off"
    }
}

/// Fold the scheduler's wait classes and the bridge's call classes into
/// one table, sorted by time spent, and count any futex submissions that
/// reached the bridge.
pub fn merge_profiles(sched: &SchedProfile, bridge: &BridgeProfile) -> (Vec<SyscallRow>, u64) {
    let mut rows: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (class, stat) in &sched.classes {
        let row = rows.entry(class.to_string()).or_default();
        row.0 += stat.count;
        row.1 += stat.time;
    }
    let mut futex_bridge = 0;
    for (class, stat) in &bridge.calls {
        if *class == "futex" {
            futex_bridge += stat.count;
        }
        let row = rows.entry(class.to_string()).or_default();
        row.0 += stat.count;
        row.1 += stat.time;
    }
    let mut table: Vec<SyscallRow> = rows
        .into_iter()
        .map(|(class, (count, time))| SyscallRow { class, count, time })
        .collect();
    table.sort_by(|a, b| b.time.cmp(&a.time).then_with(|| a.class.cmp(&b.class)));
    (table, futex_bridge)
}

/// Fieldwise difference of two cost snapshots taken on the same ledger.
pub fn cost_delta(end: CostTotals, start: CostTotals) -> CostTotals {
    CostTotals {
        compute: end.compute - start.compute,
        paging: end.paging - start.paging,
        transition: end.transition - start.transition,
        shield: end.shield - start.shield,
        syscall: end.syscall - start.syscall,
        idle: end.idle - start.idle,
    }
}
