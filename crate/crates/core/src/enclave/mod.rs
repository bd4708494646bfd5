// SPDX-License-Identifier: Apache-2.0

//! Simulated shielded-execution container.
//!
//! An [`Enclave`] owns the protected heap, the page-cache model that makes
//! oversubscribed memory expensive, the transition counters, and the virtual
//! clock every other component charges time against. Nothing in here touches
//! wall-clock time; runs are reproducible by construction.

mod config;
mod measure;
mod paging;

pub use config::{
    parse_size, read_env_config, CostParams, EnclaveConfig, Mode, DEFAULT_EPC, DEFAULT_HEAP,
    DEFAULT_STACK, DEFAULT_TCS,
};
pub use measure::{measure, Measurement};
pub use paging::{PagingModel, PagingStats, PAGE_SIZE};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("invalid enclave configuration: {0}")]
    ConfigInvalid(String),
    #[error("enclave is finalized; code and configuration are immutable")]
    AlreadyFinalized,
    #[error("access [{addr:#x}, +{len}) outside protected heap of {limit} bytes")]
    OutOfBounds { addr: u64, len: u64, limit: u64 },
    #[error("enclave heap exhausted: requested {requested} bytes, {available} available")]
    OutOfMemory { requested: u64, available: u64 },
    #[error("cannot parse size value: {0:?}")]
    ParseError(String),
    #[error("unknown execution mode: {0:?} (expected native, simulation, or hardware-sim)")]
    ModeUnknown(String),
}

/// A category of virtual-time expenditure.
///
/// `Idle` covers clock advances made while every thread is blocked waiting
/// for a timer or a host-side completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Compute,
    Paging,
    Transition,
    Shield,
    Syscall,
    Idle,
}

/// Per-category virtual-time totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostTotals {
    pub compute: u64,
    pub paging: u64,
    pub transition: u64,
    pub shield: u64,
    pub syscall: u64,
    pub idle: u64,
}

impl CostTotals {
    pub fn total(&self) -> u64 {
        self.compute + self.paging + self.transition + self.shield + self.syscall + self.idle
    }

    /// Time the machine was actually doing something.
    pub fn busy(&self) -> u64 {
        self.total() - self.idle
    }
}

/// The enclave's virtual clock plus a breakdown of where time went.
#[derive(Debug, Default)]
pub struct CostLedger {
    now: u64,
    totals: CostTotals,
}

impl CostLedger {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn totals(&self) -> CostTotals {
        self.totals
    }

    /// Spend `units` of virtual time on `kind`, advancing the clock.
    pub fn charge(&mut self, kind: CostKind, units: u64) -> u64 {
        let slot = match kind {
            CostKind::Compute => &mut self.totals.compute,
            CostKind::Paging => &mut self.totals.paging,
            CostKind::Transition => &mut self.totals.transition,
            CostKind::Shield => &mut self.totals.shield,
            CostKind::Syscall => &mut self.totals.syscall,
            CostKind::Idle => &mut self.totals.idle,
        };
        *slot += units;
        self.now += units;
        self.now
    }

    /// Advance the clock to at least `t`, attributing the gap to `kind`.
    pub fn advance_to(&mut self, t: u64, kind: CostKind) -> u64 {
        if t > self.now {
            let gap = t - self.now;
            self.charge(kind, gap)
        } else {
            self.now
        }
    }
}

/// Counts of synchronous enclave boundary crossings.
#[derive(Debug, Default)]
pub struct TransitionCounter {
    exits: AtomicU64,
    entries: AtomicU64,
}

impl TransitionCounter {
    pub fn exits(&self) -> u64 {
        self.exits.load(Ordering::Relaxed)
    }

    pub fn entries(&self) -> u64 {
        self.entries.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
struct Inner {
    paging: PagingModel,
    ledger: CostLedger,
    brk_low: u64,
    brk_high: u64,
}

/// A finalized simulated enclave.
///
/// Created from a code image and a configuration, after which both are
/// immutable and captured in the [`Measurement`]. All methods take `&self`;
/// the mutable cost and paging state lives behind one lock so snapshots are
/// internally consistent.
#[derive(Debug)]
pub struct Enclave {
    config: EnclaveConfig,
    measurement: Measurement,
    inner: Mutex<Inner>,
    transitions: TransitionCounter,
}

impl Enclave {
    /// Build and finalize an enclave around a code image.
    ///
    /// The page cache is bounded by `epc_limit` only in hardware-sim mode;
    /// the other modes treat the whole heap as resident after first touch.
    pub fn create(code: &[u8], config: EnclaveConfig) -> Result<Enclave, EnclaveError> {
        config.validate()?;
        if code.is_empty() {
            return Err(EnclaveError::ConfigInvalid("empty code image".into()));
        }
        let measurement = measure(code, &config);
        let cache_limit = if config.mode.costs_active() {
            config.epc_limit
        } else {
            config.heap_limit.saturating_add(PAGE_SIZE)
        };
        let brk_high = config.heap_limit;
        Ok(Enclave {
            measurement,
            inner: Mutex::new(Inner {
                paging: PagingModel::new(cache_limit),
                ledger: CostLedger::default(),
                brk_low: 0,
                brk_high,
            }),
            transitions: TransitionCounter::default(),
            config,
        })
    }

    /// Loading code after creation is always an error; the image is sealed
    /// into the measurement.
    pub fn load_code(&self, _code: &[u8]) -> Result<(), EnclaveError> {
        Err(EnclaveError::AlreadyFinalized)
    }

    pub fn config(&self) -> &EnclaveConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn transitions(&self) -> &TransitionCounter {
        &self.transitions
    }

    /// Touch `[addr, addr+len)` in the protected heap, charging page costs.
    ///
    /// Returns the virtual time spent. Residency is tracked in every mode
    /// (the miss count doubles as a cold working-set probe); time is only
    /// charged when the mode prices paging.
    pub fn mem_access(&self, addr: u64, len: u64) -> Result<u64, EnclaveError> {
        if len == 0 {
            return Ok(0);
        }
        let end = addr
            .checked_add(len)
            .ok_or(EnclaveError::OutOfBounds {
                addr,
                len,
                limit: self.config.heap_limit,
            })?;
        if end > self.config.heap_limit {
            return Err(EnclaveError::OutOfBounds {
                addr,
                len,
                limit: self.config.heap_limit,
            });
        }
        let first = addr / PAGE_SIZE;
        let last = (end - 1) / PAGE_SIZE;
        let mut inner = self.inner.lock().unwrap();
        let mut cost = 0u64;
        for page in first..=last {
            let hit = inner.paging.touch(page);
            cost += if hit {
                self.config.costs.cost_hit
            } else {
                self.config.costs.cost_miss
            };
        }
        if self.config.mode.costs_active() {
            inner.ledger.charge(CostKind::Paging, cost);
            Ok(cost)
        } else {
            Ok(0)
        }
    }

    /// Charge pure arithmetic work, converting flops to time units.
    ///
    /// Compute is priced in every mode so throughput is well defined even
    /// without shields or paging.
    pub fn charge_compute_flops(&self, flops: u64) -> u64 {
        let units = flops.div_ceil(self.config.costs.flops_per_unit.max(1));
        self.inner
            .lock()
            .unwrap()
            .ledger
            .charge(CostKind::Compute, units);
        units
    }

    /// Charge shield cryptography over `bytes` of data.
    pub fn charge_shield_bytes(&self, bytes: u64) -> u64 {
        if !self.config.mode.costs_active() {
            return 0;
        }
        let units = bytes.div_ceil(self.config.costs.shield_bytes_per_unit.max(1));
        self.inner
            .lock()
            .unwrap()
            .ledger
            .charge(CostKind::Shield, units);
        units
    }

    /// Record a synchronous exit out of the enclave.
    pub fn exit_enclave(&self) -> u64 {
        self.transitions.exits.fetch_add(1, Ordering::Relaxed);
        self.charge_transition()
    }

    /// Record a synchronous entry back into the enclave.
    pub fn enter_enclave(&self) -> u64 {
        self.transitions.entries.fetch_add(1, Ordering::Relaxed);
        self.charge_transition()
    }

    fn charge_transition(&self) -> u64 {
        if !self.config.mode.costs_active() {
            return 0;
        }
        let units = self.config.costs.cost_per_transition;
        self.inner
            .lock()
            .unwrap()
            .ledger
            .charge(CostKind::Transition, units);
        units
    }

    /// Current virtual time.
    pub fn virtual_now(&self) -> u64 {
        self.inner.lock().unwrap().ledger.now()
    }

    /// Advance the virtual clock to at least `t` (used when waiting on the
    /// host side of the syscall bridge).
    pub fn advance_clock_to(&self, t: u64, kind: CostKind) -> u64 {
        self.inner.lock().unwrap().ledger.advance_to(t, kind)
    }

    pub fn cost_totals(&self) -> CostTotals {
        self.inner.lock().unwrap().ledger.totals()
    }

    pub fn paging_stats(&self) -> PagingStats {
        self.inner.lock().unwrap().paging.stats()
    }

    pub fn reset_paging_stats(&self) {
        self.inner.lock().unwrap().paging.reset_stats()
    }

    /// Allocate stable low-address heap (tensor data, long-lived buffers).
    pub fn alloc_low(&self, len: u64, align: u64) -> Result<u64, EnclaveError> {
        let align = align.max(1);
        let mut inner = self.inner.lock().unwrap();
        let base = inner.brk_low.next_multiple_of(align);
        let end = base.checked_add(len).ok_or(EnclaveError::OutOfMemory {
            requested: len,
            available: inner.brk_high.saturating_sub(inner.brk_low),
        })?;
        if end > inner.brk_high {
            return Err(EnclaveError::OutOfMemory {
                requested: len,
                available: inner.brk_high - inner.brk_low,
            });
        }
        inner.brk_low = end;
        Ok(base)
    }

    /// Allocate scratch space growing down from the top of the heap.
    pub fn alloc_high(&self, len: u64, align: u64) -> Result<u64, EnclaveError> {
        let align = align.max(1);
        let mut inner = self.inner.lock().unwrap();
        let top = inner.brk_high.checked_sub(len).ok_or(EnclaveError::OutOfMemory {
            requested: len,
            available: inner.brk_high.saturating_sub(inner.brk_low),
        })?;
        let base = top / align * align;
        if base < inner.brk_low {
            return Err(EnclaveError::OutOfMemory {
                requested: len,
                available: inner.brk_high - inner.brk_low,
            });
        }
        inner.brk_high = base;
        Ok(base)
    }

    /// Bytes of heap not yet claimed by either allocator.
    pub fn heap_available(&self) -> u64 {
        let inner = self.inner.lock().unwrap();
        inner.brk_high - inner.brk_low
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw_config() -> EnclaveConfig {
        EnclaveConfig {
            heap_limit: 64 * PAGE_SIZE,
            epc_limit: 4 * PAGE_SIZE,
            mode: Mode::HardwareSim,
            ..EnclaveConfig::default()
        }
    }

    #[test]
    fn create_rejects_empty_code() {
        let err = Enclave::create(b"", EnclaveConfig::default()).unwrap_err();
        assert!(matches!(err, EnclaveError::ConfigInvalid(_)));
    }

    #[test]
    fn load_code_after_create_is_rejected() {
        let e = Enclave::create(b"image", EnclaveConfig::default()).unwrap();
        assert!(matches!(
            e.load_code(b"other"),
            Err(EnclaveError::AlreadyFinalized)
        ));
    }

    #[test]
    fn access_past_heap_end_is_out_of_bounds() {
        let e = Enclave::create(b"image", hw_config()).unwrap();
        let limit = e.config().heap_limit;
        let err = e.mem_access(limit - 8, 16).unwrap_err();
        assert!(matches!(err, EnclaveError::OutOfBounds { .. }));
        assert!(e.mem_access(u64::MAX - 4, 8).is_err());
        assert!(e.mem_access(limit - 8, 8).is_ok());
    }

    #[test]
    fn miss_then_hit_costs_follow_constants() {
        let e = Enclave::create(b"image", hw_config()).unwrap();
        let c = e.config().costs;
        assert_eq!(e.mem_access(0, 1).unwrap(), c.cost_miss);
        assert_eq!(e.mem_access(0, 1).unwrap(), c.cost_hit);
        // Two pages, one already resident.
        assert_eq!(
            e.mem_access(PAGE_SIZE - 1, 2).unwrap(),
            c.cost_hit + c.cost_miss
        );
        assert_eq!(e.cost_totals().paging, 2 * c.cost_miss + 2 * c.cost_hit);
    }

    #[test]
    fn non_hardware_modes_charge_nothing_but_track_residency() {
        for mode in [Mode::Native, Mode::Simulation] {
            let cfg = EnclaveConfig {
                mode,
                heap_limit: 64 * PAGE_SIZE,
                epc_limit: 4 * PAGE_SIZE,
                ..EnclaveConfig::default()
            };
            let e = Enclave::create(b"image", cfg).unwrap();
            for p in 0..8 {
                assert_eq!(e.mem_access(p * PAGE_SIZE, 1).unwrap(), 0);
            }
            assert_eq!(e.cost_totals().paging, 0);
            // Cold misses still count distinct pages, and nothing evicts
            // even past the nominal cache budget.
            assert_eq!(e.paging_stats().misses, 8);
            assert_eq!(e.paging_stats().evictions, 0);
            assert_eq!(e.exit_enclave(), 0);
            assert_eq!(e.charge_shield_bytes(4096), 0);
        }
    }

    #[test]
    fn transitions_count_and_charge() {
        let e = Enclave::create(b"image", hw_config()).unwrap();
        let unit = e.config().costs.cost_per_transition;
        assert_eq!(e.exit_enclave(), unit);
        assert_eq!(e.enter_enclave(), unit);
        assert_eq!(e.transitions().exits(), 1);
        assert_eq!(e.transitions().entries(), 1);
        assert_eq!(e.cost_totals().transition, 2 * unit);
    }

    #[test]
    fn compute_is_priced_in_every_mode() {
        for mode in [Mode::Native, Mode::Simulation, Mode::HardwareSim] {
            let cfg = EnclaveConfig {
                mode,
                ..EnclaveConfig::default()
            };
            let e = Enclave::create(b"image", cfg).unwrap();
            let fpu = e.config().costs.flops_per_unit;
            assert_eq!(e.charge_compute_flops(fpu * 10), 10);
            assert_eq!(e.charge_compute_flops(1), 1);
            assert_eq!(e.cost_totals().compute, 11);
            assert_eq!(e.virtual_now(), 11);
        }
    }

    #[test]
    fn clock_advance_attributes_the_gap() {
        let e = Enclave::create(b"image", hw_config()).unwrap();
        e.charge_compute_flops(32);
        let t = e.virtual_now();
        assert_eq!(e.advance_clock_to(t + 100, CostKind::Syscall), t + 100);
        // Advancing backwards is a no-op.
        assert_eq!(e.advance_clock_to(t, CostKind::Syscall), t + 100);
        assert_eq!(e.cost_totals().syscall, 100);
    }

    #[test]
    fn allocators_grow_toward_each_other() {
        let cfg = EnclaveConfig {
            heap_limit: 16 * PAGE_SIZE,
            ..hw_config()
        };
        let e = Enclave::create(b"image", cfg).unwrap();
        let a = e.alloc_low(100, 64).unwrap();
        let b = e.alloc_low(100, 64).unwrap();
        assert_eq!(a % 64, 0);
        assert!(b >= a + 100);
        let top = e.alloc_high(PAGE_SIZE, PAGE_SIZE).unwrap();
        assert_eq!(top % PAGE_SIZE, 0);
        assert_eq!(top, 15 * PAGE_SIZE);
        let err = e.alloc_low(17 * PAGE_SIZE, 1).unwrap_err();
        assert!(matches!(err, EnclaveError::OutOfMemory { .. }));
    }

    #[test]
    fn epc_cliff_appears_when_working_set_exceeds_cache() {
        // Sweep a working set that fits (2 pages) versus one that thrashes
        // (6 pages round-robin in a 4-page cache): per-touch cost jumps by
        // the miss/hit ratio.
        let e = Enclave::create(b"image", hw_config()).unwrap();
        let mut fits = 0;
        for _ in 0..50 {
            for p in 0..2u64 {
                fits += e.mem_access(p * PAGE_SIZE, 1).unwrap();
            }
        }
        let mut thrash = 0;
        for _ in 0..50 {
            for p in 0..6u64 {
                thrash += e.mem_access(p * PAGE_SIZE, 1).unwrap();
            }
        }
        let per_fit = fits as f64 / 100.0;
        let per_thrash = thrash as f64 / 300.0;
        assert!(per_thrash / per_fit > 10.0);
    }
}
