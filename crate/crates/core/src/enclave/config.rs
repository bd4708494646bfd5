// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::fmt;

use crate::enclave::EnclaveError;
use crate::fs_shield::PathPolicy;

/// Execution mode of a simulated enclave.
///
/// `Native` runs the workload with no shields and no cost model, `Simulation`
/// applies the shields but charges no paging or transition costs, and
/// `HardwareSim` applies shields and the full cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Native,
    Simulation,
    HardwareSim,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Native => "native",
            Mode::Simulation => "simulation",
            Mode::HardwareSim => "hardware-sim",
        }
    }

    /// Shields (file system / network) are active in this mode.
    pub fn shields_active(&self) -> bool {
        !matches!(self, Mode::Native)
    }

    /// Paging and transition costs are charged in this mode.
    pub fn costs_active(&self) -> bool {
        matches!(self, Mode::HardwareSim)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = EnclaveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Mode::Native),
            "simulation" => Ok(Mode::Simulation),
            "hardware-sim" => Ok(Mode::HardwareSim),
            other => Err(EnclaveError::ModeUnknown(other.to_string())),
        }
    }
}

/// Cost constants for the virtual-time model, all in abstract time units.
///
/// The defaults are calibration knobs, not measured hardware truth; they are
/// chosen so the EPC cliff and the relative classification slowdown come out
/// at realistic magnitudes. Every field can be overridden per enclave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostParams {
    /// Cost of touching a page resident in the EPC.
    pub cost_hit: u64,
    /// Cost of touching a non-resident page (encrypt/decrypt + swap).
    pub cost_miss: u64,
    /// Cost of a single enclave transition (exit or entry).
    pub cost_per_transition: u64,
    /// Floating point operations folded into one compute unit.
    pub flops_per_unit: u64,
    /// Bytes of shield crypto work folded into one shield unit.
    pub shield_bytes_per_unit: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            cost_hit: 1,
            cost_miss: 1000,
            cost_per_transition: 5000,
            flops_per_unit: 32,
            shield_bytes_per_unit: 64,
        }
    }
}

pub const DEFAULT_HEAP: u64 = 256 * 1024 * 1024;
pub const DEFAULT_STACK: u64 = 8 * 1024 * 1024;
pub const DEFAULT_EPC: u64 = 90 * 1024 * 1024;
pub const DEFAULT_TCS: u32 = 4;

/// Per-enclave trusted configuration.
///
/// The secret fields (`fs_key`, `tls_identity`) are excluded from the
/// enclave measurement; everything else is measured.
#[derive(Debug, Clone)]
pub struct EnclaveConfig {
    pub heap_limit: u64,
    pub stack_limit: u64,
    pub epc_limit: u64,
    pub tcs_count: u32,
    pub mode: Mode,
    pub shield_policies: Vec<PathPolicy>,
    /// File-system shield key, provisioned at startup (secret, unmeasured).
    pub fs_key: Option<[u8; 32]>,
    /// Channel identity signing key seed (secret, unmeasured).
    pub tls_identity: Option<[u8; 32]>,
    pub costs: CostParams,
}

impl Default for EnclaveConfig {
    fn default() -> Self {
        EnclaveConfig {
            heap_limit: DEFAULT_HEAP,
            stack_limit: DEFAULT_STACK,
            epc_limit: DEFAULT_EPC,
            tcs_count: DEFAULT_TCS,
            mode: Mode::HardwareSim,
            shield_policies: Vec::new(),
            fs_key: None,
            tls_identity: None,
            costs: CostParams::default(),
        }
    }
}

impl EnclaveConfig {
    pub fn validate(&self) -> Result<(), EnclaveError> {
        if self.heap_limit == 0 {
            return Err(EnclaveError::ConfigInvalid("heap_limit must be > 0".into()));
        }
        if self.stack_limit == 0 {
            return Err(EnclaveError::ConfigInvalid("stack_limit must be > 0".into()));
        }
        if self.epc_limit == 0 {
            return Err(EnclaveError::ConfigInvalid("epc_limit must be > 0".into()));
        }
        if self.tcs_count == 0 {
            return Err(EnclaveError::ConfigInvalid("tcs_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parse a size value with an optional K/M/G suffix (powers of 1024).
pub fn parse_size(s: &str) -> Result<u64, EnclaveError> {
    let s = s.trim();
    if s.is_empty() {
        return Err(EnclaveError::ParseError(s.to_string()));
    }
    let (digits, mult) = match s.as_bytes()[s.len() - 1] {
        b'K' | b'k' => (&s[..s.len() - 1], 1024u64),
        b'M' | b'm' => (&s[..s.len() - 1], 1024 * 1024),
        b'G' | b'g' => (&s[..s.len() - 1], 1024 * 1024 * 1024),
        _ => (s, 1),
    };
    let n: u64 = digits
        .parse()
        .map_err(|_| EnclaveError::ParseError(s.to_string()))?;
    n.checked_mul(mult)
        .ok_or_else(|| EnclaveError::ParseError(s.to_string()))
}

/// Build an [`EnclaveConfig`] from environment-style variables.
///
/// Recognized names: `TS_HEAP`, `TS_STACK`, `TS_EPC`, `TS_TCS`, `TS_MODE`.
/// Sizes accept K/M/G suffixes; unset variables take the documented
/// defaults (heap 256 MiB, stack 8 MiB, EPC 90 MiB, 4 TCS, hardware-sim).
pub fn read_env_config(env: &HashMap<String, String>) -> Result<EnclaveConfig, EnclaveError> {
    let mut cfg = EnclaveConfig::default();
    if let Some(v) = env.get("TS_HEAP") {
        cfg.heap_limit = parse_size(v)?;
    }
    if let Some(v) = env.get("TS_STACK") {
        cfg.stack_limit = parse_size(v)?;
    }
    if let Some(v) = env.get("TS_EPC") {
        cfg.epc_limit = parse_size(v)?;
    }
    if let Some(v) = env.get("TS_TCS") {
        cfg.tcs_count = v
            .trim()
            .parse()
            .map_err(|_| EnclaveError::ParseError(v.clone()))?;
    }
    if let Some(v) = env.get("TS_MODE") {
        cfg.mode = v.trim().parse()?;
    }
    Ok(cfg)
}
