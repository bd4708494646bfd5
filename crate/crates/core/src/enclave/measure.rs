// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use sha2::{Digest, Sha256};

use crate::enclave::EnclaveConfig;

/// SHA-256 digest identifying an enclave's code and non-secret configuration.
///
/// Two enclaves with the same code and the same measured configuration have
/// equal measurements regardless of execution mode, provisioned secrets, or
/// the order configuration fields were supplied in.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(s: &str) -> Option<Measurement> {
        let s = s.trim();
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16)?;
            let lo = (chunk[1] as char).to_digit(16)?;
            out[i] = ((hi << 4) | lo) as u8;
        }
        Some(Measurement(out))
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", self.to_hex())
    }
}

/// Canonical measured view of a configuration: sorted `key=value` lines.
///
/// Secrets (fs key, channel identity) and anything that only affects cost
/// accounting are deliberately absent. Policies are keyed by a zero-padded
/// index so their order is part of the measurement.
fn canonical_config(config: &EnclaveConfig) -> String {
    let mut lines: Vec<String> = vec![
        format!("epc_limit={}", config.epc_limit),
        format!("heap_limit={}", config.heap_limit),
        format!("stack_limit={}", config.stack_limit),
        format!("tcs_count={}", config.tcs_count),
    ];
    for (i, p) in config.shield_policies.iter().enumerate() {
        lines.push(format!("policy.{i:04}={}:{}", p.prefix, p.mode.as_str()));
    }
    lines.sort();
    let mut out = String::new();
    for line in lines {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Compute the measurement of a code image plus its measured configuration.
pub fn measure(code: &[u8], config: &EnclaveConfig) -> Measurement {
    let mut h = Sha256::new();
    h.update(b"TSE1");
    h.update((code.len() as u64).to_le_bytes());
    h.update(code);
    h.update(canonical_config(config).as_bytes());
    Measurement(h.finalize().into())
}
