// SPDX-License-Identifier: Apache-2.0

//! Persistent store of per-measurement secrets.
//!
//! The registry is the sole authority on which enclaves receive secrets.
//! It maps a measurement to the bundle provisioned into matching enclaves
//! and keeps the set of already-answered quote nonces, so a captured quote
//! can never unlock anything twice. The whole store round-trips through a
//! compact binary image that is only ever written inside a shielded
//! container.

use std::collections::{BTreeMap, BTreeSet};

use crate::attest::quote::{PlatformVerifier, Quote, NONCE_LEN};
use crate::attest::AttestError;
use crate::enclave::Measurement;
use crate::fs_shield::FsShield;

const MAGIC: &[u8; 4] = b"TSRG";
const FORMAT_VERSION: u32 = 1;

/// Everything an enclave needs to go from measured to operational.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretsBundle {
    /// File system shield key.
    pub fs_key: [u8; 32],
    /// Seed of the enclave's long-lived channel identity.
    pub identity_seed: [u8; 32],
    /// Shield policy file the enclave is expected to run under.
    pub policy_text: String,
}

/// Measurement-keyed secrets store with a single-use nonce ledger.
pub struct SecretsRegistry {
    platform: PlatformVerifier,
    server_identity_seed: [u8; 32],
    entries: BTreeMap<[u8; 32], SecretsBundle>,
    used_nonces: BTreeSet<[u8; NONCE_LEN]>,
}

impl SecretsRegistry {
    pub fn new(platform: PlatformVerifier, server_identity_seed: [u8; 32]) -> SecretsRegistry {
        SecretsRegistry {
            platform,
            server_identity_seed,
            entries: BTreeMap::new(),
            used_nonces: BTreeSet::new(),
        }
    }

    pub fn platform(&self) -> &PlatformVerifier {
        &self.platform
    }

    /// Seed of the service's own channel identity, stored alongside the
    /// secrets it guards.
    pub fn server_identity_seed(&self) -> [u8; 32] {
        self.server_identity_seed
    }

    pub fn register(&mut self, measurement: Measurement, bundle: SecretsBundle) {
        self.entries.insert(*measurement.as_bytes(), bundle);
    }

    pub fn unregister(&mut self, measurement: &Measurement) -> bool {
        self.entries.remove(measurement.as_bytes()).is_some()
    }

    pub fn lookup(&self, measurement: &Measurement) -> Option<&SecretsBundle> {
        self.entries.get(measurement.as_bytes())
    }

    pub fn measurements(&self) -> impl Iterator<Item = Measurement> + '_ {
        self.entries.keys().map(|k| Measurement(*k))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decide whether `quote` earns its secrets. `issued` is the nonce
    /// this exchange handed the prover; anything else is a replay. A
    /// released nonce is burned even though issued nonces are fresh per
    /// exchange, so the ledger stays authoritative on its own.
    pub fn verify_and_release(
        &mut self,
        quote: &Quote,
        issued: &[u8; NONCE_LEN],
    ) -> Result<&SecretsBundle, AttestError> {
        if !self.platform.check(quote) {
            return Err(AttestError::SignatureInvalid);
        }
        if quote.nonce != *issued || self.used_nonces.contains(&quote.nonce) {
            return Err(AttestError::NonceReused);
        }
        let bundle = self
            .entries
            .get(quote.measurement.as_bytes())
            .ok_or(AttestError::UnknownMeasurement)?;
        self.used_nonces.insert(quote.nonce);
        Ok(bundle)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.platform.to_bytes());
        out.extend_from_slice(&self.server_identity_seed);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (measurement, bundle) in &self.entries {
            out.extend_from_slice(measurement);
            out.extend_from_slice(&bundle.fs_key);
            out.extend_from_slice(&bundle.identity_seed);
            out.extend_from_slice(&(bundle.policy_text.len() as u32).to_le_bytes());
            out.extend_from_slice(bundle.policy_text.as_bytes());
        }
        out.extend_from_slice(&(self.used_nonces.len() as u32).to_le_bytes());
        for nonce in &self.used_nonces {
            out.extend_from_slice(nonce);
        }
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<SecretsRegistry, AttestError> {
        let mut r = Reader { raw, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(AttestError::Malformed("registry magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(AttestError::Malformed(format!(
                "unsupported registry version {version}"
            )));
        }
        let platform = PlatformVerifier::from_bytes(r.take(32)?.try_into().unwrap())
            .ok_or_else(|| AttestError::Malformed("platform key".into()))?;
        let server_identity_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let entry_count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..entry_count {
            let measurement: [u8; 32] = r.take(32)?.try_into().unwrap();
            let fs_key: [u8; 32] = r.take(32)?.try_into().unwrap();
            let identity_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let policy_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let policy_text = String::from_utf8(r.take(policy_len)?.to_vec())
                .map_err(|_| AttestError::Malformed("policy text".into()))?;
            entries.insert(
                measurement,
                SecretsBundle {
                    fs_key,
                    identity_seed,
                    policy_text,
                },
            );
        }
        let used_count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut used_nonces = BTreeSet::new();
        for _ in 0..used_count {
            let nonce: [u8; NONCE_LEN] = r.take(NONCE_LEN)?.try_into().unwrap();
            used_nonces.insert(nonce);
        }
        if r.at != raw.len() {
            return Err(AttestError::Malformed("trailing bytes".into()));
        }
        Ok(SecretsRegistry {
            platform,
            server_identity_seed,
            entries,
            used_nonces,
        })
    }

    pub fn load(shield: &FsShield, path: &str) -> Result<SecretsRegistry, AttestError> {
        SecretsRegistry::from_bytes(&shield.read_all(path)?)
    }

    pub fn save(&self, shield: &FsShield, path: &str) -> Result<(), AttestError> {
        shield.write_all(path, &self.to_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    raw: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AttestError> {
        if self.raw.len() - self.at < n {
            return Err(AttestError::Malformed("registry truncated".into()));
        }
        let s = &self.raw[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}
