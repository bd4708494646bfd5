// SPDX-License-Identifier: Apache-2.0

//! Shielded-execution runtime simulator with an embedded tensor dataflow
//! engine.
//!
//! The stack mirrors a container that runs unmodified binaries inside a
//! hardware-protected memory region: an enclave model with a measured code
//! image, bounded protected page cache, and priced boundary transitions
//! ([`enclave`]); user-level threads multiplexed onto a fixed set of enclave
//! entry contexts ([`sched`]); an asynchronous system-call bridge that keeps
//! syscalls from forcing enclave exits ([`bridge`]); file and network
//! shields that encrypt and authenticate everything crossing the boundary
//! ([`fs_shield`], [`net_shield`]); and remote attestation with a secret
//! provisioning service ([`attest`]). On top sits a small tensor dataflow
//! engine ([`tensor`]) and a benchmark harness ([`bench`]) that exercise the
//! runtime with an image-classification workload.
//!
//! All timing is virtual: components charge abstract cost units to the
//! enclave's clock, so identical inputs produce identical reports, bit for
//! bit, on any machine.

pub mod attest;
pub mod bench;
pub mod bridge;
pub mod enclave;
pub mod fs_shield;
pub mod net_shield;
pub mod runtime;
pub mod sched;
pub mod tensor;

pub use enclave::{Enclave, EnclaveConfig, EnclaveError, Measurement, Mode};
pub use runtime::{Runtime, RuntimeOptions};
