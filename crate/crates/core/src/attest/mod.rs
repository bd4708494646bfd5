// SPDX-License-Identifier: Apache-2.0

//! Remote attestation and secrets provisioning.
//!
//! An enclave proves what it is running by presenting a quote: a platform
//! signature over its measurement and a verifier-chosen nonce. A
//! configuration and attestation service holds a registry mapping known
//! measurements to their secrets (file system key, channel identity,
//! shield policy) and releases a bundle only to enclaves that answer a
//! fresh nonce with a valid quote for a registered measurement. Everything
//! the service persists lives in a shielded container, and everything it
//! says on the wire travels over a secure channel.

pub mod cas;
pub mod quote;
pub mod registry;


pub use cas::{init_registry, provision, provision_over, serve_provisioning, CasServer};
pub use quote::{
    channel_binding_nonce, EnclaveQuoter, PlatformSigner, PlatformVerifier, Quote, QuoteProvider,
    NONCE_LEN, QUOTE_WIRE_LEN,
};
pub use registry::{SecretsBundle, SecretsRegistry};

use thiserror::Error;

use crate::fs_shield::FsError;
use crate::net_shield::NetError;

#[derive(Debug, Error)]
pub enum AttestError {
    #[error("quote signature is invalid")]
    SignatureInvalid,
    #[error("quote nonce was already used or was never issued")]
    NonceReused,
    #[error("measurement is not registered")]
    UnknownMeasurement,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("released policy text does not match this enclave's configuration")]
    PolicyMismatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fs(#[from] FsError),
}
