// SPDX-License-Identifier: Apache-2.0

//! Simulated remote-attestation quotes.
//!
//! A quote is a platform signature over an enclave measurement and a
//! verifier-chosen nonce. On real hardware the signing key lives in the CPU;
//! here it is an ordinary Ed25519 keypair generated per deployment, so every
//! party that should be able to check quotes holds the verifying half and
//! only the machine hosting enclaves holds the signing half.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::enclave::{Enclave, Measurement};

/// Nonce length fixed by the quote wire format.
pub const NONCE_LEN: usize = 16;

/// Serialized quote: measurement (32) then nonce (16) then signature (64).
pub const QUOTE_WIRE_LEN: usize = 32 + NONCE_LEN + 64;

/// Signed statement that an enclave with `measurement` answered `nonce`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Measurement,
    pub nonce: [u8; NONCE_LEN],
    pub signature: [u8; 64],
}

impl Quote {
    pub fn to_bytes(&self) -> [u8; QUOTE_WIRE_LEN] {
        let mut out = [0u8; QUOTE_WIRE_LEN];
        out[..32].copy_from_slice(self.measurement.as_bytes());
        out[32..32 + NONCE_LEN].copy_from_slice(&self.nonce);
        out[32 + NONCE_LEN..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Option<Quote> {
        if raw.len() != QUOTE_WIRE_LEN {
            return None;
        }
        let mut measurement = [0u8; 32];
        measurement.copy_from_slice(&raw[..32]);
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&raw[32..32 + NONCE_LEN]);
        let mut signature = [0u8; 64];
        signature.copy_from_slice(&raw[32 + NONCE_LEN..]);
        Some(Quote {
            measurement: Measurement(measurement),
            nonce,
            signature,
        })
    }
}

/// The message a platform signs when it vouches for an enclave.
fn quote_message(measurement: &Measurement, nonce: &[u8; NONCE_LEN]) -> [u8; 48] {
    let mut msg = [0u8; 48];
    msg[..32].copy_from_slice(measurement.as_bytes());
    msg[32..].copy_from_slice(nonce);
    msg
}

/// Signing half of the simulated platform attestation key.
pub struct PlatformSigner {
    key: SigningKey,
}

impl PlatformSigner {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> PlatformSigner {
        PlatformSigner {
            key: SigningKey::generate(rng),
        }
    }

    pub fn from_seed(seed: &[u8; 32]) -> PlatformSigner {
        PlatformSigner {
            key: SigningKey::from_bytes(seed),
        }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn verifier(&self) -> PlatformVerifier {
        PlatformVerifier {
            key: self.key.verifying_key(),
        }
    }

    /// Produce a quote binding `measurement` to a verifier-chosen nonce.
    pub fn quote(&self, measurement: Measurement, nonce: &[u8; NONCE_LEN]) -> Quote {
        let sig = self.key.sign(&quote_message(&measurement, nonce));
        Quote {
            measurement,
            nonce: *nonce,
            signature: sig.to_bytes(),
        }
    }
}

/// Verifying half of the simulated platform attestation key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlatformVerifier {
    key: VerifyingKey,
}

impl PlatformVerifier {
    pub fn from_bytes(raw: &[u8; 32]) -> Option<PlatformVerifier> {
        VerifyingKey::from_bytes(raw)
            .ok()
            .map(|key| PlatformVerifier { key })
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    /// Check the platform signature inside `quote`. Nonce freshness and
    /// measurement expectations are the caller's business.
    pub fn check(&self, quote: &Quote) -> bool {
        let sig = Signature::from_bytes(&quote.signature);
        self.key
            .verify(&quote_message(&quote.measurement, &quote.nonce), &sig)
            .is_ok()
    }
}

/// Anything that can answer a nonce challenge with a quote for itself.
pub trait QuoteProvider: Send + Sync {
    fn quote(&self, nonce: &[u8; NONCE_LEN]) -> Quote;
}

/// Quotes a live enclave using the platform signing key of its host.
pub struct EnclaveQuoter {
    enclave: std::sync::Arc<Enclave>,
    signer: PlatformSigner,
}

impl EnclaveQuoter {
    pub fn new(enclave: std::sync::Arc<Enclave>, signer: PlatformSigner) -> EnclaveQuoter {
        EnclaveQuoter { enclave, signer }
    }
}

impl QuoteProvider for EnclaveQuoter {
    fn quote(&self, nonce: &[u8; NONCE_LEN]) -> Quote {
        self.signer.quote(self.enclave.measurement(), nonce)
    }
}

/// Nonce both channel endpoints derive from their handshake randoms. Each
/// side contributes 32 fresh bytes, so neither can replay a quote minted for
/// an earlier exchange.
pub fn channel_binding_nonce(client_random: &[u8; 32], server_random: &[u8; 32]) -> [u8; NONCE_LEN] {
    let mut h = Sha256::new();
    h.update(b"tse channel binding v1");
    h.update(client_random);
    h.update(server_random);
    let digest = h.finalize();
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&digest[..NONCE_LEN]);
    nonce
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn measurement(tag: u8) -> Measurement {
        Measurement([tag; 32])
    }

    #[test]
    fn quotes_verify_under_the_issuing_platform_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let platform = PlatformSigner::generate(&mut rng);
        let other = PlatformSigner::generate(&mut rng);
        let quote = platform.quote(measurement(7), &[3u8; NONCE_LEN]);
        assert!(platform.verifier().check(&quote));
        assert!(!other.verifier().check(&quote));
    }

    #[test]
    fn any_field_change_breaks_the_signature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let platform = PlatformSigner::generate(&mut rng);
        let quote = platform.quote(measurement(1), &[9u8; NONCE_LEN]);

        let mut wrong_measurement = quote.clone();
        wrong_measurement.measurement = measurement(2);
        assert!(!platform.verifier().check(&wrong_measurement));

        let mut wrong_nonce = quote.clone();
        wrong_nonce.nonce[0] ^= 1;
        assert!(!platform.verifier().check(&wrong_nonce));

        let mut wrong_sig = quote;
        wrong_sig.signature[10] ^= 1;
        assert!(!platform.verifier().check(&wrong_sig));
    }

    #[test]
    fn wire_roundtrip_preserves_every_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let platform = PlatformSigner::generate(&mut rng);
        let quote = platform.quote(measurement(5), &[8u8; NONCE_LEN]);
        let bytes = quote.to_bytes();
        assert_eq!(bytes.len(), QUOTE_WIRE_LEN);
        assert_eq!(Quote::from_bytes(&bytes), Some(quote));
        assert_eq!(Quote::from_bytes(&bytes[..QUOTE_WIRE_LEN - 1]), None);
    }

    #[test]
    fn binding_nonce_depends_on_both_randoms() {
        let a = channel_binding_nonce(&[1; 32], &[2; 32]);
        let b = channel_binding_nonce(&[1; 32], &[3; 32]);
        let c = channel_binding_nonce(&[4; 32], &[2; 32]);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn platform_keys_roundtrip_through_seed_and_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let platform = PlatformSigner::generate(&mut rng);
        let reloaded = PlatformSigner::from_seed(&platform.seed());
        let quote = reloaded.quote(measurement(6), &[1u8; NONCE_LEN]);
        assert!(platform.verifier().check(&quote));

        let verifier = PlatformVerifier::from_bytes(&platform.verifier().to_bytes()).unwrap();
        assert!(verifier.check(&quote));
    }
}
