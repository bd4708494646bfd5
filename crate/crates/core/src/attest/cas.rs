// SPDX-License-Identifier: Apache-2.0

//! Provisioning protocol of the configuration and attestation service.
//!
//! Every exchange runs over an established secure channel and follows one
//! shape: the service challenges with a fresh nonce, the enclave answers
//! with a quote, and the service either releases the secrets bundle for
//! that measurement or names its reason for refusing. The service's side
//! of the channel is authenticated by the identity key stored in the
//! registry, which clients pin; the client side needs no prior identity,
//! because the quote is what earns trust.

use std::sync::{Arc, Mutex};

use ed25519_dalek::SigningKey;
use rand::{CryptoRng, RngCore};

use crate::attest::quote::{PlatformVerifier, Quote, QuoteProvider, NONCE_LEN, QUOTE_WIRE_LEN};
use crate::attest::registry::{SecretsBundle, SecretsRegistry};
use crate::attest::AttestError;
use crate::bridge::Bridge;
use crate::enclave::Measurement;
use crate::fs_shield::FsShield;
use crate::net_shield::{
    BridgeTransport, HandshakeConfig, NetError, SecureChannel, Transport,
};
use crate::sched::Scheduler;

pub const MSG_QUOTE_REQ: u8 = 0x01;
pub const MSG_QUOTE: u8 = 0x02;
pub const MSG_RELEASE: u8 = 0x03;
pub const MSG_DENY: u8 = 0x04;

const DENY_SIGNATURE: u8 = 1;
const DENY_NONCE: u8 = 2;
const DENY_UNKNOWN: u8 = 3;

/// Create an empty registry with a fresh service identity, returning the
/// public identity clients should pin.
pub fn init_registry(
    shield: &FsShield,
    path: &str,
    platform: PlatformVerifier,
    rng: &mut (impl RngCore + CryptoRng),
) -> Result<[u8; 32], AttestError> {
    let identity = SigningKey::generate(rng);
    let registry = SecretsRegistry::new(platform, identity.to_bytes());
    registry.save(shield, path)?;
    Ok(identity.verifying_key().to_bytes())
}

/// Serving side of the provisioning service. One instance owns the
/// registry; concurrent connections serialize through it.
pub struct CasServer {
    shield: Arc<FsShield>,
    registry_path: String,
    registry: Mutex<SecretsRegistry>,
    identity: SigningKey,
}

impl CasServer {
    /// Load the registry from its shielded container and stand the
    /// service up around it.
    pub fn open(shield: Arc<FsShield>, registry_path: &str) -> Result<CasServer, AttestError> {
        let registry = SecretsRegistry::load(&shield, registry_path)?;
        let identity = SigningKey::from_bytes(&registry.server_identity_seed());
        Ok(CasServer {
            shield,
            registry_path: registry_path.to_string(),
            registry: Mutex::new(registry),
            identity,
        })
    }

    /// Public identity this service presents on its channels.
    pub fn identity_public(&self) -> [u8; 32] {
        self.identity.verifying_key().to_bytes()
    }

    pub fn handshake_config(&self) -> HandshakeConfig {
        HandshakeConfig::new(self.identity.clone())
    }

    /// Add or replace a registration and persist the registry.
    pub fn register(
        &self,
        measurement: Measurement,
        bundle: SecretsBundle,
    ) -> Result<(), AttestError> {
        self.registry.lock().unwrap().register(measurement, bundle);
        self.persist()
    }

    pub fn measurements(&self) -> Vec<Measurement> {
        self.registry.lock().unwrap().measurements().collect()
    }

    /// Challenge, verify, and answer one provisioning request. The burned
    /// nonce is persisted before the secrets go out, so a crash cannot
    /// forget a release.
    pub fn serve_connection(
        &self,
        channel: &mut SecureChannel,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<Measurement, AttestError> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut req = Vec::with_capacity(1 + NONCE_LEN);
        req.push(MSG_QUOTE_REQ);
        req.extend_from_slice(&nonce);
        channel.send(&req)?;

        let reply = channel.recv()?;
        if reply.first() != Some(&MSG_QUOTE) || reply.len() != 1 + QUOTE_WIRE_LEN {
            return Err(AttestError::Malformed("expected a quote".into()));
        }
        let quote = Quote::from_bytes(&reply[1..]).expect("length was just checked");

        let decision = self
            .registry
            .lock()
            .unwrap()
            .verify_and_release(&quote, &nonce)
            .cloned();
        match decision {
            Ok(bundle) => {
                self.persist()?;
                let mut msg = Vec::with_capacity(65 + bundle.policy_text.len());
                msg.push(MSG_RELEASE);
                msg.extend_from_slice(&bundle.fs_key);
                msg.extend_from_slice(&bundle.identity_seed);
                msg.extend_from_slice(bundle.policy_text.as_bytes());
                channel.send(&msg)?;
                Ok(quote.measurement)
            }
            Err(e) => {
                let reason = match e {
                    AttestError::SignatureInvalid => DENY_SIGNATURE,
                    AttestError::NonceReused => DENY_NONCE,
                    AttestError::UnknownMeasurement => DENY_UNKNOWN,
                    _ => 0,
                };
                let mut msg = vec![MSG_DENY, reason];
                msg.extend_from_slice(e.to_string().as_bytes());
                let _ = channel.send(&msg);
                Err(e)
            }
        }
    }

    fn persist(&self) -> Result<(), AttestError> {
        let image = self.registry.lock().unwrap().to_bytes();
        self.shield.write_all(&self.registry_path, &image)?;
        Ok(())
    }
}

/// Answer the service's challenge on an established channel and receive
/// this enclave's secrets.
pub fn provision(
    channel: &mut SecureChannel,
    provider: &dyn QuoteProvider,
) -> Result<SecretsBundle, AttestError> {
    let req = channel.recv()?;
    if req.first() != Some(&MSG_QUOTE_REQ) || req.len() != 1 + NONCE_LEN {
        return Err(AttestError::Malformed("expected a nonce challenge".into()));
    }
    let nonce: [u8; NONCE_LEN] = req[1..].try_into().unwrap();
    let quote = provider.quote(&nonce);
    let mut msg = Vec::with_capacity(1 + QUOTE_WIRE_LEN);
    msg.push(MSG_QUOTE);
    msg.extend_from_slice(&quote.to_bytes());
    channel.send(&msg)?;

    let reply = channel.recv()?;
    match reply.first() {
        Some(&MSG_RELEASE) => {
            if reply.len() < 65 {
                return Err(AttestError::Malformed("release too short".into()));
            }
            let fs_key: [u8; 32] = reply[1..33].try_into().unwrap();
            let identity_seed: [u8; 32] = reply[33..65].try_into().unwrap();
            let policy_text = String::from_utf8(reply[65..].to_vec())
                .map_err(|_| AttestError::Malformed("policy text".into()))?;
            Ok(SecretsBundle {
                fs_key,
                identity_seed,
                policy_text,
            })
        }
        Some(&MSG_DENY) => Err(match reply.get(1) {
            Some(&DENY_SIGNATURE) => AttestError::SignatureInvalid,
            Some(&DENY_NONCE) => AttestError::NonceReused,
            Some(&DENY_UNKNOWN) => AttestError::UnknownMeasurement,
            _ => AttestError::Malformed("denied for an unnamed reason".into()),
        }),
        _ => Err(AttestError::Malformed("unexpected reply".into())),
    }
}

/// Connect to the service over `transport`, pin its identity, and
/// provision. The client identity is a throwaway: an unprovisioned
/// enclave has nothing long-lived to present yet.
pub fn provision_over(
    transport: Box<dyn Transport>,
    service_identity: &[u8; 32],
    provider: &dyn QuoteProvider,
    rng: &mut (impl RngCore + CryptoRng),
) -> Result<SecretsBundle, AttestError> {
    let cfg = HandshakeConfig::new(SigningKey::generate(rng));
    let mut channel = SecureChannel::client(transport, &cfg, rng)?;
    if channel.peer_identity() != *service_identity {
        return Err(AttestError::Net(NetError::AuthFailure(
            "provisioning service identity",
        )));
    }
    provision(&mut channel, provider)
}

/// Accept and serve provisioning connections on an open listener until
/// `limit` connections have been handled or the listener fails. Must run
/// on a scheduled thread; each connection gets its own.
pub fn serve_provisioning(
    sched: &Scheduler,
    bridge: &Arc<Bridge>,
    server: &Arc<CasServer>,
    listen_sock: u64,
    limit: usize,
) {
    for i in 0..limit {
        let sock = match bridge.tcp_accept(listen_sock) {
            Ok(s) => s,
            Err(_) => break,
        };
        let conn_bridge = bridge.clone();
        let conn_server = server.clone();
        sched.spawn(&format!("cas-conn-{i}"), move || {
            let transport = BridgeTransport::new(conn_bridge, sock);
            let mut rng = rand::thread_rng();
            let cfg = conn_server.handshake_config();
            if let Ok(mut channel) = SecureChannel::server(Box::new(transport), &cfg, &mut rng) {
                let _ = conn_server.serve_connection(&mut channel, &mut rng);
            }
        });
    }
}
