// SPDX-License-Identifier: Apache-2.0

//! Mutually authenticated encrypted channels between enclaves.
//!
//! A channel is built in two phases. A three-message handshake exchanges
//! fresh randoms and ephemeral X25519 keys, authenticates both sides with
//! Ed25519 signatures over the full transcript, and optionally binds an
//! attestation quote to the exchange: either side may demand one, and the
//! quote's nonce is derived from both randoms so it cannot be replayed
//! from an earlier handshake. Session keys come out of HKDF-SHA256 keyed
//! by the shared secret and salted with the transcript hash, one key per
//! direction.
//!
//! Application data then travels in records: an 8-byte big-endian
//! sequence number, a 4-byte big-endian ciphertext length, and the
//! ChaCha20-Poly1305 ciphertext, with the header as associated data and
//! the sequence number as nonce. The receiver accepts exactly the next
//! sequence number: anything at or below the last accepted record is a
//! replay, anything above it is a gap, and either poisons the channel.
//! Messages longer than one record are split and reassembled, so callers
//! see whole messages in order, a prefix of what the peer sent, or an
//! error; never reordered, repeated, or altered bytes.

mod transport;


pub use transport::{sync_pipe, tapped_pipe, BridgeTransport, PipeTap, SyncPipe, Transport};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use std::sync::Arc;
use thiserror::Error;
use x25519_dalek::{EphemeralSecret, PublicKey};

use crate::attest::quote::{channel_binding_nonce, Quote, QuoteProvider, QUOTE_WIRE_LEN};
use crate::attest::PlatformVerifier;
use crate::enclave::Measurement;

/// Largest plaintext carried by a single record.
pub const MAX_RECORD_PLAINTEXT: usize = 16 * 1024;

/// Largest reassembled message `recv` will accept.
pub const MAX_MESSAGE_LEN: usize = 16 * 1024 * 1024;

const RECORD_HEADER_LEN: usize = 12;
const TAG_LEN: usize = 16;
const HS_LABEL: &[u8] = b"tse handshake v1";
const HELLO_LEN: usize = 98;
const SIG_LEN: usize = 64;
const MAX_HS_FRAME: usize = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("peer authentication failed: {0}")]
    AuthFailure(&'static str),
    #[error("peer measurement does not match the expected enclave")]
    MeasurementMismatch,
    #[error("required attestation quote is missing")]
    Downgrade,
    #[error("record replays an already accepted sequence number")]
    ReplayDetected,
    #[error("record integrity check failed: {0}")]
    IntegrityFailure(&'static str),
    #[error("channel closed")]
    ChannelClosed,
    #[error("transport failure: {0}")]
    Transport(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// What a handshake must prove about the peer before the channel opens.
pub struct PeerExpectation {
    pub measurement: Measurement,
    pub platform: PlatformVerifier,
}

/// Local identity and attestation material for one endpoint.
pub struct HandshakeConfig {
    /// Long-lived channel identity; its public half is what the peer sees.
    pub identity: SigningKey,
    /// Answers the peer's quote demand. Without one, a demanding peer
    /// cannot be satisfied and the handshake ends in `Downgrade`.
    pub quote_provider: Option<Arc<dyn QuoteProvider>>,
    /// Demand and verify a quote from the peer.
    pub expect_peer: Option<PeerExpectation>,
}

impl HandshakeConfig {
    pub fn new(identity: SigningKey) -> HandshakeConfig {
        HandshakeConfig {
            identity,
            quote_provider: None,
            expect_peer: None,
        }
    }
}

struct Hello {
    random: [u8; 32],
    eph: PublicKey,
    identity: VerifyingKey,
    demands_quote: bool,
}

fn hello_payload(
    msg_type: u8,
    random: &[u8; 32],
    eph: &PublicKey,
    identity: &VerifyingKey,
    demand: bool,
) -> Vec<u8> {
    let mut m = Vec::with_capacity(HELLO_LEN);
    m.push(msg_type);
    m.extend_from_slice(random);
    m.extend_from_slice(eph.as_bytes());
    m.extend_from_slice(identity.as_bytes());
    m.push(demand as u8);
    m
}

fn parse_hello(msg_type: u8, m: &[u8]) -> Result<Hello, NetError> {
    if m.len() < HELLO_LEN || m[0] != msg_type {
        return Err(NetError::AuthFailure("malformed hello"));
    }
    let flags = m[97];
    if flags & !1 != 0 {
        return Err(NetError::AuthFailure("unknown hello flags"));
    }
    let mut random = [0u8; 32];
    random.copy_from_slice(&m[1..33]);
    let mut eph = [0u8; 32];
    eph.copy_from_slice(&m[33..65]);
    let identity = VerifyingKey::from_bytes(m[65..97].try_into().unwrap())
        .map_err(|_| NetError::AuthFailure("invalid identity key"))?;
    Ok(Hello {
        random,
        eph: PublicKey::from(eph),
        identity,
        demands_quote: flags & 1 == 1,
    })
}

fn send_frame(t: &mut dyn Transport, payload: &[u8]) -> Result<(), NetError> {
    let mut frame = Vec::with_capacity(4 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(payload);
    t.send_bytes(&frame)
}

fn recv_frame(t: &mut dyn Transport) -> Result<Vec<u8>, NetError> {
    let header = t.recv_exact(4)?;
    let len = u32::from_be_bytes(header.try_into().unwrap()) as usize;
    if len > MAX_HS_FRAME {
        return Err(NetError::AuthFailure("oversized handshake message"));
    }
    t.recv_exact(len)
}

/// Check an embedded quote against the expectation and the binding nonce.
/// A forged or stale quote is an authentication failure; a genuine quote
/// for the wrong enclave is a measurement mismatch.
fn check_quote(
    raw: &[u8],
    expect: &PeerExpectation,
    nonce: &[u8; 16],
) -> Result<Measurement, NetError> {
    let quote = Quote::from_bytes(raw).ok_or(NetError::AuthFailure("malformed quote"))?;
    if !expect.platform.check(&quote) {
        return Err(NetError::AuthFailure("quote platform signature"));
    }
    if quote.nonce != *nonce {
        return Err(NetError::AuthFailure("quote nonce is stale"));
    }
    if quote.measurement != expect.measurement {
        return Err(NetError::MeasurementMismatch);
    }
    Ok(quote.measurement)
}

fn own_quote(
    cfg: &HandshakeConfig,
    nonce: &[u8; 16],
    out: &mut Vec<u8>,
) -> Result<(), NetError> {
    match &cfg.quote_provider {
        Some(provider) => {
            out.extend_from_slice(&provider.quote(nonce).to_bytes());
            Ok(())
        }
        None => Err(NetError::Downgrade),
    }
}

fn transcript_hash(m1: &[u8], m2: &[u8], m3: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(HS_LABEL);
    h.update(m1);
    h.update(m2);
    h.update(m3);
    h.finalize().into()
}

fn derive_keys(shared: &[u8; 32], transcript: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let hk = Hkdf::<Sha256>::new(Some(transcript), shared);
    let mut c2s = [0u8; 32];
    hk.expand(b"tse c2s", &mut c2s).unwrap();
    let mut s2c = [0u8; 32];
    hk.expand(b"tse s2c", &mut s2c).unwrap();
    (c2s, s2c)
}

fn record_nonce(seq: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&seq.to_be_bytes());
    Nonce::from(n)
}

/// Encrypted, ordered, mutually authenticated message stream.
///
/// Session keys stay inside: they are not readable through the API and the
/// debug form omits them.
pub struct SecureChannel {
    transport: Box<dyn Transport>,
    role: Role,
    seal: ChaCha20Poly1305,
    open: ChaCha20Poly1305,
    send_seq: u64,
    recv_seq: u64,
    recv_buf: Vec<u8>,
    poisoned: bool,
    peer_identity: [u8; 32],
    peer_measurement: Option<Measurement>,
}

impl std::fmt::Debug for SecureChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureChannel")
            .field("role", &self.role)
            .field("send_seq", &self.send_seq)
            .field("recv_seq", &self.recv_seq)
            .field("poisoned", &self.poisoned)
            .finish_non_exhaustive()
    }
}

impl SecureChannel {
    /// Run the initiating side of the handshake.
    pub fn client(
        transport: Box<dyn Transport>,
        cfg: &HandshakeConfig,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<SecureChannel, NetError> {
        let mut transport = transport;
        let mut client_random = [0u8; 32];
        rng.fill_bytes(&mut client_random);
        let eph = EphemeralSecret::random_from_rng(&mut *rng);

        let m1 = hello_payload(
            1,
            &client_random,
            &PublicKey::from(&eph),
            &cfg.identity.verifying_key(),
            cfg.expect_peer.is_some(),
        );
        send_frame(&mut *transport, &m1)?;

        let m2 = recv_frame(&mut *transport)?;
        let quote_len = if cfg.expect_peer.is_some() {
            QUOTE_WIRE_LEN
        } else {
            0
        };
        if cfg.expect_peer.is_some() && m2.len() == HELLO_LEN + SIG_LEN {
            return Err(NetError::Downgrade);
        }
        if m2.len() != HELLO_LEN + quote_len + SIG_LEN {
            return Err(NetError::AuthFailure("unexpected server hello size"));
        }
        let server = parse_hello(2, &m2[..HELLO_LEN])?;

        let sig_off = m2.len() - SIG_LEN;
        let mut signed = Vec::new();
        signed.extend_from_slice(HS_LABEL);
        signed.extend_from_slice(&m1);
        signed.extend_from_slice(&m2[..sig_off]);
        let sig = Signature::from_bytes(m2[sig_off..].try_into().unwrap());
        server
            .identity
            .verify(&signed, &sig)
            .map_err(|_| NetError::AuthFailure("server signature"))?;

        let nonce = channel_binding_nonce(&client_random, &server.random);
        let mut peer_measurement = None;
        if let Some(expect) = &cfg.expect_peer {
            peer_measurement = Some(check_quote(
                &m2[HELLO_LEN..HELLO_LEN + QUOTE_WIRE_LEN],
                expect,
                &nonce,
            )?);
        }

        let mut m3 = vec![3u8];
        if server.demands_quote {
            own_quote(cfg, &nonce, &mut m3)?;
        }
        let mut signed3 = Vec::new();
        signed3.extend_from_slice(HS_LABEL);
        signed3.extend_from_slice(&m1);
        signed3.extend_from_slice(&m2);
        signed3.extend_from_slice(&m3);
        m3.extend_from_slice(&cfg.identity.sign(&signed3).to_bytes());
        send_frame(&mut *transport, &m3)?;

        let shared = eph.diffie_hellman(&server.eph);
        if !shared.was_contributory() {
            return Err(NetError::AuthFailure("degenerate key agreement"));
        }
        let transcript = transcript_hash(&m1, &m2, &m3);
        let (c2s, s2c) = derive_keys(shared.as_bytes(), &transcript);
        Ok(SecureChannel::assemble(
            transport,
            Role::Client,
            c2s,
            s2c,
            server.identity.to_bytes(),
            peer_measurement,
        ))
    }

    /// Run the answering side of the handshake.
    pub fn server(
        transport: Box<dyn Transport>,
        cfg: &HandshakeConfig,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<SecureChannel, NetError> {
        let mut transport = transport;
        let m1 = recv_frame(&mut *transport)?;
        if m1.len() != HELLO_LEN {
            return Err(NetError::AuthFailure("unexpected client hello size"));
        }
        let client = parse_hello(1, &m1)?;

        let mut server_random = [0u8; 32];
        rng.fill_bytes(&mut server_random);
        let eph = EphemeralSecret::random_from_rng(&mut *rng);

        let mut m2 = hello_payload(
            2,
            &server_random,
            &PublicKey::from(&eph),
            &cfg.identity.verifying_key(),
            cfg.expect_peer.is_some(),
        );
        let nonce = channel_binding_nonce(&client.random, &server_random);
        if client.demands_quote {
            own_quote(cfg, &nonce, &mut m2)?;
        }
        let mut signed = Vec::new();
        signed.extend_from_slice(HS_LABEL);
        signed.extend_from_slice(&m1);
        signed.extend_from_slice(&m2);
        m2.extend_from_slice(&cfg.identity.sign(&signed).to_bytes());
        send_frame(&mut *transport, &m2)?;

        let m3 = recv_frame(&mut *transport)?;
        let quote_len = if cfg.expect_peer.is_some() {
            QUOTE_WIRE_LEN
        } else {
            0
        };
        if cfg.expect_peer.is_some() && m3.len() == 1 + SIG_LEN && m3.first() == Some(&3) {
            return Err(NetError::Downgrade);
        }
        if m3.len() != 1 + quote_len + SIG_LEN || m3[0] != 3 {
            return Err(NetError::AuthFailure("unexpected finish size"));
        }
        let nonce = channel_binding_nonce(&client.random, &server_random);
        let mut peer_measurement = None;
        if let Some(expect) = &cfg.expect_peer {
            peer_measurement = Some(check_quote(&m3[1..1 + QUOTE_WIRE_LEN], expect, &nonce)?);
        }
        let sig_off = m3.len() - SIG_LEN;
        let mut signed3 = Vec::new();
        signed3.extend_from_slice(HS_LABEL);
        signed3.extend_from_slice(&m1);
        signed3.extend_from_slice(&m2);
        signed3.extend_from_slice(&m3[..sig_off]);
        let sig = Signature::from_bytes(m3[sig_off..].try_into().unwrap());
        client
            .identity
            .verify(&signed3, &sig)
            .map_err(|_| NetError::AuthFailure("client signature"))?;

        let shared = eph.diffie_hellman(&client.eph);
        if !shared.was_contributory() {
            return Err(NetError::AuthFailure("degenerate key agreement"));
        }
        let transcript = transcript_hash(&m1, &m2, &m3);
        let (c2s, s2c) = derive_keys(shared.as_bytes(), &transcript);
        Ok(SecureChannel::assemble(
            transport,
            Role::Server,
            s2c,
            c2s,
            client.identity.to_bytes(),
            peer_measurement,
        ))
    }

    fn assemble(
        transport: Box<dyn Transport>,
        role: Role,
        send_key: [u8; 32],
        recv_key: [u8; 32],
        peer_identity: [u8; 32],
        peer_measurement: Option<Measurement>,
    ) -> SecureChannel {
        SecureChannel {
            transport,
            role,
            seal: ChaCha20Poly1305::new(Key::from_slice(&send_key)),
            open: ChaCha20Poly1305::new(Key::from_slice(&recv_key)),
            send_seq: 0,
            recv_seq: 0,
            recv_buf: Vec::new(),
            poisoned: false,
            peer_identity,
            peer_measurement,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Public half of the peer's channel identity, proven during the
    /// handshake. Pin this against known identities before trusting data.
    pub fn peer_identity(&self) -> [u8; 32] {
        self.peer_identity
    }

    /// Measurement from the peer's verified quote, when one was demanded.
    pub fn peer_measurement(&self) -> Option<Measurement> {
        self.peer_measurement
    }

    /// Sequence number the next outgoing record will carry.
    pub fn send_seq(&self) -> u64 {
        self.send_seq
    }

    /// Sequence number the next incoming record must carry.
    pub fn recv_seq(&self) -> u64 {
        self.recv_seq
    }

    /// Send one message, splitting it across records as needed.
    pub fn send(&mut self, data: &[u8]) -> Result<(), NetError> {
        assert!(data.len() <= MAX_MESSAGE_LEN, "message too large");
        if self.poisoned {
            return Err(NetError::ChannelClosed);
        }
        let r = self.send_inner(data);
        if r.is_err() {
            self.poisoned = true;
        }
        r
    }

    /// Receive the next whole message.
    pub fn recv(&mut self) -> Result<Vec<u8>, NetError> {
        if self.poisoned {
            return Err(NetError::ChannelClosed);
        }
        let r = self.recv_inner();
        if r.is_err() {
            self.poisoned = true;
        }
        r
    }

    fn send_inner(&mut self, data: &[u8]) -> Result<(), NetError> {
        let mut pt = Vec::with_capacity(4 + data.len());
        pt.extend_from_slice(&(data.len() as u32).to_be_bytes());
        pt.extend_from_slice(data);
        for chunk in pt.chunks(MAX_RECORD_PLAINTEXT) {
            self.send_record(chunk)?;
        }
        Ok(())
    }

    fn recv_inner(&mut self) -> Result<Vec<u8>, NetError> {
        while self.recv_buf.len() < 4 {
            let record = self.recv_record()?;
            self.recv_buf.extend_from_slice(&record);
        }
        let len = u32::from_be_bytes(self.recv_buf[..4].try_into().unwrap()) as usize;
        if len > MAX_MESSAGE_LEN {
            return Err(NetError::IntegrityFailure("message length out of range"));
        }
        while self.recv_buf.len() < 4 + len {
            let record = self.recv_record()?;
            self.recv_buf.extend_from_slice(&record);
        }
        self.recv_buf.drain(..4);
        Ok(self.recv_buf.drain(..len).collect())
    }

    fn send_record(&mut self, pt: &[u8]) -> Result<(), NetError> {
        let seq = self.send_seq;
        // Refuse to wrap: a repeated sequence number would repeat a nonce.
        self.send_seq = seq.checked_add(1).ok_or(NetError::ChannelClosed)?;
        let mut header = [0u8; RECORD_HEADER_LEN];
        header[..8].copy_from_slice(&seq.to_be_bytes());
        header[8..].copy_from_slice(&((pt.len() + TAG_LEN) as u32).to_be_bytes());
        let ct = self
            .seal
            .encrypt(
                &record_nonce(seq),
                Payload {
                    msg: pt,
                    aad: &header,
                },
            )
            .map_err(|_| NetError::IntegrityFailure("record seal"))?;
        let mut frame = Vec::with_capacity(RECORD_HEADER_LEN + ct.len());
        frame.extend_from_slice(&header);
        frame.extend_from_slice(&ct);
        self.transport.send_bytes(&frame)
    }

    fn recv_record(&mut self) -> Result<Vec<u8>, NetError> {
        let header = self.transport.recv_exact(RECORD_HEADER_LEN)?;
        let seq = u64::from_be_bytes(header[..8].try_into().unwrap());
        let len = u32::from_be_bytes(header[8..].try_into().unwrap()) as usize;
        if !(TAG_LEN..=MAX_RECORD_PLAINTEXT + TAG_LEN).contains(&len) {
            return Err(NetError::IntegrityFailure("record length out of range"));
        }
        if seq < self.recv_seq {
            return Err(NetError::ReplayDetected);
        }
        if seq > self.recv_seq {
            return Err(NetError::IntegrityFailure("sequence gap"));
        }
        let ct = self.transport.recv_exact(len)?;
        let pt = self
            .open
            .decrypt(
                &record_nonce(seq),
                Payload {
                    msg: &ct,
                    aad: &header,
                },
            )
            .map_err(|_| NetError::IntegrityFailure("authentication tag"))?;
        self.recv_seq += 1;
        Ok(pt)
    }
}
