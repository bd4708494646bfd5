// SPDX-License-Identifier: Apache-2.0

//! Chunked authenticated container format.
//!
//! A protected file is a 25-byte header followed by fixed-stride chunk
//! records. Every record is `nonce (12) ‖ body ‖ tag (16)` where the body
//! is ciphertext for encrypted files and raw plaintext for
//! authenticate-only files; all but the last chunk carry a full
//! `chunk_size` of data. The nonce is the chunk index (4 bytes) followed
//! by a write-generation counter (8 bytes), so no (key, chunk) pair ever
//! sees a repeated nonce. Tags are bound to the chunk index and a digest
//! of the header, which makes truncation, chunk transplanting, and header
//! edits all fail authentication.
//!
//! Each path gets its own key, derived from the shield key, so records
//! cannot be replayed between files that share a provisioned key, and a
//! whole-file copy under another protected name fails on first read.
//!
//! Writes stay in memory at chunk granularity until `flush`, which
//! re-encrypts the whole file under a bumped generation and publishes it
//! with a write-to-temp-then-rename step, so on-disk state is always one
//! complete, verifiable image.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use sha2::{Digest, Sha256};

use crate::enclave::{Enclave, EnclaveError, PAGE_SIZE};

use super::io::{HostFile, HostIo};
use super::{FsError, ShieldMode};

pub const DEFAULT_CHUNK_SIZE: u32 = 65_536;
pub const HEADER_LEN: usize = 25;
pub const CHUNK_OVERHEAD: u32 = 28;
const NONCE_LEN: usize = 12;
const MAGIC: &[u8; 4] = b"TSFS";
const FORMAT_VERSION: u32 = 1;
const MAX_CHUNK_SIZE: u32 = 1 << 20;
const META_STRIDE: u64 = 40;

pub fn file_cipher(shield_key: &[u8; 32], path: &str) -> ChaCha20Poly1305 {
    let hk = Hkdf::<Sha256>::new(Some(b"tsfs file key v1"), shield_key);
    let mut okm = [0u8; 32];
    hk.expand(path.as_bytes(), &mut okm)
        .expect("32 bytes is a valid hkdf output length");
    ChaCha20Poly1305::new(Key::from_slice(&okm))
}

fn mode_byte(mode: ShieldMode) -> u8 {
    match mode {
        ShieldMode::EncryptAuth => 1,
        ShieldMode::AuthOnly => 2,
        ShieldMode::Passthrough => unreachable!("passthrough files are never containers"),
    }
}

#[derive(Debug, Clone, Copy)]
struct Header {
    chunk_size: u32,
    chunk_count: u32,
    file_length: u64,
    mode: ShieldMode,
}

fn render_header(h: &Header) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[0..4].copy_from_slice(MAGIC);
    out[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    out[8..12].copy_from_slice(&h.chunk_size.to_le_bytes());
    out[12..16].copy_from_slice(&h.chunk_count.to_le_bytes());
    out[16..24].copy_from_slice(&h.file_length.to_le_bytes());
    out[24] = mode_byte(h.mode);
    out
}

fn parse_header(raw: &[u8]) -> Result<Header, FsError> {
    if raw.len() < HEADER_LEN {
        return Err(FsError::HeaderCorrupt("truncated header".into()));
    }
    if &raw[0..4] != MAGIC {
        return Err(FsError::HeaderCorrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FsError::HeaderCorrupt(format!(
            "unsupported format version {version}"
        )));
    }
    let chunk_size = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    if chunk_size == 0 || chunk_size > MAX_CHUNK_SIZE {
        return Err(FsError::HeaderCorrupt(format!(
            "chunk size {chunk_size} out of range"
        )));
    }
    let chunk_count = u32::from_le_bytes(raw[12..16].try_into().unwrap());
    let file_length = u64::from_le_bytes(raw[16..24].try_into().unwrap());
    let mode = match raw[24] {
        1 => ShieldMode::EncryptAuth,
        2 => ShieldMode::AuthOnly,
        b => return Err(FsError::HeaderCorrupt(format!("unknown mode byte {b}"))),
    };
    let expected_count = file_length.div_ceil(chunk_size as u64);
    if expected_count != chunk_count as u64 {
        return Err(FsError::HeaderCorrupt(
            "length and chunk count disagree".into(),
        ));
    }
    Ok(Header {
        chunk_size,
        chunk_count,
        file_length,
        mode,
    })
}

fn resource(e: EnclaveError) -> FsError {
    FsError::Resource(e.to_string())
}

pub struct ContainerFile {
    io: Arc<dyn HostIo>,
    file: Option<Box<dyn HostFile>>,
    path: String,
    enclave: Arc<Enclave>,
    cipher: ChaCha20Poly1305,
    mode: ShieldMode,
    chunk_size: u32,
    file_length: u64,
    disk_length: u64,
    disk_count: u32,
    version_floor: u64,
    header_digest: [u8; 32],
    table: BTreeSet<u32>,
    cache: Option<(u32, Vec<u8>)>,
    dirty: BTreeMap<u32, Vec<u8>>,
    modified: bool,
    writable: bool,
    table_base: u64,
    table_cap: u32,
    scratch_base: u64,
}

impl ContainerFile {
    /// Open a container, creating the host file when asked. A zero-length
    /// host file is an empty container that has never been flushed.
    #[allow(clippy::too_many_arguments)]
    pub fn open(
        io: Arc<dyn HostIo>,
        enclave: Arc<Enclave>,
        shield_key: &[u8; 32],
        path: &str,
        mode: ShieldMode,
        chunk_size: u32,
        create: bool,
        writable: bool,
    ) -> Result<ContainerFile, FsError> {
        let file = io.open(path, create, writable || create)?;
        let validated = (|| -> Result<Option<(Header, [u8; 32])>, FsError> {
            let phys = file.len()?;
            if phys == 0 {
                return Ok(None);
            }
            let raw = file.read_at(0, HEADER_LEN as u32)?;
            let header = parse_header(&raw)?;
            if header.mode != mode {
                return Err(FsError::HeaderCorrupt(
                    "stored mode does not match the path policy".into(),
                ));
            }
            let expected_phys = HEADER_LEN as u64
                + header.chunk_count as u64 * CHUNK_OVERHEAD as u64
                + header.file_length;
            if phys != expected_phys {
                return Err(FsError::TamperDetected {
                    chunk: None,
                    what: "container length does not match its header",
                });
            }
            Ok(Some((header, Sha256::digest(&raw[..HEADER_LEN]).into())))
        })();
        let validated = match validated {
            Ok(v) => v,
            Err(e) => {
                let _ = file.close();
                return Err(e);
            }
        };
        let fresh = ContainerFile::fresh(io, enclave, shield_key, path, mode, chunk_size, 0, writable);
        let mut c = match fresh {
            Ok(c) => c,
            Err(e) => {
                let _ = file.close();
                return Err(e);
            }
        };
        if validated.is_none() {
            c.modified = c.writable;
        }
        if let Some((header, digest)) = validated {
            if header.chunk_size != c.chunk_size {
                c.scratch_base = c
                    .enclave
                    .alloc_high(header.chunk_size as u64, PAGE_SIZE)
                    .map_err(resource)?;
                c.chunk_size = header.chunk_size;
            }
            c.file_length = header.file_length;
            c.disk_length = header.file_length;
            c.disk_count = header.chunk_count;
            c.header_digest = digest;
            c.grow_table(header.chunk_count)?;
        }
        c.file = Some(file);
        Ok(c)
    }

    /// A container with no on-disk image yet; the first flush writes one.
    /// `version_floor` must be at least as large as any generation that
    /// may ever have been persisted under this path.
    #[allow(clippy::too_many_arguments)]
    pub fn fresh(
        io: Arc<dyn HostIo>,
        enclave: Arc<Enclave>,
        shield_key: &[u8; 32],
        path: &str,
        mode: ShieldMode,
        chunk_size: u32,
        version_floor: u64,
        writable: bool,
    ) -> Result<ContainerFile, FsError> {
        assert!(chunk_size > 0 && chunk_size <= MAX_CHUNK_SIZE);
        let cipher = file_cipher(shield_key, path);
        let scratch_base = enclave
            .alloc_high(chunk_size as u64, PAGE_SIZE)
            .map_err(resource)?;
        let mut c = ContainerFile {
            io,
            file: None,
            path: path.to_string(),
            enclave,
            cipher,
            mode,
            chunk_size,
            file_length: 0,
            disk_length: 0,
            disk_count: 0,
            version_floor,
            header_digest: [0u8; 32],
            table: BTreeSet::new(),
            cache: None,
            dirty: BTreeMap::new(),
            modified: false,
            writable,
            table_base: 0,
            table_cap: 0,
            scratch_base,
        };
        c.grow_table(64)?;
        Ok(c)
    }

    pub fn len(&self) -> u64 {
        self.file_length
    }

    pub fn is_empty(&self) -> bool {
        self.file_length == 0
    }

    pub fn mode(&self) -> ShieldMode {
        self.mode
    }

    fn grow_table(&mut self, need: u32) -> Result<(), FsError> {
        if need <= self.table_cap {
            return Ok(());
        }
        let cap = need.next_power_of_two().max(64);
        self.table_base = self
            .enclave
            .alloc_high(cap as u64 * META_STRIDE, 16)
            .map_err(resource)?;
        self.table_cap = cap;
        Ok(())
    }

    fn touch_meta(&mut self, chunk: u32) -> Result<(), FsError> {
        self.grow_table(chunk + 1)?;
        self.enclave
            .mem_access(self.table_base + chunk as u64 * META_STRIDE, META_STRIDE)
            .map_err(resource)?;
        Ok(())
    }

    fn touch_scratch(&self, len: usize) -> Result<(), FsError> {
        if len > 0 {
            self.enclave
                .mem_access(self.scratch_base, len as u64)
                .map_err(resource)?;
        }
        Ok(())
    }

    fn live_count(&self) -> u32 {
        self.file_length.div_ceil(self.chunk_size as u64) as u32
    }

    fn live_plen(&self, chunk: u32) -> usize {
        span_len(self.file_length, self.chunk_size, chunk)
    }

    fn disk_plen(&self, chunk: u32) -> usize {
        span_len(self.disk_length, self.chunk_size, chunk)
    }

    fn record_offset(&self, chunk: u32) -> u64 {
        HEADER_LEN as u64 + chunk as u64 * (self.chunk_size as u64 + CHUNK_OVERHEAD as u64)
    }

    fn aad(&self, chunk: u32) -> Vec<u8> {
        let mut ad = Vec::with_capacity(4 + 32);
        ad.extend_from_slice(&chunk.to_le_bytes());
        ad.extend_from_slice(&self.header_digest);
        ad
    }

    /// Read, verify, and decrypt one on-disk chunk.
    fn load_chunk(&mut self, chunk: u32) -> Result<Vec<u8>, FsError> {
        debug_assert!(chunk < self.disk_count);
        let plen = self.disk_plen(chunk);
        let rec_len = plen + CHUNK_OVERHEAD as usize;
        let rec = self
            .file
            .as_ref()
            .expect("on-disk chunks imply an open host file")
            .read_at(self.record_offset(chunk), rec_len as u32)?;
        if rec.len() != rec_len {
            return Err(FsError::TamperDetected {
                chunk: Some(chunk),
                what: "chunk record truncated",
            });
        }
        let nonce = &rec[..NONCE_LEN];
        if nonce[..4] != chunk.to_le_bytes() {
            return Err(FsError::TamperDetected {
                chunk: Some(chunk),
                what: "nonce does not name this chunk",
            });
        }
        let tamper = FsError::TamperDetected {
            chunk: Some(chunk),
            what: "authentication failed",
        };
        let plain = match self.mode {
            ShieldMode::EncryptAuth => self
                .cipher
                .decrypt(
                    Nonce::from_slice(nonce),
                    Payload {
                        msg: &rec[NONCE_LEN..],
                        aad: &self.aad(chunk),
                    },
                )
                .map_err(|_| tamper)?,
            ShieldMode::AuthOnly => {
                let body = &rec[NONCE_LEN..NONCE_LEN + plen];
                let tag = &rec[NONCE_LEN + plen..];
                let mut ad = self.aad(chunk);
                ad.extend_from_slice(body);
                self.cipher
                    .decrypt(Nonce::from_slice(nonce), Payload { msg: tag, aad: &ad })
                    .map_err(|_| tamper)?;
                body.to_vec()
            }
            ShieldMode::Passthrough => unreachable!(),
        };
        self.enclave.charge_shield_bytes(rec_len as u64);
        self.touch_scratch(plen)?;
        self.touch_meta(chunk)?;
        self.table.insert(chunk);
        Ok(plain)
    }

    /// Current plaintext of a chunk at its live length, from the dirty
    /// set, the decrypt cache, the disk, or implicit zeros, in that order.
    fn chunk_plain(&mut self, chunk: u32) -> Result<&[u8], FsError> {
        let plen = self.live_plen(chunk);
        if let Some(buf) = self.dirty.get_mut(&chunk) {
            buf.resize(plen, 0);
            return Ok(self.dirty.get(&chunk).unwrap());
        }
        let cached = matches!(self.cache, Some((c, _)) if c == chunk);
        if !cached {
            let buf = if chunk < self.disk_count {
                self.load_chunk(chunk)?
            } else {
                Vec::new()
            };
            self.cache = Some((chunk, buf));
        }
        self.touch_scratch(plen)?;
        let (_, buf) = self.cache.as_mut().unwrap();
        buf.resize(plen, 0);
        Ok(buf)
    }

    /// Take ownership of a chunk's live plaintext for modification.
    fn take_plain(&mut self, chunk: u32) -> Result<Vec<u8>, FsError> {
        let plen = self.live_plen(chunk);
        if let Some(mut buf) = self.dirty.remove(&chunk) {
            buf.resize(plen, 0);
            return Ok(buf);
        }
        if matches!(self.cache, Some((c, _)) if c == chunk) {
            let (_, mut buf) = self.cache.take().unwrap();
            buf.resize(plen, 0);
            return Ok(buf);
        }
        let mut buf = if chunk < self.disk_count {
            self.load_chunk(chunk)?
        } else {
            Vec::new()
        };
        buf.resize(plen, 0);
        Ok(buf)
    }

    pub fn read(&mut self, offset: u64, len: usize) -> Result<Vec<u8>, FsError> {
        let end = (offset.saturating_add(len as u64)).min(self.file_length);
        if offset >= end {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity((end - offset) as usize);
        let cs = self.chunk_size as u64;
        let mut pos = offset;
        while pos < end {
            let chunk = (pos / cs) as u32;
            let within = (pos % cs) as usize;
            let take = ((end - pos) as usize).min(self.chunk_size as usize - within);
            let plain = self.chunk_plain(chunk)?;
            out.extend_from_slice(&plain[within..within + take]);
            pos += take as u64;
        }
        Ok(out)
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), FsError> {
        if !self.writable {
            return Err(FsError::Host {
                op: "pwrite64",
                errno: 9,
            });
        }
        if data.is_empty() {
            return Ok(());
        }
        let end = offset + data.len() as u64;
        self.file_length = self.file_length.max(end);
        self.modified = true;
        let cs = self.chunk_size as u64;
        let mut pos = offset;
        while pos < end {
            let chunk = (pos / cs) as u32;
            let within = (pos % cs) as usize;
            let take = ((end - pos) as usize).min(self.chunk_size as usize - within);
            let mut buf = self.take_plain(chunk)?;
            let src = (pos - offset) as usize;
            buf[within..within + take].copy_from_slice(&data[src..src + take]);
            self.touch_scratch(take)?;
            self.dirty.insert(chunk, buf);
            pos += take as u64;
        }
        Ok(())
    }

    pub fn truncate(&mut self, len: u64) -> Result<(), FsError> {
        if !self.writable {
            return Err(FsError::Host {
                op: "ftruncate",
                errno: 9,
            });
        }
        if len == self.file_length {
            return Ok(());
        }
        if len < self.file_length {
            let keep = len.div_ceil(self.chunk_size as u64) as u32;
            self.dirty.retain(|&c, _| c < keep);
            if matches!(self.cache, Some((c, _)) if c >= keep) {
                self.cache = None;
            }
        }
        self.file_length = len;
        self.modified = true;
        Ok(())
    }

    /// Persist the whole file under a bumped write generation, as one
    /// atomic image swap. Unmodified chunks are verified on the way
    /// through, so a flush never launders tampered data.
    pub fn flush(&mut self) -> Result<(), FsError> {
        if !self.modified {
            return Ok(());
        }
        let mut floor = self.version_floor;
        for chunk in 0..self.disk_count {
            let rec = self
                .file
                .as_ref()
                .expect("on-disk chunks imply an open host file")
                .read_at(self.record_offset(chunk), NONCE_LEN as u32)?;
            if rec.len() == NONCE_LEN {
                floor = floor.max(u64::from_le_bytes(rec[4..12].try_into().unwrap()));
            }
        }
        let version = floor + 1;

        let count = self.live_count();
        let header = Header {
            chunk_size: self.chunk_size,
            chunk_count: count,
            file_length: self.file_length,
            mode: self.mode,
        };
        let raw_header = render_header(&header);
        let new_digest: [u8; 32] = Sha256::digest(raw_header).into();

        let mut image = Vec::with_capacity(
            HEADER_LEN + count as usize * (self.chunk_size + CHUNK_OVERHEAD) as usize,
        );
        image.extend_from_slice(&raw_header);
        for chunk in 0..count {
            let plain = self.take_plain(chunk)?;
            let mut nonce = [0u8; NONCE_LEN];
            nonce[..4].copy_from_slice(&chunk.to_le_bytes());
            nonce[4..].copy_from_slice(&version.to_le_bytes());
            let mut ad = Vec::with_capacity(4 + 32 + plain.len());
            ad.extend_from_slice(&chunk.to_le_bytes());
            ad.extend_from_slice(&new_digest);
            image.extend_from_slice(&nonce);
            match self.mode {
                ShieldMode::EncryptAuth => {
                    let ct = self
                        .cipher
                        .encrypt(
                            Nonce::from_slice(&nonce),
                            Payload {
                                msg: &plain,
                                aad: &ad,
                            },
                        )
                        .expect("chacha20poly1305 encryption is infallible");
                    image.extend_from_slice(&ct);
                }
                ShieldMode::AuthOnly => {
                    ad.extend_from_slice(&plain);
                    let tag = self
                        .cipher
                        .encrypt(
                            Nonce::from_slice(&nonce),
                            Payload { msg: b"", aad: &ad },
                        )
                        .expect("chacha20poly1305 encryption is infallible");
                    image.extend_from_slice(&plain);
                    image.extend_from_slice(&tag);
                }
                ShieldMode::Passthrough => unreachable!(),
            }
            self.enclave
                .charge_shield_bytes(plain.len() as u64 + CHUNK_OVERHEAD as u64);
            self.touch_scratch(plain.len())?;
            self.touch_meta(chunk)?;
            self.table.insert(chunk);
        }
        self.table.retain(|&c| c < count);

        let tmp = format!("{}.tsfs-tmp", self.path);
        let publish = (|| -> Result<(), FsError> {
            let tf = self.io.open(&tmp, true, true)?;
            tf.write_at(0, &image)?;
            tf.flush()?;
            tf.close()?;
            self.io.rename(&tmp, &self.path)
        })();
        if let Err(e) = publish {
            let _ = self.io.remove(&tmp);
            return Err(e);
        }
        self.file = Some(self.io.open(&self.path, false, self.writable)?);

        self.disk_count = count;
        self.disk_length = self.file_length;
        self.version_floor = version;
        self.header_digest = new_digest;
        self.cache = None;
        self.dirty.clear();
        self.modified = false;
        Ok(())
    }

    pub fn close(mut self) -> Result<(), FsError> {
        if self.writable {
            self.flush()?;
        }
        if let Some(f) = self.file.take() {
            f.close()?;
        }
        Ok(())
    }
}

fn span_len(total: u64, chunk_size: u32, chunk: u32) -> usize {
    let start = chunk as u64 * chunk_size as u64;
    if start >= total {
        return 0;
    }
    (total - start).min(chunk_size as u64) as usize
}

/// Highest write generation recoverable from a damaged container, used to
/// keep nonces fresh when rebuilding over one. Walks chunk records by the
/// header geometry and trusts nothing but the nonce counters, which can
/// only be inflated by an attacker, never usefully lowered.
pub fn salvage_version_floor(io: &dyn HostIo, path: &str) -> u64 {
    let mut floor = 0u64;
    let Ok(file) = io.open(path, false, false) else {
        return floor;
    };
    let Ok(raw) = file.read_at(0, HEADER_LEN as u32) else {
        return floor;
    };
    if raw.len() < HEADER_LEN {
        return floor;
    }
    let chunk_size = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    if chunk_size == 0 || chunk_size > MAX_CHUNK_SIZE {
        return floor;
    }
    let Ok(phys) = file.len() else {
        return floor;
    };
    let stride = chunk_size as u64 + CHUNK_OVERHEAD as u64;
    let mut offset = HEADER_LEN as u64;
    while offset + NONCE_LEN as u64 <= phys {
        if let Ok(nonce) = file.read_at(offset, NONCE_LEN as u32) {
            if nonce.len() == NONCE_LEN {
                floor = floor.max(u64::from_le_bytes(nonce[4..12].try_into().unwrap()));
            }
        }
        offset += stride;
    }
    floor
}
