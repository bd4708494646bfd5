// SPDX-License-Identifier: Apache-2.0

//! Transparent file protection.
//!
//! Files under a protected prefix are stored as chunked containers that are
//! authenticated (and optionally encrypted) with keys provisioned into the
//! enclave, so the host sees ciphertext and any tampering is detected on
//! read. Unprotected paths pass straight through to the host file system.
//! Which treatment a path gets is decided by longest-prefix policy match.

mod container;
mod io;
mod policy;


pub use container::{salvage_version_floor, ContainerFile, DEFAULT_CHUNK_SIZE};
pub use io::{BridgeIo, HostFile, HostIo, StdIo};
pub use policy::{parse_policy_file, render_policy_file, resolve, PathPolicy, ShieldMode};

use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::bridge::BridgeError;
use crate::enclave::Enclave;

#[derive(Debug, Error)]
pub enum FsError {
    #[error("host I/O error on {op}: errno {errno}")]
    Host { op: &'static str, errno: i32 },
    #[error(transparent)]
    Bridge(BridgeError),
    #[error("container header corrupt: {0}")]
    HeaderCorrupt(String),
    #[error("tamper detected: {what}")]
    TamperDetected { chunk: Option<u32>, what: &'static str },
    #[error("no shield key provisioned for a protected path")]
    KeyMissing,
    #[error("enclave resources exhausted: {0}")]
    Resource(String),
}

impl From<BridgeError> for FsError {
    fn from(e: BridgeError) -> FsError {
        match e {
            BridgeError::Host { op, errno } => FsError::Host { op, errno },
            other => FsError::Bridge(other),
        }
    }
}

/// Policy-driven entry point for all file access from enclave code.
pub struct FsShield {
    enclave: Arc<Enclave>,
    io: Arc<dyn HostIo>,
    policies: Vec<PathPolicy>,
    key: Mutex<Option<[u8; 32]>>,
    chunk_size: u32,
}

impl FsShield {
    pub fn new(
        enclave: Arc<Enclave>,
        io: Arc<dyn HostIo>,
        policies: Vec<PathPolicy>,
        key: Option<[u8; 32]>,
    ) -> FsShield {
        FsShield {
            enclave,
            io,
            policies,
            key: Mutex::new(key),
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }

    /// Shrink chunks below the default, for tests that need many chunks
    /// without large files.
    pub fn with_chunk_size(mut self, chunk_size: u32) -> FsShield {
        self.chunk_size = chunk_size;
        self
    }

    pub fn policy_for(&self, path: &str) -> ShieldMode {
        resolve(&self.policies, path)
    }

    fn key_for(&self) -> Result<[u8; 32], FsError> {
        self.key.lock().unwrap().ok_or(FsError::KeyMissing)
    }

    /// Install the shield key, typically right after provisioning.
    pub fn set_key(&self, key: [u8; 32]) {
        *self.key.lock().unwrap() = Some(key);
    }

    pub fn has_key(&self) -> bool {
        self.key.lock().unwrap().is_some()
    }

    pub fn open(&self, path: &str, create: bool, write: bool) -> Result<ProtectedFile, FsError> {
        match self.policy_for(path) {
            ShieldMode::Passthrough => Ok(ProtectedFile::Raw {
                file: self.io.open(path, create, write)?,
                writable: write || create,
            }),
            mode => {
                let key = self.key_for()?;
                let c = ContainerFile::open(
                    self.io.clone(),
                    self.enclave.clone(),
                    &key,
                    path,
                    mode,
                    self.chunk_size,
                    create,
                    write,
                )?;
                Ok(ProtectedFile::Container(Box::new(c)))
            }
        }
    }

    pub fn read_all(&self, path: &str) -> Result<Vec<u8>, FsError> {
        let mut f = self.open(path, false, false)?;
        let len = f.len()?;
        let data = f.read(0, len as usize)?;
        f.close()?;
        Ok(data)
    }

    /// Replace a file's contents in one atomic publish.
    pub fn write_all(&self, path: &str, data: &[u8]) -> Result<(), FsError> {
        match self.policy_for(path) {
            ShieldMode::Passthrough => {
                let tmp = format!("{path}.tsfs-tmp");
                let publish = (|| -> Result<(), FsError> {
                    let f = self.io.open(&tmp, true, true)?;
                    f.write_at(0, data)?;
                    f.flush()?;
                    f.close()?;
                    self.io.rename(&tmp, path)
                })();
                if publish.is_err() {
                    let _ = self.io.remove(&tmp);
                }
                publish
            }
            mode => {
                let key = self.key_for()?;
                let mut c = match ContainerFile::open(
                    self.io.clone(),
                    self.enclave.clone(),
                    &key,
                    path,
                    mode,
                    self.chunk_size,
                    true,
                    true,
                ) {
                    Ok(c) => c,
                    // A damaged container is rebuilt from scratch; only
                    // its generation counters are salvaged so the fresh
                    // image cannot reuse a nonce the host has seen.
                    Err(FsError::HeaderCorrupt(_)) | Err(FsError::TamperDetected { .. }) => {
                        let floor = salvage_version_floor(&*self.io, path);
                        ContainerFile::fresh(
                            self.io.clone(),
                            self.enclave.clone(),
                            &key,
                            path,
                            mode,
                            self.chunk_size,
                            floor,
                            true,
                        )?
                    }
                    Err(e) => return Err(e),
                };
                c.truncate(0)?;
                c.write(0, data)?;
                c.flush()?;
                c.close()
            }
        }
    }

    pub fn remove(&self, path: &str) -> Result<(), FsError> {
        self.io.remove(path)
    }
}

/// An open file under shield policy; container-backed or raw.
pub enum ProtectedFile {
    Container(Box<ContainerFile>),
    Raw {
        file: Box<dyn HostFile>,
        writable: bool,
    },
}

impl ProtectedFile {
    pub fn mode(&self) -> ShieldMode {
        match self {
            ProtectedFile::Container(c) => c.mode(),
            ProtectedFile::Raw { .. } => ShieldMode::Passthrough,
        }
    }

    pub fn len(&self) -> Result<u64, FsError> {
        match self {
            ProtectedFile::Container(c) => Ok(c.len()),
            ProtectedFile::Raw { file, .. } => file.len(),
        }
    }

    pub fn is_empty(&self) -> Result<bool, FsError> {
        Ok(self.len()? == 0)
    }

    pub fn read(&mut self, offset: u64, len: usize) -> Result<Vec<u8>, FsError> {
        match self {
            ProtectedFile::Container(c) => c.read(offset, len),
            ProtectedFile::Raw { file, .. } => file.read_at(offset, len as u32),
        }
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), FsError> {
        match self {
            ProtectedFile::Container(c) => c.write(offset, data),
            ProtectedFile::Raw { file, writable } => {
                if !*writable {
                    return Err(FsError::Host {
                        op: "pwrite64",
                        errno: 9,
                    });
                }
                file.write_at(offset, data)
            }
        }
    }

    pub fn truncate(&mut self, len: u64) -> Result<(), FsError> {
        match self {
            ProtectedFile::Container(c) => c.truncate(len),
            ProtectedFile::Raw { .. } => Err(FsError::Host {
                op: "ftruncate",
                errno: 38,
            }),
        }
    }

    pub fn flush(&mut self) -> Result<(), FsError> {
        match self {
            ProtectedFile::Container(c) => c.flush(),
            ProtectedFile::Raw { file, .. } => file.flush(),
        }
    }

    pub fn close(self) -> Result<(), FsError> {
        match self {
            ProtectedFile::Container(c) => c.close(),
            ProtectedFile::Raw { file, .. } => file.close(),
        }
    }
}
