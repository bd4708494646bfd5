// SPDX-License-Identifier: Apache-2.0

//! Byte-level access to host files, behind a trait so the shield can run
//! either over the syscall bridge (inside the runtime) or directly on the
//! standard library (tooling and tests).

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::sync::Arc;

use crate::bridge::Bridge;

use super::FsError;

pub trait HostIo: Send + Sync {
    fn open(&self, path: &str, create: bool, write: bool) -> Result<Box<dyn HostFile>, FsError>;
    fn rename(&self, from: &str, to: &str) -> Result<(), FsError>;
    fn remove(&self, path: &str) -> Result<(), FsError>;
}

#[allow(clippy::len_without_is_empty)]
pub trait HostFile: Send {
    /// Read up to `len` bytes; shorter only at end of file.
    fn read_at(&self, offset: u64, len: u32) -> Result<Vec<u8>, FsError>;
    fn write_at(&self, offset: u64, data: &[u8]) -> Result<(), FsError>;
    fn flush(&self) -> Result<(), FsError>;
    fn len(&self) -> Result<u64, FsError>;
    fn close(self: Box<Self>) -> Result<(), FsError>;
}

fn errno_of(e: &std::io::Error) -> i32 {
    e.raw_os_error().unwrap_or(5)
}

/// Direct standard-library access, outside any enclave accounting.
pub struct StdIo;

impl HostIo for StdIo {
    fn open(&self, path: &str, create: bool, write: bool) -> Result<Box<dyn HostFile>, FsError> {
        let file = OpenOptions::new()
            .read(true)
            .write(write || create)
            .create(create)
            .truncate(false)
            .open(path)
            .map_err(|e| FsError::Host {
                op: "openat",
                errno: errno_of(&e),
            })?;
        Ok(Box::new(StdFile { file }))
    }

    fn rename(&self, from: &str, to: &str) -> Result<(), FsError> {
        std::fs::rename(from, to).map_err(|e| FsError::Host {
            op: "rename",
            errno: errno_of(&e),
        })
    }

    fn remove(&self, path: &str) -> Result<(), FsError> {
        std::fs::remove_file(path).map_err(|e| FsError::Host {
            op: "unlink",
            errno: errno_of(&e),
        })
    }
}

struct StdFile {
    file: File,
}

impl HostFile for StdFile {
    fn read_at(&self, offset: u64, len: u32) -> Result<Vec<u8>, FsError> {
        let mut buf = vec![0u8; len as usize];
        let mut filled = 0usize;
        while filled < buf.len() {
            match self.file.read_at(&mut buf[filled..], offset + filled as u64) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    return Err(FsError::Host {
                        op: "pread64",
                        errno: errno_of(&e),
                    })
                }
            }
        }
        buf.truncate(filled);
        Ok(buf)
    }

    fn write_at(&self, offset: u64, data: &[u8]) -> Result<(), FsError> {
        self.file.write_all_at(data, offset).map_err(|e| FsError::Host {
            op: "pwrite64",
            errno: errno_of(&e),
        })
    }

    fn flush(&self) -> Result<(), FsError> {
        self.file.sync_all().map_err(|e| FsError::Host {
            op: "fsync",
            errno: errno_of(&e),
        })
    }

    fn len(&self) -> Result<u64, FsError> {
        self.file
            .metadata()
            .map(|m| m.len())
            .map_err(|e| FsError::Host {
                op: "fstat",
                errno: errno_of(&e),
            })
    }

    fn close(self: Box<Self>) -> Result<(), FsError> {
        Ok(())
    }
}

/// Access through the syscall bridge; every operation is priced and
/// vetted like any other host call. Usable only on runtime threads.
pub struct BridgeIo {
    bridge: Arc<Bridge>,
}

impl BridgeIo {
    pub fn new(bridge: Arc<Bridge>) -> BridgeIo {
        BridgeIo { bridge }
    }
}

impl HostIo for BridgeIo {
    fn open(&self, path: &str, create: bool, write: bool) -> Result<Box<dyn HostFile>, FsError> {
        let fd = self.bridge.open(path, create, write)?;
        Ok(Box::new(BridgeFile {
            bridge: self.bridge.clone(),
            fd,
        }))
    }

    fn rename(&self, from: &str, to: &str) -> Result<(), FsError> {
        Ok(self.bridge.rename(from, to)?)
    }

    fn remove(&self, path: &str) -> Result<(), FsError> {
        Ok(self.bridge.remove(path)?)
    }
}

struct BridgeFile {
    bridge: Arc<Bridge>,
    fd: u64,
}

impl HostFile for BridgeFile {
    fn read_at(&self, offset: u64, len: u32) -> Result<Vec<u8>, FsError> {
        Ok(self.bridge.read(self.fd, offset, len)?)
    }

    fn write_at(&self, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let n = self.bridge.write(self.fd, offset, data.to_vec())?;
        if n as usize != data.len() {
            return Err(FsError::Host {
                op: "pwrite64",
                errno: 5,
            });
        }
        Ok(())
    }

    fn flush(&self) -> Result<(), FsError> {
        Ok(self.bridge.flush(self.fd)?)
    }

    fn len(&self) -> Result<u64, FsError> {
        Ok(self.bridge.file_len(self.fd)?)
    }

    fn close(self: Box<Self>) -> Result<(), FsError> {
        Ok(self.bridge.close(self.fd)?)
    }
}
