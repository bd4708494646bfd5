// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::os::unix::fs::FileExt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::bridge::{HostCall, HostResult};

/// Untrusted executor of host calls.
///
/// Implementations live conceptually outside the enclave: nothing they
/// return is believed until it passes the boundary checks.
pub trait HostBackend: Send + Sync {
    fn execute(&self, call: &HostCall) -> HostResult;
}

enum SockEntry {
    Stream(TcpStream),
    Listener(TcpListener),
}

/// Real host I/O over the operating system.
pub struct OsBackend {
    files: Mutex<HashMap<u64, File>>,
    socks: Mutex<HashMap<u64, SockEntry>>,
    next_handle: AtomicU64,
}

impl Default for OsBackend {
    fn default() -> Self {
        OsBackend {
            files: Mutex::new(HashMap::new()),
            socks: Mutex::new(HashMap::new()),
            next_handle: AtomicU64::new(3),
        }
    }
}

fn errno_of(e: &std::io::Error) -> i32 {
    e.raw_os_error().unwrap_or(libc_eio())
}

fn libc_eio() -> i32 {
    5
}

const EBADF: i32 = 9;

impl OsBackend {
    fn handle(&self) -> u64 {
        self.next_handle.fetch_add(1, Ordering::Relaxed)
    }

    fn stream(&self, sock: u64) -> Result<TcpStream, i32> {
        let socks = self.socks.lock().unwrap();
        match socks.get(&sock) {
            Some(SockEntry::Stream(s)) => s.try_clone().map_err(|e| errno_of(&e)),
            _ => Err(EBADF),
        }
    }

    fn listener(&self, sock: u64) -> Result<TcpListener, i32> {
        let socks = self.socks.lock().unwrap();
        match socks.get(&sock) {
            Some(SockEntry::Listener(l)) => l.try_clone().map_err(|e| errno_of(&e)),
            _ => Err(EBADF),
        }
    }

    fn with_file<R>(&self, fd: u64, f: impl FnOnce(&File) -> std::io::Result<R>) -> Result<R, i32> {
        let files = self.files.lock().unwrap();
        let file = files.get(&fd).ok_or(EBADF)?;
        f(file).map_err(|e| errno_of(&e))
    }
}

impl HostBackend for OsBackend {
    fn execute(&self, call: &HostCall) -> HostResult {
        match call {
            HostCall::Open { path, create, write } => {
                let opened = OpenOptions::new()
                    .read(true)
                    .write(*write || *create)
                    .create(*create)
                    .truncate(false)
                    .open(path);
                match opened {
                    Ok(f) => {
                        let fd = self.handle();
                        self.files.lock().unwrap().insert(fd, f);
                        HostResult::Fd(fd)
                    }
                    Err(e) => HostResult::Err(errno_of(&e)),
                }
            }
            HostCall::Read { fd, offset, len } => {
                let r = self.with_file(*fd, |file| {
                    let mut buf = vec![0u8; *len as usize];
                    let mut filled = 0usize;
                    while filled < buf.len() {
                        match file.read_at(&mut buf[filled..], offset + filled as u64) {
                            Ok(0) => break,
                            Ok(n) => filled += n,
                            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    buf.truncate(filled);
                    Ok(buf)
                });
                match r {
                    Ok(buf) => HostResult::Bytes(buf),
                    Err(errno) => HostResult::Err(errno),
                }
            }
            HostCall::Write { fd, offset, data } => {
                match self.with_file(*fd, |file| file.write_all_at(data, *offset)) {
                    Ok(()) => HostResult::Written(data.len() as u32),
                    Err(errno) => HostResult::Err(errno),
                }
            }
            HostCall::Flush { fd } => match self.with_file(*fd, |file| file.sync_all()) {
                Ok(()) => HostResult::Unit,
                Err(errno) => HostResult::Err(errno),
            },
            HostCall::FileLen { fd } => {
                match self.with_file(*fd, |file| file.metadata().map(|m| m.len())) {
                    Ok(n) => HostResult::Len(n),
                    Err(errno) => HostResult::Err(errno),
                }
            }
            HostCall::Close { fd } => match self.files.lock().unwrap().remove(fd) {
                Some(_) => HostResult::Unit,
                None => HostResult::Err(EBADF),
            },
            HostCall::Rename { from, to } => match std::fs::rename(from, to) {
                Ok(()) => HostResult::Unit,
                Err(e) => HostResult::Err(errno_of(&e)),
            },
            HostCall::Remove { path } => match std::fs::remove_file(path) {
                Ok(()) => HostResult::Unit,
                Err(e) => HostResult::Err(errno_of(&e)),
            },
            HostCall::TcpListen { addr } => match TcpListener::bind(addr) {
                Ok(l) => {
                    let local = l
                        .local_addr()
                        .map(|a| a.to_string())
                        .unwrap_or_default();
                    let sock = self.handle();
                    self.socks.lock().unwrap().insert(sock, SockEntry::Listener(l));
                    HostResult::SockAddr(sock, local)
                }
                Err(e) => HostResult::Err(errno_of(&e)),
            },
            HostCall::TcpConnect { addr } => match TcpStream::connect(addr) {
                Ok(s) => {
                    let sock = self.handle();
                    self.socks.lock().unwrap().insert(sock, SockEntry::Stream(s));
                    HostResult::Sock(sock)
                }
                Err(e) => HostResult::Err(errno_of(&e)),
            },
            HostCall::TcpAccept { sock } => {
                let listener = match self.listener(*sock) {
                    Ok(l) => l,
                    Err(errno) => return HostResult::Err(errno),
                };
                match listener.accept() {
                    Ok((s, _)) => {
                        let h = self.handle();
                        self.socks.lock().unwrap().insert(h, SockEntry::Stream(s));
                        HostResult::Sock(h)
                    }
                    Err(e) => HostResult::Err(errno_of(&e)),
                }
            }
            HostCall::TcpSend { sock, data } => {
                let mut stream = match self.stream(*sock) {
                    Ok(s) => s,
                    Err(errno) => return HostResult::Err(errno),
                };
                match stream.write_all(data) {
                    Ok(()) => HostResult::Written(data.len() as u32),
                    Err(e) => HostResult::Err(errno_of(&e)),
                }
            }
            HostCall::TcpRecv { sock, max } => {
                let mut stream = match self.stream(*sock) {
                    Ok(s) => s,
                    Err(errno) => return HostResult::Err(errno),
                };
                let mut buf = vec![0u8; *max as usize];
                match stream.read(&mut buf) {
                    Ok(n) => {
                        buf.truncate(n);
                        HostResult::Bytes(buf)
                    }
                    Err(e) => HostResult::Err(errno_of(&e)),
                }
            }
            HostCall::TcpShutdown { sock } => {
                let entry = self.socks.lock().unwrap().remove(sock);
                match entry {
                    Some(SockEntry::Stream(s)) => {
                        let _ = s.shutdown(Shutdown::Both);
                        HostResult::Unit
                    }
                    Some(SockEntry::Listener(_)) => HostResult::Unit,
                    None => HostResult::Err(EBADF),
                }
            }
        }
    }
}
