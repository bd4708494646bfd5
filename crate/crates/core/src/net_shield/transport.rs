// SPDX-License-Identifier: Apache-2.0

//! Byte transports a secure channel can run over.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};

use crate::bridge::Bridge;
use crate::net_shield::NetError;

/// Ordered, reliable byte stream. Confidentiality, integrity, and framing
/// are the channel's job; a transport only moves bytes and reports end of
/// stream.
pub trait Transport: Send {
    fn send_bytes(&mut self, data: &[u8]) -> Result<(), NetError>;

    /// Read exactly `len` bytes, blocking as needed. End of stream before
    /// enough bytes arrive is `ChannelClosed`.
    fn recv_exact(&mut self, len: usize) -> Result<Vec<u8>, NetError>;
}

struct PipeQ {
    chunks: VecDeque<Vec<u8>>,
    closed: bool,
}

struct PipeLane {
    q: Mutex<PipeQ>,
    cv: Condvar,
}

impl PipeLane {
    fn new() -> Arc<PipeLane> {
        Arc::new(PipeLane {
            q: Mutex::new(PipeQ {
                chunks: VecDeque::new(),
                closed: false,
            }),
            cv: Condvar::new(),
        })
    }

    fn push(&self, data: Vec<u8>) -> Result<(), NetError> {
        let mut q = self.q.lock().unwrap();
        if q.closed {
            return Err(NetError::ChannelClosed);
        }
        q.chunks.push_back(data);
        self.cv.notify_all();
        Ok(())
    }

    fn pop(&self) -> Option<Vec<u8>> {
        let mut q = self.q.lock().unwrap();
        loop {
            if let Some(chunk) = q.chunks.pop_front() {
                return Some(chunk);
            }
            if q.closed {
                return None;
            }
            q = self.cv.wait(q).unwrap();
        }
    }

    fn close(&self) {
        self.q.lock().unwrap().closed = true;
        self.cv.notify_all();
    }
}

/// One end of an in-memory duplex pipe.
///
/// Chunk boundaries survive the trip: each `send_bytes` arrives as one
/// chunk, which lets a test interpose on whole frames via `recv_chunk` and
/// `send_bytes`. Dropping an endpoint closes both directions, so the peer
/// sees end of stream rather than hanging.
pub struct SyncPipe {
    tx: Arc<PipeLane>,
    rx: Arc<PipeLane>,
    pending: VecDeque<u8>,
}

/// Create a connected pair of in-memory pipe endpoints.
pub fn sync_pipe() -> (SyncPipe, SyncPipe) {
    let a = PipeLane::new();
    let b = PipeLane::new();
    (
        SyncPipe {
            tx: a.clone(),
            rx: b.clone(),
            pending: VecDeque::new(),
        },
        SyncPipe {
            tx: b,
            rx: a,
            pending: VecDeque::new(),
        },
    )
}

impl SyncPipe {
    /// Take the peer's next chunk whole, blocking until one arrives.
    /// Returns `None` at end of stream.
    pub fn recv_chunk(&mut self) -> Option<Vec<u8>> {
        self.rx.pop()
    }
}

/// On-path observer between the two endpoints of a tapped pipe. Nothing
/// crosses until the tap forwards it, so a test can reorder, alter, drop,
/// or replay whole frames in either direction.
#[derive(Clone)]
pub struct PipeTap {
    from_client: Arc<PipeLane>,
    to_client: Arc<PipeLane>,
    from_server: Arc<PipeLane>,
    to_server: Arc<PipeLane>,
}

/// Create a pipe whose two endpoints are joined only through a tap.
/// Returns (client end, server end, tap).
pub fn tapped_pipe() -> (SyncPipe, SyncPipe, PipeTap) {
    let from_client = PipeLane::new();
    let to_client = PipeLane::new();
    let from_server = PipeLane::new();
    let to_server = PipeLane::new();
    (
        SyncPipe {
            tx: from_client.clone(),
            rx: to_client.clone(),
            pending: VecDeque::new(),
        },
        SyncPipe {
            tx: from_server.clone(),
            rx: to_server.clone(),
            pending: VecDeque::new(),
        },
        PipeTap {
            from_client,
            to_client,
            from_server,
            to_server,
        },
    )
}

impl PipeTap {
    /// Next frame the client sent, blocking. `None` once the client is gone.
    pub fn from_client(&self) -> Option<Vec<u8>> {
        self.from_client.pop()
    }

    /// Next frame the server sent, blocking. `None` once the server is gone.
    pub fn from_server(&self) -> Option<Vec<u8>> {
        self.from_server.pop()
    }

    pub fn to_server(&self, frame: &[u8]) -> Result<(), NetError> {
        self.to_server.push(frame.to_vec())
    }

    pub fn to_client(&self, frame: &[u8]) -> Result<(), NetError> {
        self.to_client.push(frame.to_vec())
    }

    pub fn close_to_server(&self) {
        self.to_server.close();
    }

    pub fn close_to_client(&self) {
        self.to_client.close();
    }
}

impl Transport for SyncPipe {
    fn send_bytes(&mut self, data: &[u8]) -> Result<(), NetError> {
        self.tx.push(data.to_vec())
    }

    fn recv_exact(&mut self, len: usize) -> Result<Vec<u8>, NetError> {
        while self.pending.len() < len {
            match self.rx.pop() {
                Some(chunk) => self.pending.extend(chunk),
                None => return Err(NetError::ChannelClosed),
            }
        }
        Ok(self.pending.drain(..len).collect())
    }
}

impl Drop for SyncPipe {
    fn drop(&mut self) {
        self.tx.close();
        self.rx.close();
    }
}

/// Transport over a connected bridge socket, for channels between
/// scheduled threads and the outside world.
pub struct BridgeTransport {
    bridge: Arc<Bridge>,
    sock: u64,
    pending: VecDeque<u8>,
}

impl BridgeTransport {
    pub fn new(bridge: Arc<Bridge>, sock: u64) -> BridgeTransport {
        BridgeTransport {
            bridge,
            sock,
            pending: VecDeque::new(),
        }
    }
}

impl Transport for BridgeTransport {
    fn send_bytes(&mut self, data: &[u8]) -> Result<(), NetError> {
        let sent = self
            .bridge
            .tcp_send(self.sock, data.to_vec())
            .map_err(|e| NetError::Transport(e.to_string()))?;
        if sent as usize != data.len() {
            return Err(NetError::Transport(format!(
                "short send: {sent} of {}",
                data.len()
            )));
        }
        Ok(())
    }

    fn recv_exact(&mut self, len: usize) -> Result<Vec<u8>, NetError> {
        while self.pending.len() < len {
            let want = (len - self.pending.len()).min(16 * 1024) as u32;
            let chunk = self
                .bridge
                .tcp_recv(self.sock, want)
                .map_err(|e| NetError::Transport(e.to_string()))?;
            if chunk.is_empty() {
                return Err(NetError::ChannelClosed);
            }
            self.pending.extend(chunk);
        }
        Ok(self.pending.drain(..len).collect())
    }
}

impl Drop for BridgeTransport {
    fn drop(&mut self) {
        let _ = self.bridge.tcp_shutdown(self.sock);
    }
}
