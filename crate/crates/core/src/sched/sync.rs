// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;
use std::ops::{Deref, DerefMut};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::sched::{Scheduler, WaitQueue};

struct GmState<T> {
    flag: Mutex<bool>,
    wq: WaitQueue,
    data: Mutex<T>,
}

/// Mutex for scheduled threads.
///
/// Contended locks park the caller on a wait queue instead of blocking the
/// OS thread, and the guard may be held across yields and sleeps; that is
/// what produces lock contention in the wait profile. The inner std mutex
/// only carries the data and is never contended, because threads reach it
/// one at a time by construction.
pub struct GreenMutex<T> {
    inner: Arc<GmState<T>>,
}

impl<T> Clone for GreenMutex<T> {
    fn clone(&self) -> Self {
        GreenMutex {
            inner: self.inner.clone(),
        }
    }
}

impl<T> GreenMutex<T> {
    pub fn new(sched: &Scheduler, value: T) -> Self {
        GreenMutex {
            inner: Arc::new(GmState {
                flag: Mutex::new(false),
                wq: sched.wait_queue(),
                data: Mutex::new(value),
            }),
        }
    }

    pub fn lock(&self) -> GreenMutexGuard<'_, T> {
        loop {
            {
                let mut flag = self.inner.flag.lock().unwrap();
                if !*flag {
                    *flag = true;
                    break;
                }
            }
            self.inner.wq.wait();
        }
        GreenMutexGuard {
            state: &self.inner,
            data: self
                .inner
                .data
                .try_lock()
                .expect("green mutex data contended despite lock flag"),
        }
    }
}

pub struct GreenMutexGuard<'a, T> {
    state: &'a GmState<T>,
    data: MutexGuard<'a, T>,
}

impl<T> Deref for GreenMutexGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.data
    }
}

impl<T> DerefMut for GreenMutexGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.data
    }
}

impl<T> Drop for GreenMutexGuard<'_, T> {
    fn drop(&mut self) {
        *self.state.flag.lock().unwrap() = false;
        self.state.wq.wake_one();
    }
}

struct ChanQ<T> {
    items: VecDeque<T>,
    closed: bool,
}

struct BcState<T> {
    q: Mutex<ChanQ<T>>,
    capacity: usize,
    not_empty: WaitQueue,
    not_full: WaitQueue,
}

/// Bounded FIFO channel for scheduled threads.
///
/// A full channel parks producers and an empty one parks consumers, so a
/// fast producer feeding a slow consumer spends its life waiting, exactly
/// like a blocking pipe.
pub struct BoundedChannel<T> {
    inner: Arc<BcState<T>>,
}

impl<T> Clone for BoundedChannel<T> {
    fn clone(&self) -> Self {
        BoundedChannel {
            inner: self.inner.clone(),
        }
    }
}

impl<T> BoundedChannel<T> {
    pub fn new(sched: &Scheduler, capacity: usize) -> Self {
        assert!(capacity >= 1, "channel capacity must be at least 1");
        BoundedChannel {
            inner: Arc::new(BcState {
                q: Mutex::new(ChanQ {
                    items: VecDeque::new(),
                    closed: false,
                }),
                capacity,
                not_empty: sched.wait_queue(),
                not_full: sched.wait_queue(),
            }),
        }
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.q.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.inner.q.lock().unwrap().closed
    }

    /// Append an item, blocking while the channel is full. A closed
    /// channel refuses the item and hands it back.
    pub fn push(&self, value: T) -> Result<(), T> {
        let mut slot = Some(value);
        loop {
            {
                let mut q = self.inner.q.lock().unwrap();
                if q.closed {
                    return Err(slot.take().unwrap());
                }
                if q.items.len() < self.inner.capacity {
                    q.items.push_back(slot.take().unwrap());
                    drop(q);
                    self.inner.not_empty.wake_one();
                    return Ok(());
                }
            }
            self.inner.not_full.wait();
        }
    }

    /// Take the oldest item, blocking while the channel is empty. Returns
    /// `None` once the channel is closed and drained.
    pub fn pop(&self) -> Option<T> {
        loop {
            {
                let mut q = self.inner.q.lock().unwrap();
                if let Some(v) = q.items.pop_front() {
                    drop(q);
                    self.inner.not_full.wake_one();
                    return Some(v);
                }
                if q.closed {
                    return None;
                }
            }
            self.inner.not_empty.wait();
        }
    }

    /// Close the channel, waking every parked producer and consumer.
    pub fn close(&self) {
        self.inner.q.lock().unwrap().closed = true;
        self.inner.not_empty.wake_all();
        self.inner.not_full.wake_all();
    }
}
