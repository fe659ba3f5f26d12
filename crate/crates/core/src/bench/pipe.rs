// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use parking_lot::{Condvar, Mutex};

use crate::capmachine::{Capability, Machine};
use crate::commdev::wait_for;
use crate::error::Error;

#[derive(Default)]
struct Ring {
    head: u64,
    len: u64,
}

/// Classical two-copy IPC: the sender copies into an Intravisor-owned ring
/// and the receiver copies out of it.
pub struct PipeChannel {
    id: u64,
    staging: Capability,
    ring: Mutex<Ring>,
    readable: Condvar,
    writable: Condvar,
}

impl PipeChannel {
    pub(crate) fn new(id: u64, staging: Capability) -> Self {
        Self { id, staging, ring: Mutex::default(), readable: Condvar::new(), writable: Condvar::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn capacity(&self) -> u64 {
        self.staging.length()
    }

    pub fn buffered(&self) -> u64 {
        self.ring.lock().len
    }

    /// Copies all `len` bytes at `src.cursor` into the ring, blocking while
    /// it is full.
    pub fn send(&self, m: &Machine, src: &Capability, len: u64) -> Result<u64, Error> {
        let cap = self.capacity();
        let mut done = 0;
        while done < len {
            let (mut r, _) = wait_for(&self.ring, &self.writable, None, |r| r.len < cap);
            let n = (len - done).min(cap - r.len);
            let tail = (r.head + r.len) % cap;
            let first = n.min(cap - tail);
            m.capcpy(&self.staging, tail, src, done, first)?;
            if first < n {
                m.capcpy(&self.staging, 0, src, done + first, n - first)?;
            }
            r.len += n;
            done += n;
            self.readable.notify_all();
        }
        Ok(done)
    }

    /// Copies up to `len` buffered bytes to `dst.cursor`, blocking until at
    /// least one is available.
    pub fn recv(&self, m: &Machine, dst: &Capability, len: u64) -> Result<u64, Error> {
        if len == 0 {
            return Ok(0);
        }
        let cap = self.capacity();
        let (mut r, _) = wait_for(&self.ring, &self.readable, None, |r| r.len > 0);
        let n = len.min(r.len);
        let first = n.min(cap - r.head);
        m.capcpy(dst, 0, &self.staging, r.head, first)?;
        if first < n {
            m.capcpy(dst, first, &self.staging, 0, n - first)?;
        }
        r.head = (r.head + n) % cap;
        r.len -= n;
        self.writable.notify_all();
        Ok(n)
    }
}
