// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rustc_hash::FxHashSet;

use crate::capmachine::Capability;
use crate::error::Error;

use super::wait_for;

/// A receive buffer registered with `stream_recv`.
#[derive(Clone, Copy, Debug)]
pub struct Posted {
    pub id: u64,
    /// WRITE-only capability to the receiver's buffer.
    pub dst: Capability,
}

#[derive(Default)]
struct State {
    posted: VecDeque<Posted>,
    completed: VecDeque<(u64, u64)>,
    /// Ids posted or completed but not yet returned by a poll.
    live_ids: FxHashSet<u64>,
    revoked: bool,
}

/// Queues of one CAP_STREAM. Senders pop posted buffers, receivers drain
/// completions.
pub struct StreamChannel {
    state: Mutex<State>,
    posted_cv: Condvar,
    completed_cv: Condvar,
    nonblocking: bool,
    lineage: u32,
}

impl StreamChannel {
    pub(crate) fn new(nonblocking: bool, lineage: u32) -> Self {
        Self {
            state: Mutex::default(),
            posted_cv: Condvar::new(),
            completed_cv: Condvar::new(),
            nonblocking,
            lineage,
        }
    }

    pub fn nonblocking(&self) -> bool {
        self.nonblocking
    }

    /// Lineage carried by every posted buffer capability.
    pub(crate) fn lineage(&self) -> u32 {
        self.lineage
    }

    pub fn post(&self, id: u64, dst: Capability) -> Result<(), Error> {
        let mut s = self.state.lock();
        if s.revoked {
            return Err(Error::Revoked);
        }
        if !s.live_ids.insert(id) {
            return Err(Error::DuplicateId);
        }
        s.posted.push_back(Posted { id, dst });
        self.posted_cv.notify_one();
        Ok(())
    }

    /// Atomically removes one posted buffer, blocking unless the channel is
    /// non-blocking.
    pub fn take(&self) -> Result<Posted, Error> {
        let mut s = if self.nonblocking {
            self.state.lock()
        } else {
            wait_for(&self.state, &self.posted_cv, None, |s| s.revoked || !s.posted.is_empty()).0
        };
        if s.revoked {
            return Err(Error::Revoked);
        }
        s.posted.pop_front().ok_or(Error::WouldBlock)
    }

    /// Puts a taken buffer back after a failed copy so its id is not lost.
    pub(crate) fn untake(&self, p: Posted) {
        let mut s = self.state.lock();
        if !s.revoked {
            s.posted.push_front(p);
            self.posted_cv.notify_one();
        }
    }

    pub fn complete(&self, id: u64, n: u64) {
        let mut s = self.state.lock();
        s.completed.push_back((id, n));
        self.completed_cv.notify_all();
    }

    /// Drains up to `max` completions, waiting up to `timeout` (forever if
    /// `None`) for the first one.
    pub fn poll(&self, max: usize, timeout: Option<Duration>) -> Result<Vec<(u64, u64)>, Error> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let (mut s, timed_out) =
            wait_for(&self.state, &self.completed_cv, deadline, |s| s.revoked || !s.completed.is_empty());
        if s.revoked {
            return Err(Error::Revoked);
        }
        if timed_out {
            return Err(Error::Timeout);
        }
        let n = s.completed.len().min(max.max(1));
        let out: Vec<(u64, u64)> = s.completed.drain(..n).collect();
        for (id, _) in &out {
            s.live_ids.remove(id);
        }
        Ok(out)
    }

    pub fn posted_depth(&self) -> usize {
        self.state.lock().posted.len()
    }

    pub fn is_revoked(&self) -> bool {
        self.state.lock().revoked
    }

    /// Drops all queued buffers and releases every blocked sender and
    /// poller with `Revoked`.
    pub fn revoke(&self) {
        let mut s = self.state.lock();
        s.revoked = true;
        s.posted.clear();
        s.completed.clear();
        s.live_ids.clear();
        self.posted_cv.notify_all();
        self.completed_cv.notify_all();
    }
}
