// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! CAP devices: shared state behind CAP_FILE, CAP_CALL and CAP_STREAM.
//!
//! The data paths live in the guest shim (`guestkit::shim`) for files and
//! in the stream hostcalls for streams; this module holds the pieces both
//! sides agree on.

mod stream;

use std::time::Instant;

use parking_lot::{Condvar, Mutex, MutexGuard};

use crate::capmachine::Capability;
use crate::error::Error;

pub use stream::{Posted, StreamChannel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DeviceKind {
    File,
    Call,
    Stream,
}

impl DeviceKind {
    pub fn from_abi(v: u64) -> Option<DeviceKind> {
        use crate::intravisor::hostcall::{KIND_CALL, KIND_FILE, KIND_STREAM};
        match v {
            KIND_FILE => Some(DeviceKind::File),
            KIND_CALL => Some(DeviceKind::Call),
            KIND_STREAM => Some(DeviceKind::Stream),
            _ => None,
        }
    }

    pub fn to_abi(self) -> u64 {
        use crate::intravisor::hostcall::{KIND_CALL, KIND_FILE, KIND_STREAM};
        match self {
            DeviceKind::File => KIND_FILE,
            DeviceKind::Call => KIND_CALL,
            DeviceKind::Stream => KIND_STREAM,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Donor,
    Recipient,
}

/// A cVM's view of one registry entry. Its index doubles as the shim slot
/// number and the `N` in `/dev/cfN`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceBinding {
    pub index: usize,
    pub role: Role,
    pub kind: DeviceKind,
    pub entry: u64,
    pub epoch: u64,
    pub size: u64,
    pub revoked: bool,
}

impl DeviceBinding {
    pub fn path(&self) -> String {
        format!("/dev/cf{}", self.index)
    }
}

/// Donor function reachable through CAP_CALL. The pair is sealed by the
/// Intravisor and never leaves it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CallTarget {
    pub code: Capability,
    pub data: Capability,
    pub program: usize,
    pub func: usize,
}

/// Guest-side handle to a CAP_FILE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FileHandle {
    pub fd: u64,
    pub role: Role,
    pub size: u64,
}

/// Guest-side handle to a CAP_CALL.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CallHandle {
    pub fd: u64,
    pub role: Role,
}

/// Guest-side handle to a CAP_STREAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHandle {
    pub fd: u64,
    pub role: Role,
}

const SPIN_ROUNDS: u32 = 64;

/// Waits until `ready` holds, spinning briefly before parking on `cv`.
/// Returns the guard and whether the deadline passed first.
pub(crate) fn wait_for<'a, T>(
    m: &'a Mutex<T>,
    cv: &Condvar,
    deadline: Option<Instant>,
    mut ready: impl FnMut(&mut T) -> bool,
) -> (MutexGuard<'a, T>, bool) {
    for _ in 0..SPIN_ROUNDS {
        let mut g = m.lock();
        if ready(&mut g) {
            return (g, false);
        }
        drop(g);
        std::thread::yield_now();
    }
    let mut g = m.lock();
    loop {
        if ready(&mut g) {
            return (g, false);
        }
        match deadline {
            Some(d) => {
                if Instant::now() >= d || cv.wait_until(&mut g, d).timed_out() {
                    let ok = ready(&mut g);
                    return (g, !ok);
                }
            }
            None => cv.wait(&mut g),
        }
    }
}

#[derive(Default)]
struct SignalState {
    token: bool,
    revoked: bool,
}

/// Binary semaphore behind `file_wait`/`file_notify`. A notify with nobody
/// waiting leaves one pending token.
#[derive(Default)]
pub struct Signal {
    state: Mutex<SignalState>,
    cv: Condvar,
}

impl Signal {
    pub fn wait(&self) -> Result<(), Error> {
        let (mut g, _) = wait_for(&self.state, &self.cv, None, |s| s.token || s.revoked);
        if g.revoked {
            return Err(Error::Revoked);
        }
        g.token = false;
        Ok(())
    }

    pub fn notify(&self) -> Result<(), Error> {
        let mut g = self.state.lock();
        if g.revoked {
            return Err(Error::Revoked);
        }
        g.token = true;
        self.cv.notify_one();
        Ok(())
    }

    pub fn revoke(&self) {
        self.state.lock().revoked = true;
        self.cv.notify_all();
    }
}
