// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::capmachine::{CapFault, FaultKind};

/// Errors surfaced by the Intravisor, the CAP devices and the guest ABI.
///
/// Across the guest ABI every error travels as a negative integer in `a0`
/// (see [`Error::code`]); fault details do not survive that trip.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Error {
    #[error(transparent)]
    Fault(#[from] CapFault),
    #[error("unknown hostcall {0}")]
    BadHostcall(u64),
    #[error("unknown system call {0}")]
    Enosys(u64),
    #[error("no such key")]
    NoSuchKey,
    #[error("access denied")]
    AccessDenied,
    #[error("revoked")]
    Revoked,
    #[error("duplicate key")]
    DuplicateKey,
    #[error("range not owned by caller")]
    RangeNotOwned,
    #[error("caller does not own the entry")]
    NotOwner,
    #[error("thread stack pool exhausted")]
    StackPoolExhausted,
    #[error("operation would block")]
    WouldBlock,
    #[error("timed out")]
    Timeout,
    #[error("duplicate buffer id")]
    DuplicateId,
    #[error("callee faulted")]
    CalleeFault,
    #[error("function not exported")]
    UnknownFunc,
    #[error("no such handle")]
    NoSuchHandle,
    #[error("bad file descriptor")]
    BadFd,
    #[error("invalid argument")]
    InvalidArgument,
    #[error("unknown program `{0}`")]
    UnknownProgram(String),
    #[error("address space exhausted")]
    OutOfSpace,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("size exceeds configured heap")]
    SizeTooLarge,
    #[error("no entry point at {0:#x}")]
    NoEntry(u64),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

const FAULT_BASE: i64 = 100;

fn fault_index(kind: FaultKind) -> i64 {
    match kind {
        FaultKind::Tag => 0,
        FaultKind::Bounds => 1,
        FaultKind::Perm => 2,
        FaultKind::SealMismatch => 3,
        FaultKind::SealedImmutable => 4,
        FaultKind::Monotonicity => 5,
        FaultKind::Alignment => 6,
    }
}

const FAULT_KINDS: [FaultKind; 7] = [
    FaultKind::Tag,
    FaultKind::Bounds,
    FaultKind::Perm,
    FaultKind::SealMismatch,
    FaultKind::SealedImmutable,
    FaultKind::Monotonicity,
    FaultKind::Alignment,
];

impl Error {
    /// Negative ABI code for this error.
    pub fn code(&self) -> i64 {
        let c = match self {
            Error::Fault(f) => FAULT_BASE + fault_index(f.kind),
            Error::BadHostcall(_) => 1,
            Error::Enosys(_) => 2,
            Error::NoSuchKey => 3,
            Error::AccessDenied => 4,
            Error::Revoked => 5,
            Error::DuplicateKey => 6,
            Error::RangeNotOwned => 7,
            Error::NotOwner => 8,
            Error::StackPoolExhausted => 9,
            Error::WouldBlock => 10,
            Error::Timeout => 11,
            Error::DuplicateId => 12,
            Error::CalleeFault => 13,
            Error::UnknownFunc => 14,
            Error::NoSuchHandle => 15,
            Error::BadFd => 16,
            Error::InvalidArgument => 17,
            Error::UnknownProgram(_) => 18,
            Error::OutOfSpace => 19,
            Error::ConfigInvalid(_) => 20,
            Error::SizeTooLarge => 21,
            Error::NoEntry(_) => 22,
            Error::Io(_) => 23,
        };
        -c
    }

    /// Decodes a negative ABI value. Non-negative values are not errors.
    pub fn from_code(code: i64) -> Option<Error> {
        if code >= 0 {
            return None;
        }
        let c = -code;
        if (FAULT_BASE..FAULT_BASE + FAULT_KINDS.len() as i64).contains(&c) {
            let kind = FAULT_KINDS[(c - FAULT_BASE) as usize];
            return Some(Error::Fault(CapFault::new(kind, "reported by callee")));
        }
        Some(match c {
            1 => Error::BadHostcall(0),
            2 => Error::Enosys(0),
            3 => Error::NoSuchKey,
            4 => Error::AccessDenied,
            5 => Error::Revoked,
            6 => Error::DuplicateKey,
            7 => Error::RangeNotOwned,
            8 => Error::NotOwner,
            9 => Error::StackPoolExhausted,
            10 => Error::WouldBlock,
            11 => Error::Timeout,
            12 => Error::DuplicateId,
            13 => Error::CalleeFault,
            14 => Error::UnknownFunc,
            15 => Error::NoSuchHandle,
            16 => Error::BadFd,
            18 => Error::UnknownProgram(String::new()),
            19 => Error::OutOfSpace,
            20 => Error::ConfigInvalid(String::new()),
            21 => Error::SizeTooLarge,
            22 => Error::NoEntry(0),
            23 => Error::Io(String::new()),
            _ => Error::InvalidArgument,
        })
    }

    /// The fault kind, if this error is a capability fault.
    pub fn fault_kind(&self) -> Option<FaultKind> {
        match self {
            Error::Fault(f) => Some(f.kind),
            _ => None,
        }
    }

    /// Equality that ignores payloads (fault details, hostcall numbers).
    pub fn same_kind(&self, other: &Error) -> bool {
        self.code() == other.code()
    }
}

/// Encodes a hostcall or syscall result into `a0`.
pub fn to_abi(r: Result<i64, Error>) -> i64 {
    match r {
        Ok(v) => v,
        Err(e) => e.code(),
    }
}

/// Decodes `a0` back into a result.
pub fn from_abi(v: i64) -> Result<i64, Error> {
    match Error::from_code(v) {
        Some(e) => Err(e),
        None => Ok(v),
    }
}
