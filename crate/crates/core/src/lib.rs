// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! A software model of capability-confined virtual machines (cVMs).
//!
//! [`capmachine`] models tagged memory and capabilities. [`intravisor`] is
//! the monitor that carves cVMs out of one address space and serves their
//! hostcalls. [`commdev`] holds the shared-memory devices that cVMs use to
//! talk to each other. [`guestkit`] is the code that runs inside a cVM, and
//! [`bench`] measures transfers.

pub mod bench;
pub mod capmachine;
pub mod commdev;
pub mod error;
pub mod guestkit;
pub mod intravisor;

pub use capmachine::{Capability, CvmId, FaultKind, Machine, Perms};
pub use error::Error;
pub use guestkit::Guest;
pub use intravisor::{DeploymentConfig, ExitStatus, Intravisor};
