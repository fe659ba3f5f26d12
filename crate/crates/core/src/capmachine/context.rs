// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use super::capability::{CapFault, Capability, FaultKind};

/// Number of capability registers, including the null register `c0`.
pub const NUM_CREGS: usize = 32;
/// `ct6` / `c31`: receives the unsealed data capability of a `cinvoke`.
pub const CT6: usize = 31;

/// Identifier of a compartment. `0` is the Intravisor itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CvmId(pub u32);

impl CvmId {
    pub const MONITOR: CvmId = CvmId(0);
}

impl std::fmt::Display for CvmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cvm{}", self.0)
    }
}

/// Integer registers visible to the hostcall and syscall ABIs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntRegs {
    pub a: [u64; 6],
    pub t0: u64,
    pub tp: u64,
}

/// Which capability authorizes a memory access.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Auth {
    /// Implicit authority of capability-unaware (hybrid) code.
    Ddc,
    Pcc,
    /// An explicitly named capability register.
    Reg(usize),
}

/// Register file of one execution context inside a compartment.
#[derive(Clone, Debug)]
pub struct CompartmentContext {
    pcc: Capability,
    ddc: Capability,
    cregs: [Capability; NUM_CREGS],
    pub iregs: IntRegs,
    owner: CvmId,
    transitions: u64,
}

impl CompartmentContext {
    pub fn new(owner: CvmId, pcc: Capability, ddc: Capability) -> Self {
        Self {
            pcc,
            ddc,
            cregs: [Capability::NULL; NUM_CREGS],
            iregs: IntRegs::default(),
            owner,
            transitions: 0,
        }
    }

    pub fn pcc(&self) -> Capability {
        self.pcc
    }

    pub fn ddc(&self) -> Capability {
        self.ddc
    }

    pub fn owner(&self) -> CvmId {
        self.owner
    }

    /// Successful `cinvoke`s executed on this context.
    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn creg(&self, idx: usize) -> Capability {
        self.cregs.get(idx).copied().unwrap_or(Capability::NULL)
    }

    pub fn ct6(&self) -> Capability {
        self.cregs[CT6]
    }

    /// Writes a general-purpose capability register. `c0` is hard-wired to
    /// null and `ct6` is only written by `cinvoke`.
    pub fn set_creg(&mut self, idx: usize, cap: Capability) -> Result<(), CapFault> {
        if idx == 0 || idx >= CT6 {
            return Err(CapFault::new(
                FaultKind::Perm,
                format!("capability register c{idx} is not writable"),
            ));
        }
        self.cregs[idx] = cap;
        Ok(())
    }

    /// Replaces `ddc`. The new value must be a tagged, unsealed capability.
    pub fn install_ddc(&mut self, cap: Capability) -> Result<(), CapFault> {
        if !cap.tag() {
            return Err(CapFault::new(FaultKind::Tag, "ddc must be tagged"));
        }
        if cap.is_sealed() {
            return Err(CapFault::new(FaultKind::SealedImmutable, "ddc must be unsealed"));
        }
        self.ddc = cap;
        Ok(())
    }

    pub(crate) fn auth(&self, auth: Auth) -> Result<Capability, CapFault> {
        match auth {
            Auth::Ddc => Ok(self.ddc),
            Auth::Pcc => Ok(self.pcc),
            Auth::Reg(i) if i < NUM_CREGS => Ok(self.cregs[i]),
            Auth::Reg(i) => Err(CapFault::new(FaultKind::Perm, format!("no register c{i}"))),
        }
    }

    pub(crate) fn enter(&mut self, pcc: Capability, ct6: Capability) {
        self.pcc = pcc;
        self.cregs[CT6] = ct6;
        self.transitions += 1;
    }

    pub(crate) fn put_creg(&mut self, idx: usize, cap: Capability) {
        self.cregs[idx] = cap;
    }

    /// Clears every tag in `c{from}..=c{to}`.
    pub(crate) fn scrub(&mut self, from: usize, to: usize) {
        for c in &mut self.cregs[from..=to] {
            *c = Capability::NULL;
        }
    }

    pub(crate) fn set_pcc(&mut self, pcc: Capability) {
        self.pcc = pcc;
    }

    /// Iterator over every tagged capability held in the register file.
    pub fn tagged_cregs(&self) -> impl Iterator<Item = (usize, Capability)> + '_ {
        self.cregs.iter().enumerate().filter(|(_, c)| c.tag()).map(|(i, c)| (i, *c))
    }
}
