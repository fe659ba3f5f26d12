// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Address-space layout of the monitor and of each cVM region.
//!
//! ```text
//! cVM region
//!   +0        Affix (MON_DDC, RET, OCALL)
//!   +1 page   code page (entry addresses)
//!   +2 pages  shim: binding slots, then a libOS scratch page
//!   +4 pages  main stack, thread stack pool
//!   ...       one sub-region per program: affix page, TLS pages, heap
//! ```

use crate::capmachine::GRANULE;

use super::config::DeploymentConfig;

pub const PAGE: u64 = 4096;

/// Size of the monitor's own region at the bottom of the address space.
pub const MONITOR_SIZE: u64 = 16 * PAGE;
pub const MONITOR_CODE: u64 = 0;
pub const MONITOR_CODE_LEN: u64 = PAGE;
/// Entry address of the hostcall gate.
pub const OCALL_ENTRY: u64 = 0x100;
/// Entry address reached when a cVM thread returns to the Intravisor.
pub const RET_ENTRY: u64 = 0x110;
pub const MONITOR_DATA: u64 = PAGE;

/// Affix slot offsets.
pub const AFFIX_MON_DDC: u64 = 0;
pub const AFFIX_RET: u64 = 16;
pub const AFFIX_OCALL: u64 = 32;

/// Program affix slot offsets: syscall pair and program-return pair.
pub const PROG_SYSCALL_CODE: u64 = 0;
pub const PROG_SYSCALL_DATA: u64 = 16;
pub const PROG_RET_CODE: u64 = 32;
pub const PROG_RET_DATA: u64 = 48;

pub const MAX_PROGRAMS: usize = 4;
pub const MAX_FUNCS: usize = 32;
pub const MAX_BINDINGS: usize = (PAGE / GRANULE) as usize;

/// Bytes per thread-local area: a scratch page and a call-argument page.
pub const TLS_SIZE: u64 = 2 * PAGE;
/// Largest argument a CAP_CALL can carry.
pub const ARG_MAX: u64 = PAGE;

const ENTRY_OFF: u64 = 0x00;
const SYSCALL_OFF: u64 = 0x10;
const HOSTCALL_RETURN_OFF: u64 = 0x20;
const PROG_RETURN_OFF: u64 = 0x100;
const FUNC_OFF: u64 = 0x200;

pub fn round_up(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

/// One program's sub-region inside a cVM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramLayout {
    pub base: u64,
    pub len: u64,
    pub tls: u64,
    pub tls_count: usize,
    pub heap: u64,
    pub heap_len: u64,
}

impl ProgramLayout {
    pub fn affix(&self) -> u64 {
        self.base
    }

    /// Thread-local area for stack slot `slot` (0 = main stack).
    pub fn tls_for(&self, slot: usize) -> u64 {
        self.tls + slot as u64 * TLS_SIZE
    }

    /// Argument page for calls running on stack slot `slot`.
    pub fn arg_page(&self, slot: usize) -> u64 {
        self.tls_for(slot) + PAGE
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|e| e <= self.base + self.len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CvmLayout {
    pub base: u64,
    pub len: u64,
    pub main_stack: (u64, u64),
    pub stacks: Vec<(u64, u64)>,
    pub programs: Vec<ProgramLayout>,
}

impl CvmLayout {
    /// Computes the layout of a region starting at `base`.
    pub fn compute(base: u64, cfg: &DeploymentConfig) -> CvmLayout {
        let stack = round_up(cfg.stack_size, PAGE);
        let mut at = base + 4 * PAGE;
        let main_stack = (at, stack);
        at += stack;
        let stacks = (0..cfg.stack_count).map(|i| (at + i as u64 * stack, stack)).collect();
        at += stack * cfg.stack_count as u64;
        let heap_len = round_up(cfg.heap_size, PAGE);
        let tls_count = cfg.stack_count + 1;
        let programs = cfg
            .programs
            .iter()
            .map(|_| {
                let p = at;
                let tls = p + PAGE;
                let heap = tls + TLS_SIZE * tls_count as u64;
                at = heap + heap_len;
                ProgramLayout { base: p, len: at - p, tls, tls_count, heap, heap_len }
            })
            .collect();
        CvmLayout { base, len: at - base, main_stack, stacks, programs }
    }

    /// Total bytes a config needs.
    pub fn size_for(cfg: &DeploymentConfig) -> u64 {
        Self::compute(0, cfg).len
    }

    pub fn affix(&self) -> u64 {
        self.base
    }

    pub fn code(&self) -> u64 {
        self.base + PAGE
    }

    pub fn shim(&self) -> u64 {
        self.base + 2 * PAGE
    }

    pub fn shim_len(&self) -> u64 {
        2 * PAGE
    }

    /// Capability slot of binding `idx`.
    pub fn slot(&self, idx: usize) -> u64 {
        self.shim() + idx as u64 * GRANULE
    }

    pub fn scratch(&self) -> u64 {
        self.shim() + PAGE
    }

    pub fn entry(&self) -> u64 {
        self.code() + ENTRY_OFF
    }

    pub fn syscall_entry(&self) -> u64 {
        self.code() + SYSCALL_OFF
    }

    pub fn hostcall_return(&self) -> u64 {
        self.code() + HOSTCALL_RETURN_OFF
    }

    pub fn program_return(&self, p: usize) -> u64 {
        self.code() + PROG_RETURN_OFF + GRANULE * p as u64
    }

    pub fn func(&self, p: usize, id: usize) -> u64 {
        self.code() + FUNC_OFF + GRANULE * (p * MAX_FUNCS + id) as u64
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|e| e <= self.base + self.len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_ordered_and_disjoint() {
        let cfg = DeploymentConfig::new("a", "x").with_program("y").with_stacks(3, 10_000);
        let l = CvmLayout::compute(0x10000, &cfg);
        assert_eq!(l.main_stack.0, 0x10000 + 4 * PAGE);
        assert_eq!(l.stacks.len(), 3);
        assert_eq!(l.stacks[0].1, 3 * PAGE);
        assert_eq!(l.programs.len(), 2);
        let (a, b) = (&l.programs[0], &l.programs[1]);
        assert_eq!(a.base + a.len, b.base);
        assert_eq!(b.base + b.len, l.base + l.len);
        assert!(l.stacks[2].0 + l.stacks[2].1 <= a.base);
        assert_eq!(a.tls_count, 4);
        assert!(a.contains(a.heap, a.heap_len));
        assert!(!a.contains(b.heap, 1));
        assert!(l.func(MAX_PROGRAMS - 1, MAX_FUNCS - 1) < l.code() + PAGE);
        assert!(l.slot(MAX_BINDINGS - 1) < l.scratch());
    }
}
