// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use bitflags::bitflags;
use thiserror::Error;

/// Largest object type a capability can be sealed with (24-bit otype space).
pub const OTYPE_MAX: u32 = (1 << 24) - 1;

bitflags! {
    /// Permission bits carried by a capability.
    #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
    pub struct Perms: u8 {
        const READ = 1 << 0;
        const WRITE = 1 << 1;
        const EXEC = 1 << 2;
        const LOAD_CAP = 1 << 3;
        /// Also known as CAP_STORE / PERMIT_STORE_CAP.
        const STORE_CAP = 1 << 4;
        const SEAL = 1 << 5;
        const UNSEAL = 1 << 6;
    }
}

impl Perms {
    /// Permissions that the Intravisor never hands to a compartment.
    pub const PRIVILEGED: Perms = Perms::STORE_CAP.union(Perms::SEAL).union(Perms::UNSEAL);
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |p: Perms, c: char| if self.contains(p) { c } else { '-' };
        write!(
            f,
            "{}{}{}{}{}{}{}",
            flag(Perms::READ, 'r'),
            flag(Perms::WRITE, 'w'),
            flag(Perms::EXEC, 'x'),
            flag(Perms::LOAD_CAP, 'L'),
            flag(Perms::STORE_CAP, 'S'),
            flag(Perms::SEAL, 's'),
            flag(Perms::UNSEAL, 'u'),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultKind {
    Tag,
    Bounds,
    Perm,
    SealMismatch,
    SealedImmutable,
    Monotonicity,
    Alignment,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaultKind::Tag => "TAG",
            FaultKind::Bounds => "BOUNDS",
            FaultKind::Perm => "PERM",
            FaultKind::SealMismatch => "SEAL_MISMATCH",
            FaultKind::SealedImmutable => "SEALED_IMMUTABLE",
            FaultKind::Monotonicity => "MONOTONICITY",
            FaultKind::Alignment => "ALIGNMENT",
        };
        f.write_str(s)
    }
}

/// A capability exception. The faulting operation has not changed any
/// memory or register state.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub struct CapFault {
    pub kind: FaultKind,
    pub detail: String,
}

impl fmt::Display for CapFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.detail.is_empty() {
            write!(f, "{} fault", self.kind)
        } else {
            write!(f, "{} fault: {}", self.kind, self.detail)
        }
    }
}

impl CapFault {
    pub fn new(kind: FaultKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }
}

/// An uncompressed CHERI-style capability.
///
/// Fields are private: the only ways to obtain a tagged capability are the
/// machine's root capability and derivation from an existing one, so
/// provenance holds by construction. `lineage` records which revocable
/// grant (if any) a capability descends from; the machine refuses to
/// dereference capabilities whose lineage has been revoked, which models
/// the register file being cleared on the next context switch.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Capability {
    tag: bool,
    base: u64,
    length: u64,
    cursor: u64,
    perms: Perms,
    otype: Option<u32>,
    lineage: u32,
}

impl Default for Capability {
    fn default() -> Self {
        Self::NULL
    }
}

impl fmt::Debug for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = if self.tag { '*' } else { ' ' };
        write!(
            f,
            "[{t}] {:#x} in {:#x}..{:#x} {}",
            self.cursor,
            self.base,
            self.base.wrapping_add(self.length),
            self.perms
        )?;
        if let Some(o) = self.otype {
            write!(f, " sealed({o})")?;
        }
        if self.lineage != 0 {
            write!(f, " lineage={}", self.lineage)?;
        }
        Ok(())
    }
}

impl Capability {
    /// The untagged all-zero capability.
    pub const NULL: Capability = Capability {
        tag: false,
        base: 0,
        length: 0,
        cursor: 0,
        perms: Perms::empty(),
        otype: None,
        lineage: 0,
    };

    pub(crate) fn root(size: u64) -> Self {
        Capability {
            tag: true,
            base: 0,
            length: size,
            cursor: 0,
            perms: Perms::all(),
            otype: None,
            lineage: 0,
        }
    }

    /// An untagged capability whose only content is an integer address, as
    /// produced by loading a granule that does not hold a valid capability.
    pub(crate) fn from_integer(cursor: u64) -> Self {
        Capability { cursor, ..Self::NULL }
    }

    pub fn tag(&self) -> bool {
        self.tag
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    /// One past the last authorized byte.
    pub fn top(&self) -> u64 {
        self.base + self.length
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn perms(&self) -> Perms {
        self.perms
    }

    pub fn otype(&self) -> Option<u32> {
        self.otype
    }

    pub fn is_sealed(&self) -> bool {
        self.otype.is_some()
    }

    pub(crate) fn lineage(&self) -> u32 {
        self.lineage
    }

    pub(crate) fn with_lineage(mut self, lineage: u32) -> Self {
        self.lineage = lineage;
        self
    }

    /// True when `[addr, addr + len)` lies inside this capability's bounds.
    pub fn covers(&self, addr: u64, len: u64) -> bool {
        match addr.checked_add(len) {
            Some(end) => addr >= self.base && end <= self.top(),
            None => false,
        }
    }

    fn require_mutable(&self, op: &str) -> Result<(), CapFault> {
        if !self.tag {
            return Err(CapFault::new(FaultKind::Tag, format!("{op} on untagged capability")));
        }
        if self.is_sealed() {
            return Err(CapFault::new(FaultKind::SealedImmutable, format!("{op} on sealed capability")));
        }
        Ok(())
    }

    /// Narrows the bounds to `[new_base, new_base + new_len)`. The cursor is
    /// clamped into the new bounds.
    pub fn set_bounds(&self, new_base: u64, new_len: u64) -> Result<Capability, CapFault> {
        self.require_mutable("set_bounds")?;
        if !self.covers(new_base, new_len) {
            return Err(CapFault::new(
                FaultKind::Monotonicity,
                format!("bounds {:#x}+{:#x} exceed {:#x}..{:#x}", new_base, new_len, self.base, self.top()),
            ));
        }
        Ok(Capability {
            base: new_base,
            length: new_len,
            cursor: self.cursor.clamp(new_base, new_base + new_len),
            ..*self
        })
    }

    /// Intersects the permission set with `mask`.
    pub fn and_perms(&self, mask: Perms) -> Result<Capability, CapFault> {
        self.require_mutable("and_perms")?;
        Ok(Capability { perms: self.perms & mask, ..*self })
    }

    /// Moves the cursor. Out-of-bounds cursors are representable; the check
    /// happens when the capability is dereferenced.
    pub fn inc_offset(&self, delta: i64) -> Result<Capability, CapFault> {
        self.require_mutable("inc_offset")?;
        Ok(Capability { cursor: self.cursor.wrapping_add(delta as u64), ..*self })
    }

    /// Convenience for `inc_offset(addr - cursor)`.
    pub fn with_cursor(&self, addr: u64) -> Result<Capability, CapFault> {
        self.inc_offset(addr.wrapping_sub(self.cursor) as i64)
    }

    /// Seals `self` with `otype`, which must fall in the sealer's bounds.
    pub fn seal(&self, sealer: &Capability, otype: u32) -> Result<Capability, CapFault> {
        if !self.tag || !sealer.tag {
            return Err(CapFault::new(FaultKind::Tag, "seal with untagged operand"));
        }
        if self.is_sealed() {
            return Err(CapFault::new(FaultKind::SealedImmutable, "capability already sealed"));
        }
        if sealer.is_sealed() {
            return Err(CapFault::new(FaultKind::SealedImmutable, "sealer is sealed"));
        }
        if !sealer.perms.contains(Perms::SEAL) {
            return Err(CapFault::new(FaultKind::Perm, "sealer lacks SEAL"));
        }
        if otype > OTYPE_MAX || !sealer.covers(otype as u64, 1) {
            return Err(CapFault::new(
                FaultKind::Bounds,
                format!("otype {otype} outside sealer range {:#x}..{:#x}", sealer.base, sealer.top()),
            ));
        }
        Ok(Capability { otype: Some(otype), ..*self })
    }

    /// Inverse of [`Capability::seal`].
    pub fn unseal(&self, unsealer: &Capability) -> Result<Capability, CapFault> {
        if !self.tag || !unsealer.tag {
            return Err(CapFault::new(FaultKind::Tag, "unseal with untagged operand"));
        }
        let Some(otype) = self.otype else {
            return Err(CapFault::new(FaultKind::SealMismatch, "capability is not sealed"));
        };
        if unsealer.is_sealed() {
            return Err(CapFault::new(FaultKind::SealedImmutable, "unsealer is sealed"));
        }
        if !unsealer.perms.contains(Perms::UNSEAL) {
            return Err(CapFault::new(FaultKind::Perm, "unsealer lacks UNSEAL"));
        }
        if !unsealer.covers(otype as u64, 1) {
            return Err(CapFault::new(
                FaultKind::SealMismatch,
                format!("otype {otype} outside unsealer range"),
            ));
        }
        Ok(self.unsealed())
    }

    /// Removes the seal without authority checks; used by `cinvoke`.
    pub(crate) fn unsealed(&self) -> Capability {
        Capability { otype: None, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(base: u64, len: u64) -> Capability {
        Capability::root(1 << 20).set_bounds(base, len).unwrap()
    }

    #[test]
    fn set_bounds_subset_superset_identity() {
        let c = cap(0, 4096);
        let n = c.set_bounds(1024, 512).unwrap();
        assert_eq!((n.base(), n.length()), (1024, 512));
        assert_eq!(n.cursor(), 1024);

        let e = n.set_bounds(0, 4096).unwrap_err();
        assert_eq!(e.kind, FaultKind::Monotonicity);

        let same = c.set_bounds(0, 4096).unwrap();
        assert_eq!((same.base(), same.length()), (c.base(), c.length()));
    }

    #[test]
    fn set_bounds_overflow_is_monotonicity() {
        let c = cap(0, 4096);
        let e = c.set_bounds(u64::MAX - 1, 16).unwrap_err();
        assert_eq!(e.kind, FaultKind::Monotonicity);
    }

    #[test]
    fn and_perms_never_escalates() {
        let rw = cap(0, 64).and_perms(Perms::READ | Perms::WRITE).unwrap();
        assert_eq!(rw.and_perms(Perms::READ).unwrap().perms(), Perms::READ);

        let r = rw.and_perms(Perms::READ).unwrap();
        assert_eq!(r.and_perms(Perms::READ | Perms::WRITE).unwrap().perms(), Perms::READ);

        let none = r.and_perms(Perms::empty()).unwrap();
        assert!(none.tag());
        assert!(none.perms().is_empty());
    }

    #[test]
    fn inc_offset_moves_cursor_only() {
        let c = cap(0, 4096).inc_offset(100).unwrap();
        let d = c.inc_offset(28).unwrap();
        assert_eq!(d.cursor(), 128);
        assert_eq!((d.base(), d.length()), (0, 4096));
        assert_eq!(d.inc_offset(0).unwrap(), d);
        // representable past the top
        assert_eq!(d.inc_offset(10_000).unwrap().cursor(), 10_128);
    }

    #[test]
    fn seal_and_unseal() {
        let code = cap(0, 4096);
        let sealer = cap(0, 16);
        let sealed = code.seal(&sealer, 7).unwrap();
        assert_eq!(sealed.otype(), Some(7));
        assert_eq!(sealed.inc_offset(1).unwrap_err().kind, FaultKind::SealedImmutable);
        assert_eq!(sealed.set_bounds(0, 16).unwrap_err().kind, FaultKind::SealedImmutable);
        assert_eq!(sealed.and_perms(Perms::READ).unwrap_err().kind, FaultKind::SealedImmutable);

        let no_seal = sealer.and_perms(Perms::READ).unwrap();
        assert_eq!(code.seal(&no_seal, 7).unwrap_err().kind, FaultKind::Perm);
        assert_eq!(code.seal(&sealer, 16).unwrap_err().kind, FaultKind::Bounds);

        let unsealed = sealed.unseal(&sealer).unwrap();
        assert_eq!(unsealed, code);

        let narrow = cap(8, 8);
        assert_eq!(sealed.unseal(&narrow).unwrap_err().kind, FaultKind::SealMismatch);
        assert!(code.unseal(&sealer).is_err());
        let no_unseal = sealer.and_perms(Perms::SEAL).unwrap();
        assert_eq!(sealed.unseal(&no_unseal).unwrap_err().kind, FaultKind::Perm);
    }

    #[test]
    fn untagged_operands_fault_with_tag() {
        let dead = Capability::from_integer(0);
        assert_eq!(dead.set_bounds(0, 16).unwrap_err().kind, FaultKind::Tag);
        assert_eq!(dead.and_perms(Perms::READ).unwrap_err().kind, FaultKind::Tag);
        assert_eq!(dead.inc_offset(1).unwrap_err().kind, FaultKind::Tag);
        assert_eq!(dead.seal(&cap(0, 16), 1).unwrap_err().kind, FaultKind::Tag);
    }

    #[test]
    fn perms_display() {
        assert_eq!((Perms::READ | Perms::LOAD_CAP).to_string(), "r--L---");
    }
}
