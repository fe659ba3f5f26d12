// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Software capability machine.
//!
//! A single shared address space of tagged memory plus the capability
//! operations that every compartment, the Intravisor included, uses to
//! touch it. There is no instruction decoder: guest code is host Rust that
//! can reach memory only through a [`CompartmentContext`] and the methods
//! on [`Machine`].
//!
//! All checks follow the same order: tag (including revoked lineage), seal,
//! permission, alignment, bounds. A faulting operation leaves memory and
//! registers untouched.

mod capability;
mod context;
mod memory;

use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};

use parking_lot::RwLock;

pub use capability::{CapFault, Capability, FaultKind, Perms, OTYPE_MAX};
pub use context::{Auth, CompartmentContext, CvmId, IntRegs, CT6, NUM_CREGS};
pub use memory::{TaggedMemory, GRANULE};

pub struct Machine {
    mem: RwLock<TaggedMemory>,
    size: u64,
    root_issued: AtomicBool,
    next_lineage: AtomicU32,
}

impl Machine {
    pub fn new(size: u64) -> Self {
        Self {
            mem: RwLock::new(TaggedMemory::new(size)),
            size,
            root_issued: AtomicBool::new(false),
            next_lineage: AtomicU32::new(1),
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// Hands out the capability covering the whole address space. Only one
    /// root exists per machine.
    pub fn root_capability(&self) -> Result<Capability, CapFault> {
        if self.root_issued.swap(true, Ordering::SeqCst) {
            return Err(CapFault::new(FaultKind::Perm, "root capability already issued"));
        }
        Ok(Capability::root(self.size))
    }

    pub fn copy_counter(&self) -> u64 {
        self.mem.read().copy_counter()
    }

    fn check(mem: &TaggedMemory, cap: &Capability, addr: u64, len: u64, need: Perms) -> Result<(), CapFault> {
        if !cap.tag() || mem.is_revoked(cap.lineage()) {
            return Err(CapFault::new(FaultKind::Tag, format!("untagged authority for {addr:#x}")));
        }
        if cap.is_sealed() {
            return Err(CapFault::new(
                FaultKind::SealedImmutable,
                "sealed capability cannot be dereferenced",
            ));
        }
        if !cap.perms().contains(need) {
            return Err(CapFault::new(FaultKind::Perm, format!("{} lacks {}", cap.perms(), need)));
        }
        if !cap.covers(addr, len) {
            return Err(CapFault::new(
                FaultKind::Bounds,
                format!("{addr:#x}+{len:#x} outside {:#x}..{:#x}", cap.base(), cap.top()),
            ));
        }
        Ok(())
    }

    fn check_cap_slot(mem: &TaggedMemory, cap: &Capability, addr: u64, need: Perms) -> Result<(), CapFault> {
        if !cap.tag() || mem.is_revoked(cap.lineage()) {
            return Err(CapFault::new(FaultKind::Tag, format!("untagged authority for {addr:#x}")));
        }
        if cap.is_sealed() {
            return Err(CapFault::new(
                FaultKind::SealedImmutable,
                "sealed capability cannot be dereferenced",
            ));
        }
        if !cap.perms().contains(need) {
            return Err(CapFault::new(FaultKind::Perm, format!("{} lacks {}", cap.perms(), need)));
        }
        if !addr.is_multiple_of(GRANULE) {
            return Err(CapFault::new(
                FaultKind::Alignment,
                format!("{addr:#x} is not {GRANULE}-byte aligned"),
            ));
        }
        if !cap.covers(addr, GRANULE) {
            return Err(CapFault::new(
                FaultKind::Bounds,
                format!("{addr:#x} outside {:#x}..{:#x}", cap.base(), cap.top()),
            ));
        }
        Ok(())
    }

    /// Reads `len` bytes at `cursor + offset` of the authorizing capability.
    pub fn load_bytes(
        &self,
        ctx: &CompartmentContext,
        auth: Auth,
        offset: i64,
        len: usize,
    ) -> Result<Vec<u8>, CapFault> {
        let cap = ctx.auth(auth)?;
        self.read_with(&cap, cap.cursor().wrapping_add(offset as u64), len as u64)
    }

    /// Writes `data` at `cursor + offset`; overlapped granules lose their tag.
    pub fn store_bytes(
        &self,
        ctx: &CompartmentContext,
        auth: Auth,
        offset: i64,
        data: &[u8],
    ) -> Result<(), CapFault> {
        let cap = ctx.auth(auth)?;
        self.write_with(&cap, cap.cursor().wrapping_add(offset as u64), data)
    }

    pub fn load_cap(&self, ctx: &CompartmentContext, auth: Auth, addr: u64) -> Result<Capability, CapFault> {
        let cap = ctx.auth(auth)?;
        self.load_cap_with(&cap, addr)
    }

    pub fn store_cap(
        &self,
        ctx: &CompartmentContext,
        auth: Auth,
        addr: u64,
        value: Capability,
    ) -> Result<(), CapFault> {
        let cap = ctx.auth(auth)?;
        self.store_cap_with(&cap, addr, value)
    }

    /// Reads at an absolute address under an explicit capability.
    pub fn read_with(&self, cap: &Capability, addr: u64, len: u64) -> Result<Vec<u8>, CapFault> {
        let mem = self.mem.read();
        Self::check(&mem, cap, addr, len, Perms::READ)?;
        Ok(mem.read(addr, len).to_vec())
    }

    pub fn write_with(&self, cap: &Capability, addr: u64, data: &[u8]) -> Result<(), CapFault> {
        let mut mem = self.mem.write();
        Self::check(&mem, cap, addr, data.len() as u64, Perms::WRITE)?;
        mem.write(addr, data);
        Ok(())
    }

    pub fn load_cap_with(&self, cap: &Capability, addr: u64) -> Result<Capability, CapFault> {
        let mem = self.mem.read();
        Self::check_cap_slot(&mem, cap, addr, Perms::READ | Perms::LOAD_CAP)?;
        Ok(mem.read_cap(addr))
    }

    pub fn store_cap_with(&self, cap: &Capability, addr: u64, value: Capability) -> Result<(), CapFault> {
        let mut mem = self.mem.write();
        Self::check_cap_slot(&mem, cap, addr, Perms::WRITE | Perms::STORE_CAP)?;
        mem.write_cap(addr, value);
        Ok(())
    }

    /// Domain transition through a matched sealed pair: `pcc` becomes the
    /// unsealed code capability and `ct6` the unsealed data capability.
    pub fn cinvoke(
        &self,
        ctx: &mut CompartmentContext,
        code: Capability,
        data: Capability,
    ) -> Result<(), CapFault> {
        {
            let mem = self.mem.read();
            for (what, c) in [("code", &code), ("data", &data)] {
                if !c.tag() || mem.is_revoked(c.lineage()) {
                    return Err(CapFault::new(FaultKind::Tag, format!("cinvoke {what} capability untagged")));
                }
            }
        }
        match (code.otype(), data.otype()) {
            (Some(a), Some(b)) if a == b => {}
            (Some(a), Some(b)) => {
                return Err(CapFault::new(
                    FaultKind::SealMismatch,
                    format!("cinvoke otypes differ ({a} vs {b})"),
                ))
            }
            _ => {
                return Err(CapFault::new(
                    FaultKind::SealMismatch,
                    "cinvoke requires two sealed capabilities",
                ))
            }
        }
        if !code.perms().contains(Perms::EXEC) {
            return Err(CapFault::new(FaultKind::Perm, "cinvoke code capability lacks EXEC"));
        }
        ctx.enter(code.unsealed(), data.unsealed());
        Ok(())
    }

    /// Single-pass copy from `src.cursor + src_off` to `dst.cursor + dst_off`.
    /// Returns the number of bytes moved, which is also added to the copy
    /// counter.
    pub fn capcpy(
        &self,
        dst: &Capability,
        dst_off: u64,
        src: &Capability,
        src_off: u64,
        len: u64,
    ) -> Result<u64, CapFault> {
        let mut mem = self.mem.write();
        let d = dst.cursor().wrapping_add(dst_off);
        let s = src.cursor().wrapping_add(src_off);
        Self::check(&mem, src, s, len, Perms::READ)?;
        Self::check(&mem, dst, d, len, Perms::WRITE)?;
        if len > 0 {
            mem.copy(d, s, len);
        }
        Ok(len)
    }

    pub(crate) fn new_lineage(&self) -> u32 {
        self.next_lineage.fetch_add(1, Ordering::Relaxed)
    }

    /// Invalidates every capability descending from `lineage`, wherever it
    /// is held.
    pub(crate) fn revoke_lineage(&self, lineage: u32) {
        self.mem.write().revoke(lineage);
    }

    /// True if `cap` is tagged and its lineage has not been revoked.
    pub fn is_live(&self, cap: &Capability) -> bool {
        cap.tag() && !self.mem.read().is_revoked(cap.lineage())
    }

    /// Host-side view of raw bytes, bypassing capability checks. Used by the
    /// memory-diff oracles and never reachable from guest code.
    pub fn snapshot(&self, addr: u64, len: u64) -> Vec<u8> {
        self.mem.read().read(addr, len).to_vec()
    }

    pub fn tag_at(&self, addr: u64) -> bool {
        self.mem.read().tag(addr / GRANULE)
    }

    pub fn tagged_granules(&self) -> usize {
        self.mem.read().tagged_granules()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Machine, Capability) {
        let m = Machine::new(1 << 16);
        let root = m.root_capability().unwrap();
        (m, root)
    }

    fn guest_ctx(root: &Capability, base: u64, len: u64) -> CompartmentContext {
        let ddc = root
            .set_bounds(base, len)
            .unwrap()
            .and_perms(Perms::READ | Perms::WRITE | Perms::LOAD_CAP)
            .unwrap();
        CompartmentContext::new(CvmId(1), Capability::NULL, ddc)
    }

    #[test]
    fn single_root() {
        let (m, root) = setup();
        assert!(root.tag());
        assert_eq!((root.base(), root.length()), (0, 1 << 16));
        assert_eq!(root.perms(), Perms::all());
        assert!(m.root_capability().is_err());
        let child = root.set_bounds(64, 64).unwrap().and_perms(Perms::READ).unwrap();
        assert!(child.tag());
    }

    #[test]
    fn load_bytes_via_ddc() {
        let (m, root) = setup();
        let ctx = guest_ctx(&root, 0x1000, 0x1000);
        assert_eq!(m.load_bytes(&ctx, Auth::Ddc, 0, 64).unwrap().len(), 64);
        let e = m.load_bytes(&ctx, Auth::Ddc, 0x1000 - 8, 16).unwrap_err();
        assert_eq!(e.kind, FaultKind::Bounds);

        let mut wo = ctx.clone();
        wo.install_ddc(ctx.ddc().and_perms(Perms::WRITE).unwrap()).unwrap();
        assert_eq!(m.load_bytes(&wo, Auth::Ddc, 0, 1).unwrap_err().kind, FaultKind::Perm);
    }

    #[test]
    fn deferred_bounds_check_after_inc_offset() {
        let (m, root) = setup();
        let mut ctx = guest_ctx(&root, 0x1000, 0x100);
        let far = ctx.ddc().inc_offset(0x200).unwrap();
        ctx.set_creg(5, far).unwrap();
        let e = m.load_bytes(&ctx, Auth::Reg(5), 0, 1).unwrap_err();
        assert_eq!(e.kind, FaultKind::Bounds);
    }

    #[test]
    fn store_bytes_clears_tag_and_respects_perms() {
        let (m, root) = setup();
        let ctx = guest_ctx(&root, 0x1000, 0x1000);
        m.store_cap_with(&root, 0x1010, ctx.ddc()).unwrap();
        assert!(m.tag_at(0x1010));
        m.store_bytes(&ctx, Auth::Ddc, 0x13, &[0xff]).unwrap();
        assert!(!m.tag_at(0x1010));
        assert!(!m.load_cap(&ctx, Auth::Ddc, 0x1010).unwrap().tag());

        let mut ro = ctx.clone();
        ro.install_ddc(ctx.ddc().and_perms(Perms::READ).unwrap()).unwrap();
        let e = m.store_bytes(&ro, Auth::Ddc, 0, &[1]).unwrap_err();
        assert_eq!(e.kind, FaultKind::Perm);
    }

    #[test]
    fn store_cap_withheld_and_round_trip() {
        let (m, root) = setup();
        let ctx = guest_ctx(&root, 0x1000, 0x1000);
        let e = m.store_cap(&ctx, Auth::Ddc, 0x1000, ctx.ddc()).unwrap_err();
        assert_eq!(e.kind, FaultKind::Perm);

        let grant = root.set_bounds(0x4000, 0x100).unwrap().and_perms(Perms::READ).unwrap();
        m.store_cap_with(&root, 0x1020, grant).unwrap();
        let back = m.load_cap(&ctx, Auth::Ddc, 0x1020).unwrap();
        assert_eq!(back, grant);
        assert!(back.tag());

        let e = m.load_cap(&ctx, Auth::Ddc, 0x1028).unwrap_err();
        assert_eq!(e.kind, FaultKind::Alignment);
    }

    #[test]
    fn cinvoke_pair_discipline() {
        let (m, root) = setup();
        let sealer = root.set_bounds(0, 64).unwrap();
        let code = root.set_bounds(0x100, 0x100).unwrap().and_perms(Perms::READ | Perms::EXEC).unwrap();
        let data = root.set_bounds(0x2000, 0x100).unwrap().and_perms(Perms::READ | Perms::WRITE).unwrap();
        let mut ctx = guest_ctx(&root, 0x1000, 0x1000);

        let c7 = code.seal(&sealer, 7).unwrap();
        let d7 = data.seal(&sealer, 7).unwrap();
        let d9 = data.seal(&sealer, 9).unwrap();
        m.cinvoke(&mut ctx, c7, d7).unwrap();
        assert_eq!(ctx.pcc(), code);
        assert_eq!(ctx.ct6(), data);
        assert_eq!(ctx.transitions(), 1);

        assert_eq!(m.cinvoke(&mut ctx, c7, d9).unwrap_err().kind, FaultKind::SealMismatch);
        assert_eq!(m.cinvoke(&mut ctx, d7, d7).unwrap_err().kind, FaultKind::Perm);
        assert_eq!(m.cinvoke(&mut ctx, code, d7).unwrap_err().kind, FaultKind::SealMismatch);
        assert_eq!(ctx.transitions(), 1);
    }

    #[test]
    fn capcpy_moves_and_counts() {
        let (m, root) = setup();
        let src = root.set_bounds(0x1000, 0x1000).unwrap();
        let dst = root.set_bounds(0x3000, 0x1000).unwrap();
        m.write_with(&root, 0x1000, &(0..=255u8).cycle().take(4096).collect::<Vec<_>>()).unwrap();
        m.store_cap_with(&root, 0x3000, src).unwrap();
        let before = m.copy_counter();
        assert_eq!(m.capcpy(&dst, 0, &src, 0, 4096).unwrap(), 4096);
        assert_eq!(m.copy_counter() - before, 4096);
        assert_eq!(m.snapshot(0x1000, 4096), m.snapshot(0x3000, 4096));
        assert!(!m.tag_at(0x3000));

        let c = m.copy_counter();
        assert_eq!(m.capcpy(&dst, 0, &src, 0, 0).unwrap(), 0);
        assert_eq!(m.copy_counter(), c);

        let ro = dst.and_perms(Perms::READ).unwrap();
        assert_eq!(m.capcpy(&ro, 0, &src, 0, 1).unwrap_err().kind, FaultKind::Perm);
        assert_eq!(m.capcpy(&dst, 4000, &src, 0, 200).unwrap_err().kind, FaultKind::Bounds);
        assert_eq!(m.copy_counter(), c);
    }

    #[test]
    fn revoked_lineage_is_dead_everywhere() {
        let (m, root) = setup();
        let l = m.new_lineage();
        let grant = root.set_bounds(0x1000, 0x100).unwrap().with_lineage(l);
        let derived = grant.set_bounds(0x1000, 0x10).unwrap();
        m.store_cap_with(&root, 0x2000, grant).unwrap();
        assert!(m.read_with(&derived, 0x1000, 4).is_ok());
        m.revoke_lineage(l);
        assert_eq!(m.read_with(&derived, 0x1000, 4).unwrap_err().kind, FaultKind::Tag);
        assert!(!m.is_live(&grant));
        // a store of a revoked capability yields an untagged granule
        m.store_cap_with(&root, 0x2010, grant).unwrap();
        assert!(!m.tag_at(0x2010));
    }

    #[test]
    fn ct6_not_writable_by_guest() {
        let (_, root) = setup();
        let mut ctx = guest_ctx(&root, 0, 16);
        assert!(ctx.set_creg(CT6, root).is_err());
        assert!(ctx.set_creg(0, root).is_err());
        assert!(ctx.set_creg(3, root).is_ok());
    }
}
