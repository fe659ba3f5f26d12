// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use rustc_hash::FxHashMap;

use super::capability::Capability;

/// Tag granule size in bytes; equals the width of a capability.
pub const GRANULE: u64 = 16;

/// Flat byte store with one validity tag per 16-byte granule.
///
/// The byte image of a stored capability is its cursor followed by its
/// base; the full metadata lives in `shadow` and is only meaningful while
/// the granule's tag is set.
pub struct TaggedMemory {
    bytes: Vec<u8>,
    tags: Vec<u64>,
    shadow: FxHashMap<u64, Capability>,
    /// One bit per revoked lineage.
    revoked: Vec<u64>,
    copy_counter: u64,
}

impl TaggedMemory {
    pub fn new(size: u64) -> Self {
        assert!(size.is_multiple_of(GRANULE), "memory size must be a multiple of {GRANULE}");
        let granules = size / GRANULE;
        Self {
            bytes: vec![0; size as usize],
            tags: vec![0; granules.div_ceil(64) as usize],
            shadow: FxHashMap::default(),
            revoked: Vec::new(),
            copy_counter: 0,
        }
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    /// Bytes moved by data-copy operations so far.
    pub fn copy_counter(&self) -> u64 {
        self.copy_counter
    }

    pub fn tag(&self, granule: u64) -> bool {
        self.tags[(granule / 64) as usize] & (1 << (granule % 64)) != 0
    }

    fn set_tag(&mut self, granule: u64, on: bool) {
        let word = &mut self.tags[(granule / 64) as usize];
        if on {
            *word |= 1 << (granule % 64);
        } else {
            *word &= !(1 << (granule % 64));
        }
    }

    /// Clears the tag of every granule overlapping `[addr, addr + len)`.
    pub(crate) fn clear_tags(&mut self, addr: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = addr / GRANULE;
        let last = (addr + len - 1) / GRANULE;
        let mut g = first;
        while g <= last {
            let w = (g / 64) as usize;
            if self.tags[w] == 0 {
                g = (g / 64 + 1) * 64;
                continue;
            }
            if self.tag(g) {
                self.set_tag(g, false);
                self.shadow.remove(&g);
            }
            g += 1;
        }
    }

    pub(crate) fn read(&self, addr: u64, len: u64) -> &[u8] {
        &self.bytes[addr as usize..(addr + len) as usize]
    }

    pub(crate) fn write(&mut self, addr: u64, data: &[u8]) {
        self.clear_tags(addr, data.len() as u64);
        self.bytes[addr as usize..addr as usize + data.len()].copy_from_slice(data);
    }

    pub(crate) fn copy(&mut self, dst: u64, src: u64, len: u64) {
        self.clear_tags(dst, len);
        self.bytes.copy_within(src as usize..(src + len) as usize, dst as usize);
        self.copy_counter += len;
    }

    pub(crate) fn read_cap(&self, addr: u64) -> Capability {
        let g = addr / GRANULE;
        if self.tag(g) {
            if let Some(c) = self.shadow.get(&g) {
                return *c;
            }
        }
        let raw = self.read(addr, 8);
        Capability::from_integer(u64::from_le_bytes(raw.try_into().unwrap()))
    }

    pub(crate) fn write_cap(&mut self, addr: u64, cap: Capability) {
        let g = addr / GRANULE;
        let a = addr as usize;
        self.bytes[a..a + 8].copy_from_slice(&cap.cursor().to_le_bytes());
        self.bytes[a + 8..a + 16].copy_from_slice(&cap.base().to_le_bytes());
        let valid = cap.tag() && !self.is_revoked(cap.lineage());
        self.set_tag(g, valid);
        if valid {
            self.shadow.insert(g, cap);
        } else {
            self.shadow.remove(&g);
        }
    }

    pub(crate) fn is_revoked(&self, lineage: u32) -> bool {
        let (w, b) = (lineage as usize / 64, lineage % 64);
        lineage != 0 && self.revoked.get(w).is_some_and(|x| x & (1 << b) != 0)
    }

    pub(crate) fn revoke(&mut self, lineage: u32) {
        if lineage != 0 {
            let (w, b) = (lineage as usize / 64, lineage % 64);
            if self.revoked.len() <= w {
                self.revoked.resize(w + 1, 0);
            }
            self.revoked[w] |= 1 << b;
        }
    }

    /// Number of granules currently holding a valid capability.
    pub fn tagged_granules(&self) -> usize {
        self.tags.iter().map(|w| w.count_ones() as usize).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_write_clears_overlapping_tags_only() {
        let mut m = TaggedMemory::new(4096);
        let root = Capability::root(4096);
        m.write_cap(32, root);
        m.write_cap(48, root);
        assert!(m.tag(2) && m.tag(3));
        m.write(47, &[1]);
        assert!(!m.tag(2));
        assert!(m.tag(3));
        assert!(!m.read_cap(32).tag());
        assert!(m.read_cap(48).tag());
    }

    #[test]
    fn clear_tags_spanning_words() {
        let mut m = TaggedMemory::new(64 * 1024);
        let root = Capability::root(64 * 1024);
        for g in [0u64, 63, 64, 65, 200, 4000] {
            m.write_cap(g * GRANULE, root);
        }
        m.clear_tags(63 * GRANULE + 5, 140 * GRANULE);
        assert!(m.tag(0));
        assert!(!m.tag(63) && !m.tag(64) && !m.tag(65) && !m.tag(200));
        assert!(m.tag(4000));
        assert_eq!(m.tagged_granules(), 2);
    }

    #[test]
    fn untagged_granule_reads_as_integer() {
        let mut m = TaggedMemory::new(256);
        m.write(16, &0xdead_beefu64.to_le_bytes());
        let c = m.read_cap(16);
        assert!(!c.tag());
        assert_eq!(c.cursor(), 0xdead_beef);
    }
}
