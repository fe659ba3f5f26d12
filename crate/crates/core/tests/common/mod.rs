// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Property drivers shared by the `properties` and `acceptance` targets.
//! Each driver runs a proptest runner for `cases` cases and reports the
//! first minimized counterexample as an error string.

#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use capvm::capmachine::{Auth, CompartmentContext, CvmId, FaultKind, Machine, Perms, GRANULE};
use capvm::commdev::Role;
use capvm::guestkit::Guest;
use capvm::intravisor::{DeploymentConfig, Intravisor, Rights};
use capvm::{Capability, Error};

pub type Outcome = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn finish<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Outcome {
    r.map_err(|e| e.to_string())
}

fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}

// ---- monotonicity ----------------------------------------------------

const MEM: u64 = 1 << 20;

#[derive(Clone, Debug)]
enum Step {
    /// `inside` picks bounds relative to the parent; otherwise they are
    /// arbitrary and may widen.
    Bounds {
        inside: bool,
        x: u64,
        y: u64,
    },
    Perms(u8),
    Offset(i64),
    /// Seal, try every mutator, then unseal again.
    SealRoundTrip(u32),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        3 => (any::<u64>(), any::<u64>()).prop_map(|(x, y)| Step::Bounds { inside: true, x, y }),
        2 => (any::<u64>(), any::<u64>()).prop_map(|(x, y)| Step::Bounds { inside: false, x, y }),
        2 => any::<u8>().prop_map(Step::Perms),
        1 => (-4096i64..4096).prop_map(Step::Offset),
        1 => (0u32..16).prop_map(Step::SealRoundTrip),
    ]
}

/// Random derivation chains from the root: every successful link stays
/// inside its parent and matches a plain interval model; every link the
/// model rejects faults with `Monotonicity`.
pub fn monotonicity(cases: u32) -> Outcome {
    let m = Machine::new(MEM);
    let root = m.root_capability().map_err(|e| e.to_string())?;
    let sealer = root.set_bounds(0, 16).map_err(|e| e.to_string())?;
    let chain = proptest::collection::vec(step(), 1..16);
    finish(runner(cases).run(&chain, |steps| {
        let mut cur = root;
        for s in steps {
            let (pb, pt, pp) = (cur.base(), cur.top(), cur.perms());
            match s {
                Step::Bounds { inside, x, y } => {
                    let (b, l) = if inside {
                        let b = pb + x % (pt - pb + 1);
                        (b, y % (pt - b + 1))
                    } else {
                        (x % (2 * MEM), y % (2 * MEM))
                    };
                    let allowed = b >= pb && b + l <= pt;
                    match cur.set_bounds(b, l) {
                        Ok(c) if allowed => {
                            prop_assert_eq!((c.base(), c.length(), c.perms()), (b, l, pp));
                            prop_assert!(c.tag());
                            cur = c;
                        }
                        Ok(c) => return Err(fail(format!("widened to {c:?}"))),
                        Err(e) if !allowed => prop_assert_eq!(e.kind, FaultKind::Monotonicity),
                        Err(e) => return Err(fail(format!("rejected legal narrowing: {e}"))),
                    }
                }
                Step::Perms(bits) => {
                    let mask = Perms::from_bits_truncate(bits);
                    let c = cur.and_perms(mask).map_err(|e| fail(e.to_string()))?;
                    prop_assert_eq!(c.perms(), pp & mask);
                    prop_assert_eq!((c.base(), c.top()), (pb, pt));
                    cur = c;
                }
                Step::Offset(d) => {
                    let c = cur.inc_offset(d).map_err(|e| fail(e.to_string()))?;
                    prop_assert_eq!((c.base(), c.top(), c.perms()), (pb, pt, pp));
                    cur = c;
                }
                Step::SealRoundTrip(ot) => {
                    let sealed = cur.seal(&sealer, ot).map_err(|e| fail(e.to_string()))?;
                    let kinds = [
                        sealed.set_bounds(pb, 0).map(|_| ()),
                        sealed.and_perms(Perms::empty()).map(|_| ()),
                        sealed.inc_offset(0).map(|_| ()),
                        sealed.seal(&sealer, ot).map(|_| ()),
                    ];
                    for k in kinds {
                        prop_assert_eq!(k.map_err(|e| e.kind), Err(FaultKind::SealedImmutable));
                    }
                    prop_assert_eq!(sealed.unseal(&sealer).map_err(|e| fail(e.to_string()))?, cur);
                }
            }
            prop_assert!(cur.base() >= root.base() && cur.top() <= root.top());
        }
        Ok(())
    }))
}

// ---- provenance and integrity ----------------------------------------

fn root_ctx(m: &Machine) -> Result<(Capability, CompartmentContext), String> {
    let root = m.root_capability().map_err(|e| e.to_string())?;
    Ok((root, CompartmentContext::new(CvmId(1), root, root)))
}

/// Arbitrary 16-byte patterns written with byte stores never load back as
/// a tagged capability, even over a slot that held one.
pub fn provenance(cases: u32) -> Outcome {
    let m = Machine::new(MEM);
    let (root, ctx) = root_ctx(&m)?;
    let slots = MEM / GRANULE;
    let strat = (any::<[u8; 16]>(), 0..slots, any::<bool>());
    finish(runner(cases).run(&strat, |(pattern, slot, seed_cap)| {
        let addr = slot * GRANULE;
        if seed_cap {
            m.store_cap_with(&root, addr, root).map_err(|e| fail(e.to_string()))?;
        }
        m.store_bytes(&ctx, Auth::Ddc, addr as i64, &pattern).map_err(|e| fail(e.to_string()))?;
        let c = m.load_cap(&ctx, Auth::Ddc, addr).map_err(|e| fail(e.to_string()))?;
        prop_assert!(!c.tag(), "fabricated tag from {:?}", pattern);
        prop_assert!(!m.tag_at(addr));
        let used = m.read_with(&c, c.cursor(), 1);
        prop_assert_eq!(used.map_err(|e| e.kind), Err(FaultKind::Tag));
        Ok(())
    }))
}

/// A byte store clears the tag of exactly the granules it overlaps.
pub fn integrity(cases: u32) -> Outcome {
    let m = Machine::new(MEM);
    let (root, ctx) = root_ctx(&m)?;
    const SPAN: u64 = 8;
    let strat = (0..(MEM / GRANULE - SPAN), 0..SPAN * GRANULE, 1..3 * GRANULE);
    finish(runner(cases).run(&strat, |(first, off, len)| {
        let base = first * GRANULE;
        let len = len.min(SPAN * GRANULE - off);
        for g in 0..SPAN {
            m.store_cap_with(&root, base + g * GRANULE, root).map_err(|e| fail(e.to_string()))?;
        }
        let data = vec![0xa5; len as usize];
        m.store_bytes(&ctx, Auth::Ddc, (base + off) as i64, &data).map_err(|e| fail(e.to_string()))?;
        for g in 0..SPAN {
            let (lo, hi) = (g * GRANULE, (g + 1) * GRANULE);
            let overlapped = off < hi && off + len > lo;
            let c = m.load_cap(&ctx, Auth::Ddc, base + lo).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(c.tag(), !overlapped, "granule {} after store {}+{}", g, off, len);
        }
        Ok(())
    }))
}

// ---- cinvoke ---------------------------------------------------------

/// One cell of the cinvoke precondition lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InvokeCase {
    pub code_sealed: bool,
    pub data_sealed: bool,
    pub otype_equal: bool,
    pub exec: bool,
}

impl InvokeCase {
    pub fn all() -> Vec<InvokeCase> {
        (0..16u8)
            .map(|b| InvokeCase {
                code_sealed: b & 1 != 0,
                data_sealed: b & 2 != 0,
                otype_equal: b & 4 != 0,
                exec: b & 8 != 0,
            })
            .collect()
    }

    /// Accept/reject table: only a matched, executable, sealed pair enters.
    pub fn expected(&self) -> Result<(), FaultKind> {
        if !(self.code_sealed && self.data_sealed && self.otype_equal) {
            Err(FaultKind::SealMismatch)
        } else if !self.exec {
            Err(FaultKind::Perm)
        } else {
            Ok(())
        }
    }
}

/// `(case, expected, observed)`.
pub type LatticeRow = (InvokeCase, Result<(), FaultKind>, Result<(), FaultKind>);

/// Runs every lattice cell.
pub fn cinvoke_lattice() -> Vec<LatticeRow> {
    let m = Machine::new(MEM);
    let root = m.root_capability().expect("fresh machine");
    let sealer = root.set_bounds(0, 16).expect("in bounds");
    let rw = Perms::READ | Perms::WRITE;
    InvokeCase::all()
        .into_iter()
        .map(|c| {
            let code_perms = if c.exec { Perms::EXEC | Perms::READ } else { Perms::READ };
            let code = root.set_bounds(0x1000, 0x100).unwrap().and_perms(code_perms).unwrap();
            let data = root.set_bounds(0x2000, 0x100).unwrap().and_perms(rw).unwrap();
            let code = if c.code_sealed { code.seal(&sealer, 3).unwrap() } else { code };
            let ot = if c.otype_equal { 3 } else { 4 };
            let data = if c.data_sealed { data.seal(&sealer, ot).unwrap() } else { data };
            let ddc = root.set_bounds(0x3000, 0x100).unwrap();
            let mut ctx = CompartmentContext::new(CvmId(1), root, ddc);
            let before = ctx.transitions();
            let got = m.cinvoke(&mut ctx, code, data).map_err(|e| e.kind);
            let got = match got {
                Ok(()) if ctx.pcc() == code.unseal(&sealer).unwrap() && ctx.transitions() == before + 1 => {
                    Ok(())
                }
                Ok(()) => Err(FaultKind::Tag),
                // A rejected cinvoke must leave pcc and ddc alone.
                Err(_) if ctx.pcc() != root || ctx.ddc() != ddc => Err(FaultKind::Bounds),
                Err(k) => Err(k),
            };
            (c, c.expected(), got)
        })
        .collect()
}

// ---- capcpy ----------------------------------------------------------

/// `capcpy` leaves memory exactly as a per-byte load/store loop would.
pub fn capcpy_oracle(cases: u32) -> Outcome {
    let m = Machine::new(MEM);
    let root = m.root_capability().map_err(|e| e.to_string())?;
    const SRC: u64 = 0x10000;
    const DST: u64 = 0x40000;
    const WIN: u64 = 0x2000;
    let src_cap = root.set_bounds(SRC, WIN).unwrap().and_perms(Perms::READ).unwrap();
    let dst_cap = root.set_bounds(DST, WIN).unwrap().and_perms(Perms::WRITE).unwrap();
    let strat = (any::<u64>(), 0..WIN, 0..WIN, 0..WIN, any::<bool>());
    finish(runner(cases).run(&strat, |(seed, so, doff, len, tagged)| {
        let len = len.min(WIN - so).min(WIN - doff);
        let fill = |salt: u64| -> Vec<u8> {
            (0..WIN).map(|i| (seed.wrapping_mul(31).wrapping_add(i * salt) >> 3) as u8).collect()
        };
        m.write_with(&root, SRC, &fill(7)).unwrap();
        m.write_with(&root, DST, &fill(13)).unwrap();
        if tagged {
            for g in (0..WIN).step_by(GRANULE as usize) {
                m.store_cap_with(&root, DST + g, root).unwrap();
            }
        }

        // Oracle: one byte at a time through separate capabilities.
        let mut expect = m.snapshot(DST, WIN);
        for i in 0..len {
            let b = m.read_with(&src_cap, SRC + so + i, 1).unwrap()[0];
            expect[(doff + i) as usize] = b;
        }
        let tags_before: Vec<bool> = (0..WIN).step_by(GRANULE as usize).map(|g| m.tag_at(DST + g)).collect();

        let c0 = m.copy_counter();
        let n = m
            .capcpy(&dst_cap.with_cursor(DST).unwrap(), doff, &src_cap.with_cursor(SRC).unwrap(), so, len)
            .map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(n, len);
        prop_assert_eq!(m.copy_counter() - c0, len);
        prop_assert!(m.snapshot(DST, WIN) == expect, "bytes differ from oracle");
        for (k, g) in (0..WIN).step_by(GRANULE as usize).enumerate() {
            let hit = len > 0 && doff < g + GRANULE && doff + len > g;
            prop_assert_eq!(m.tag_at(DST + g), tags_before[k] && !hit);
        }
        Ok(())
    }))
}

// ---- guest-level fixtures --------------------------------------------

/// Two idle cVMs on one Intravisor, `a` and `b`, with a shared ACL.
pub struct Pair {
    pub iv: Arc<Intravisor>,
    pub a: CvmId,
    pub b: CvmId,
}

impl Pair {
    pub fn new(acl: &[(&str, Rights)]) -> Pair {
        let iv = Intravisor::new(64 << 20);
        let cfg = |name: &str| {
            acl.iter().fold(DeploymentConfig::new(name, "idle"), |c, (k, r)| c.allow(k, *r, "*"))
        };
        let a = iv.cvm_make(cfg("a")).expect("cvm a").id;
        let b = iv.cvm_make(cfg("b")).expect("cvm b").id;
        Pair { iv, a, b }
    }

    pub fn guests(&self) -> (Guest, Guest) {
        (self.iv.attach(self.a, 0).unwrap(), self.iv.attach(self.b, 0).unwrap())
    }
}

// ---- stream conservation ---------------------------------------------

#[derive(Clone, Debug)]
enum StreamOp {
    Post(u64),
    Send(u8),
    Poll,
}

fn stream_op() -> impl Strategy<Value = StreamOp> {
    prop_oneof![(0u64..12).prop_map(StreamOp::Post), (1u8..64).prop_map(StreamOp::Send), Just(StreamOp::Poll),]
}

/// Fuzzed post/send/poll schedules on a non-blocking stream agree with a
/// FIFO model: completions equal successful sends, each completion names a
/// posted buffer exactly once and carries the sent bytes.
pub fn stream_conservation(cases: u32) -> Outcome {
    const BUF: u64 = 64;
    let pair = Pair::new(&[("s*", Rights::RW)]);
    let (ga, gb) = pair.guests();
    let cell = RefCell::new((ga, gb, 0u64));
    let strat = proptest::collection::vec(stream_op(), 1..60);
    finish(runner(cases).run(&strat, |ops| {
        let (a, b, n) = &mut *cell.borrow_mut();
        *n += 1;
        let key = format!("s{n}");
        let rx = b.cp_stream_make(&key, true).map_err(|e| fail(e.to_string()))?;
        let tx = a.cp_stream_get(&key).map_err(|e| fail(e.to_string()))?;
        let ring = b.alloc(12 * BUF).map_err(|e| fail(e.to_string()))?;
        let src = a.alloc(BUF).map_err(|e| fail(e.to_string()))?;

        let mut posted: VecDeque<u64> = VecDeque::new();
        let mut live = std::collections::HashSet::new();
        let mut done: VecDeque<(u64, u64, u8)> = VecDeque::new();
        let (mut sends, mut completions, mut posts) = (0u64, 0u64, 0u64);
        let check_poll = |got: Result<Vec<(u64, u64)>, Error>,
                          done: &mut VecDeque<(u64, u64, u8)>,
                          live: &mut std::collections::HashSet<u64>,
                          completions: &mut u64,
                          b: &Guest|
         -> Result<(), TestCaseError> {
            match got {
                Err(Error::Timeout) => prop_assert!(done.is_empty(), "timeout with completions queued"),
                Err(e) => return Err(fail(e.to_string())),
                Ok(v) => {
                    prop_assert!(!v.is_empty());
                    for (id, len) in v {
                        let (eid, elen, fillb) = done.pop_front().ok_or_else(|| fail("extra completion"))?;
                        prop_assert_eq!((id, len), (eid, elen));
                        let bytes = b.read(ring + id * BUF, len).map_err(|e| fail(e.to_string()))?;
                        prop_assert!(bytes.iter().all(|&x| x == fillb), "buffer {} holds wrong bytes", id);
                        live.remove(&id);
                        *completions += 1;
                    }
                }
            }
            Ok(())
        };

        for (i, op) in ops.iter().enumerate() {
            match *op {
                StreamOp::Post(id) => {
                    let r = b.cp_stream_recv(&rx, id, ring + id * BUF, BUF);
                    if live.contains(&id) {
                        prop_assert_eq!(r, Err(Error::DuplicateId));
                    } else {
                        r.map_err(|e| fail(e.to_string()))?;
                        live.insert(id);
                        posted.push_back(id);
                        posts += 1;
                    }
                }
                StreamOp::Send(len) => {
                    let fillb = i as u8;
                    a.write(src, &vec![fillb; len as usize]).map_err(|e| fail(e.to_string()))?;
                    match (a.cp_stream_send(&tx, src, len as u64), posted.pop_front()) {
                        (Ok(k), Some(id)) => {
                            prop_assert_eq!(k, len as u64);
                            done.push_back((id, k, fillb));
                            sends += 1;
                        }
                        (Err(Error::WouldBlock), None) => {}
                        (r, p) => return Err(fail(format!("send {r:?} with model head {p:?}"))),
                    }
                }
                StreamOp::Poll => {
                    let got = b.cp_stream_poll(&rx, Some(Duration::ZERO));
                    check_poll(got, &mut done, &mut live, &mut completions, b)?;
                }
            }
        }
        while !done.is_empty() {
            let got = b.cp_stream_poll(&rx, Some(Duration::ZERO));
            check_poll(got, &mut done, &mut live, &mut completions, b)?;
        }
        let consumed = posts - posted.len() as u64;
        prop_assert_eq!(completions, sends);
        prop_assert_eq!(sends, consumed);
        a.cp_stream_destroy(&tx).ok();
        b.cp_stream_destroy(&rx).map_err(|e| fail(e.to_string()))?;
        Ok(())
    }))
}

// ---- grant minimality ------------------------------------------------

/// Whatever a recipient binding holds stays inside the advertised range
/// and the ACL's rights, and never carries privileged permissions.
pub fn grant_minimality(cases: u32) -> Outcome {
    let pair = Pair::new(&[("g.r.*", Rights::R), ("g.w.*", Rights::W), ("g.rw.*", Rights::RW)]);
    let (ga, gb) = pair.guests();
    let cell = RefCell::new((ga, gb, 0u64));
    let strat = (0usize..3, 0u64..4096, 1u64..4096);
    finish(runner(cases).run(&strat, |(which, off, size)| {
        let (a, b, n) = &mut *cell.borrow_mut();
        *n += 1;
        let (name, rights) = [("r", Rights::R), ("w", Rights::W), ("rw", Rights::RW)][which];
        let key = format!("g.{name}.{n}");
        let (heap, _) = a.heap().map_err(|e| fail(e.to_string()))?;
        let addr = heap + off;
        let donor = a.cp_file_make(&key, addr, size).map_err(|e| fail(e.to_string()))?;
        let h = b.cp_file_get(&key).map_err(|e| fail(e.to_string()))?;
        let binding = pair
            .iv
            .bindings(pair.b)
            .into_iter()
            .filter(|x| x.role == Role::Recipient && !x.revoked)
            .max_by_key(|x| x.index)
            .ok_or_else(|| fail("no binding"))?;
        prop_assert_eq!(binding.size, size);
        let cap = pair
            .iv
            .granted_capabilities(pair.b)
            .into_iter()
            .find(|(p, _)| *p == binding.path())
            .map(|(_, c)| c)
            .ok_or_else(|| fail("binding slot holds no capability"))?;
        let mut allowed = Perms::empty();
        if rights.read {
            allowed |= Perms::READ;
        }
        if rights.write {
            allowed |= Perms::WRITE;
        }
        prop_assert!(allowed.contains(cap.perms()), "perms {:?} exceed {:?}", cap.perms(), rights);
        prop_assert!(!cap.perms().intersects(Perms::PRIVILEGED | Perms::EXEC));
        prop_assert!(cap.base() >= addr && cap.top() <= addr + size, "bounds {:?}", cap);
        b.cp_file_destroy(&h).ok();
        a.cp_file_destroy(&donor).map_err(|e| fail(e.to_string()))?;
        Ok(())
    }))
}

// ---- isolation -------------------------------------------------------

#[derive(Clone, Debug)]
enum GuestOp {
    Read(u64, u8),
    Write(u64, u8),
    LoadCap(u64),
    StoreCap(u64),
    Narrow(u64, u64),
    WriteFd(u64, u8),
    ReadFd(u64, u8),
}

/// Addresses biased toward the attacker's own range, every protected
/// range and the edges of each.
fn target(own: (u64, u64), protected: &[(u64, u64)], total: u64) -> BoxedStrategy<u64> {
    let mut arms: Vec<BoxedStrategy<u64>> = vec![(own.0..own.0 + own.1).boxed(), (0..total).boxed()];
    for &(base, len) in protected {
        arms.push((base..base + len).boxed());
        arms.push((0u64..64).prop_map(move |d| (base + len).wrapping_sub(d)).boxed());
        arms.push((0u64..64).prop_map(move |d| base.wrapping_sub(d)).boxed());
    }
    proptest::strategy::Union::new(arms).boxed()
}

fn guest_op(own: (u64, u64), protected: &[(u64, u64)], total: u64) -> impl Strategy<Value = GuestOp> {
    let t = || target(own, protected, total);
    prop_oneof![
        (t(), any::<u8>()).prop_map(|(x, n)| GuestOp::Read(x, n)),
        (t(), any::<u8>()).prop_map(|(x, n)| GuestOp::Write(x, n)),
        t().prop_map(GuestOp::LoadCap),
        t().prop_map(GuestOp::StoreCap),
        (t(), 0..1u64 << 20).prop_map(|(x, n)| GuestOp::Narrow(x, n)),
        (t(), any::<u8>()).prop_map(|(x, n)| GuestOp::WriteFd(x, n)),
        (t(), any::<u8>()).prop_map(|(x, n)| GuestOp::ReadFd(x, n)),
    ]
}

/// Snapshot of bytes and tags over a region.
pub fn image(m: &Machine, base: u64, len: u64) -> (Vec<u8>, Vec<bool>) {
    let tags = (base..base + len).step_by(GRANULE as usize).map(|g| m.tag_at(g)).collect();
    (m.snapshot(base, len), tags)
}

/// Fuzzed program-layer operations in cVM `a` never change a byte or tag
/// of cVM `b`, and no successful read covers `b`'s region.
pub fn isolation(cases: u32) -> Outcome {
    let pair = Pair::new(&[]);
    let ra = pair.iv.cvm(pair.a).unwrap().region;
    let rb = pair.iv.cvm(pair.b).unwrap().region;
    fuzz_isolation(&pair.iv, pair.a, 0, ra, &[rb], cases)
}

/// Two programs over one libOS: program 0 cannot touch program 1's
/// sub-region or the libOS's private pages (Affix, code, binding slots).
pub fn nested_isolation(cases: u32) -> Outcome {
    let iv = Intravisor::new(64 << 20);
    let c = iv
        .cvm_make(DeploymentConfig::new("nested", "idle").with_program("idle"))
        .map_err(|e| e.to_string())?;
    let p0 = &c.layout.programs[0];
    let p1 = &c.layout.programs[1];
    let private = (c.region.0, c.layout.scratch() - c.region.0);
    fuzz_isolation(&iv, c.id, 0, (p0.base, p0.len), &[(p1.base, p1.len), private], cases)
}

/// Runs fuzzed operations from program `prog` of `cvm`, biased toward
/// `own` and the `protected` ranges, and diffs every protected range after
/// each one.
fn fuzz_isolation(
    iv: &Arc<Intravisor>,
    cvm: CvmId,
    prog: usize,
    own: (u64, u64),
    protected: &[(u64, u64)],
    cases: u32,
) -> Outcome {
    let total = iv.machine().size();
    let strat = proptest::collection::vec(guest_op(own, protected, total), 1..24);
    let hits = |x: u64, n: u64| protected.iter().any(|r| x < r.0 + r.1 && x.saturating_add(n) > r.0);
    finish(runner(cases).run(&strat, |ops| {
        let m = iv.machine();
        let images = |m: &Machine| protected.iter().map(|r| image(m, r.0, r.1)).collect::<Vec<_>>();
        let before = images(m);
        let mut g = iv.attach(cvm, prog).map_err(|e| fail(e.to_string()))?;
        for op in ops {
            match op {
                GuestOp::Read(x, n) => {
                    if g.read(x, n as u64).is_ok() {
                        prop_assert!(!hits(x, n as u64), "read {:#x}+{} reached a protected range", x, n);
                    }
                }
                GuestOp::Write(x, n) => {
                    let _ = g.write(x, &vec![0xee; n as usize]);
                }
                GuestOp::LoadCap(x) => {
                    if let Ok(c) = g.load_cap(x & !(GRANULE - 1)) {
                        if c.tag()
                            && g.ctx_mut().set_creg(5, c).is_ok()
                            && g.read_via(5, c.cursor(), 16).is_ok()
                        {
                            prop_assert!(!hits(c.cursor(), 16), "loaded capability reaches {:?}", c);
                        }
                    }
                }
                GuestOp::StoreCap(x) => {
                    let ddc = g.ctx().ddc();
                    let _ = g.store_cap(x & !(GRANULE - 1), ddc);
                }
                GuestOp::Narrow(x, n) => {
                    if let Ok(c) = g.ctx().ddc().set_bounds(x, n) {
                        let _ = g.ctx_mut().install_ddc(c);
                    }
                }
                GuestOp::WriteFd(x, n) => {
                    let _ = g.write_fd(1, x, n as u64);
                }
                GuestOp::ReadFd(x, n) => {
                    let _ = g.read_fd(0, x, n as u64);
                }
            }
            prop_assert!(images(m) == before, "protected memory changed after an op");
        }
        Ok(())
    }))
}
