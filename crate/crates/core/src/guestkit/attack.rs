// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! A catalogue of hostile behaviours run from an `attacker` cVM against a
//! `victim` cVM. Every behaviour must be refused with the expected error and
//! must leave the victim's memory (bytes and tags) bit-identical.

use std::sync::Arc;

use crate::capmachine::{CapFault, CvmId, FaultKind, GRANULE};
use crate::error::Error;
use crate::intravisor::hostcall::{Hostcall, KIND_FILE};
use crate::intravisor::layout::{AFFIX_OCALL, PROG_RET_DATA, PROG_SYSCALL_CODE, PROG_SYSCALL_DATA};
use crate::intravisor::{DeploymentConfig, ExitStatus, Intravisor, Rights};

use super::{Guest, VICTIM_PUBLIC_KEY, VICTIM_SECRET_KEY};

/// Where the victim lives.
#[derive(Clone, Copy, Debug)]
pub struct Target {
    pub victim: CvmId,
    pub attacker: CvmId,
    pub base: u64,
    pub len: u64,
    /// Start of the victim program's heap, where its secret sits.
    pub heap: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Program,
    Libos,
}

type Run = fn(&mut Guest, &Target) -> Result<(), Error>;

struct Behavior {
    name: &'static str,
    layer: Layer,
    expected: Error,
    run: Run,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub name: &'static str,
    pub expected: String,
    pub observed: String,
    pub blocked: bool,
    pub memory_intact: bool,
}

impl AttackOutcome {
    pub fn passed(&self) -> bool {
        self.blocked && self.memory_intact
    }
}

fn fault(kind: FaultKind) -> Error {
    Error::Fault(CapFault::new(kind, ""))
}

fn behaviors() -> Vec<Behavior> {
    vec![
        Behavior {
            name: "read victim heap through ddc",
            layer: Layer::Program,
            expected: fault(FaultKind::Bounds),
            run: |g, t| g.read(t.heap, 32).map(|_| ()),
        },
        Behavior {
            name: "write victim heap through ddc",
            layer: Layer::Program,
            expected: fault(FaultKind::Bounds),
            run: |g, t| g.write(t.heap, &[0xaa; 32]),
        },
        Behavior {
            name: "widen ddc over the victim",
            layer: Layer::Program,
            expected: fault(FaultKind::Monotonicity),
            run: |g, t| {
                let wide = g.ctx().ddc().set_bounds(t.base, t.len)?;
                g.ctx_mut().install_ddc(wide)?;
                g.write(t.heap, &[0; 16])
            },
        },
        Behavior {
            name: "forge a capability from bytes",
            layer: Layer::Program,
            expected: fault(FaultKind::Tag),
            run: |g, t| {
                let at = g.alloc(GRANULE)?;
                let mut raw = [0u8; 16];
                raw[..8].copy_from_slice(&t.heap.to_le_bytes());
                raw[8..].copy_from_slice(&u64::MAX.to_le_bytes());
                g.write(at, &raw)?;
                let forged = g.load_cap(at)?;
                g.ctx_mut().set_creg(5, forged)?;
                g.write_via(5, t.heap, &[0; 16])
            },
        },
        Behavior {
            name: "seal with the data capability",
            layer: Layer::Program,
            expected: fault(FaultKind::Perm),
            run: |g, _| {
                let ddc = g.ctx().ddc();
                ddc.seal(&ddc, 1).map(|_| ()).map_err(Into::into)
            },
        },
        Behavior {
            name: "unseal the syscall gate",
            layer: Layer::Program,
            expected: fault(FaultKind::Perm),
            run: |g, _| {
                let affix = g.program_layout()?.affix();
                let gate = g.load_cap(affix + PROG_SYSCALL_CODE)?;
                gate.unseal(&g.ctx().ddc()).map(|_| ()).map_err(Into::into)
            },
        },
        Behavior {
            name: "dereference a sealed capability",
            layer: Layer::Program,
            expected: fault(FaultKind::SealedImmutable),
            run: |g, t| {
                let affix = g.program_layout()?.affix();
                let gate = g.load_cap(affix + PROG_SYSCALL_CODE)?;
                g.ctx_mut().set_creg(5, gate)?;
                g.read_via(5, t.heap, 16).map(|_| ())
            },
        },
        Behavior {
            name: "cinvoke a mismatched pair",
            layer: Layer::Program,
            expected: fault(FaultKind::SealMismatch),
            run: |g, _| {
                let affix = g.program_layout()?.affix();
                let code = g.load_cap(affix + PROG_SYSCALL_CODE)?;
                let data = g.load_cap(affix + PROG_RET_DATA)?;
                g.invoke(code, data).map(|_| ())
            },
        },
        Behavior {
            name: "cinvoke a data capability as code",
            layer: Layer::Program,
            expected: fault(FaultKind::Perm),
            run: |g, _| {
                let affix = g.program_layout()?.affix();
                let data = g.load_cap(affix + PROG_SYSCALL_DATA)?;
                g.invoke(data, data).map(|_| ())
            },
        },
        Behavior {
            name: "reach the cVM affix from a program",
            layer: Layer::Program,
            expected: fault(FaultKind::Bounds),
            run: |g, _| {
                let affix = g.layout().affix();
                g.load_cap(affix + AFFIX_OCALL).map(|_| ())
            },
        },
        Behavior {
            name: "syscall with a pointer into the victim",
            layer: Layer::Program,
            expected: Error::RangeNotOwned,
            run: |g, t| g.write_fd(1, t.heap, 32).map(|_| ()),
        },
        Behavior {
            name: "stream receive buffer inside the victim",
            layer: Layer::Program,
            expected: Error::RangeNotOwned,
            run: |g, t| {
                let h = g.cp_stream_make("attacker.stream", true)?;
                g.cp_stream_recv(&h, 1, t.heap, 64)
            },
        },
        Behavior {
            name: "probe a key without an ACL entry",
            layer: Layer::Program,
            expected: Error::AccessDenied,
            run: |g, _| g.cp_file_get(VICTIM_SECRET_KEY).map(|_| ()),
        },
        Behavior {
            name: "write through a read-only grant",
            layer: Layer::Program,
            expected: fault(FaultKind::Perm),
            run: |g, _| {
                let h = g.cp_file_get(VICTIM_PUBLIC_KEY)?;
                let src = g.alloc(16)?;
                g.write(src, b"overwritten!!!!!")?;
                g.cp_file_write(&h, src, 0, 16).map(|_| ())
            },
        },
        Behavior {
            name: "hostcall with a pointer into the victim",
            layer: Layer::Libos,
            expected: Error::RangeNotOwned,
            run: |g, t| g.ocall(Hostcall::Print as u64, &[t.heap, 32]).map(|_| ()),
        },
        Behavior {
            name: "revoke a key owned by the victim",
            layer: Layer::Libos,
            expected: Error::NotOwner,
            run: |g, _| {
                let buf = g.scratch();
                g.write(buf, VICTIM_PUBLIC_KEY.as_bytes())?;
                let idx =
                    g.ocall(Hostcall::CapProbe as u64, &[KIND_FILE, buf, VICTIM_PUBLIC_KEY.len() as u64])?;
                g.ocall(Hostcall::CapRevoke as u64, &[idx as u64]).map(|_| ())
            },
        },
        Behavior {
            name: "store a received file capability",
            layer: Layer::Libos,
            expected: fault(FaultKind::Perm),
            run: |g, _| {
                let buf = g.scratch();
                g.write(buf, VICTIM_PUBLIC_KEY.as_bytes())?;
                let idx =
                    g.ocall(Hostcall::CapProbe as u64, &[KIND_FILE, buf, VICTIM_PUBLIC_KEY.len() as u64])?;
                let grant = g.load_cap(g.layout().slot(idx as usize))?;
                g.store_cap(buf, grant)
            },
        },
        Behavior {
            name: "hostcall outside the table",
            layer: Layer::Libos,
            expected: Error::BadHostcall(0xdead),
            run: |g, _| g.ocall(0xdead, &[]).map(|_| ()),
        },
        Behavior {
            name: "replay a spent hostcall return pair",
            layer: Layer::Libos,
            expected: fault(FaultKind::Tag),
            run: |g, _| {
                let (c, d) = (g.ctx().creg(3), g.ctx().creg(4));
                g.ocall(Hostcall::Clock as u64, &[])?;
                g.invoke(c, d).map(|_| ())
            },
        },
    ]
}

/// Bytes and tag bits of `[base, base + len)`.
fn image(iv: &Intravisor, base: u64, len: u64) -> (Vec<u8>, Vec<bool>) {
    let m = iv.machine();
    let tags = (base..base + len).step_by(GRANULE as usize).map(|a| m.tag_at(a)).collect();
    (m.snapshot(base, len), tags)
}

/// Creates `victim` and `attacker` cVMs and waits until the victim has
/// published its two files.
pub fn setup(iv: &Arc<Intravisor>) -> Result<Target, Error> {
    let victim_cfg =
        DeploymentConfig::new("victim", "victim").allow(VICTIM_PUBLIC_KEY, Rights::R, "attacker");
    let victim = iv.cvm_make(victim_cfg)?;
    if let ExitStatus::Faulted(e) = iv.wait(victim.id)? {
        return Err(Error::Io(format!("victim failed: {e}")));
    }
    let attacker = iv.cvm_make(DeploymentConfig::new("attacker", "attacker"))?;
    Ok(Target {
        victim: victim.id,
        attacker: attacker.id,
        base: victim.region.0,
        len: victim.region.1,
        heap: victim.layout.programs[0].heap,
    })
}

/// Runs every behaviour, each on a fresh context, and diffs the victim's
/// memory around it.
pub fn run_suite(iv: &Arc<Intravisor>, t: &Target) -> Result<Vec<AttackOutcome>, Error> {
    let mut out = Vec::new();
    for b in behaviors() {
        let mut g = match b.layer {
            Layer::Program => iv.attach(t.attacker, 0)?,
            Layer::Libos => iv.attach_libos(t.attacker)?,
        };
        let before = image(iv, t.base, t.len);
        let r = (b.run)(&mut g, t);
        drop(g);
        let after = image(iv, t.base, t.len);
        let (observed, blocked) = match r {
            Ok(()) => ("succeeded".to_string(), false),
            Err(e) => (e.to_string(), e.same_kind(&b.expected)),
        };
        out.push(AttackOutcome {
            name: b.name,
            expected: b.expected.to_string(),
            observed,
            blocked,
            memory_intact: before == after,
        });
    }
    Ok(out)
}

/// [`setup`] followed by [`run_suite`].
pub fn attacker_suite(iv: &Arc<Intravisor>) -> Result<Vec<AttackOutcome>, Error> {
    let t = setup(iv)?;
    run_suite(iv, &t)
}
