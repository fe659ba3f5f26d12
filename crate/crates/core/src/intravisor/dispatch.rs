// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use std::io::{Read, Seek, SeekFrom, Write};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::bench::PipeChannel;
use crate::capmachine::{Capability, CvmId, Perms, GRANULE};
use crate::commdev::{CallTarget, DeviceBinding, DeviceKind, Role, Signal, StreamChannel};
use crate::error::{to_abi, Error};
use crate::guestkit::{self, Guest};

use super::config::{acl_rights, Rights};
use super::hostcall::{Hostcall, REVOKE_DETACH, SEAL_PROGRAM_PAIRS};
use super::layout::*;
use super::registry::{Payload, Registry};
use super::{CvmRuntime, Entry, Intravisor, PendingCall, HOSTCALL_RET_CREGS, HOST_TP};

const KEY_MAX: u64 = 256;
const POLL_RECORD: u64 = 16;

/// What a donor publishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advertise {
    File { addr: u64, size: u64 },
    Call { program: usize, func: usize },
    Stream { nonblocking: bool },
}

impl Advertise {
    fn kind(&self) -> DeviceKind {
        match self {
            Advertise::File { .. } => DeviceKind::File,
            Advertise::Call { .. } => DeviceKind::Call,
            Advertise::Stream { .. } => DeviceKind::Stream,
        }
    }
}

fn timeout_from(ms: i64) -> Option<Duration> {
    (ms >= 0).then(|| Duration::from_millis(ms as u64))
}

impl Intravisor {
    /// OCALL gate. Entered with `pcc` at the monitor and `ct6 = MON_DDC`;
    /// leaves through the caller's `c3`/`c4` return pair.
    pub(crate) fn hostcall_gate(self: &Arc<Self>, g: &mut Guest) -> Result<i64, Error> {
        let owner = g.rt().id();
        let ctx = g.ctx_mut();
        let mon_ddc = ctx.ct6();
        ctx.install_ddc(mon_ddc)?;
        let guest_tp = ctx.iregs.tp;
        ctx.iregs.tp = HOST_TP;
        ctx.scrub(5, 30);
        let (id, a) = (ctx.iregs.t0, ctx.iregs.a);

        let result = self.dispatch(g, id, a);

        let ctx = g.ctx_mut();
        ctx.iregs.a[0] = to_abi(result) as u64;
        ctx.scrub(5, 30);
        let (code, data) = (ctx.creg(HOSTCALL_RET_CREGS.0), ctx.creg(HOSTCALL_RET_CREGS.1));
        self.machine.cinvoke(ctx, code, data)?;
        let at = ctx.pcc().cursor();
        if self.entry_at(at) != Some(Entry::HostcallReturn(owner)) {
            return Err(Error::NoEntry(at));
        }
        ctx.install_ddc(ctx.ct6())?;
        self.machine.revoke_lineage(code.lineage());
        let (c, d) = self.mint_hostcall_ret(g.rt());
        let ctx = g.ctx_mut();
        ctx.put_creg(HOSTCALL_RET_CREGS.0, c);
        ctx.put_creg(HOSTCALL_RET_CREGS.1, d);
        ctx.iregs.tp = guest_tp;
        Ok(ctx.iregs.a[0] as i64)
    }

    fn dispatch(self: &Arc<Self>, g: &Guest, id: u64, a: [u64; 6]) -> Result<i64, Error> {
        let rt = g.rt().clone();
        let Some(call) = Hostcall::from_id(id) else {
            return Err(Error::BadHostcall(id));
        };
        let int = |v: u64| i64::try_from(v).map_err(|_| Error::InvalidArgument);
        match call {
            Hostcall::Print => {
                let bytes = self.guest_read(&rt, a[0], a[1])?;
                rt.push_console(&bytes, self.echo.load(std::sync::atomic::Ordering::Relaxed));
                int(a[1])
            }
            Hostcall::Exit => {
                *rt.exit_code.lock() = Some(a[0] as i64);
                Ok(0)
            }
            Hostcall::Clock => int(self.start.elapsed().as_nanos() as u64),
            Hostcall::Sleep => {
                std::thread::sleep(Duration::from_nanos(a[0]));
                Ok(0)
            }
            Hostcall::ThreadCreate => int(self.thread_spawn(rt.id(), a[0] as usize, a[1], a[2])?),
            Hostcall::ThreadJoin => self.thread_join(rt.id(), a[0]),
            Hostcall::Wait => self.futex_wait(&rt, a[0], a[1], a[2] as i64),
            Hostcall::Wake => {
                *rt.futex.lock().entry(a[0]).or_default() += 1;
                rt.futex_cv.notify_all();
                Ok(0)
            }
            Hostcall::Rand => Ok((rand::random::<u64>() >> 1) as i64),
            Hostcall::Argv => {
                let arg = rt.args().get(a[0] as usize).ok_or(Error::InvalidArgument)?;
                let n = (arg.len() as u64).min(a[2]);
                self.guest_write(&rt, a[1], &arg.as_bytes()[..n as usize])?;
                int(arg.len() as u64)
            }
            Hostcall::Yield => {
                std::thread::yield_now();
                Ok(0)
            }
            Hostcall::Log => {
                let bytes = self.guest_read(&rt, a[0], a[1])?;
                rt.event(format!("log: {}", String::from_utf8_lossy(&bytes)));
                Ok(0)
            }
            Hostcall::Seal => match a[0] {
                SEAL_PROGRAM_PAIRS => self.seal_program_pairs(&rt, a[1] as usize).map(|_| 0),
                _ => Err(Error::InvalidArgument),
            },
            Hostcall::DiskRead => self.disk_read(&rt, a[0], a[1], a[2]),
            Hostcall::DiskWrite => self.disk_write(&rt, a[0], a[1], a[2]),
            Hostcall::DiskGetsize => {
                let d = rt.disk.lock();
                let f = d.as_ref().ok_or(Error::BadFd)?;
                int(f.metadata()?.len())
            }
            Hostcall::NetRead => {
                let data: Vec<u8> = {
                    let mut q = rt.net.lock();
                    let n = (a[1] as usize).min(q.len());
                    q.drain(..n).collect()
                };
                self.guest_write(&rt, a[0], &data)?;
                int(data.len() as u64)
            }
            Hostcall::NetWrite => {
                let bytes = self.guest_read(&rt, a[0], a[1])?;
                rt.net.lock().extend(bytes);
                int(a[1])
            }
            Hostcall::NetPoll => int(rt.net.lock().len() as u64),
            Hostcall::CapAdvertise => {
                let key = self.read_key(&rt, a[1], a[2])?;
                let adv = match DeviceKind::from_abi(a[0]).ok_or(Error::InvalidArgument)? {
                    DeviceKind::File => Advertise::File { addr: a[3], size: a[4] },
                    DeviceKind::Call => Advertise::Call { program: a[3] as usize, func: a[4] as usize },
                    DeviceKind::Stream => Advertise::Stream { nonblocking: a[3] != 0 },
                };
                Ok(self.advertise_in(&rt, &key, adv)?.index as i64)
            }
            Hostcall::CapProbe => {
                let key = self.read_key(&rt, a[1], a[2])?;
                let kind = DeviceKind::from_abi(a[0]).ok_or(Error::InvalidArgument)?;
                Ok(self.probe_in(&rt, kind, &key)?.index as i64)
            }
            Hostcall::CapRevoke => {
                let idx = a[0] as usize;
                if a[1] == REVOKE_DETACH {
                    return self.release_in(&rt, idx).map(|_| 0);
                }
                if rt.binding(idx)?.role != Role::Donor {
                    return Err(Error::NotOwner);
                }
                self.release_in(&rt, idx).map(|_| 0)
            }
            Hostcall::CapCall => self.cap_call(&rt, a[0] as usize, a[1] != 0, a[2], a[3]),
            Hostcall::CapCallJoin => self.call_join(rt.id(), a[0]),
            Hostcall::CapFileWait => self.file_signal(&rt, a[0] as usize)?.wait().map(|_| 0),
            Hostcall::CapFileNotify => self.file_signal(&rt, a[0] as usize)?.notify().map(|_| 0),
            Hostcall::CapStreamRecv => {
                let ch = rt.stream_channel(a[0] as usize)?;
                let dst = rt.user_range(a[2], a[3], Perms::WRITE)?.with_lineage(ch.lineage());
                ch.post(a[1], dst)?;
                Ok(0)
            }
            Hostcall::CapStreamSend => self.stream_send(&rt, a[0] as usize, a[1], a[2]),
            Hostcall::CapStreamPoll => {
                let ch = rt.stream_channel(a[0] as usize)?;
                let max = a[2].max(1);
                let out = rt.user_range(a[1], max * POLL_RECORD, Perms::WRITE)?;
                let recs = ch.poll(max as usize, timeout_from(a[3] as i64))?;
                let mut bytes = Vec::with_capacity(recs.len() * POLL_RECORD as usize);
                for (id, n) in &recs {
                    bytes.extend_from_slice(&id.to_le_bytes());
                    bytes.extend_from_slice(&n.to_le_bytes());
                }
                self.machine.write_with(&out, a[1], &bytes)?;
                int(recs.len() as u64)
            }
            Hostcall::PipeOpen => {
                let key = self.read_key(&rt, a[0], a[1])?;
                Ok(self.pipe_open(&key, a[2])?.id() as i64)
            }
            Hostcall::PipeWrite => {
                let pipe = self.pipe(a[0])?;
                let src = rt.user_range(a[1], a[2], Perms::READ)?;
                int(pipe.send(&self.machine, &src, a[2])?)
            }
            Hostcall::PipeRead => {
                let pipe = self.pipe(a[0])?;
                let dst = rt.user_range(a[1], a[2], Perms::WRITE)?;
                int(pipe.recv(&self.machine, &dst, a[2])?)
            }
        }
    }

    fn guest_read(&self, rt: &CvmRuntime, addr: u64, len: u64) -> Result<Vec<u8>, Error> {
        let cap = rt.user_range(addr, len, Perms::READ)?;
        Ok(self.machine.read_with(&cap, addr, len)?)
    }

    fn guest_write(&self, rt: &CvmRuntime, addr: u64, data: &[u8]) -> Result<(), Error> {
        let cap = rt.user_range(addr, data.len() as u64, Perms::WRITE)?;
        Ok(self.machine.write_with(&cap, addr, data)?)
    }

    fn read_key(&self, rt: &CvmRuntime, addr: u64, len: u64) -> Result<Vec<u8>, Error> {
        if len == 0 || len > KEY_MAX {
            return Err(Error::InvalidArgument);
        }
        self.guest_read(rt, addr, len)
    }

    fn futex_wait(&self, rt: &CvmRuntime, addr: u64, expected: u64, timeout_ms: i64) -> Result<i64, Error> {
        if !addr.is_multiple_of(8) {
            return Err(Error::Fault(crate::capmachine::CapFault::new(
                crate::capmachine::FaultKind::Alignment,
                "futex word must be 8-byte aligned",
            )));
        }
        let deadline = timeout_from(timeout_ms).map(|t| Instant::now() + t);
        let mut seqs = rt.futex.lock();
        let word = self.guest_read(rt, addr, 8)?;
        if u64::from_le_bytes(word.try_into().expect("8 bytes")) != expected {
            return Ok(1);
        }
        let seq0 = *seqs.entry(addr).or_default();
        while seqs.get(&addr).copied().unwrap_or_default() == seq0 {
            match deadline {
                Some(d) => {
                    if rt.futex_cv.wait_until(&mut seqs, d).timed_out() {
                        return Err(Error::Timeout);
                    }
                }
                None => rt.futex_cv.wait(&mut seqs),
            }
        }
        Ok(0)
    }

    /// Seals the syscall pair and the program-return pair for program `p`
    /// and stores them in the program's affix page.
    fn seal_program_pairs(&self, rt: &CvmRuntime, p: usize) -> Result<(), Error> {
        let l = &rt.cvm.layout;
        let pl = l.programs.get(p).ok_or(Error::InvalidArgument)?;
        let pddc = rt.program_ddc(p)?;
        let o = rt.otypes;
        let pairs = [
            (PROG_SYSCALL_CODE, self.seal(rt.pcc().with_cursor(l.syscall_entry())?, o.syscall)),
            (PROG_SYSCALL_DATA, self.seal(rt.ddc(), o.syscall)),
            (PROG_RET_CODE, self.seal(rt.pcc().with_cursor(l.program_return(p))?, o.prog_ret)),
            (PROG_RET_DATA, self.seal(pddc, o.prog_ret)),
        ];
        for (off, cap) in pairs {
            self.machine.store_cap_with(&self.root, pl.affix() + off, cap)?;
        }
        Ok(())
    }

    fn disk_read(&self, rt: &CvmRuntime, buf: u64, len: u64, off: u64) -> Result<i64, Error> {
        let cap = rt.user_range(buf, len, Perms::WRITE)?;
        let mut data = vec![0; len as usize];
        let n = {
            let mut d = rt.disk.lock();
            let f = d.as_mut().ok_or(Error::BadFd)?;
            f.seek(SeekFrom::Start(off))?;
            let mut n = 0;
            while n < data.len() {
                match f.read(&mut data[n..])? {
                    0 => break,
                    k => n += k,
                }
            }
            n
        };
        self.machine.write_with(&cap, buf, &data[..n])?;
        Ok(n as i64)
    }

    fn disk_write(&self, rt: &CvmRuntime, buf: u64, len: u64, off: u64) -> Result<i64, Error> {
        let data = self.guest_read(rt, buf, len)?;
        let mut d = rt.disk.lock();
        let f = d.as_mut().ok_or(Error::BadFd)?;
        f.seek(SeekFrom::Start(off))?;
        f.write_all(&data)?;
        Ok(len as i64)
    }

    fn pipe_open(&self, key: &[u8], capacity: u64) -> Result<Arc<PipeChannel>, Error> {
        let mut pipes = self.pipes.lock();
        if let Some(p) = pipes.get(key) {
            return Ok(p.clone());
        }
        if capacity == 0 {
            return Err(Error::InvalidArgument);
        }
        let base = self.alloc_region(capacity)?;
        let staging = self.root.set_bounds(base, capacity)?.and_perms(Perms::READ | Perms::WRITE)?;
        let pipe = Arc::new(PipeChannel::new(self.next_id(), staging));
        pipes.insert(key.to_vec(), pipe.clone());
        self.pipe_ids.write().insert(pipe.id(), pipe.clone());
        Ok(pipe)
    }

    fn pipe(&self, id: u64) -> Result<Arc<PipeChannel>, Error> {
        self.pipe_ids.read().get(&id).cloned().ok_or(Error::NoSuchHandle)
    }

    // ---- registry ----------------------------------------------------

    /// Publishes `adv` under `key` on behalf of `donor`.
    pub fn advertise(
        self: &Arc<Self>,
        donor: CvmId,
        key: &[u8],
        adv: Advertise,
    ) -> Result<DeviceBinding, Error> {
        let rt = self.rt(donor)?;
        self.advertise_in(&rt, key, adv)
    }

    /// Builds a device binding for `recipient` if the key's ACL allows it.
    pub fn probe(&self, recipient: CvmId, kind: DeviceKind, key: &[u8]) -> Result<DeviceBinding, Error> {
        let rt = self.rt(recipient)?;
        self.probe_in(&rt, kind, key)
    }

    /// Revokes `key`. Only the donor may do this.
    pub fn revoke(&self, donor: CvmId, key: &[u8]) -> Result<(), Error> {
        let mut reg = self.registry.lock();
        let e = reg.by_key(key).ok_or(Error::NoSuchKey)?;
        if e.donor != donor {
            return Err(Error::NotOwner);
        }
        let id = e.id;
        self.revoke_entry(&mut reg, id)
    }

    fn advertise_in(&self, rt: &CvmRuntime, key: &[u8], adv: Advertise) -> Result<DeviceBinding, Error> {
        let lineage = self.machine.new_lineage();
        let payload = match adv {
            Advertise::File { addr, size } => {
                let cap = rt.user_range(addr, size, Perms::READ | Perms::WRITE)?.with_lineage(lineage);
                Payload::File { cap, signal: Arc::new(Signal::default()) }
            }
            Advertise::Call { program, func } => {
                let prog = rt.programs.get(program).ok_or(Error::UnknownFunc)?;
                if func >= prog.exports.len() {
                    return Err(Error::UnknownFunc);
                }
                let o = rt.otypes.call;
                let code = rt.pcc().with_cursor(rt.cvm.layout.func(program, func))?;
                Payload::Call(CallTarget {
                    code: self.seal(code, o),
                    data: self.seal(rt.program_ddc(program)?, o),
                    program,
                    func,
                })
            }
            Advertise::Stream { nonblocking } => {
                Payload::Stream(Arc::new(StreamChannel::new(nonblocking, lineage)))
            }
        };
        let file_cap = match &payload {
            Payload::File { cap, .. } => Some(*cap),
            _ => None,
        };
        let channel = match &payload {
            Payload::Stream(ch) => Some(ch.clone()),
            _ => None,
        };
        let mut reg = self.registry.lock();
        let (eid, epoch) = {
            let e = reg.insert(key, rt.id(), payload, rt.cfg.allow.clone(), lineage)?;
            (e.id, e.epoch)
        };
        let binding = DeviceBinding {
            index: 0,
            role: Role::Donor,
            kind: adv.kind(),
            entry: eid,
            epoch,
            size: file_cap.map_or(0, |c| c.length()),
            revoked: false,
        };
        let idx = match rt.add_binding(binding.clone()) {
            Ok(i) => i,
            Err(e) => {
                reg.remove(eid);
                return Err(e);
            }
        };
        reg.get_mut(eid).expect("inserted above").bindings.push((rt.id(), idx));
        if let Some(cap) = file_cap {
            self.machine.store_cap_with(&self.root, rt.cvm.layout.slot(idx), cap)?;
        }
        if let Some(ch) = channel {
            rt.map_stream(idx, ch);
        }
        self.revoked_keys.lock().remove(key);
        Ok(DeviceBinding { index: idx, ..binding })
    }

    fn probe_in(&self, rt: &CvmRuntime, kind: DeviceKind, key: &[u8]) -> Result<DeviceBinding, Error> {
        let mut reg = self.registry.lock();
        let Some(e) = reg.by_key(key) else {
            return Err(if self.revoked_keys.lock().contains(key) {
                Error::Revoked
            } else {
                Error::NoSuchKey
            });
        };
        if e.kind() != kind {
            return Err(Error::InvalidArgument);
        }
        let rights = if e.donor == rt.id() {
            Rights::RW
        } else {
            acl_rights(&e.acl, key, rt.name()).ok_or(Error::AccessDenied)?
        };
        let grant = match &e.payload {
            Payload::File { cap, .. } => {
                let mut mask = Perms::empty();
                if rights.read {
                    mask |= Perms::READ;
                }
                if rights.write {
                    mask |= Perms::WRITE;
                }
                Some(cap.and_perms(mask)?)
            }
            _ => None,
        };
        let binding = DeviceBinding {
            index: 0,
            role: Role::Recipient,
            kind,
            entry: e.id,
            epoch: e.epoch,
            size: grant.map_or(0, |c| c.length()),
            revoked: false,
        };
        let idx = rt.add_binding(binding.clone())?;
        e.bindings.push((rt.id(), idx));
        if let Payload::Stream(ch) = &e.payload {
            rt.map_stream(idx, ch.clone());
        }
        if let Some(cap) = grant {
            self.machine.store_cap_with(&self.root, rt.cvm.layout.slot(idx), cap)?;
        }
        Ok(DeviceBinding { index: idx, ..binding })
    }

    /// Removes an entry, kills its lineage, scrubs every binding slot and
    /// releases blocked waiters. Runs under the registry lock.
    fn revoke_entry(&self, reg: &mut Registry, id: u64) -> Result<(), Error> {
        let e = reg.remove(id).ok_or(Error::Revoked)?;
        self.machine.revoke_lineage(e.lineage);
        for (cvm, idx) in &e.bindings {
            if let Some(rt) = self.runtime(*cvm) {
                rt.mark_revoked(*idx);
                if e.kind() == DeviceKind::File {
                    self.machine.write_with(&self.root, rt.cvm.layout.slot(*idx), &[0; GRANULE as usize])?;
                }
            }
        }
        match &e.payload {
            Payload::File { signal, .. } => signal.revoke(),
            Payload::Stream(ch) => ch.revoke(),
            Payload::Call(_) => {}
        }
        self.revoked_keys.lock().insert(e.key);
        Ok(())
    }

    /// Frees binding `idx` of `rt`. A donor's live entry is revoked first; a
    /// recipient only detaches from it. Revoked bindings stay in their slot
    /// until released, so stale handles keep failing with `Revoked`.
    fn release_in(&self, rt: &CvmRuntime, idx: usize) -> Result<(), Error> {
        let mut reg = self.registry.lock();
        let b = rt.binding_any(idx)?;
        if !b.revoked {
            match b.role {
                Role::Donor => self.revoke_entry(&mut reg, b.entry)?,
                Role::Recipient => {
                    if let Some(e) = reg.get_mut(b.entry) {
                        e.bindings.retain(|&h| h != (rt.id(), idx));
                    }
                }
            }
        }
        rt.free_binding(idx);
        self.machine.write_with(&self.root, rt.cvm.layout.slot(idx), &[0; GRANULE as usize])?;
        Ok(())
    }

    /// Host-side release of binding `idx` held by cVM `id`.
    pub fn release(&self, id: CvmId, idx: usize) -> Result<(), Error> {
        let rt = self.rt(id)?;
        self.release_in(&rt, idx)
    }

    fn live_entry<T>(
        &self,
        rt: &CvmRuntime,
        idx: usize,
        kind: DeviceKind,
        f: impl FnOnce(&Payload, CvmId) -> T,
    ) -> Result<T, Error> {
        let b = rt.binding(idx)?;
        if b.kind != kind {
            return Err(Error::InvalidArgument);
        }
        let reg = self.registry.lock();
        let e = reg.get(b.entry).ok_or(Error::Revoked)?;
        Ok(f(&e.payload, e.donor))
    }

    fn file_signal(&self, rt: &CvmRuntime, idx: usize) -> Result<Arc<Signal>, Error> {
        self.live_entry(rt, idx, DeviceKind::File, |p, _| match p {
            Payload::File { signal, .. } => signal.clone(),
            _ => unreachable!("kind checked"),
        })
    }

    fn stream_send(&self, rt: &CvmRuntime, idx: usize, buf: u64, len: u64) -> Result<i64, Error> {
        let ch = rt.stream_channel(idx)?;
        let src = rt.user_range(buf, len, Perms::READ)?;
        let posted = ch.take()?;
        let n = len.min(posted.dst.length());
        match self.machine.capcpy(&posted.dst, 0, &src, 0, n) {
            Ok(_) => {
                ch.complete(posted.id, n);
                Ok(n as i64)
            }
            Err(_) if !self.machine.is_live(&posted.dst) => Err(Error::Revoked),
            Err(f) => {
                ch.untake(posted);
                Err(f.into())
            }
        }
    }

    fn cap_call(
        self: &Arc<Self>,
        rt: &Arc<CvmRuntime>,
        idx: usize,
        is_async: bool,
        arg: u64,
        size: u64,
    ) -> Result<i64, Error> {
        let (target, donor) = self.live_entry(rt, idx, DeviceKind::Call, |p, d| match p {
            Payload::Call(t) => (*t, d),
            _ => unreachable!("kind checked"),
        })?;
        if size > ARG_MAX {
            return Err(Error::InvalidArgument);
        }
        let src = rt.user_range(arg, size, Perms::READ)?;
        let donor = self.rt(donor)?;
        let slot = donor.take_stack()?;
        let arg_addr = donor.cvm.layout.programs[target.program].arg_page(slot.tls_index());
        let dst = donor.user_range(arg_addr, size, Perms::WRITE)?;
        if let Err(e) = self.machine.capcpy(&dst, 0, &src, 0, size) {
            donor.release_stack(slot);
            return Err(e.into());
        }
        let iv = self.clone();
        let handle =
            std::thread::Builder::new().name(format!("{}-call", donor.cvm.name)).spawn(move || {
                let g =
                    iv.enter_call(&donor, slot, target.code, target.data, [arg_addr, size, 0, 0, 0, 0])?;
                guestkit::run_call(g)
            })?;
        if is_async {
            let id = self.next_id();
            self.pending_calls.lock().insert(id, PendingCall { caller: rt.id(), handle });
            Ok(id as i64)
        } else {
            Self::call_result(handle)
        }
    }

    fn call_result(handle: std::thread::JoinHandle<Result<i64, Error>>) -> Result<i64, Error> {
        match handle.join() {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(Error::Fault(_) | Error::NoEntry(_))) | Err(_) => Err(Error::CalleeFault),
            Ok(Err(e)) => Err(e),
        }
    }

    fn call_join(&self, caller: CvmId, id: u64) -> Result<i64, Error> {
        let pending = {
            let mut calls = self.pending_calls.lock();
            match calls.get(&id) {
                Some(p) if p.caller == caller => calls.remove(&id),
                _ => None,
            }
        };
        let p = pending.ok_or(Error::NoSuchHandle)?;
        Self::call_result(p.handle)
    }

    /// Region that `call` copies arguments into, for tests and tracing.
    pub fn arg_page(&self, id: CvmId, program: usize, slot: usize) -> Option<u64> {
        self.runtime(id).and_then(|rt| rt.cvm.layout.programs.get(program).map(|p| p.arg_page(slot)))
    }

    /// Capability stored in binding slot `idx` of cVM `id`, as the shim
    /// would load it.
    pub fn binding_capability(&self, id: CvmId, idx: usize) -> Option<Capability> {
        let rt = self.runtime(id)?;
        self.machine.load_cap_with(&self.root, rt.cvm.layout.slot(idx)).ok()
    }
}
