// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Code that runs inside a cVM.
//!
//! A [`Guest`] is one execution context confined to a cVM. It sits at one
//! of two layers: the libOS shim, whose ddc covers the whole cVM region, or
//! a program, whose ddc covers only that program's sub-region. Programs
//! reach the shim through the sealed syscall pair; the shim reaches the
//! Intravisor through the Affix OCALL pair.

pub mod attack;
mod init;
pub mod programs;
mod shim;

use std::sync::Arc;
use std::time::Duration;

use crate::capmachine::{Auth, Capability, CompartmentContext, CvmId, Machine};
use crate::commdev::{CallHandle, FileHandle, Role, StreamHandle};
use crate::error::{from_abi, Error};
use crate::intravisor::layout::*;
use crate::intravisor::{CvmLayout, CvmRuntime, Entry, Intravisor, PROG_RET_CREGS};

pub use init::{run_call, run_entry};
pub use programs::{
    ExportFn, GuestProgram, MainFn, ProgramRegistry, VICTIM_PUBLIC_KEY, VICTIM_SECRET, VICTIM_SECRET_KEY,
};
pub use shim::{Desc, ShimLibOS, Sysno};

/// `t0` selectors for the cVM entry point.
pub const ID_INIT: u64 = 0;
pub const ID_THREAD: u64 = 1;
pub const ID_ATTACH: u64 = 3;

/// Scratch page layout used by the syscall wrappers.
const SCRATCH_KEY: u64 = 0;
const SCRATCH_DATA: u64 = 256;
const POLL_MAX: u64 = (PAGE - SCRATCH_DATA) / 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Libos,
    Program(usize),
}

/// Which stack (and thread-local area) a context runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackSlot {
    Main,
    Pool(usize),
}

impl StackSlot {
    pub fn tls_index(self) -> usize {
        match self {
            StackSlot::Main => 0,
            StackSlot::Pool(i) => i + 1,
        }
    }
}

pub struct Guest {
    iv: Arc<Intravisor>,
    rt: Arc<CvmRuntime>,
    ctx: CompartmentContext,
    layer: Layer,
    slot: StackSlot,
    /// libOS ddc saved while a program runs on this context.
    libos_ddc: Option<Capability>,
    returned: bool,
}

impl Drop for Guest {
    fn drop(&mut self) {
        self.rt.release_stack(self.slot);
    }
}

impl Guest {
    pub(crate) fn new(
        iv: Arc<Intravisor>,
        rt: Arc<CvmRuntime>,
        ctx: CompartmentContext,
        slot: StackSlot,
    ) -> Self {
        Self { iv, rt, ctx, layer: Layer::Libos, slot, libos_ddc: None, returned: false }
    }

    pub fn cvm_id(&self) -> CvmId {
        self.rt.id()
    }

    pub fn cvm_name(&self) -> &str {
        self.rt.name()
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn ctx(&self) -> &CompartmentContext {
        &self.ctx
    }

    pub fn ctx_mut(&mut self) -> &mut CompartmentContext {
        &mut self.ctx
    }

    pub fn machine(&self) -> &Machine {
        self.iv.machine()
    }

    pub fn intravisor(&self) -> &Arc<Intravisor> {
        &self.iv
    }

    pub(crate) fn rt(&self) -> &Arc<CvmRuntime> {
        &self.rt
    }

    pub fn layout(&self) -> &CvmLayout {
        self.rt.layout()
    }

    pub fn slot(&self) -> StackSlot {
        self.slot
    }

    /// True once this context has returned to the Intravisor.
    pub fn has_returned(&self) -> bool {
        self.returned
    }

    fn program(&self) -> Result<usize, Error> {
        match self.layer {
            Layer::Program(p) => Ok(p),
            Layer::Libos => Err(Error::InvalidArgument),
        }
    }

    pub fn program_layout(&self) -> Result<&ProgramLayout, Error> {
        Ok(&self.layout().programs[self.program()?])
    }

    /// `(base, len)` of the current program's heap.
    pub fn heap(&self) -> Result<(u64, u64), Error> {
        let pl = self.program_layout()?;
        Ok((pl.heap, pl.heap_len))
    }

    /// Bump-allocates from the current program's heap.
    pub fn alloc(&mut self, len: u64) -> Result<u64, Error> {
        self.rt.heap_alloc(self.program()?, len)
    }

    /// This context's private scratch page.
    pub fn scratch(&self) -> u64 {
        match self.layer {
            Layer::Program(p) => self.layout().programs[p].tls_for(self.slot.tls_index()),
            Layer::Libos => self.layout().scratch(),
        }
    }

    // ---- memory through ddc ---------------------------------------

    fn ddc_offset(&self, addr: u64) -> i64 {
        addr.wrapping_sub(self.ctx.ddc().cursor()) as i64
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, Error> {
        Ok(self.machine().load_bytes(&self.ctx, Auth::Ddc, self.ddc_offset(addr), len as usize)?)
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), Error> {
        let off = self.ddc_offset(addr);
        Ok(self.iv.machine().store_bytes(&self.ctx, Auth::Ddc, off, data)?)
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, Error> {
        let b = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Result<(), Error> {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn load_cap(&self, addr: u64) -> Result<Capability, Error> {
        Ok(self.machine().load_cap(&self.ctx, Auth::Ddc, addr)?)
    }

    pub fn store_cap(&mut self, addr: u64, cap: Capability) -> Result<(), Error> {
        Ok(self.iv.machine().store_cap(&self.ctx, Auth::Ddc, addr, cap)?)
    }

    /// Reads through capability register `reg` at an absolute address.
    pub fn read_via(&self, reg: usize, addr: u64, len: u64) -> Result<Vec<u8>, Error> {
        let cap = self.ctx.creg(reg);
        let off = addr.wrapping_sub(cap.cursor()) as i64;
        Ok(self.machine().load_bytes(&self.ctx, Auth::Reg(reg), off, len as usize)?)
    }

    pub fn write_via(&mut self, reg: usize, addr: u64, data: &[u8]) -> Result<(), Error> {
        let cap = self.ctx.creg(reg);
        let off = addr.wrapping_sub(cap.cursor()) as i64;
        Ok(self.iv.machine().store_bytes(&self.ctx, Auth::Reg(reg), off, data)?)
    }

    // ---- transitions -----------------------------------------------

    /// `cinvoke` on `(code, data)` followed by whatever runs at the target.
    /// Returns `a0` when control comes back to this context.
    pub fn invoke(&mut self, code: Capability, data: Capability) -> Result<i64, Error> {
        self.iv.machine().cinvoke(&mut self.ctx, code, data)?;
        let at = self.ctx.pcc().cursor();
        let me = self.rt.id();
        match self.iv.entry_at(at) {
            Some(Entry::Ocall) => {
                let iv = self.iv.clone();
                iv.hostcall_gate(self)
            }
            Some(Entry::MonitorRet) => {
                self.returned = true;
                Ok(self.ctx.iregs.a[0] as i64)
            }
            Some(Entry::Syscall(c)) if c == me => shim::syscall_entry(self),
            Some(Entry::HostcallReturn(c)) if c == me => {
                self.ctx.install_ddc(self.ctx.ct6())?;
                self.layer = Layer::Libos;
                Ok(self.ctx.iregs.a[0] as i64)
            }
            Some(Entry::ProgramReturn(c, p)) if c == me => {
                self.ctx.install_ddc(self.ctx.ct6())?;
                self.layer = Layer::Program(p);
                Ok(self.ctx.iregs.a[0] as i64)
            }
            _ => Err(Error::NoEntry(at)),
        }
    }

    fn set_args(&mut self, t0: u64, args: &[u64]) -> Result<(), Error> {
        if args.len() > 6 {
            return Err(Error::InvalidArgument);
        }
        self.ctx.iregs.t0 = t0;
        self.ctx.iregs.a = [0; 6];
        self.ctx.iregs.a[..args.len()].copy_from_slice(args);
        Ok(())
    }

    /// Hostcall through the Affix. Returns raw `a0`; only machine faults
    /// are errors. Program-layer code cannot reach the Affix and faults.
    pub fn ocall_raw(&mut self, id: u64, args: &[u64]) -> Result<i64, Error> {
        let affix = self.layout().affix();
        let ocall = self.load_cap(affix + AFFIX_OCALL)?;
        let mon = self.load_cap(affix + AFFIX_MON_DDC)?;
        self.set_args(id, args)?;
        self.invoke(ocall, mon)
    }

    /// Hostcall with negative results decoded into errors.
    pub fn ocall(&mut self, id: u64, args: &[u64]) -> Result<i64, Error> {
        match from_abi(self.ocall_raw(id, args)?) {
            // The return value carries no id; put it back.
            Err(Error::BadHostcall(_)) => Err(Error::BadHostcall(id)),
            r => r,
        }
    }

    /// System call into the libOS through the sealed syscall pair: exactly
    /// one `cinvoke` down and one back. Returns raw `a0`.
    pub fn syscall_raw(&mut self, no: u64, args: &[u64]) -> Result<i64, Error> {
        let p = self.program()?;
        let affix = self.layout().programs[p].affix();
        let code = self.load_cap(affix + PROG_SYSCALL_CODE)?;
        let data = self.load_cap(affix + PROG_SYSCALL_DATA)?;
        self.set_args(no, args)?;
        self.invoke(code, data)
    }

    pub fn syscall(&mut self, no: Sysno, args: &[u64]) -> Result<i64, Error> {
        from_abi(self.syscall_raw(no as u64, args)?)
    }

    /// libOS → program: installs the program's return pair and narrows ddc
    /// to the program sub-region.
    pub(crate) fn enter_program(&mut self, p: usize) -> Result<(), Error> {
        if self.layer != Layer::Libos {
            return Err(Error::InvalidArgument);
        }
        let pl = self.layout().programs.get(p).cloned().ok_or(Error::InvalidArgument)?;
        let c1 = self.load_cap(pl.affix() + PROG_RET_CODE)?;
        let c2 = self.load_cap(pl.affix() + PROG_RET_DATA)?;
        self.ctx.set_creg(PROG_RET_CREGS.0, c1)?;
        self.ctx.set_creg(PROG_RET_CREGS.1, c2)?;
        let libos = self.ctx.ddc();
        let pddc = libos.set_bounds(pl.base, pl.len)?;
        let pcc = self.ctx.pcc().with_cursor(self.layout().program_return(p))?;
        self.ctx.install_ddc(pddc)?;
        self.ctx.set_pcc(pcc);
        self.ctx.iregs.tp = pl.tls_for(self.slot.tls_index());
        self.libos_ddc = Some(libos);
        self.layer = Layer::Program(p);
        Ok(())
    }

    /// Program → libOS at the end of a program entry.
    pub(crate) fn leave_program(&mut self) -> Result<(), Error> {
        let ddc = self.libos_ddc.take().ok_or(Error::InvalidArgument)?;
        self.ctx.install_ddc(ddc)?;
        self.ctx.scrub(PROG_RET_CREGS.0, PROG_RET_CREGS.1);
        self.layer = Layer::Libos;
        Ok(())
    }

    /// libOS → Intravisor through `(RET, MON_DDC)`.
    pub(crate) fn return_to_monitor(&mut self, code: i64) -> Result<(), Error> {
        let affix = self.layout().affix();
        let ret = self.load_cap(affix + AFFIX_RET)?;
        let mon = self.load_cap(affix + AFFIX_MON_DDC)?;
        self.set_args(0, &[code as u64])?;
        self.invoke(ret, mon)?;
        Ok(())
    }

    // ---- program-layer system calls --------------------------------

    fn put_key(&mut self, key: &str) -> Result<(u64, u64), Error> {
        if key.is_empty() || key.len() > SCRATCH_DATA as usize {
            return Err(Error::InvalidArgument);
        }
        let at = self.scratch() + SCRATCH_KEY;
        self.write(at, key.as_bytes())?;
        Ok((at, key.len() as u64))
    }

    /// Writes `s` to the console.
    pub fn print(&mut self, s: &str) -> Result<(), Error> {
        let buf = self.scratch() + SCRATCH_DATA;
        for chunk in s.as_bytes().chunks((PAGE - SCRATCH_DATA) as usize) {
            self.write(buf, chunk)?;
            self.syscall(Sysno::Write, &[1, buf, chunk.len() as u64])?;
        }
        Ok(())
    }

    pub fn read_fd(&mut self, fd: u64, buf: u64, len: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::Read, &[fd, buf, len])? as u64)
    }

    pub fn write_fd(&mut self, fd: u64, buf: u64, len: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::Write, &[fd, buf, len])? as u64)
    }

    pub fn open(&mut self, path: &str) -> Result<u64, Error> {
        let (a, n) = self.put_key(path)?;
        Ok(self.syscall(Sysno::Open, &[a, n])? as u64)
    }

    pub fn close(&mut self, fd: u64) -> Result<(), Error> {
        self.syscall(Sysno::Close, &[fd]).map(|_| ())
    }

    pub fn lseek(&mut self, fd: u64, pos: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::Lseek, &[fd, pos])? as u64)
    }

    /// Size of the object behind `fd`.
    pub fn fstat(&mut self, fd: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::Fstat, &[fd])? as u64)
    }

    pub fn exit(&mut self, code: i64) -> Result<i64, Error> {
        self.syscall(Sysno::Exit, &[code as u64])?;
        Ok(code)
    }

    pub fn sleep(&mut self, d: Duration) -> Result<(), Error> {
        self.syscall(Sysno::Sleep, &[d.as_nanos() as u64]).map(|_| ())
    }

    pub fn yield_now(&mut self) -> Result<(), Error> {
        self.syscall(Sysno::Yield, &[]).map(|_| ())
    }

    pub fn clock_ns(&mut self) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::Clock, &[])? as u64)
    }

    pub fn rand(&mut self) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::Rand, &[])? as u64)
    }

    pub fn log(&mut self, s: &str) -> Result<(), Error> {
        let buf = self.scratch() + SCRATCH_DATA;
        let b = &s.as_bytes()[..s.len().min((PAGE - SCRATCH_DATA) as usize)];
        self.write(buf, b)?;
        self.syscall(Sysno::Log, &[buf, b.len() as u64]).map(|_| ())
    }

    /// Blocks while the word at `addr` equals `expected`. `Ok(true)` if
    /// woken, `Ok(false)` if the value had already changed.
    pub fn futex_wait(&mut self, addr: u64, expected: u64, timeout: Option<Duration>) -> Result<bool, Error> {
        let ms = timeout.map_or(-1, |t| t.as_millis() as i64);
        Ok(self.syscall(Sysno::FutexWait, &[addr, expected, ms as u64])? == 0)
    }

    pub fn futex_wake(&mut self, addr: u64) -> Result<(), Error> {
        self.syscall(Sysno::FutexWake, &[addr, u64::MAX]).map(|_| ())
    }

    /// Starts exported function `func` of the current program on a new
    /// thread.
    pub fn thread_create(&mut self, func: usize, arg: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::ThreadCreate, &[func as u64, arg])? as u64)
    }

    pub fn thread_join(&mut self, tid: u64) -> Result<i64, Error> {
        self.syscall(Sysno::ThreadJoin, &[tid])
    }

    // ---- CAP_FILE ----------------------------------------------------

    pub fn cp_file_make(&mut self, key: &str, addr: u64, size: u64) -> Result<FileHandle, Error> {
        let (k, n) = self.put_key(key)?;
        let fd = self.syscall(Sysno::CpFileMake, &[k, n, addr, size])? as u64;
        Ok(FileHandle { fd, role: Role::Donor, size })
    }

    pub fn cp_file_get(&mut self, key: &str) -> Result<FileHandle, Error> {
        let (k, n) = self.put_key(key)?;
        let fd = self.syscall(Sysno::CpFileGet, &[k, n])? as u64;
        let size = self.fstat(fd)?;
        Ok(FileHandle { fd, role: Role::Recipient, size })
    }

    pub fn cp_file_read(&mut self, h: &FileHandle, dst: u64, off: u64, len: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::CpFileRead, &[h.fd, dst, off, len])? as u64)
    }

    pub fn cp_file_write(&mut self, h: &FileHandle, src: u64, off: u64, len: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::CpFileWrite, &[h.fd, src, off, len])? as u64)
    }

    pub fn cp_file_wait(&mut self, h: &FileHandle) -> Result<(), Error> {
        self.syscall(Sysno::CpFileWait, &[h.fd]).map(|_| ())
    }

    pub fn cp_file_notify(&mut self, h: &FileHandle) -> Result<(), Error> {
        self.syscall(Sysno::CpFileNotify, &[h.fd]).map(|_| ())
    }

    pub fn cp_file_destroy(&mut self, h: &FileHandle) -> Result<(), Error> {
        self.syscall(Sysno::CpDestroy, &[h.fd]).map(|_| ())
    }

    // ---- CAP_CALL ----------------------------------------------------

    pub fn cp_call_make(&mut self, key: &str, func: usize) -> Result<CallHandle, Error> {
        let (k, n) = self.put_key(key)?;
        let fd = self.syscall(Sysno::CpCallMake, &[k, n, func as u64])? as u64;
        Ok(CallHandle { fd, role: Role::Donor })
    }

    pub fn cp_call_get(&mut self, key: &str) -> Result<CallHandle, Error> {
        let (k, n) = self.put_key(key)?;
        let fd = self.syscall(Sysno::CpCallGet, &[k, n])? as u64;
        Ok(CallHandle { fd, role: Role::Recipient })
    }

    /// Synchronous call; the argument is `size` bytes at `arg`.
    pub fn cp_call(&mut self, h: &CallHandle, arg: u64, size: u64) -> Result<i64, Error> {
        self.syscall(Sysno::CpCall, &[h.fd, 0, arg, size])
    }

    /// Asynchronous call; returns a completion id for [`Guest::cp_call_join`].
    pub fn cp_call_async(&mut self, h: &CallHandle, arg: u64, size: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::CpCall, &[h.fd, 1, arg, size])? as u64)
    }

    pub fn cp_call_join(&mut self, id: u64) -> Result<i64, Error> {
        self.syscall(Sysno::CpCallJoin, &[id])
    }

    pub fn cp_call_destroy(&mut self, h: &CallHandle) -> Result<(), Error> {
        self.syscall(Sysno::CpDestroy, &[h.fd]).map(|_| ())
    }

    // ---- CAP_STREAM --------------------------------------------------

    pub fn cp_stream_make(&mut self, key: &str, nonblocking: bool) -> Result<StreamHandle, Error> {
        let (k, n) = self.put_key(key)?;
        let fd = self.syscall(Sysno::CpStreamMake, &[k, n, nonblocking as u64])? as u64;
        Ok(StreamHandle { fd, role: Role::Donor })
    }

    pub fn cp_stream_get(&mut self, key: &str) -> Result<StreamHandle, Error> {
        let (k, n) = self.put_key(key)?;
        let fd = self.syscall(Sysno::CpStreamGet, &[k, n])? as u64;
        Ok(StreamHandle { fd, role: Role::Recipient })
    }

    /// Registers `size` bytes at `buf` as receive buffer `id`.
    pub fn cp_stream_recv(&mut self, h: &StreamHandle, id: u64, buf: u64, size: u64) -> Result<(), Error> {
        self.syscall(Sysno::CpStreamRecv, &[h.fd, id, buf, size]).map(|_| ())
    }

    pub fn cp_stream_send(&mut self, h: &StreamHandle, buf: u64, len: u64) -> Result<u64, Error> {
        Ok(self.syscall(Sysno::CpStreamSend, &[h.fd, buf, len])? as u64)
    }

    /// Completed `(buffer id, bytes)` pairs; waits up to `timeout` (forever
    /// if `None`) for the first.
    pub fn cp_stream_poll(
        &mut self,
        h: &StreamHandle,
        timeout: Option<Duration>,
    ) -> Result<Vec<(u64, u64)>, Error> {
        let out = self.scratch() + SCRATCH_DATA;
        let ms = timeout.map_or(-1, |t| t.as_millis() as i64);
        let n = self.syscall(Sysno::CpStreamPoll, &[h.fd, out, POLL_MAX, ms as u64])? as u64;
        let raw = self.read(out, n * 16)?;
        Ok(raw
            .chunks_exact(16)
            .map(|c| {
                let (a, b) = c.split_at(8);
                (
                    u64::from_le_bytes(a.try_into().expect("8 bytes")),
                    u64::from_le_bytes(b.try_into().expect("8 bytes")),
                )
            })
            .collect())
    }

    pub fn cp_stream_destroy(&mut self, h: &StreamHandle) -> Result<(), Error> {
        self.syscall(Sysno::CpDestroy, &[h.fd]).map(|_| ())
    }

    // ---- baseline pipe -----------------------------------------------

    /// Opens (or joins) the pipe named `key`; read and write it with
    /// [`Guest::read_fd`] / [`Guest::write_fd`].
    pub fn pipe_open(&mut self, key: &str, capacity: u64) -> Result<u64, Error> {
        let (k, n) = self.put_key(key)?;
        Ok(self.syscall(Sysno::PipeOpen, &[k, n, capacity])? as u64)
    }

    /// Retries `f` while it fails with `NoSuchKey`, for peers that have not
    /// published yet.
    pub fn retry<T>(
        &mut self,
        timeout: Duration,
        mut f: impl FnMut(&mut Guest) -> Result<T, Error>,
    ) -> Result<T, Error> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            match f(self) {
                Err(Error::NoSuchKey) if std::time::Instant::now() < deadline => {
                    self.sleep(Duration::from_micros(200))?
                }
                r => return r,
            }
        }
    }
}
