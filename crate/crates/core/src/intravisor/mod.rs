// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! The trusted monitor.
//!
//! The Intravisor owns the root capability and the sealing authority. It
//! carves one region per cVM out of the shared address space, seals the
//! entry pairs every domain transition goes through, runs hostcalls on the
//! calling thread, and keeps the key registry behind the CAP devices.
//!
//! Every cVM thread starts on a context owned by the monitor and reaches
//! the guest only through `cinvoke` on the cVM's entry pair. Guests come
//! back through the Affix: `(OCALL, MON_DDC)` for hostcalls and
//! `(RET, MON_DDC)` to leave.

pub mod config;
mod dispatch;
pub mod hostcall;
pub mod layout;
pub mod registry;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::File;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use parking_lot::{Condvar, Mutex, RwLock};
use rustc_hash::FxHashMap;

use crate::bench::PipeChannel;
use crate::capmachine::{Capability, CompartmentContext, CvmId, Machine, Perms, OTYPE_MAX};
use crate::commdev::{DeviceBinding, DeviceKind, StreamChannel};
use crate::error::Error;
use crate::guestkit::{self, Guest, GuestProgram, ProgramRegistry, ShimLibOS, StackSlot};

pub use config::{parse_configs, AclEntry, DeploymentConfig, Rights};
pub use dispatch::Advertise;
pub use hostcall::{Category, Hostcall, HostcallInfo, HOSTCALL_TABLE};
pub use layout::{CvmLayout, ProgramLayout};
pub use registry::{Payload, Registry, RegistryEntry};

use layout::*;

/// Default size of the shared address space.
pub const DEFAULT_MEMORY: u64 = 256 << 20;

/// `tp` value installed while a hostcall runs.
pub const HOST_TP: u64 = 0x7fff_0000_0000;

/// Capability registers reserved by the calling conventions: `c1`/`c2`
/// hold the program-return pair, `c3`/`c4` the hostcall-return pair.
pub const PROG_RET_CREGS: (usize, usize) = (1, 2);
pub const HOSTCALL_RET_CREGS: (usize, usize) = (3, 4);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CvmState {
    Created,
    Running,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Exited(i64),
    Faulted(String),
}

impl ExitStatus {
    pub fn code(&self) -> i64 {
        match self {
            ExitStatus::Exited(c) => *c,
            ExitStatus::Faulted(_) => -1,
        }
    }
}

/// Public description of a cVM.
#[derive(Clone, Debug)]
pub struct Cvm {
    pub id: CvmId,
    pub name: String,
    pub region: (u64, u64),
    /// `(pcc, ddc)`.
    pub default_caps: (Capability, Capability),
    pub affix_addr: u64,
    pub stack_pool: Vec<(u64, u64)>,
    pub layout: CvmLayout,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Otypes {
    /// Affix slots.
    pub gate: u32,
    pub entry: u32,
    pub syscall: u32,
    pub libos_ret: u32,
    pub prog_ret: u32,
    pub call: u32,
}

/// What lives at a code address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Entry {
    Ocall,
    MonitorRet,
    /// The cVM entry pair used to start threads.
    Boot(CvmId),
    Syscall(CvmId),
    HostcallReturn(CvmId),
    ProgramReturn(CvmId, usize),
    Func(CvmId, usize, usize),
}

struct Lifecycle {
    state: CvmState,
    exit: Option<ExitStatus>,
}

#[derive(Default)]
struct Console {
    lines: Vec<String>,
    partial: String,
}

/// Per-cVM state kept by the Intravisor.
pub struct CvmRuntime {
    pub(crate) cvm: Cvm,
    pub(crate) cfg: DeploymentConfig,
    pub(crate) programs: Vec<Arc<GuestProgram>>,
    pub(crate) otypes: Otypes,
    /// Intravisor-only authority over the region, used to reach guest
    /// buffers named by hostcall arguments.
    pub(crate) region_cap: Capability,
    entry_pair: (Capability, Capability),
    lifecycle: Mutex<Lifecycle>,
    lifecycle_cv: Condvar,
    main: Mutex<Option<JoinHandle<()>>>,
    free_stacks: Mutex<Vec<usize>>,
    threads: Mutex<HashMap<u64, JoinHandle<Result<i64, Error>>>>,
    console: Mutex<Console>,
    events: Mutex<Vec<String>>,
    disk: Mutex<Option<File>>,
    net: Mutex<VecDeque<u8>>,
    futex: Mutex<HashMap<u64, u64>>,
    futex_cv: Condvar,
    bindings: Mutex<Vec<Option<DeviceBinding>>>,
    /// Stream queues mapped into this cVM's libOS, by binding index.
    streams: Mutex<Vec<Option<Arc<StreamChannel>>>>,
    heap_brk: Vec<Mutex<u64>>,
    exit_code: Mutex<Option<i64>>,
    pub(crate) shim: ShimLibOS,
}

impl CvmRuntime {
    pub fn id(&self) -> CvmId {
        self.cvm.id
    }

    pub fn name(&self) -> &str {
        &self.cvm.name
    }

    pub fn layout(&self) -> &CvmLayout {
        &self.cvm.layout
    }

    pub fn cvm(&self) -> &Cvm {
        &self.cvm
    }

    pub fn config(&self) -> &DeploymentConfig {
        &self.cfg
    }

    pub(crate) fn pcc(&self) -> Capability {
        self.cvm.default_caps.0
    }

    pub(crate) fn ddc(&self) -> Capability {
        self.cvm.default_caps.1
    }

    /// ddc of program `p`: the cVM ddc narrowed to the program sub-region.
    pub(crate) fn program_ddc(&self, p: usize) -> Result<Capability, Error> {
        let pl = &self.cvm.layout.programs[p];
        Ok(self.ddc().set_bounds(pl.base, pl.len)?)
    }

    pub(crate) fn event(&self, what: impl Into<String>) {
        self.events.lock().push(what.into());
    }

    pub(crate) fn take_stack(&self) -> Result<StackSlot, Error> {
        self.free_stacks.lock().pop().map(StackSlot::Pool).ok_or(Error::StackPoolExhausted)
    }

    pub(crate) fn release_stack(&self, slot: StackSlot) {
        if let StackSlot::Pool(i) = slot {
            self.free_stacks.lock().push(i);
        }
    }

    pub fn free_stacks(&self) -> usize {
        self.free_stacks.lock().len()
    }

    /// Bump-allocates `len` bytes from program `p`'s heap.
    pub(crate) fn heap_alloc(&self, p: usize, len: u64) -> Result<u64, Error> {
        let pl = &self.cvm.layout.programs[p];
        let mut brk = self.heap_brk[p].lock();
        let at = round_up(*brk, 16);
        let end = at.checked_add(len).ok_or(Error::OutOfSpace)?;
        if end > pl.heap + pl.heap_len {
            return Err(Error::OutOfSpace);
        }
        *brk = end;
        Ok(at)
    }

    /// Intravisor-side capability for `[addr, addr + len)` of this cVM.
    pub(crate) fn user_range(&self, addr: u64, len: u64, perms: Perms) -> Result<Capability, Error> {
        if !self.cvm.layout.contains(addr, len) {
            return Err(Error::RangeNotOwned);
        }
        Ok(self.region_cap.set_bounds(addr, len)?.and_perms(perms)?)
    }

    fn push_console(&self, bytes: &[u8], echo: bool) {
        let mut c = self.console.lock();
        c.partial.push_str(&String::from_utf8_lossy(bytes));
        while let Some(i) = c.partial.find('\n') {
            let line: String = c.partial.drain(..=i).collect();
            let line = line.trim_end_matches('\n').to_string();
            if echo {
                println!("[{}] {}", self.cvm.name, line);
            }
            c.lines.push(line);
        }
    }

    fn add_binding(&self, b: DeviceBinding) -> Result<usize, Error> {
        let mut v = self.bindings.lock();
        let idx = match v.iter().position(Option::is_none) {
            Some(i) => i,
            None if v.len() < MAX_BINDINGS => {
                v.push(None);
                v.len() - 1
            }
            None => return Err(Error::OutOfSpace),
        };
        v[idx] = Some(DeviceBinding { index: idx, ..b });
        Ok(idx)
    }

    pub(crate) fn binding(&self, idx: usize) -> Result<DeviceBinding, Error> {
        let b = self.binding_any(idx)?;
        if b.revoked {
            return Err(Error::Revoked);
        }
        Ok(b)
    }

    /// Like [`CvmRuntime::binding`] but also returns revoked bindings.
    fn binding_any(&self, idx: usize) -> Result<DeviceBinding, Error> {
        self.bindings.lock().get(idx).cloned().flatten().ok_or(Error::NoSuchHandle)
    }

    /// Empties binding slot `idx` so a later probe or advertise can reuse it.
    fn free_binding(&self, idx: usize) {
        if let Some(b) = self.bindings.lock().get_mut(idx) {
            *b = None;
        }
        if let Some(s) = self.streams.lock().get_mut(idx) {
            *s = None;
        }
    }

    pub(crate) fn map_stream(&self, idx: usize, ch: Arc<StreamChannel>) {
        let mut v = self.streams.lock();
        if v.len() <= idx {
            v.resize(idx + 1, None);
        }
        v[idx] = Some(ch);
    }

    /// Stream queue behind binding `idx`, as mapped at setup time.
    pub(crate) fn stream_channel(&self, idx: usize) -> Result<Arc<StreamChannel>, Error> {
        if self.binding(idx)?.kind != DeviceKind::Stream {
            return Err(Error::InvalidArgument);
        }
        self.streams.lock().get(idx).cloned().flatten().ok_or(Error::Revoked)
    }

    fn mark_revoked(&self, idx: usize) {
        if let Some(Some(b)) = self.bindings.lock().get_mut(idx) {
            b.revoked = true;
        }
    }

    fn set_state(&self, state: CvmState, exit: Option<ExitStatus>) {
        let mut l = self.lifecycle.lock();
        l.state = state;
        if exit.is_some() {
            l.exit = exit;
        }
        self.lifecycle_cv.notify_all();
    }

    pub(crate) fn mark_running(&self) {
        self.set_state(CvmState::Running, None);
    }

    pub(crate) fn exit_code(&self) -> Option<i64> {
        *self.exit_code.lock()
    }

    pub(crate) fn args(&self) -> &[String] {
        &self.cfg.args
    }
}

struct PendingCall {
    caller: CvmId,
    handle: JoinHandle<Result<i64, Error>>,
}

/// The monitor. Create with [`Intravisor::new`]; every handle is an `Arc`.
pub struct Intravisor {
    machine: Machine,
    root: Capability,
    sealer: Capability,
    mon_pcc: Capability,
    mon_ddc: Capability,
    brk: Mutex<u64>,
    next_otype: AtomicU32,
    next_cvm: AtomicU32,
    next_id: AtomicU64,
    cvms: RwLock<BTreeMap<CvmId, Arc<CvmRuntime>>>,
    entries: RwLock<FxHashMap<u64, Entry>>,
    registry: Mutex<Registry>,
    revoked_keys: Mutex<HashSet<Vec<u8>>>,
    programs: ProgramRegistry,
    pipes: Mutex<HashMap<Vec<u8>, Arc<PipeChannel>>>,
    pipe_ids: RwLock<HashMap<u64, Arc<PipeChannel>>>,
    pending_calls: Mutex<HashMap<u64, PendingCall>>,
    start: Instant,
    echo: AtomicBool,
}

impl Intravisor {
    /// A monitor over a fresh machine of `mem_size` bytes with the built-in
    /// guest programs registered.
    pub fn new(mem_size: u64) -> Arc<Self> {
        Self::with_programs(mem_size, ProgramRegistry::builtins())
    }

    pub fn with_programs(mem_size: u64, programs: ProgramRegistry) -> Arc<Self> {
        assert!(mem_size >= 4 * MONITOR_SIZE, "address space too small");
        let machine = Machine::new(mem_size);
        let root = machine.root_capability().expect("fresh machine");
        let otype_span = mem_size.min(OTYPE_MAX as u64 + 1);
        let derive = |base, len, perms| {
            root.set_bounds(base, len)
                .and_then(|c| c.and_perms(perms))
                .expect("monitor capabilities derive from root")
        };
        let sealer = derive(0, otype_span, Perms::SEAL | Perms::UNSEAL);
        let mon_pcc = derive(MONITOR_CODE, MONITOR_CODE_LEN, Perms::READ | Perms::EXEC | Perms::LOAD_CAP);
        let mon_ddc =
            derive(MONITOR_DATA, MONITOR_SIZE - MONITOR_DATA, Perms::READ | Perms::WRITE | Perms::LOAD_CAP);
        let entries = FxHashMap::from_iter([(OCALL_ENTRY, Entry::Ocall), (RET_ENTRY, Entry::MonitorRet)]);
        Arc::new(Self {
            machine,
            root,
            sealer,
            mon_pcc,
            mon_ddc,
            brk: Mutex::new(MONITOR_SIZE),
            next_otype: AtomicU32::new(1),
            next_cvm: AtomicU32::new(1),
            next_id: AtomicU64::new(1),
            cvms: RwLock::default(),
            entries: RwLock::new(entries),
            registry: Mutex::default(),
            revoked_keys: Mutex::default(),
            programs,
            pipes: Mutex::default(),
            pipe_ids: RwLock::default(),
            pending_calls: Mutex::default(),
            start: Instant::now(),
            echo: AtomicBool::new(false),
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn programs(&self) -> &ProgramRegistry {
        &self.programs
    }

    /// Echo guest console lines to stdout as they complete.
    pub fn set_echo(&self, on: bool) {
        self.echo.store(on, Ordering::Relaxed);
    }

    fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    fn alloc_region(&self, len: u64) -> Result<u64, Error> {
        let mut brk = self.brk.lock();
        let base = round_up(*brk, PAGE);
        let end = base
            .checked_add(round_up(len, PAGE))
            .filter(|&e| e <= self.machine.size())
            .ok_or(Error::OutOfSpace)?;
        *brk = end;
        Ok(base)
    }

    fn seal(&self, cap: Capability, otype: u32) -> Capability {
        cap.seal(&self.sealer, otype).expect("Intravisor seals its own otypes")
    }

    pub(crate) fn entry_at(&self, addr: u64) -> Option<Entry> {
        self.entries.read().get(&addr).copied()
    }

    pub fn runtime(&self, id: CvmId) -> Option<Arc<CvmRuntime>> {
        self.cvms.read().get(&id).cloned()
    }

    fn rt(&self, id: CvmId) -> Result<Arc<CvmRuntime>, Error> {
        self.runtime(id).ok_or(Error::NoSuchHandle)
    }

    pub fn cvm(&self, id: CvmId) -> Option<Cvm> {
        self.runtime(id).map(|r| r.cvm.clone())
    }

    pub fn cvm_by_name(&self, name: &str) -> Option<Cvm> {
        self.cvms.read().values().find(|r| r.cvm.name == name).map(|r| r.cvm.clone())
    }

    pub fn cvms(&self) -> Vec<Cvm> {
        self.cvms.read().values().map(|r| r.cvm.clone()).collect()
    }

    /// Creates a cVM, builds its Affix and runs Init on a new thread. Returns
    /// once Init has finished (or failed, leaving the cVM terminated).
    pub fn cvm_make(self: &Arc<Self>, cfg: DeploymentConfig) -> Result<Cvm, Error> {
        cfg.validate()?;
        if cfg.programs.len() > MAX_PROGRAMS {
            return Err(Error::ConfigInvalid(format!(
                "{}: at most {MAX_PROGRAMS} programs per cVM",
                cfg.name
            )));
        }
        let programs = cfg
            .programs
            .iter()
            .map(|n| self.programs.get(n).ok_or_else(|| Error::UnknownProgram(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(p) = programs.iter().find(|p| p.exports.len() > MAX_FUNCS) {
            return Err(Error::ConfigInvalid(format!("{}: too many exports", p.name)));
        }
        if self.cvm_by_name(&cfg.name).is_some() {
            return Err(Error::ConfigInvalid(format!("duplicate cVM name `{}`", cfg.name)));
        }
        let disk = match &cfg.disk_image {
            Some(path) => Some(
                File::options()
                    .read(true)
                    .write(true)
                    .open(path)
                    .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
            ),
            None => None,
        };

        let size = CvmLayout::size_for(&cfg);
        let base = self.alloc_region(size)?;
        let layout = CvmLayout::compute(base, &cfg);
        let id = CvmId(self.next_cvm.fetch_add(1, Ordering::Relaxed));
        let region_cap = self
            .root
            .set_bounds(base, layout.len)?
            .and_perms(Perms::READ | Perms::WRITE | Perms::LOAD_CAP | Perms::STORE_CAP)?;
        let ddc = region_cap.and_perms(Perms::READ | Perms::WRITE | Perms::LOAD_CAP)?;
        let pcc = self
            .root
            .set_bounds(base, layout.len)?
            .and_perms(Perms::READ | Perms::EXEC | Perms::LOAD_CAP)?
            .with_cursor(layout.entry())?;
        let o = self.next_otype.fetch_add(6, Ordering::Relaxed);
        let otypes =
            Otypes { gate: o, entry: o + 1, syscall: o + 2, libos_ret: o + 3, prog_ret: o + 4, call: o + 5 };
        let entry_pair = (self.seal(pcc, otypes.entry), self.seal(ddc, otypes.entry));

        let cvm = Cvm {
            id,
            name: cfg.name.clone(),
            region: (base, layout.len),
            default_caps: (pcc, ddc),
            affix_addr: layout.affix(),
            stack_pool: layout.stacks.clone(),
            layout: layout.clone(),
        };
        let heap_brk = layout.programs.iter().map(|p| Mutex::new(p.heap)).collect();
        let rt = Arc::new(CvmRuntime {
            cvm: cvm.clone(),
            programs,
            otypes,
            region_cap,
            entry_pair,
            lifecycle: Mutex::new(Lifecycle { state: CvmState::Created, exit: None }),
            lifecycle_cv: Condvar::new(),
            main: Mutex::new(None),
            free_stacks: Mutex::new((0..cfg.stack_count).rev().collect()),
            threads: Mutex::default(),
            console: Mutex::default(),
            events: Mutex::default(),
            disk: Mutex::new(disk),
            net: Mutex::default(),
            futex: Mutex::default(),
            futex_cv: Condvar::new(),
            bindings: Mutex::default(),
            streams: Mutex::default(),
            heap_brk,
            exit_code: Mutex::new(None),
            shim: ShimLibOS::default(),
            cfg,
        });

        {
            let mut e = self.entries.write();
            e.insert(layout.entry(), Entry::Boot(id));
            e.insert(layout.syscall_entry(), Entry::Syscall(id));
            e.insert(layout.hostcall_return(), Entry::HostcallReturn(id));
            for (p, prog) in rt.programs.iter().enumerate() {
                e.insert(layout.program_return(p), Entry::ProgramReturn(id, p));
                for f in 0..prog.exports.len() {
                    e.insert(layout.func(p, f), Entry::Func(id, p, f));
                }
            }
        }
        self.cvms.write().insert(id, rt.clone());
        self.build_affix(id)?;

        let iv = self.clone();
        let rt2 = rt.clone();
        let handle = std::thread::Builder::new().name(format!("{}-main", rt.cvm.name)).spawn(move || {
            let status = match iv.enter(&rt2, StackSlot::Main, guestkit::ID_INIT, [0; 6]) {
                Ok(g) => guestkit::run_entry(g),
                Err(e) => Err(e),
            };
            let status = match status {
                Ok(code) => ExitStatus::Exited(rt2.exit_code().unwrap_or(code)),
                Err(e) => {
                    rt2.event(format!("terminated: {e}"));
                    ExitStatus::Faulted(e.to_string())
                }
            };
            rt2.set_state(CvmState::Terminated, Some(status));
        })?;
        *rt.main.lock() = Some(handle);

        let mut l = rt.lifecycle.lock();
        while l.state == CvmState::Created {
            rt.lifecycle_cv.wait(&mut l);
        }
        Ok(cvm)
    }

    /// Stores the three sealed Affix capabilities at the region base.
    pub fn build_affix(&self, id: CvmId) -> Result<(), Error> {
        let rt = self.rt(id)?;
        let gate = rt.otypes.gate;
        let affix = rt.cvm.affix_addr;
        let slots = [
            (AFFIX_MON_DDC, self.seal(self.mon_ddc, gate)),
            (AFFIX_RET, self.seal(self.mon_pcc.with_cursor(RET_ENTRY)?, gate)),
            (AFFIX_OCALL, self.seal(self.mon_pcc.with_cursor(OCALL_ENTRY)?, gate)),
        ];
        for (off, cap) in slots {
            self.machine.store_cap_with(&self.root, affix + off, cap)?;
        }
        Ok(())
    }

    /// Fresh hostcall-return pair. Only the code half carries a lineage, so
    /// revoking it kills stale copies without touching the restored ddc.
    pub(crate) fn mint_hostcall_ret(&self, rt: &CvmRuntime) -> (Capability, Capability) {
        let lineage = self.machine.new_lineage();
        let code = rt
            .pcc()
            .with_cursor(rt.cvm.layout.hostcall_return())
            .expect("pcc is unsealed")
            .with_lineage(lineage);
        (self.seal(code, rt.otypes.libos_ret), self.seal(rt.ddc(), rt.otypes.libos_ret))
    }

    fn thread_ctx(&self, rt: &CvmRuntime) -> CompartmentContext {
        let mut ctx = CompartmentContext::new(rt.id(), self.mon_pcc, self.mon_ddc);
        let (c, d) = self.mint_hostcall_ret(rt);
        ctx.put_creg(HOSTCALL_RET_CREGS.0, c);
        ctx.put_creg(HOSTCALL_RET_CREGS.1, d);
        ctx
    }

    /// ICALL: enters the cVM at its entry point with `t0 = kind`.
    pub(crate) fn enter(
        self: &Arc<Self>,
        rt: &Arc<CvmRuntime>,
        slot: StackSlot,
        kind: u64,
        args: [u64; 6],
    ) -> Result<Guest, Error> {
        let mut ctx = self.thread_ctx(rt);
        ctx.iregs.t0 = kind;
        ctx.iregs.a = args;
        let (code, data) = rt.entry_pair;
        let entered = self.machine.cinvoke(&mut ctx, code, data).and_then(|_| ctx.install_ddc(ctx.ct6()));
        if let Err(e) = entered {
            rt.release_stack(slot);
            return Err(e.into());
        }
        Ok(Guest::new(self.clone(), rt.clone(), ctx, slot))
    }

    /// Enters a donor function through its sealed CAP_CALL pair.
    pub(crate) fn enter_call(
        self: &Arc<Self>,
        rt: &Arc<CvmRuntime>,
        slot: StackSlot,
        code: Capability,
        data: Capability,
        args: [u64; 6],
    ) -> Result<Guest, Error> {
        let mut ctx = self.thread_ctx(rt);
        ctx.iregs.a = args;
        if let Err(e) = self.machine.cinvoke(&mut ctx, code, data) {
            rt.release_stack(slot);
            return Err(e.into());
        }
        Ok(Guest::new(self.clone(), rt.clone(), ctx, slot))
    }

    /// Host-side execution context in program `program` of cVM `id`, on the
    /// calling thread. Takes a stack from the pool until dropped.
    pub fn attach(self: &Arc<Self>, id: CvmId, program: usize) -> Result<Guest, Error> {
        let rt = self.rt(id)?;
        if program >= rt.programs.len() {
            return Err(Error::InvalidArgument);
        }
        let slot = rt.take_stack()?;
        let mut g = self.enter(&rt, slot, guestkit::ID_ATTACH, [program as u64, 0, 0, 0, 0, 0])?;
        g.enter_program(program)?;
        Ok(g)
    }

    /// Like [`Intravisor::attach`] but stays at the libOS layer.
    pub fn attach_libos(self: &Arc<Self>, id: CvmId) -> Result<Guest, Error> {
        let rt = self.rt(id)?;
        let slot = rt.take_stack()?;
        self.enter(&rt, slot, guestkit::ID_ATTACH, [u64::MAX, 0, 0, 0, 0, 0])
    }

    /// Starts a thread in program `program` at exported function `func` (or
    /// the program's main entry for [`hostcall::THREAD_MAIN`]).
    pub fn thread_spawn(
        self: &Arc<Self>,
        id: CvmId,
        program: usize,
        func: u64,
        arg: u64,
    ) -> Result<u64, Error> {
        let rt = self.rt(id)?;
        let prog = rt.programs.get(program).ok_or(Error::InvalidArgument)?;
        let ok = if func == hostcall::THREAD_MAIN {
            prog.main.is_some()
        } else {
            (func as usize) < prog.exports.len()
        };
        if !ok {
            return Err(Error::UnknownFunc);
        }
        let slot = rt.take_stack()?;
        let tid = self.next_id();
        let iv = self.clone();
        let rt2 = rt.clone();
        let spawned = std::thread::Builder::new().name(format!("{}-t{tid}", rt.cvm.name)).spawn(move || {
            let g = iv.enter(&rt2, slot, guestkit::ID_THREAD, [program as u64, func, arg, 0, 0, 0])?;
            guestkit::run_entry(g)
        });
        match spawned {
            Ok(h) => {
                rt.threads.lock().insert(tid, h);
                Ok(tid)
            }
            Err(e) => {
                rt.release_stack(slot);
                Err(e.into())
            }
        }
    }

    pub fn thread_join(&self, id: CvmId, tid: u64) -> Result<i64, Error> {
        let rt = self.rt(id)?;
        let h = rt.threads.lock().remove(&tid).ok_or(Error::NoSuchHandle)?;
        h.join().unwrap_or(Err(Error::CalleeFault))
    }

    pub fn state(&self, id: CvmId) -> Option<CvmState> {
        self.runtime(id).map(|r| r.lifecycle.lock().state)
    }

    /// Waits for the cVM's main thread and returns its exit status.
    pub fn wait(&self, id: CvmId) -> Result<ExitStatus, Error> {
        let rt = self.rt(id)?;
        let handle = rt.main.lock().take();
        if let Some(h) = handle {
            let _ = h.join();
        }
        let mut l = rt.lifecycle.lock();
        while l.exit.is_none() {
            rt.lifecycle_cv.wait(&mut l);
        }
        Ok(l.exit.clone().expect("checked above"))
    }

    /// Completed console lines of cVM `id`.
    pub fn console(&self, id: CvmId) -> Vec<String> {
        self.runtime(id)
            .map(|r| {
                let c = r.console.lock();
                let mut v = c.lines.clone();
                if !c.partial.is_empty() {
                    v.push(c.partial.clone());
                }
                v
            })
            .unwrap_or_default()
    }

    /// Lifecycle and log events of cVM `id`, in order.
    pub fn events(&self, id: CvmId) -> Vec<String> {
        self.runtime(id).map(|r| r.events.lock().clone()).unwrap_or_default()
    }

    /// Keys and kinds currently live in the registry.
    pub fn registry_keys(&self) -> Vec<(String, DeviceKind)> {
        let mut v: Vec<_> = self
            .registry
            .lock()
            .keys()
            .into_iter()
            .map(|(k, kind)| (String::from_utf8_lossy(&k).into_owned(), kind))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Bindings currently held by cVM `id`.
    pub fn bindings(&self, id: CvmId) -> Vec<DeviceBinding> {
        self.runtime(id).map(|r| r.bindings.lock().iter().flatten().cloned().collect()).unwrap_or_default()
    }

    /// Every capability the Intravisor has handed to cVM `id`: default
    /// caps, Affix slots, program affix slots and binding slots.
    pub fn granted_capabilities(&self, id: CvmId) -> Vec<(String, Capability)> {
        let Some(rt) = self.runtime(id) else {
            return Vec::new();
        };
        let l = &rt.cvm.layout;
        let mut out = vec![("pcc".to_string(), rt.pcc()), ("ddc".to_string(), rt.ddc())];
        let load = |addr| self.machine.load_cap_with(&self.root, addr).ok();
        for (name, off) in [("mon_ddc", AFFIX_MON_DDC), ("ret", AFFIX_RET), ("ocall", AFFIX_OCALL)] {
            out.extend(load(l.affix() + off).map(|c| (format!("affix.{name}"), c)));
        }
        for (p, pl) in l.programs.iter().enumerate() {
            for off in [PROG_SYSCALL_CODE, PROG_SYSCALL_DATA, PROG_RET_CODE, PROG_RET_DATA] {
                out.extend(load(pl.affix() + off).map(|c| (format!("prog{p}.{off}"), c)));
            }
        }
        for b in self.bindings(id) {
            out.extend(load(l.slot(b.index)).map(|c| (b.path(), c)));
        }
        out.retain(|(_, c)| c.tag());
        out
    }
}
