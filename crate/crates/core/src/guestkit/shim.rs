// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! The libOS shim: a small POSIX-flavoured layer between programs and the
//! Intravisor. It owns the descriptor table and serves CAP_FILE data
//! transfers itself, straight from the capability in the binding slot.

use std::time::Duration;

use parking_lot::Mutex;

use crate::capmachine::{CapFault, Capability, FaultKind, Perms};
use crate::commdev::{DeviceKind, Role};
use crate::error::{to_abi, Error};
use crate::intravisor::hostcall::{Hostcall, KIND_CALL, KIND_FILE, KIND_STREAM, REVOKE_DETACH};

use super::{Guest, Layer};

/// System call numbers understood by the shim.
#[repr(u64)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sysno {
    Read = 0,
    Write = 1,
    Open = 2,
    Close = 3,
    Fstat = 5,
    Lseek = 8,
    Yield = 24,
    Sleep = 35,
    ThreadCreate = 56,
    Exit = 60,
    ThreadJoin = 61,
    FutexWait = 202,
    FutexWake = 203,
    Clock = 228,
    Rand = 318,
    Log = 400,
    CpFileMake = 500,
    CpFileGet = 501,
    CpFileRead = 502,
    CpFileWrite = 503,
    CpFileWait = 504,
    CpFileNotify = 505,
    CpDestroy = 506,
    CpCallMake = 510,
    CpCallGet = 511,
    CpCall = 512,
    CpCallJoin = 513,
    CpStreamMake = 520,
    CpStreamGet = 521,
    CpStreamRecv = 522,
    CpStreamSend = 523,
    CpStreamPoll = 524,
    PipeOpen = 530,
}

impl Sysno {
    const ALL: [Sysno; 33] = [
        Sysno::Read,
        Sysno::Write,
        Sysno::Open,
        Sysno::Close,
        Sysno::Fstat,
        Sysno::Lseek,
        Sysno::Yield,
        Sysno::Sleep,
        Sysno::ThreadCreate,
        Sysno::Exit,
        Sysno::ThreadJoin,
        Sysno::FutexWait,
        Sysno::FutexWake,
        Sysno::Clock,
        Sysno::Rand,
        Sysno::Log,
        Sysno::CpFileMake,
        Sysno::CpFileGet,
        Sysno::CpFileRead,
        Sysno::CpFileWrite,
        Sysno::CpFileWait,
        Sysno::CpFileNotify,
        Sysno::CpDestroy,
        Sysno::CpCallMake,
        Sysno::CpCallGet,
        Sysno::CpCall,
        Sysno::CpCallJoin,
        Sysno::CpStreamMake,
        Sysno::CpStreamGet,
        Sysno::CpStreamRecv,
        Sysno::CpStreamSend,
        Sysno::CpStreamPoll,
        Sysno::PipeOpen,
    ];

    pub fn from_u64(v: u64) -> Option<Sysno> {
        Self::ALL.iter().copied().find(|s| *s as u64 == v)
    }
}

/// What a descriptor refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Desc {
    Console,
    Disk {
        pos: u64,
    },
    /// `/dev/cf`, the management node.
    Mgmt,
    Device {
        index: usize,
        kind: DeviceKind,
        role: Role,
        pos: u64,
    },
    Pipe {
        id: u64,
    },
}

#[derive(Default)]
pub struct ShimLibOS {
    fds: Mutex<Vec<Option<Desc>>>,
    /// Device bindings this libOS has been handed, by binding index.
    devices: Mutex<Vec<(usize, DeviceKind, Role)>>,
    args: Mutex<Vec<String>>,
    has_disk: Mutex<bool>,
}

impl ShimLibOS {
    pub(crate) fn wire(&self, has_disk: bool) {
        let mut fds = self.fds.lock();
        fds.clear();
        fds.extend([Some(Desc::Console), Some(Desc::Console), Some(Desc::Console)]);
        *self.has_disk.lock() = has_disk;
    }

    pub(crate) fn set_args(&self, args: Vec<String>) {
        *self.args.lock() = args;
    }

    pub fn args(&self) -> Vec<String> {
        self.args.lock().clone()
    }

    pub(crate) fn remember(&self, index: usize, kind: DeviceKind, role: Role) {
        let mut d = self.devices.lock();
        d.retain(|(i, _, _)| *i != index);
        d.push((index, kind, role));
    }

    fn forget(&self, index: usize) {
        self.devices.lock().retain(|(i, _, _)| *i != index);
    }

    fn device(&self, index: usize) -> Option<(DeviceKind, Role)> {
        self.devices.lock().iter().find(|(i, _, _)| *i == index).map(|&(_, k, r)| (k, r))
    }

    fn install(&self, d: Desc) -> u64 {
        let mut fds = self.fds.lock();
        match fds.iter().position(Option::is_none) {
            Some(i) => {
                fds[i] = Some(d);
                i as u64
            }
            None => {
                fds.push(Some(d));
                fds.len() as u64 - 1
            }
        }
    }

    fn get(&self, fd: u64) -> Result<Desc, Error> {
        self.fds.lock().get(fd as usize).copied().flatten().ok_or(Error::BadFd)
    }

    fn set(&self, fd: u64, d: Desc) {
        if let Some(slot) = self.fds.lock().get_mut(fd as usize) {
            *slot = Some(d);
        }
    }

    fn close(&self, fd: u64) -> Result<Desc, Error> {
        self.fds.lock().get_mut(fd as usize).and_then(Option::take).ok_or(Error::BadFd)
    }

    /// Descriptors currently open.
    pub fn open_fds(&self) -> Vec<(u64, Desc)> {
        self.fds.lock().iter().enumerate().filter_map(|(i, d)| d.map(|d| (i as u64, d))).collect()
    }
}

/// Runs at the syscall entry point after a program's `cinvoke`, then
/// returns to the program through its `c1`/`c2` pair.
pub(crate) fn syscall_entry(g: &mut Guest) -> Result<i64, Error> {
    let Layer::Program(p) = g.layer else {
        return Err(Error::NoEntry(g.ctx.pcc().cursor()));
    };
    g.ctx.install_ddc(g.ctx.ct6())?;
    g.layer = Layer::Libos;
    let (no, a) = (g.ctx.iregs.t0, g.ctx.iregs.a);

    let result = handle(g, p, no, a);

    g.ctx.iregs.a[0] = to_abi(result) as u64;
    let (code, data) = (g.ctx.creg(1), g.ctx.creg(2));
    let r = g.invoke(code, data)?;
    if g.layer != Layer::Program(p) {
        return Err(Error::NoEntry(g.ctx.pcc().cursor()));
    }
    Ok(r)
}

fn bounds(detail: &'static str) -> Error {
    Error::Fault(CapFault::new(FaultKind::Bounds, detail))
}

/// Pointers handed in by program `p` must lie inside program `p`.
fn own(g: &Guest, p: usize, addr: u64, len: u64) -> Result<(), Error> {
    if g.layout().programs[p].contains(addr, len) {
        Ok(())
    } else {
        Err(Error::RangeNotOwned)
    }
}

fn device_fd(g: &Guest, fd: u64, want: DeviceKind) -> Result<(usize, Role, u64), Error> {
    match g.rt.shim.get(fd)? {
        Desc::Device { index, kind, role, pos } if kind == want => Ok((index, role, pos)),
        _ => Err(Error::BadFd),
    }
}

fn handle(g: &mut Guest, p: usize, no: u64, a: [u64; 6]) -> Result<i64, Error> {
    let Some(no) = Sysno::from_u64(no) else {
        return Err(Error::Enosys(no));
    };
    let rt = g.rt.clone();
    let shim = &rt.shim;
    match no {
        Sysno::Read => {
            own(g, p, a[1], a[2])?;
            match shim.get(a[0])? {
                Desc::Console | Desc::Mgmt => Ok(0),
                Desc::Disk { pos } => {
                    let n = g.ocall(Hostcall::DiskRead as u64, &[a[1], a[2], pos])?;
                    shim.set(a[0], Desc::Disk { pos: pos + n as u64 });
                    Ok(n)
                }
                Desc::Device { index, kind: DeviceKind::File, role, pos } => {
                    let n = file_copy(g, p, index, a[1], pos, a[2], false)?;
                    shim.set(a[0], Desc::Device { index, kind: DeviceKind::File, role, pos: pos + n });
                    Ok(n as i64)
                }
                Desc::Pipe { id } => g.ocall(Hostcall::PipeRead as u64, &[id, a[1], a[2]]),
                Desc::Device { .. } => Err(Error::InvalidArgument),
            }
        }
        Sysno::Write => {
            own(g, p, a[1], a[2])?;
            match shim.get(a[0])? {
                Desc::Console => g.ocall(Hostcall::Print as u64, &[a[1], a[2]]),
                Desc::Mgmt => Err(Error::InvalidArgument),
                Desc::Disk { pos } => {
                    let n = g.ocall(Hostcall::DiskWrite as u64, &[a[1], a[2], pos])?;
                    shim.set(a[0], Desc::Disk { pos: pos + n as u64 });
                    Ok(n)
                }
                Desc::Device { index, kind: DeviceKind::File, role, pos } => {
                    let n = file_copy(g, p, index, a[1], pos, a[2], true)?;
                    shim.set(a[0], Desc::Device { index, kind: DeviceKind::File, role, pos: pos + n });
                    Ok(n as i64)
                }
                Desc::Pipe { id } => g.ocall(Hostcall::PipeWrite as u64, &[id, a[1], a[2]]),
                Desc::Device { .. } => Err(Error::InvalidArgument),
            }
        }
        Sysno::Open => {
            own(g, p, a[0], a[1])?;
            if a[1] == 0 || a[1] > 256 {
                return Err(Error::InvalidArgument);
            }
            let path = String::from_utf8(g.read(a[0], a[1])?).map_err(|_| Error::InvalidArgument)?;
            let desc = match path.as_str() {
                "/dev/cf" => Desc::Mgmt,
                "/dev/disk" if *shim.has_disk.lock() => Desc::Disk { pos: 0 },
                other => {
                    let idx: usize =
                        other.strip_prefix("/dev/cf").and_then(|n| n.parse().ok()).ok_or(Error::NoSuchKey)?;
                    let (kind, role) = shim.device(idx).ok_or(Error::NoSuchKey)?;
                    Desc::Device { index: idx, kind, role, pos: 0 }
                }
            };
            Ok(shim.install(desc) as i64)
        }
        Sysno::Close => shim.close(a[0]).map(|_| 0),
        Sysno::Fstat => match shim.get(a[0])? {
            Desc::Disk { .. } => g.ocall(Hostcall::DiskGetsize as u64, &[]),
            Desc::Device { index, kind: DeviceKind::File, .. } => Ok(file_cap(g, index)?.length() as i64),
            _ => Ok(0),
        },
        Sysno::Lseek => match shim.get(a[0])? {
            Desc::Disk { .. } => {
                shim.set(a[0], Desc::Disk { pos: a[1] });
                Ok(a[1] as i64)
            }
            Desc::Device { index, kind, role, .. } => {
                shim.set(a[0], Desc::Device { index, kind, role, pos: a[1] });
                Ok(a[1] as i64)
            }
            _ => Err(Error::InvalidArgument),
        },
        Sysno::Yield => g.ocall(Hostcall::Yield as u64, &[]),
        Sysno::Sleep => g.ocall(Hostcall::Sleep as u64, &[a[0]]),
        Sysno::Clock => g.ocall(Hostcall::Clock as u64, &[]),
        Sysno::Rand => g.ocall(Hostcall::Rand as u64, &[]),
        Sysno::Log => {
            own(g, p, a[0], a[1])?;
            g.ocall(Hostcall::Log as u64, &[a[0], a[1]])
        }
        Sysno::Exit => g.ocall(Hostcall::Exit as u64, &[a[0]]),
        Sysno::ThreadCreate => g.ocall(Hostcall::ThreadCreate as u64, &[p as u64, a[0], a[1]]),
        Sysno::ThreadJoin => g.ocall(Hostcall::ThreadJoin as u64, &[a[0]]),
        Sysno::FutexWait => {
            own(g, p, a[0], 8)?;
            g.ocall(Hostcall::Wait as u64, &[a[0], a[1], a[2]])
        }
        Sysno::FutexWake => {
            own(g, p, a[0], 8)?;
            g.ocall(Hostcall::Wake as u64, &[a[0], a[1]])
        }

        Sysno::CpFileMake => {
            own(g, p, a[0], a[1])?;
            own(g, p, a[2], a[3])?;
            let idx = g.ocall(Hostcall::CapAdvertise as u64, &[KIND_FILE, a[0], a[1], a[2], a[3]])?;
            Ok(open_device(shim, idx as usize, DeviceKind::File, Role::Donor))
        }
        Sysno::CpCallMake => {
            own(g, p, a[0], a[1])?;
            let idx = g.ocall(Hostcall::CapAdvertise as u64, &[KIND_CALL, a[0], a[1], p as u64, a[2]])?;
            Ok(open_device(shim, idx as usize, DeviceKind::Call, Role::Donor))
        }
        Sysno::CpStreamMake => {
            own(g, p, a[0], a[1])?;
            let idx = g.ocall(Hostcall::CapAdvertise as u64, &[KIND_STREAM, a[0], a[1], a[2]])?;
            Ok(open_device(shim, idx as usize, DeviceKind::Stream, Role::Donor))
        }
        Sysno::CpFileGet | Sysno::CpCallGet | Sysno::CpStreamGet => {
            own(g, p, a[0], a[1])?;
            let kind = match no {
                Sysno::CpFileGet => DeviceKind::File,
                Sysno::CpCallGet => DeviceKind::Call,
                _ => DeviceKind::Stream,
            };
            let idx = g.ocall(Hostcall::CapProbe as u64, &[kind.to_abi(), a[0], a[1]])?;
            Ok(open_device(shim, idx as usize, kind, Role::Recipient))
        }
        Sysno::CpFileRead | Sysno::CpFileWrite => {
            let (index, _, _) = device_fd(g, a[0], DeviceKind::File)?;
            let n = file_copy(g, p, index, a[1], a[2], a[3], no == Sysno::CpFileWrite)?;
            Ok(n as i64)
        }
        Sysno::CpFileWait | Sysno::CpFileNotify => {
            let (index, _, _) = device_fd(g, a[0], DeviceKind::File)?;
            let call = if no == Sysno::CpFileWait { Hostcall::CapFileWait } else { Hostcall::CapFileNotify };
            g.ocall(call as u64, &[index as u64])
        }
        Sysno::CpDestroy => {
            let Desc::Device { index, role, .. } = shim.get(a[0])? else {
                return Err(Error::BadFd);
            };
            let mode = if role == Role::Donor { 0 } else { REVOKE_DETACH };
            g.ocall(Hostcall::CapRevoke as u64, &[index as u64, mode])?;
            shim.forget(index);
            shim.close(a[0]).map(|_| 0)
        }
        Sysno::CpCall => {
            let (index, _, _) = device_fd(g, a[0], DeviceKind::Call)?;
            own(g, p, a[2], a[3])?;
            g.ocall(Hostcall::CapCall as u64, &[index as u64, a[1], a[2], a[3]])
        }
        Sysno::CpCallJoin => g.ocall(Hostcall::CapCallJoin as u64, &[a[0]]),
        Sysno::CpStreamRecv => {
            // Posting is local: the driver derives a write-only capability
            // for the buffer and queues it on the mapped channel.
            let (index, _, _) = device_fd(g, a[0], DeviceKind::Stream)?;
            own(g, p, a[2], a[3])?;
            let ch = rt.stream_channel(index)?;
            let dst =
                g.ctx().ddc().set_bounds(a[2], a[3])?.and_perms(Perms::WRITE)?.with_lineage(ch.lineage());
            ch.post(a[1], dst).map(|_| 0)
        }
        Sysno::CpStreamSend => {
            let (index, _, _) = device_fd(g, a[0], DeviceKind::Stream)?;
            own(g, p, a[1], a[2])?;
            g.ocall(Hostcall::CapStreamSend as u64, &[index as u64, a[1], a[2]])
        }
        Sysno::CpStreamPoll => {
            // Completions are drained locally; only an empty queue with a
            // non-zero timeout blocks in the Intravisor.
            let (index, _, _) = device_fd(g, a[0], DeviceKind::Stream)?;
            let max = a[2].max(1);
            own(g, p, a[1], max * 16)?;
            let ch = rt.stream_channel(index)?;
            let recs = match ch.poll(max as usize, Some(Duration::ZERO)) {
                Err(Error::Timeout) if a[3] as i64 != 0 => {
                    return g.ocall(Hostcall::CapStreamPoll as u64, &[index as u64, a[1], a[2], a[3]]);
                }
                r => r?,
            };
            let mut bytes = Vec::with_capacity(recs.len() * 16);
            for (id, n) in &recs {
                bytes.extend_from_slice(&id.to_le_bytes());
                bytes.extend_from_slice(&n.to_le_bytes());
            }
            g.write(a[1], &bytes)?;
            Ok(recs.len() as i64)
        }
        Sysno::PipeOpen => {
            own(g, p, a[0], a[1])?;
            let id = g.ocall(Hostcall::PipeOpen as u64, &[a[0], a[1], a[2]])?;
            Ok(shim.install(Desc::Pipe { id: id as u64 }) as i64)
        }
    }
}

fn open_device(shim: &ShimLibOS, index: usize, kind: DeviceKind, role: Role) -> i64 {
    shim.remember(index, kind, role);
    shim.install(Desc::Device { index, kind, role, pos: 0 }) as i64
}

/// The FILE capability in binding slot `index`, if it is still live.
fn file_cap(g: &Guest, index: usize) -> Result<Capability, Error> {
    let cap = g.load_cap(g.layout().slot(index))?;
    if !cap.tag() || !g.machine().is_live(&cap) {
        return Err(Error::Revoked);
    }
    Ok(cap)
}

/// One `capcpy` between program memory at `local` and the shared object at
/// `off`. No hostcall is involved.
fn file_copy(
    g: &mut Guest,
    p: usize,
    index: usize,
    local: u64,
    off: u64,
    len: u64,
    to_file: bool,
) -> Result<u64, Error> {
    let file = file_cap(g, index)?;
    let need = if to_file { Perms::WRITE } else { Perms::READ };
    if !file.perms().contains(need) {
        return Err(Error::Fault(CapFault::new(FaultKind::Perm, "file grant lacks the required permission")));
    }
    if off > file.length() {
        return Err(Error::InvalidArgument);
    }
    let n = len.min(file.length() - off);
    if n == 0 {
        return Ok(0);
    }
    if !g.layout().programs[p].contains(local, n) {
        return Err(bounds("buffer outside the calling program"));
    }
    let mine = g.ctx.ddc().set_bounds(local, n)?;
    let file = file.with_cursor(file.base())?;
    let m = g.machine();
    let copied = if to_file { m.capcpy(&file, off, &mine, 0, n) } else { m.capcpy(&mine, 0, &file, off, n) };
    match copied {
        Ok(_) => Ok(n),
        Err(_) if !m.is_live(&file) => Err(Error::Revoked),
        Err(f) => Err(f.into()),
    }
}
