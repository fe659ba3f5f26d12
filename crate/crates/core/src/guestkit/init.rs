// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Code behind the cVM entry point and the CAP_CALL function entries.

use crate::commdev::{DeviceKind, Role};
use crate::error::Error;
use crate::intravisor::hostcall::{Hostcall, KIND_CALL, SEAL_PROGRAM_PAIRS, THREAD_MAIN};
use crate::intravisor::layout::{PAGE, PROG_RET_CODE, PROG_RET_DATA};
use crate::intravisor::{Entry, PROG_RET_CREGS};

use super::{Guest, Layer, ID_INIT, ID_THREAD};

/// Dispatches on `t0` after the Intravisor entered the cVM.
pub fn run_entry(mut g: Guest) -> Result<i64, Error> {
    let kind = g.ctx.iregs.t0;
    let a = g.ctx.iregs.a;
    match kind {
        ID_INIT => init(&mut g),
        ID_THREAD => {
            let (p, func, arg) = (a[0] as usize, a[1], a[2]);
            let v = run_program(&mut g, p, func, arg)?;
            g.return_to_monitor(v)?;
            Ok(v)
        }
        other => Err(Error::InvalidArgument).inspect_err(|_| {
            g.rt.event(format!("bad entry selector {other}"));
        }),
    }
}

fn run_program(g: &mut Guest, p: usize, func: u64, arg: u64) -> Result<i64, Error> {
    let prog = g.rt.programs.get(p).cloned().ok_or(Error::InvalidArgument)?;
    g.enter_program(p)?;
    let v = if func == THREAD_MAIN {
        let main = prog.main.clone().ok_or(Error::UnknownFunc)?;
        let args = g.rt.shim.args();
        main(g, &args)?
    } else {
        let (_, f) = prog.exports.get(func as usize).cloned().ok_or(Error::UnknownFunc)?;
        f(g, arg, 0)?
    };
    g.leave_program()?;
    Ok(v)
}

/// libOS start-up on the main stack.
fn init(g: &mut Guest) -> Result<i64, Error> {
    let rt = g.rt.clone();
    rt.event("init:start");

    let affix = g.layout().affix();
    for off in [crate::intravisor::layout::AFFIX_OCALL, crate::intravisor::layout::AFFIX_MON_DDC] {
        if !g.load_cap(affix + off)?.is_sealed() {
            return Err(Error::ConfigInvalid("affix is not sealed".into()));
        }
    }
    rt.event("init:hostcalls");

    let has_disk = g.ocall(Hostcall::DiskGetsize as u64, &[]).is_ok();
    rt.shim.wire(has_disk);
    for p in 0..rt.programs.len() {
        g.ocall(Hostcall::Seal as u64, &[SEAL_PROGRAM_PAIRS, p as u64])?;
    }
    rt.event("init:syscalls");

    let buf = g.layout().scratch();
    let mut args = Vec::new();
    loop {
        let n = g.ocall_raw(Hostcall::Argv as u64, &[args.len() as u64, buf, PAGE])?;
        if n < 0 {
            break;
        }
        let bytes = g.read(buf, (n as u64).min(PAGE))?;
        args.push(String::from_utf8_lossy(&bytes).into_owned());
    }
    rt.shim.set_args(args);

    for (p, prog) in rt.programs.iter().enumerate() {
        if !prog.library {
            continue;
        }
        for (f, (name, _)) in prog.exports.iter().enumerate() {
            g.write(buf, name.as_bytes())?;
            let idx = g.ocall(
                Hostcall::CapAdvertise as u64,
                &[KIND_CALL, buf, name.len() as u64, p as u64, f as u64],
            )?;
            rt.shim.remember(idx as usize, DeviceKind::Call, Role::Donor);
        }
    }
    rt.event("init:done");
    rt.mark_running();

    let mut tids = Vec::new();
    for (p, prog) in rt.programs.iter().enumerate().skip(1) {
        if prog.main.is_some() {
            tids.push(g.ocall(Hostcall::ThreadCreate as u64, &[p as u64, THREAD_MAIN, 0])?);
        }
    }
    let mut code = match rt.programs.first() {
        Some(prog) if prog.main.is_some() => run_program(g, 0, THREAD_MAIN, 0)?,
        _ => 0,
    };
    for tid in tids {
        let v = g.ocall(Hostcall::ThreadJoin as u64, &[tid as u64])?;
        if code == 0 {
            code = v;
        }
    }
    g.return_to_monitor(code)?;
    Ok(code)
}

/// Runs the exported function a CAP_CALL pair landed on.
pub fn run_call(mut g: Guest) -> Result<i64, Error> {
    let at = g.ctx.pcc().cursor();
    let (p, f) = match g.iv.entry_at(at) {
        Some(Entry::Func(c, p, f)) if c == g.rt.id() => (p, f),
        _ => return Err(Error::NoEntry(at)),
    };
    g.ctx.install_ddc(g.ctx.ct6())?;
    let pl = g.layout().programs[p].clone();
    let c1 = g.load_cap(pl.affix() + PROG_RET_CODE)?;
    let c2 = g.load_cap(pl.affix() + PROG_RET_DATA)?;
    g.ctx.set_creg(PROG_RET_CREGS.0, c1)?;
    g.ctx.set_creg(PROG_RET_CREGS.1, c2)?;
    g.ctx.iregs.tp = pl.tls_for(g.slot.tls_index());
    g.layer = Layer::Program(p);
    let (arg, size) = (g.ctx.iregs.a[0], g.ctx.iregs.a[1]);
    let (_, func) = g.rt.programs[p].exports.get(f).cloned().ok_or(Error::UnknownFunc)?;
    func(&mut g, arg, size)
}
