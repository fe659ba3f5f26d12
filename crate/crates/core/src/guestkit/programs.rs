// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Guest programs. A program is a main entry and a list of exported
//! functions, both plain Rust closures run on a [`Guest`] at the program
//! layer.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;

use crate::bench::kv::{self, KvLink, Transport};
use crate::error::Error;

use super::Guest;

pub type MainFn = Arc<dyn Fn(&mut Guest, &[String]) -> Result<i64, Error> + Send + Sync>;
pub type ExportFn = Arc<dyn Fn(&mut Guest, u64, u64) -> Result<i64, Error> + Send + Sync>;

pub struct GuestProgram {
    pub name: String,
    pub main: Option<MainFn>,
    pub exports: Vec<(String, ExportFn)>,
    /// Library programs have their exports published as CAP_CALL devices
    /// during libOS start-up.
    pub library: bool,
}

impl GuestProgram {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), main: None, exports: Vec::new(), library: false }
    }

    pub fn with_main(
        mut self,
        f: impl Fn(&mut Guest, &[String]) -> Result<i64, Error> + Send + Sync + 'static,
    ) -> Self {
        self.main = Some(Arc::new(f));
        self
    }

    pub fn export(
        mut self,
        name: impl Into<String>,
        f: impl Fn(&mut Guest, u64, u64) -> Result<i64, Error> + Send + Sync + 'static,
    ) -> Self {
        self.exports.push((name.into(), Arc::new(f)));
        self
    }

    pub fn library(mut self) -> Self {
        self.library = true;
        self
    }

    pub fn func_id(&self, name: &str) -> Option<usize> {
        self.exports.iter().position(|(n, _)| n == name)
    }
}

/// Name → program table consulted by `cvm_make`.
#[derive(Default)]
pub struct ProgramRegistry {
    map: RwLock<BTreeMap<String, Arc<GuestProgram>>>,
}

impl ProgramRegistry {
    pub fn builtins() -> Self {
        let r = Self::default();
        for p in builtin_programs() {
            r.register(p);
        }
        r
    }

    pub fn register(&self, p: GuestProgram) {
        self.map.write().insert(p.name.clone(), Arc::new(p));
    }

    pub fn get(&self, name: &str) -> Option<Arc<GuestProgram>> {
        self.map.read().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.read().keys().cloned().collect()
    }
}

/// Byte pattern written by `producer` and checked by `consumer`.
pub fn pattern(i: u64) -> u8 {
    (i.wrapping_mul(31).wrapping_add(7) & 0xff) as u8
}

/// 64-bit FNV-1a.
pub fn fnv1a(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub const VICTIM_SECRET: &[u8] = b"victim-secret:do-not-leak-0123456789";
pub const VICTIM_SECRET_KEY: &str = "victim.secret";
pub const VICTIM_PUBLIC_KEY: &str = "victim.pub";

fn arg<'a>(args: &'a [String], i: usize, default: &'a str) -> &'a str {
    args.get(i).map_or(default, String::as_str)
}

fn num(args: &[String], i: usize, default: u64) -> Result<u64, Error> {
    match args.get(i) {
        Some(s) => s.parse().map_err(|_| Error::InvalidArgument),
        None => Ok(default),
    }
}

fn builtin_programs() -> Vec<GuestProgram> {
    vec![
        GuestProgram::new("idle").with_main(|_, _| Ok(0)),
        GuestProgram::new("hello").with_main(|g, args| {
            let who = g.cvm_name().to_string();
            g.print(&format!("hello from {who}\n"))?;
            for (i, a) in args.iter().enumerate() {
                g.print(&format!("argv[{i}] = {a}\n"))?;
            }
            Ok(0)
        }),
        GuestProgram::new("producer").with_main(|g, args| {
            let key = arg(args, 0, "shared").to_string();
            let size = num(args, 1, 4096)?;
            let buf = g.alloc(size)?;
            let data: Vec<u8> = (0..size).map(pattern).collect();
            g.write(buf, &data)?;
            let h = g.cp_file_make(&key, buf, size)?;
            g.cp_file_notify(&h)?;
            g.print(&format!("producer: published {key} ({size} bytes)\n"))?;
            Ok(0)
        }),
        GuestProgram::new("consumer").with_main(|g, args| {
            let key = arg(args, 0, "shared").to_string();
            let h = g.retry(Duration::from_secs(10), |g| g.cp_file_get(&key))?;
            g.cp_file_wait(&h)?;
            let buf = g.alloc(h.size)?;
            let n = g.cp_file_read(&h, buf, 0, h.size)?;
            let got = g.read(buf, n)?;
            let ok = got.iter().enumerate().all(|(i, &b)| b == pattern(i as u64));
            g.print(&format!(
                "consumer: read {n} bytes from {key}, fnv {:016x}, {}\n",
                fnv1a(&got),
                if ok { "pattern ok" } else { "PATTERN MISMATCH" }
            ))?;
            Ok(if ok { 0 } else { 1 })
        }),
        GuestProgram::new("kv_server").with_main(|g, args| {
            let t: Transport = arg(args, 0, "stream").parse()?;
            let prefix = arg(args, 1, "kv").to_string();
            let link = KvLink::server(g, t, &prefix)?;
            let n = kv::serve(g, &link)?;
            g.print(&format!("kv_server: served {n} requests\n"))?;
            Ok(0)
        }),
        GuestProgram::new("kv_client").with_main(|g, args| {
            let t: Transport = arg(args, 0, "stream").parse()?;
            let prefix = arg(args, 1, "kv").to_string();
            let ops = num(args, 2, 1000)? as usize;
            let link = KvLink::client(g, t, &prefix)?;
            let run = kv::drive(g, &link, ops, 7)?;
            g.print(&format!("kv_client: {} ops, {} mismatches\n", run.ops, run.mismatches))?;
            Ok(run.mismatches as i64)
        }),
        GuestProgram::new("crypto_lib")
            .library()
            .export("checksum", |g, arg, size| {
                let data = g.read(arg, size)?;
                Ok((fnv1a(&data) >> 1) as i64)
            })
            .export("byte_sum", |g, arg, size| {
                let data = g.read(arg, size)?;
                Ok(data.iter().map(|&b| b as i64).sum())
            })
            .export("escape", |g, _, _| {
                // Reads just below its own program region; always faults.
                let base = g.program_layout()?.base;
                g.read(base - 16, 16).map(|_| 0)
            }),
        GuestProgram::new("victim").with_main(|g, _| {
            let secret = g.alloc(VICTIM_SECRET.len() as u64)?;
            g.write(secret, VICTIM_SECRET)?;
            g.cp_file_make(VICTIM_SECRET_KEY, secret, VICTIM_SECRET.len() as u64)?;
            let public = g.alloc(64)?;
            g.write(public, b"victim public page")?;
            g.cp_file_make(VICTIM_PUBLIC_KEY, public, 64)?;
            Ok(0)
        }),
        GuestProgram::new("attacker").with_main(|g, _| {
            g.print("attacker: waiting for the host-driven suite\n")?;
            Ok(0)
        }),
    ]
}
