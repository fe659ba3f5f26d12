// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! `capvm`: deploy configurations, run the transfer benchmarks, the kv demo
//! and the attacker suite.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use capvm::bench::kv::Transport;
use capvm::bench::{self, BenchResult, KvReport, Mechanism};
use capvm::guestkit::attack::attacker_suite;
use capvm::intravisor::config::parse_size;
use capvm::intravisor::{parse_configs, ExitStatus, Intravisor};

#[derive(Parser)]
#[command(
    name = "capvm",
    version,
    about = "Capability-isolated compartments on a simulated capability machine"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Deploy every cVM in a configuration file and wait for all of them.
    Run {
        config: PathBuf,
        /// Simulated physical memory.
        #[arg(long, default_value = "256M", value_parser = size_arg)]
        mem: u64,
    },
    /// Time transfers between two cVMs and report copy counts.
    Bench {
        /// Comma-separated list of file, stream, pipe, memcpy, or `all`.
        #[arg(long, default_value = "all", value_parser = mechs_arg)]
        mech: MechList,
        #[arg(long, default_value = "4K,64K,1M,4M", value_parser = sizes_arg)]
        sizes: SizeList,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        /// Write rows here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a demo application.
    Demo {
        #[command(subcommand)]
        demo: Demo,
    },
    /// Run the attacker suite; exits non-zero if anything escapes.
    Attack,
}

#[derive(Subcommand)]
enum Demo {
    /// GET/SET round trips between a kv server and client cVM.
    Kv {
        #[arg(long, default_value_t = 1000)]
        ops: usize,
        /// `stream`, `pipe` or `both`.
        #[arg(long, default_value = "both", value_parser = transports_arg)]
        transport: TransportList,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

// clap treats a bare `Vec<T>` field as a repeated argument, so the parsed
// lists are wrapped.
#[derive(Clone)]
struct MechList(Vec<Mechanism>);
#[derive(Clone)]
struct SizeList(Vec<u64>);
#[derive(Clone)]
struct TransportList(Vec<Transport>);

fn size_arg(s: &str) -> Result<u64, String> {
    parse_size(s).ok_or_else(|| format!("bad size `{s}`"))
}

fn sizes_arg(s: &str) -> Result<SizeList, String> {
    s.split(',').map(size_arg).collect::<Result<_, _>>().map(SizeList)
}

fn mechs_arg(s: &str) -> Result<MechList, String> {
    if s == "all" {
        return Ok(MechList(Mechanism::ALL.to_vec()));
    }
    s.split(',')
        .map(|m| m.trim().parse().map_err(|_| format!("unknown mechanism `{m}`")))
        .collect::<Result<_, _>>()
        .map(MechList)
}

fn transports_arg(s: &str) -> Result<TransportList, String> {
    if s == "both" {
        return Ok(TransportList(vec![Transport::Stream, Transport::Pipe]));
    }
    s.parse().map(|t| TransportList(vec![t])).map_err(|_| format!("unknown transport `{s}`"))
}

fn run(path: &PathBuf, mem: u64) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfgs = parse_configs(&text).with_context(|| path.display().to_string())?;
    let t = Instant::now();
    let iv = Intravisor::new(mem);
    iv.set_echo(true);
    let mut ids = Vec::new();
    for cfg in cfgs {
        let name = cfg.name.clone();
        ids.push((name.clone(), iv.cvm_make(cfg).with_context(|| format!("deploying {name}"))?.id));
    }
    let mut failed = false;
    for (name, id) in &ids {
        match iv.wait(*id)? {
            ExitStatus::Exited(0) => {}
            ExitStatus::Exited(c) => {
                failed = true;
                eprintln!("{name}: exited with {c}");
            }
            ExitStatus::Faulted(why) => {
                failed = true;
                eprintln!("{name}: faulted: {why}");
            }
        }
    }
    println!("deployed {} cVM(s) in {:.3} ms", ids.len(), t.elapsed().as_secs_f64() * 1e3);
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn bench_cmd(mechs: &[Mechanism], sizes: &[u64], iters: usize, csv: Option<&PathBuf>) -> Result<()> {
    let rows = bench::bench(mechs, sizes, iters)?;
    let mut text = String::from(BenchResult::CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    match csv {
        Some(p) => {
            fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            for r in &rows {
                println!(
                    "{:<7} {:>8} B  median {:>10} ns  {:>9.1} MiB/s  copied {}",
                    r.mechanism.name(),
                    r.size,
                    r.median_ns,
                    r.throughput() / (1 << 20) as f64,
                    r.bytes_copied
                );
            }
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn print_cdf(r: &KvReport) {
    println!("{r}");
    println!("  {:>8}  {:>12}", "quantile", "latency_ns");
    for (q, ns) in &r.cdf {
        println!("  {q:>8.2}  {ns:>12}");
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Run { config, mem } => run(&config, mem),
        Cmd::Bench { mech, sizes, iters, csv } => {
            if iters == 0 {
                bail!("--iters must be at least 1");
            }
            bench_cmd(&mech.0, &sizes.0, iters, csv.as_ref())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Demo { demo: Demo::Kv { ops, transport, seed } } => {
            let reports = bench::demo_kv(ops, &transport.0, seed)?;
            for r in &reports {
                print_cdf(r);
            }
            let bad = reports.iter().any(|r| r.mismatches > 0);
            Ok(if bad { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Cmd::Attack => {
            let iv = Intravisor::new(64 << 20);
            let out = attacker_suite(&iv)?;
            let mut escapes = 0;
            for o in &out {
                let verdict = if o.passed() { "blocked" } else { "ESCAPED" };
                if !o.passed() {
                    escapes += 1;
                }
                println!("{verdict:<8} {:<28} expected {}, observed {}", o.name, o.expected, o.observed);
            }
            println!("{} behaviours, {escapes} escapes", out.len());
            Ok(if escapes == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
