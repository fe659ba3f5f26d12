// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Transfer micro-benchmarks and the kv demo.
//!
//! Every mechanism moves `size` bytes from a program in one cVM to a program
//! in another. The pipe baseline stages data in an Intravisor-owned ring,
//! so it copies twice; FILE and STREAM copy once.

pub mod kv;
mod pipe;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

pub use pipe::PipeChannel;

use crate::capmachine::CvmId;
use crate::error::Error;
use crate::guestkit::Guest;
use crate::intravisor::layout::round_up;
use crate::intravisor::{DeploymentConfig, Intravisor, Rights};
use kv::{KvLink, Transport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    File,
    Stream,
    Pipe,
    /// Host `memcpy`, outside the machine. A lower bound for reference.
    Memcpy,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::File, Mechanism::Stream, Mechanism::Pipe, Mechanism::Memcpy];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::File => "file",
            Mechanism::Stream => "stream",
            Mechanism::Pipe => "pipe",
            Mechanism::Memcpy => "memcpy",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or(Error::InvalidArgument)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub mechanism: Mechanism,
    pub size: u64,
    pub iters: usize,
    pub median_ns: u64,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    /// Bytes moved by `capcpy` per transfer (host bytes for `memcpy`).
    pub bytes_copied: u64,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "mechanism,size,iters,median_ns,mean_ns,stddev_ns,bytes_copied";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{:.1},{}",
            self.mechanism,
            self.size,
            self.iters,
            self.median_ns,
            self.mean_ns,
            self.stddev_ns,
            self.bytes_copied
        )
    }

    /// Bytes per second at the median.
    pub fn throughput(&self) -> f64 {
        self.size as f64 / (self.median_ns.max(1) as f64 / 1e9)
    }
}

/// Median, mean and population standard deviation, in nanoseconds.
pub fn summarize(samples: &[Duration]) -> (u64, f64, f64) {
    if samples.is_empty() {
        return (0, 0.0, 0.0);
    }
    let mut ns: Vec<u64> = samples.iter().map(|d| d.as_nanos() as u64).collect();
    ns.sort_unstable();
    let n = ns.len();
    let median = if n % 2 == 1 { ns[n / 2] } else { (ns[n / 2 - 1] + ns[n / 2]) / 2 };
    let mean = ns.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = ns.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    (median, mean, var.sqrt())
}

/// Value at quantile `q` in `[0, 1]` (nearest rank).
pub fn percentile(samples: &[Duration], q: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut ns: Vec<u64> = samples.iter().map(|d| d.as_nanos() as u64).collect();
    ns.sort_unstable();
    let rank = ((q * ns.len() as f64).ceil() as usize).clamp(1, ns.len());
    ns[rank - 1]
}

const PEER_KEYS: &str = "bench.*";

/// Largest transfer a bench run will size a heap for.
pub const MAX_SIZE: u64 = 64 << 20;

/// Two attached programs in separate cVMs, `a` sending to `b`.
pub struct BenchPair {
    iv: Arc<Intravisor>,
    a: Guest,
    b: Guest,
    buf_a: u64,
    buf_b: u64,
    max: u64,
}

impl BenchPair {
    /// Builds a fresh Intravisor sized for transfers of up to `max` bytes.
    pub fn new(max: u64) -> Result<Self, Error> {
        let max = max.max(16);
        let heap = round_up(2 * max + (1 << 20), 1 << 20);
        let mem = (64 << 20) + 4 * heap + 8 * max;
        let iv = Intravisor::new(round_up(mem, 1 << 20));
        let cfg = |name: &str| {
            DeploymentConfig::new(name, "idle").with_heap(heap).allow(PEER_KEYS, Rights::RW, "*")
        };
        let ida = iv.cvm_make(cfg("bench-a"))?.id;
        let idb = iv.cvm_make(cfg("bench-b"))?.id;
        let mut a = iv.attach(ida, 0)?;
        let mut b = iv.attach(idb, 0)?;
        let buf_a = a.alloc(max)?;
        let buf_b = b.alloc(max)?;
        let data: Vec<u8> = (0..max).map(crate::guestkit::programs::pattern).collect();
        a.write(buf_a, &data)?;
        Ok(Self { iv, a, b, buf_a, buf_b, max })
    }

    pub fn intravisor(&self) -> &Arc<Intravisor> {
        &self.iv
    }

    pub fn ids(&self) -> (CvmId, CvmId) {
        (self.a.cvm_id(), self.b.cvm_id())
    }

    /// What the receiver holds after the last transfer.
    pub fn received(&self, len: u64) -> Result<Vec<u8>, Error> {
        self.b.read(self.buf_b, len)
    }

    /// What the sender offered.
    pub fn sent(&self, len: u64) -> Result<Vec<u8>, Error> {
        self.a.read(self.buf_a, len)
    }

    /// Runs `iters` timed transfers of `size` bytes plus one warm-up.
    pub fn run(&mut self, mech: Mechanism, size: u64, iters: usize) -> Result<BenchResult, Error> {
        if size > self.max {
            return Err(Error::SizeTooLarge);
        }
        if iters == 0 {
            return Err(Error::InvalidArgument);
        }
        let mut op = self.prepare(mech, size)?;
        op(self)?;
        b_clear(self, size)?;
        let c0 = self.iv.machine().copy_counter();
        let mut samples = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            op(self)?;
            samples.push(t.elapsed());
        }
        let copied = self.iv.machine().copy_counter() - c0;
        let (median_ns, mean_ns, stddev_ns) = summarize(&samples);
        Ok(BenchResult {
            mechanism: mech,
            size,
            iters,
            median_ns,
            mean_ns,
            stddev_ns,
            bytes_copied: if mech == Mechanism::Memcpy { size } else { copied / iters as u64 },
        })
    }

    /// Sets up the channel for one (mechanism, size) and returns the
    /// transfer closure.
    #[allow(clippy::type_complexity)]
    fn prepare(
        &mut self,
        mech: Mechanism,
        size: u64,
    ) -> Result<Box<dyn FnMut(&mut BenchPair) -> Result<(), Error>>, Error> {
        let tag = self.iv.registry_keys().len();
        Ok(match mech {
            Mechanism::File => {
                let key = format!("bench.file.{size}.{tag}");
                self.a.cp_file_make(&key, self.buf_a, size)?;
                let h = self.b.cp_file_get(&key)?;
                Box::new(move |p| {
                    p.b.cp_file_read(&h, p.buf_b, 0, size)?;
                    Ok(())
                })
            }
            Mechanism::Stream => {
                let key = format!("bench.stream.{size}.{tag}");
                let rx = self.b.cp_stream_make(&key, false)?;
                let tx = self.a.cp_stream_get(&key)?;
                Box::new(move |p| {
                    p.b.cp_stream_recv(&rx, 0, p.buf_b, size)?;
                    p.a.cp_stream_send(&tx, p.buf_a, size)?;
                    p.b.cp_stream_poll(&rx, None)?;
                    Ok(())
                })
            }
            Mechanism::Pipe => {
                let key = format!("bench.pipe.{size}.{tag}");
                let w = self.a.pipe_open(&key, size)?;
                let r = self.b.pipe_open(&key, size)?;
                Box::new(move |p| {
                    p.a.write_fd(w, p.buf_a, size)?;
                    let mut got = 0;
                    while got < size {
                        got += p.b.read_fd(r, p.buf_b + got, size - got)?;
                    }
                    Ok(())
                })
            }
            Mechanism::Memcpy => {
                let src = vec![0x5au8; size as usize];
                let mut dst = vec![0u8; size as usize];
                Box::new(move |_| {
                    dst.copy_from_slice(std::hint::black_box(&src));
                    std::hint::black_box(&mut dst);
                    Ok(())
                })
            }
        })
    }
}

fn b_clear(p: &mut BenchPair, size: u64) -> Result<(), Error> {
    p.b.write(p.buf_b, &vec![0; size as usize])
}

/// Runs every mechanism in `mechs` at every size in `sizes`.
pub fn bench(mechs: &[Mechanism], sizes: &[u64], iters: usize) -> Result<Vec<BenchResult>, Error> {
    let max = sizes.iter().copied().max().unwrap_or(4096);
    if max > MAX_SIZE {
        return Err(Error::SizeTooLarge);
    }
    let mut pair = BenchPair::new(max)?;
    let mut out = Vec::new();
    for &size in sizes {
        for &m in mechs {
            out.push(pair.run(m, size, iters)?);
        }
    }
    Ok(out)
}

/// Latency summary of one kv demo run.
#[derive(Clone, Debug)]
pub struct KvReport {
    pub transport: Transport,
    pub ops: usize,
    pub mismatches: usize,
    /// GETs of keys that were never set.
    pub misses: usize,
    pub median_ns: u64,
    pub p95_ns: u64,
    pub stddev_ns: f64,
    /// `(quantile, ns)` points of the latency CDF.
    pub cdf: Vec<(f64, u64)>,
}

impl fmt::Display for KvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.transport {
            Transport::Stream => "stream",
            Transport::Pipe => "pipe",
        };
        write!(
            f,
            "{t:<6} ops={} mismatches={} misses={} median={}ns p95={}ns stddev={:.0}ns",
            self.ops, self.mismatches, self.misses, self.median_ns, self.p95_ns, self.stddev_ns
        )
    }
}

/// Runs `ops` kv operations over each transport between a server and a
/// client cVM. The server runs on its own host thread.
pub fn demo_kv(ops: usize, transports: &[Transport], seed: u64) -> Result<Vec<KvReport>, Error> {
    let iv = Intravisor::new(128 << 20);
    let cfg = |name: &str| DeploymentConfig::new(name, "idle").allow("kv*", Rights::RW, "*");
    let server = iv.cvm_make(cfg("kv-server"))?.id;
    let client = iv.cvm_make(cfg("kv-client"))?.id;
    let mut out = Vec::new();
    for &t in transports {
        let prefix = match t {
            Transport::Stream => "kv-stream",
            Transport::Pipe => "kv-pipe",
        };
        let iv2 = iv.clone();
        let srv = std::thread::spawn(move || -> Result<u64, Error> {
            let mut g = iv2.attach(server, 0)?;
            let link = KvLink::server(&mut g, t, prefix)?;
            kv::serve(&mut g, &link)
        });
        let run = (|| {
            let mut g = iv.attach(client, 0)?;
            let link = KvLink::client(&mut g, t, prefix)?;
            kv::drive(&mut g, &link, ops, seed)
        })();
        let served = srv.join().map_err(|_| Error::CalleeFault)?;
        let run = run?;
        served?;
        let (median_ns, _, stddev_ns) = summarize(&run.latencies);
        let cdf = (1..=20)
            .map(|i| {
                let q = i as f64 / 20.0;
                (q, percentile(&run.latencies, q))
            })
            .collect();
        out.push(KvReport {
            transport: t,
            ops: run.ops,
            mismatches: run.mismatches,
            misses: run.misses,
            median_ns,
            p95_ns: percentile(&run.latencies, 0.95),
            stddev_ns,
            cdf,
        });
    }
    Ok(out)
}
