// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! A tiny key-value protocol used by the kv demo and the `kv_server` /
//! `kv_client` programs. Requests are `[op, key, value; 100]`; responses
//! are `[status, value; 100]`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::commdev::StreamHandle;
use crate::error::Error;
use crate::guestkit::Guest;

pub const VALUE_LEN: usize = 100;
pub const REQ_LEN: usize = 2 + VALUE_LEN;
pub const RSP_LEN: usize = 1 + VALUE_LEN;

const OP_GET: u8 = 0;
const OP_PUT: u8 = 1;
const OP_QUIT: u8 = 2;

const PIPE_CAPACITY: u64 = 4096;
/// Receive ring size on a stream.
const POSTED: u64 = 64;
/// Consumed buffers are reposted in batches of this many.
const REFILL: usize = 32;
const PEER_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Transport {
    Stream,
    Pipe,
}

impl std::str::FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "stream" => Ok(Transport::Stream),
            "pipe" => Ok(Transport::Pipe),
            _ => Err(Error::InvalidArgument),
        }
    }
}

enum Chan {
    Stream(StreamHandle),
    Pipe(u64),
}

/// One direction-pair of a kv conversation, bound to a guest program.
pub struct KvLink {
    tx: Chan,
    rx: Chan,
    tx_buf: u64,
    rx_buf: u64,
    /// Consumed receive buffers not yet reposted.
    consumed: RefCell<Vec<u64>>,
}

impl KvLink {
    /// Server side: owns the request channel, uses the client's response
    /// channel.
    pub fn server(g: &mut Guest, t: Transport, prefix: &str) -> Result<Self, Error> {
        let (req, rsp) = (format!("{prefix}.req"), format!("{prefix}.rsp"));
        let (rx, tx) = match t {
            Transport::Stream => {
                let rx = g.cp_stream_make(&req, false)?;
                let tx = g.retry(PEER_TIMEOUT, |g| g.cp_stream_get(&rsp))?;
                (Chan::Stream(rx), Chan::Stream(tx))
            }
            Transport::Pipe => {
                (Chan::Pipe(g.pipe_open(&req, PIPE_CAPACITY)?), Chan::Pipe(g.pipe_open(&rsp, PIPE_CAPACITY)?))
            }
        };
        Self::with_buffers(g, tx, rx)
    }

    /// Client side: owns the response channel.
    pub fn client(g: &mut Guest, t: Transport, prefix: &str) -> Result<Self, Error> {
        let (req, rsp) = (format!("{prefix}.req"), format!("{prefix}.rsp"));
        let (rx, tx) = match t {
            Transport::Stream => {
                let rx = g.cp_stream_make(&rsp, false)?;
                let tx = g.retry(PEER_TIMEOUT, |g| g.cp_stream_get(&req))?;
                (Chan::Stream(rx), Chan::Stream(tx))
            }
            Transport::Pipe => {
                (Chan::Pipe(g.pipe_open(&rsp, PIPE_CAPACITY)?), Chan::Pipe(g.pipe_open(&req, PIPE_CAPACITY)?))
            }
        };
        Self::with_buffers(g, tx, rx)
    }

    fn with_buffers(g: &mut Guest, tx: Chan, rx: Chan) -> Result<Self, Error> {
        let tx_buf = g.alloc(REQ_LEN as u64)?;
        let rx_buf = g.alloc(POSTED * REQ_LEN as u64)?;
        let link = Self { tx, rx, tx_buf, rx_buf, consumed: RefCell::new(Vec::with_capacity(REFILL)) };
        if let Chan::Stream(h) = &link.rx {
            for id in 0..POSTED {
                g.cp_stream_recv(h, id, link.buffer(id), REQ_LEN as u64)?;
            }
        }
        Ok(link)
    }

    fn buffer(&self, id: u64) -> u64 {
        self.rx_buf + id * REQ_LEN as u64
    }

    /// Reposts consumed receive buffers once half the ring is used. The
    /// other half keeps a peer's send from waiting on a buffer meanwhile.
    fn rearm(&self, g: &mut Guest) -> Result<(), Error> {
        let Chan::Stream(h) = &self.rx else {
            return Ok(());
        };
        let mut consumed = self.consumed.borrow_mut();
        if consumed.len() < REFILL {
            return Ok(());
        }
        for id in consumed.drain(..) {
            g.cp_stream_recv(h, id, self.buffer(id), REQ_LEN as u64)?;
        }
        Ok(())
    }

    fn send(&self, g: &mut Guest, msg: &[u8]) -> Result<(), Error> {
        g.write(self.tx_buf, msg)?;
        let n = msg.len() as u64;
        match &self.tx {
            Chan::Stream(h) => {
                if g.cp_stream_send(h, self.tx_buf, n)? != n {
                    return Err(Error::InvalidArgument);
                }
            }
            Chan::Pipe(fd) => {
                g.write_fd(*fd, self.tx_buf, n)?;
            }
        }
        Ok(())
    }

    fn recv(&self, g: &mut Guest, len: usize) -> Result<Vec<u8>, Error> {
        match &self.rx {
            Chan::Stream(h) => {
                let done = g.cp_stream_poll(h, None)?;
                let &(id, n) = done.first().ok_or(Error::WouldBlock)?;
                if id >= POSTED {
                    return Err(Error::InvalidArgument);
                }
                self.consumed.borrow_mut().push(id);
                g.read(self.buffer(id), n)
            }
            Chan::Pipe(fd) => {
                let mut got = 0u64;
                while got < len as u64 {
                    got += g.read_fd(*fd, self.rx_buf + got, len as u64 - got)?;
                }
                g.read(self.rx_buf, len as u64)
            }
        }
    }
}

/// Serves requests until a quit message. The table lives in the server
/// program's heap: one `[present, value]` row per key byte.
pub fn serve(g: &mut Guest, link: &KvLink) -> Result<u64, Error> {
    const ROW: u64 = 1 + VALUE_LEN as u64;
    let table = g.alloc(256 * ROW)?;
    g.write(table, &vec![0; (256 * ROW) as usize])?;
    let mut served = 0;
    loop {
        let req = link.recv(g, REQ_LEN)?;
        if req.len() != REQ_LEN || req[0] == OP_QUIT {
            return Ok(served);
        }
        let row = table + req[1] as u64 * ROW;
        let mut rsp = vec![0u8; RSP_LEN];
        match req[0] {
            OP_PUT => {
                g.write(row, &[1])?;
                g.write(row + 1, &req[2..])?;
                rsp[0] = 1;
            }
            OP_GET => {
                let cur = g.read(row, ROW)?;
                rsp.copy_from_slice(&cur);
            }
            _ => rsp[0] = 0xff,
        }
        link.send(g, &rsp)?;
        link.rearm(g)?;
        served += 1;
    }
}

/// Client-side result of a kv run.
#[derive(Clone, Debug, Default)]
pub struct KvRun {
    pub ops: usize,
    pub mismatches: usize,
    pub misses: usize,
    pub latencies: Vec<Duration>,
}

/// Issues `ops` random get/put operations and checks every reply against a
/// local shadow map. Sends quit at the end.
pub fn drive(g: &mut Guest, link: &KvLink, ops: usize, seed: u64) -> Result<KvRun, Error> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut shadow: HashMap<u8, Vec<u8>> = HashMap::new();
    let mut run = KvRun { ops, ..KvRun::default() };
    for _ in 0..ops {
        let key: u8 = rng.gen_range(0..32);
        let mut req = vec![0u8; REQ_LEN];
        req[1] = key;
        let put = rng.gen_bool(0.5);
        if put {
            req[0] = OP_PUT;
            rng.fill(&mut req[2..]);
        }
        let t0 = Instant::now();
        link.send(g, &req)?;
        let rsp = link.recv(g, RSP_LEN)?;
        run.latencies.push(t0.elapsed());
        link.rearm(g)?;
        let ok = if put {
            shadow.insert(key, req[2..].to_vec());
            rsp.first() == Some(&1)
        } else {
            match shadow.get(&key) {
                Some(v) => rsp.len() == RSP_LEN && rsp[0] == 1 && rsp[1..] == v[..],
                None => {
                    run.misses += 1;
                    rsp.first() == Some(&0)
                }
            }
        };
        if !ok {
            run.mismatches += 1;
        }
    }
    let mut quit = vec![0u8; REQ_LEN];
    quit[0] = OP_QUIT;
    link.send(g, &quit)?;
    Ok(run)
}
