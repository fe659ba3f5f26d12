// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use capvm::bench::kv::Transport;
use capvm::bench::{bench, demo_kv, BenchPair, BenchResult, Mechanism, MAX_SIZE};
use capvm::Error;

fn copied(rows: &[BenchResult], m: Mechanism, size: u64) -> u64 {
    rows.iter().find(|r| r.mechanism == m && r.size == size).map(|r| r.bytes_copied).unwrap()
}

#[test]
fn file_and_pipe_copy_totals() {
    let mut p = BenchPair::new(4096).unwrap();
    let iters = 1000;
    let file = p.run(Mechanism::File, 4096, iters).unwrap();
    assert_eq!(file.bytes_copied * iters as u64, 4_096_000);
    let pipe = p.run(Mechanism::Pipe, 4096, iters).unwrap();
    assert_eq!(pipe.bytes_copied * iters as u64, 8_192_000);
    assert_eq!(p.received(4096).unwrap(), p.sent(4096).unwrap());
}

#[test]
fn every_mechanism_delivers_the_payload() {
    let mut p = BenchPair::new(8192).unwrap();
    for m in [Mechanism::File, Mechanism::Stream, Mechanism::Pipe] {
        p.run(m, 8192, 2).unwrap();
        assert_eq!(p.received(8192).unwrap(), p.sent(8192).unwrap(), "{m}");
    }
}

#[test]
fn pipe_copies_exactly_twice_as_much() {
    let sizes = [4096, 65536, 1 << 20];
    let rows = bench(&[Mechanism::File, Mechanism::Stream, Mechanism::Pipe], &sizes, 3).unwrap();
    for s in sizes {
        assert_eq!(copied(&rows, Mechanism::File, s), s);
        assert_eq!(copied(&rows, Mechanism::Stream, s), s);
        assert_eq!(copied(&rows, Mechanism::Pipe, s), 2 * copied(&rows, Mechanism::File, s));
    }
}

#[test]
fn bytes_copied_is_deterministic() {
    let mechs = [Mechanism::File, Mechanism::Stream, Mechanism::Pipe, Mechanism::Memcpy];
    let run = || -> Vec<(Mechanism, u64, u64)> {
        bench(&mechs, &[4096, 65536], 5)
            .unwrap()
            .into_iter()
            .map(|r| (r.mechanism, r.size, r.bytes_copied))
            .collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn csv_rows_have_seven_fields() {
    let rows = bench(&[Mechanism::File], &[4096], 4).unwrap();
    assert_eq!(BenchResult::CSV_HEADER.split(',').count(), 7);
    let row = rows[0].csv_row();
    let f: Vec<&str> = row.split(',').collect();
    assert_eq!(f.len(), 7);
    assert_eq!((f[0], f[1], f[2], f[6]), ("file", "4096", "4", "4096"));
}

#[test]
fn oversized_transfers_are_refused() {
    let mut p = BenchPair::new(4096).unwrap();
    assert_eq!(p.run(Mechanism::File, 8192, 1).unwrap_err(), Error::SizeTooLarge);
    assert_eq!(bench(&[Mechanism::File], &[MAX_SIZE + 1], 1).unwrap_err(), Error::SizeTooLarge);
}

#[test]
fn kv_round_trips_match_the_shadow_map() {
    let reports = demo_kv(1000, &[Transport::Stream, Transport::Pipe], 11).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.ops, 1000);
        assert_eq!(r.mismatches, 0, "{r}");
        // With 32 keys and a fresh store some GETs precede the first SET.
        assert!(r.misses > 0, "{r}");
        assert_eq!(r.cdf.len(), 20);
        assert!(r.cdf.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(r.cdf.last().unwrap().0, 1.0);
    }
    // Same seed, same request sequence.
    assert_eq!(reports[0].misses, reports[1].misses);
}
