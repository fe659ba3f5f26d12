// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::process::{Command, Output};

fn capvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capvm"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("spawn capvm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_prints_output_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hello.cfg");
    fs::write(&cfg, "name=hello\nprogram=hello\n").unwrap();
    let o = capvm(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("[hello] hello from hello"), "{out}");
    assert!(out.lines().last().unwrap().starts_with("deployed 1 cVM(s) in "), "{out}");
}

#[test]
fn run_reports_invalid_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "name=a\nprogram=hello\nheap_size=lots\n").unwrap();
    let o = capvm(&["run", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("invalid configuration") && err.contains("line 3"), "{err}");

    let o = capvm(&["run", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn run_producer_consumer_totals_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pc.cfg");
    fs::write(
        &cfg,
        "name=prod\nprogram=producer\nargs=buf 65536\nallow key=buf,rights=r,peer=cons\n\
         name=cons\nprogram=consumer\nargs=buf\n",
    )
    .unwrap();
    let o = capvm(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("published buf (65536 bytes)"), "{out}");
    assert!(out.contains("read 65536 bytes from buf") && out.contains("pattern ok"), "{out}");
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let o = capvm(&[
        "bench",
        "--mech",
        "file,pipe",
        "--sizes",
        "4K,64K",
        "--iters",
        "10",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mechanism,size,iters,median_ns,mean_ns,stddev_ns,bytes_copied"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let size: u64 = r[1].parse().unwrap();
        let copied: u64 = r[6].parse().unwrap();
        let factor = if r[0] == "pipe" { 2 } else { 1 };
        assert_eq!(copied, factor * size, "{r:?}");
        assert_eq!(r[2], "10");
    }
}

#[test]
fn bench_rejects_oversized_and_unknown_input() {
    assert!(!capvm(&["bench", "--sizes", "100M", "--iters", "1"]).status.success());
    assert!(!capvm(&["bench", "--mech", "carrier-pigeon"]).status.success());
}

#[test]
fn kv_demo_prints_one_cdf_per_transport() {
    let o = capvm(&["demo", "kv", "--ops", "200"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert_eq!(out.matches("quantile").count(), 2, "{out}");
    assert!(out.contains("stream ops=200 mismatches=0"), "{out}");
    assert!(out.contains("pipe   ops=200 mismatches=0"), "{out}");

    let o = capvm(&["demo", "kv", "--ops", "50", "--transport", "pipe"]);
    assert_eq!(stdout(&o).matches("quantile").count(), 1);
}

#[test]
fn attack_suite_reports_no_escapes() {
    let o = capvm(&["attack"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(!out.contains("ESCAPED"), "{out}");
    assert!(out.trim_end().ends_with(", 0 escapes"), "{out}");
}
