use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slimsplit::checkpoint::Checkpoint;
use slimsplit::codec;
use slimsplit::report;
use slimsplit::tensor::{Shape, Tensor};

const TINY: &str = "\
# small enough for a test
train_size = 24
val_size = 8
epochs = 2
teacher_epochs = 1
batch_size = 8
";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.conf"), TINY).unwrap();
        Sandbox { dir }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn out(&self) -> PathBuf {
        self.root().join("out")
    }

    /// Runs the binary from the sandbox root with the tiny config.
    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_slimsplit"))
            .current_dir(self.root())
            .args(["--config", "run.conf", "--out-dir", "out"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn files(&self) -> Vec<PathBuf> {
        fn walk(p: &Path, acc: &mut Vec<PathBuf>) {
            for e in std::fs::read_dir(p).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(&p, acc);
                } else {
                    acc.push(p);
                }
            }
        }
        let mut v = Vec::new();
        walk(self.root(), &mut v);
        v.sort();
        v
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let s = Sandbox::new();
    let o = s.run(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&s.run(&["sweep", "--no-such-flag", "1"])), 1);
    assert_eq!(code(&s.run(&["sweep", "--output", "../escape.csv"])), 1);
    assert_eq!(code(&s.run(&["sweep", "--output", "/tmp/escape.csv"])), 1);
    assert_eq!(code(&s.run(&["sweep", "--epochs", "many"])), 1);
    std::fs::write(s.root().join("bad.conf"), "epochs = 2\ncolour = red\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_slimsplit"))
        .current_dir(s.root())
        .args(["--config", "bad.conf", "sweep"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    assert_eq!(code(&s.run(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let s = Sandbox::new();
    let o = s.run(&["sweep", "--student", "missing.ckpt"]);
    assert_eq!(code(&o), 2);
    std::fs::create_dir_all(s.out()).unwrap();
    std::fs::write(s.out().join("junk.pkt"), b"not a packet").unwrap();
    assert_eq!(code(&s.run(&["decode", "--input", "junk.pkt"])), 2);
}

#[test]
fn flags_override_file_and_echo_reloads() {
    let s = Sandbox::new();
    s.ok(&["gen-data", "--val-size", "4"]);
    let echoed = std::fs::read_to_string(s.out().join("gen-data.config.resolved")).unwrap();
    assert!(echoed.contains("train_size = 24\n"));
    assert!(echoed.contains("val_size = 4\n"));

    // feeding the echo back resolves to the same configuration
    let o = Command::new(env!("CARGO_BIN_EXE_slimsplit"))
        .current_dir(s.root())
        .args(["--config", "out/gen-data.config.resolved", "--out-dir", "again", "gen-data"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(s.root().join("again/gen-data.config.resolved")).unwrap(), echoed);
    assert_eq!(std::fs::read(s.out().join("dataset.ckpt")).unwrap(), std::fs::read(s.root().join("again/dataset.ckpt")).unwrap());
}

#[test]
fn encode_decode_matches_in_memory_round_trip() {
    let s = Sandbox::new();
    let t = Tensor::from_fn(Shape::new(1, 24, 8, 8), |i| ((i * 7919) % 1000) as f32 / 250.0 - 2.0);
    let mut ck = Checkpoint::new();
    ck.push_f32("tensor", &t).unwrap();
    std::fs::create_dir_all(s.out()).unwrap();
    ck.save(s.out().join("features.ckpt")).unwrap();

    s.ok(&["encode", "--input", "features.ckpt", "--bits", "4", "--alpha", "0.5", "--c-max", "48"]);
    let packet = std::fs::read(s.out().join("bottleneck.pkt")).unwrap();
    assert_eq!(packet.len(), codec::HEADER_LEN + 24 * 64 / 2);
    s.ok(&["decode"]);
    let back = Checkpoint::load(s.out().join("decoded.ckpt")).unwrap();
    let decoded = back.get_f32("tensor").unwrap();
    let expected = codec::round_trip(&t, 4).unwrap();
    let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(decoded), bits(&expected));
}

#[test]
fn pipeline_writes_only_under_out_dir() {
    let s = Sandbox::new();
    let before = s.files();
    s.ok(&["gen-data"]);
    s.ok(&["train-teacher", "--data", "dataset.ckpt"]);
    s.ok(&["distill", "--data", "dataset.ckpt", "--mode", "full_config", "--lr-halving", "1", "--epochs", "3", "--widths", "0.5,1.0", "--n-sandwich", "2"]);
    let csv = s.ok(&["sweep", "--data", "dataset.ckpt", "--widths", "0.5,1.0", "--bits", "4,8"]);
    s.ok(&["eval", "--data", "dataset.ckpt", "--widths", "0.5,1.0", "--recalibrated"]);
    s.ok(&["encode", "--data", "dataset.ckpt", "--alpha", "0.5"]);
    s.ok(&["decode"]);
    s.ok(&["simulate", "--data", "dataset.ckpt", "--widths", "0.5,1.0", "--max-bytes", "2000"]);

    let outside: Vec<_> = s.files().into_iter().filter(|p| !p.starts_with(s.out()) && !before.contains(p)).collect();
    assert!(outside.is_empty(), "files outside out-dir: {outside:?}");

    // halving every epoch: 0.1, 0.05, 0.025
    let log = std::fs::read_to_string(s.out().join("distill_log.ndjson")).unwrap();
    let lrs: Vec<f64> = log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["lr"].as_f64().unwrap()).collect();
    assert_eq!(lrs, vec![0.1, 0.05, 0.025]);

    let points = report::read_tradeoff_csv(&s.out().join("tradeoff.csv")).unwrap();
    assert_eq!(points.len(), 4);
    assert_eq!(csv, std::fs::read_to_string(s.out().join("tradeoff.csv")).unwrap());

    let sim: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(s.out().join("simulate.json")).unwrap()).unwrap();
    assert_eq!(sim["alpha"], "0.5");
    assert_eq!(sim["packet_bytes"], 34 + 24 * 64);
}

#[test]
fn distill_and_sweep_are_reproducible() {
    let run = || {
        let s = Sandbox::new();
        s.ok(&["train-teacher"]);
        s.ok(&["distill", "--widths", "0.25,1.0", "--n-sandwich", "2"]);
        s.ok(&["sweep", "--widths", "0.25,1.0", "--bits", "8"]);
        std::fs::read(s.out().join("tradeoff.csv")).unwrap()
    };
    assert_eq!(run(), run());
}
