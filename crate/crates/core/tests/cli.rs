use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn condense(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condense"))
        .args(args)
        .current_dir(dir)
        .env_remove("CONDENSE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn idx_images(n: usize, side: usize, pixel: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x803u32, n as u32, side as u32, side as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        for p in 0..side * side {
            b.push(pixel(i, p));
        }
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&0x801u32.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

/// A tiny MNIST-shaped dataset: class `c` lights up row band `c`.
fn write_mnist(root: &Path, train: usize, test: usize) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    let side = 10;
    let pixel = |i: usize, p: usize| {
        if p / side == i % 10 {
            200
        } else {
            ((i * 31 + p * 7) % 50) as u8
        }
    };
    for (name, n) in [("train", train), ("t10k", test)] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        fs::write(
            dir.join(format!("{name}-images-idx3-ubyte")),
            idx_images(n, side, pixel),
        )
        .unwrap();
        fs::write(
            dir.join(format!("{name}-labels-idx1-ubyte")),
            idx_labels(&labels),
        )
        .unwrap();
    }
}

const SMALL: [&str; 8] = [
    "--set",
    "block_layers=2,2",
    "--set",
    "batch_size=10",
    "--epochs",
    "6",
    "--seed",
    "3",
];

fn setup() -> TempDir {
    let t = TempDir::new().unwrap();
    write_mnist(&t.path().join("data"), 40, 20);
    t
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "data", "--out", out];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    condense(&args, dir)
}

#[test]
fn train_convert_verify_count_export() {
    let t = setup();
    let d = t.path();
    let o = train(d, "a.ckpt", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d.join("a.ckpt.log.tsv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(
        rows[0],
        "epoch\tlr\ttrain_loss\ttest_err\ttest_loss\tsurviving_fraction"
    );
    assert_eq!(rows.len(), 7);

    let o = condense(
        &["convert", "--input", "a.ckpt", "--output", "a.test.ckpt"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = condense(
        &[
            "verify",
            "--train-form",
            "a.ckpt",
            "--test-form",
            "a.test.ckpt",
            "--inputs",
            "20",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let train_count = stdout(&condense(&["count", "--checkpoint", "a.ckpt"], d));
    let test_count = stdout(&condense(&["count", "--checkpoint", "a.test.ckpt"], d));
    let field = |s: &str, k: &str| s.lines().find(|l| l.starts_with(k)).unwrap().to_string();
    assert_eq!(
        field(&train_count, "params ="),
        field(&test_count, "params =")
    );
    assert_ne!(
        field(&train_count, "flops ="),
        field(&test_count, "flops =")
    );

    for ck in ["a.ckpt", "a.test.ckpt"] {
        let o = condense(
            &[
                "export-connectivity",
                "--checkpoint",
                ck,
                "--output",
                "conn.csv",
            ],
            d,
        );
        assert_eq!(code(&o), 0);
        let text = fs::read_to_string(d.join("conn.csv")).unwrap();
        assert!(text.contains("# section group") && text.contains("# section block"));
    }

    // A test-form checkpoint cannot be converted again.
    let o = condense(
        &["convert", "--input", "a.test.ckpt", "--output", "b.ckpt"],
        d,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let t = setup();
    let d = t.path();
    assert_eq!(code(&train(d, "full.ckpt", &[])), 0);
    assert_eq!(code(&train(d, "part.ckpt", &["--stop-after", "2"])), 0);
    let o = condense(
        &[
            "train",
            "--data",
            "data",
            "--resume",
            "part.ckpt",
            "--out",
            "part.ckpt",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(d.join("full.ckpt")).unwrap(),
        fs::read(d.join("part.ckpt")).unwrap()
    );
}

#[test]
fn data_dir_from_environment() {
    let t = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_condense"))
        .args([
            "train",
            "--out",
            "e.ckpt",
            "--epochs",
            "6",
            "--set",
            "block_layers=1,1",
            "--set",
            "batch_size=10",
        ])
        .current_dir(t.path())
        .env("CONDENSE_DATA_DIR", t.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn prune_baseline_runs_twice_the_epochs() {
    let t = setup();
    let d = t.path();
    let mut args = vec!["prune-baseline", "--data", "data", "--out", "base.ckpt"];
    args.extend_from_slice(&SMALL);
    let o = condense(&args, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d.join("base.ckpt.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 12);
}

#[test]
fn exit_codes() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    assert_eq!(code(&condense(&["--help"], d)), 0);
    assert_eq!(code(&condense(&["train", "--no-such-flag"], d)), 1);
    assert_eq!(code(&condense(&["frobnicate"], d)), 1);
    let o = condense(
        &["convert", "--input", "missing.ckpt", "--output", "x.ckpt"],
        d,
    );
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
    let o = condense(&["train", "--data", "nowhere", "--epochs", "1"], d);
    assert_eq!(code(&o), 2);
    let o = condense(&["count", "--config", "no-such-preset"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn count_preset_prints_table() {
    let t = TempDir::new().unwrap();
    let o = condense(
        &[
            "count",
            "--config",
            "imagenet-table3",
            "--resolution",
            "224",
        ],
        t.path(),
    );
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("flops = ") && s.contains("params = ") && s.contains("layer.stem"));
}
