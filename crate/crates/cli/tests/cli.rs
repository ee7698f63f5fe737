use std::path::Path;
use std::process::{Command, Output};

use ifseg_core::container::TensorMap;

const SMALL: &str = "\
M = 3
D = 16
enc_layers = 1
dec_layers = 1
heads = 2
H = 4
W = 4
S = 4
batch = 4
steps = 6
log_every = 3
lr = 0.003
K = 2
iterations = 3
";

fn ifseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

#[test]
fn print_config_echoes_settings() {
    let dir = setup();
    std::fs::write(dir.path().join("c.cfg"), "lr = 0.0007\nS = 5\nK = 4\n").unwrap();
    let out = ifseg(dir.path(), &["print-config", "--config", "c.cfg"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for line in ["lr = 0.0007", "S = 5", "K = 4"] {
        assert!(text.lines().any(|l| l == line), "{line} missing from\n{text}");
    }
    // the printed form parses back to itself
    std::fs::write(dir.path().join("echo.cfg"), &text).unwrap();
    assert_eq!(
        stdout(&ifseg(dir.path(), &["print-config", "--config", "echo.cfg"])),
        text
    );

    std::fs::write(dir.path().join("empty.cfg"), "").unwrap();
    assert_eq!(
        stdout(&ifseg(dir.path(), &["print-config", "--config", "empty.cfg"])),
        stdout(&ifseg(dir.path(), &["print-config"]))
    );
    let seeded = stdout(&ifseg(dir.path(), &["print-config", "--seed", "42"]));
    assert!(seeded.lines().any(|l| l == "seed = 42"));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(ifseg(p, &["--help"]).status.code(), Some(0));
    assert_eq!(ifseg(p, &["--version"]).status.code(), Some(0));
    assert_eq!(ifseg(p, &["gen-data", "--count", "2"]).status.code(), Some(1));
    assert_eq!(ifseg(p, &["train", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(ifseg(p, &[]).status.code(), Some(1));

    std::fs::write(p.join("bad.cfg"), "S = 0\n").unwrap();
    let out = ifseg(p, &["print-config", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`S`"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);

    std::fs::write(p.join("typo.cfg"), "learning_rate = 0.1\n").unwrap();
    assert_eq!(
        ifseg(p, &["print-config", "--config", "typo.cfg"]).status.code(),
        Some(2)
    );
    assert_eq!(
        ifseg(p, &["print-config", "--config", "missing.cfg"]).status.code(),
        Some(2)
    );

    std::fs::write(
        p.join("huge.cfg"),
        format!("{SMALL}lr = 1e30\n").replace("lr = 0.003\n", ""),
    )
    .unwrap();
    let out = ifseg(
        p,
        &["train", "--config", "huge.cfg", "--steps", "40", "--out", "huge.ifsg"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!p.join("huge.ifsg").exists());
}

#[test]
fn failed_runs_leave_no_output() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("junk.ifsg"), b"IFSG\x01\x00").unwrap();
    let out = ifseg(
        p,
        &[
            "train",
            "--config",
            "small.cfg",
            "--data",
            "junk.ifsg",
            "--out",
            "ck.ifsg",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
    assert!(!p.join("ck.ifsg").exists());
    let leftovers: Vec<_> = std::fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 2, "{leftovers:?}");
}

#[test]
fn gen_data_layout_and_seed_override() {
    let dir = setup();
    let p = dir.path();
    assert!(ifseg(
        p,
        &["gen-data", "--config", "small.cfg", "--count", "3", "--out", "a.ifsg"]
    )
    .status
    .success());
    assert!(ifseg(
        p,
        &[
            "gen-data",
            "--config",
            "small.cfg",
            "--count",
            "3",
            "--out",
            "b.ifsg",
            "--seed",
            "9"
        ]
    )
    .status
    .success());
    std::fs::write(p.join("seeded.cfg"), format!("{SMALL}seed = 9\n")).unwrap();
    assert!(ifseg(
        p,
        &["gen-data", "--config", "seeded.cfg", "--count", "3", "--out", "c.ifsg"]
    )
    .status
    .success());
    let a = TensorMap::read(p.join("a.ifsg")).unwrap();
    assert_eq!(a.require("tokens").unwrap().dims, vec![3, 16, 16]);
    assert_eq!(a.require("targets").unwrap().dims, vec![3, 16]);
    assert!(a.require("targets").unwrap().as_u32().unwrap().iter().all(|&t| t < 3));
    let b = std::fs::read(p.join("b.ifsg")).unwrap();
    assert_ne!(std::fs::read(p.join("a.ifsg")).unwrap(), b);
    assert_eq!(std::fs::read(p.join("c.ifsg")).unwrap(), b);
}

#[test]
fn train_infer_postprocess_eval() {
    let dir = setup();
    let p = dir.path();
    assert!(ifseg(
        p,
        &[
            "gen-data",
            "--config",
            "small.cfg",
            "--count",
            "4",
            "--out",
            "d.ifsg",
            "--mask-dir",
            "gt"
        ]
    )
    .status
    .success());
    let train = ifseg(
        p,
        &["train", "--config", "small.cfg", "--data", "d.ifsg", "--out", "ck.ifsg"],
    );
    assert!(train.status.success());
    let log = stdout(&train);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "{log}");
    assert!(lines[0].starts_with("step=3 loss=") && lines[0].contains(" tokens_per_s="));

    let infer = ifseg(
        p,
        &[
            "infer",
            "--config",
            "small.cfg",
            "--checkpoint",
            "ck.ifsg",
            "--input",
            "d.ifsg",
            "--index",
            "3",
            "--out",
            "pred",
            "--size",
            "8x12",
        ],
    );
    assert!(infer.status.success(), "{}", String::from_utf8_lossy(&infer.stderr));
    let probs = TensorMap::read(p.join("pred.ifsg")).unwrap();
    assert_eq!(probs.require("probs").unwrap().dims, vec![4, 4, 3]);
    assert_eq!(probs.require("features").unwrap().dims, vec![4, 4, 16]);
    assert_eq!(probs.require("size").unwrap().as_u32().unwrap(), &[8, 12]);
    let names = std::fs::read_to_string(p.join("pred.pgm.names.txt")).unwrap();
    assert_eq!(names.lines().count(), 3);
    assert!(names.starts_with("0 giraffe\n"));

    let stored = ifseg(
        p,
        &[
            "infer",
            "--config",
            "small.cfg",
            "--checkpoint",
            "ck.ifsg",
            "--input",
            "d.ifsg",
            "--tokens",
            "stored",
            "--out",
            "stored",
        ],
    );
    assert!(stored.status.success());
    let oob = ifseg(
        p,
        &[
            "infer",
            "--config",
            "small.cfg",
            "--checkpoint",
            "ck.ifsg",
            "--input",
            "d.ifsg",
            "--index",
            "4",
            "--out",
            "x",
        ],
    );
    assert_eq!(oob.status.code(), Some(2));

    let post = ifseg(
        p,
        &[
            "postprocess",
            "--probs",
            "pred.ifsg",
            "--out",
            "post.ifsg",
            "--k",
            "16",
            "--iterations",
            "1",
            "--mask",
            "post.pgm",
        ],
    );
    assert!(post.status.success(), "{}", String::from_utf8_lossy(&post.stderr));
    let smoothed = TensorMap::read(p.join("post.ifsg"))
        .unwrap()
        .require("probs")
        .unwrap()
        .to_array::<f32>()
        .unwrap();
    let first: Vec<f32> = smoothed.iter().take(3).copied().collect();
    for chunk in smoothed.as_slice().unwrap().chunks(3) {
        for (a, b) in chunk.iter().zip(&first) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let big_k = ifseg(
        p,
        &["postprocess", "--probs", "pred.ifsg", "--out", "x.ifsg", "--k", "17"],
    );
    assert_eq!(big_k.status.code(), Some(2));

    let same = ifseg(
        p,
        &[
            "eval",
            "--pred",
            "gt/sample_0.pgm",
            "--gt",
            "gt/sample_0.pgm",
            "--classes",
            "3",
        ],
    );
    assert!(stdout(&same).lines().any(|l| l == "miou=1.000000"), "{}", stdout(&same));
    let sized = ifseg(
        p,
        &[
            "eval",
            "--pred",
            "pred.pgm",
            "--gt",
            "gt/sample_3.pgm",
            "--classes",
            "3",
        ],
    );
    assert_eq!(sized.status.code(), Some(2));
    let paired = ifseg(
        p,
        &[
            "eval",
            "--pred",
            "gt/sample_0.pgm",
            "--gt",
            "gt/sample_0.pgm",
            "--gt",
            "gt/sample_1.pgm",
            "--classes",
            "3",
        ],
    );
    assert_eq!(paired.status.code(), Some(2));
}

#[test]
fn eval_report_with_unseen_split() {
    let dir = setup();
    let p = dir.path();
    let pgm = |name: &str, px: [u8; 4]| {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&px);
        std::fs::write(p.join(name), bytes).unwrap();
    };
    pgm("pred.pgm", [0, 0, 1, 1]);
    pgm("gt.pgm", [0, 1, 1, 1]);
    std::fs::write(p.join("unseen.txt"), "1\n").unwrap();
    let out = ifseg(
        p,
        &[
            "eval",
            "--pred",
            "pred.pgm",
            "--gt",
            "gt.pgm",
            "--classes",
            "2",
            "--unseen",
            "unseen.txt",
        ],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    for line in [
        "iou.0=0.500000",
        "iou.1=0.666667",
        "miou=0.583333",
        "accuracy=0.750000",
        "hiou=0.571429",
    ] {
        assert!(text.lines().any(|l| l == line), "{line} missing from\n{text}");
    }
    std::fs::write(p.join("bad_split.txt"), "7\n").unwrap();
    let out = ifseg(
        p,
        &[
            "eval",
            "--pred",
            "pred.pgm",
            "--gt",
            "gt.pgm",
            "--classes",
            "2",
            "--unseen",
            "bad_split.txt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}
