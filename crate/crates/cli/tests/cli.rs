use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn memvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memvae")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "\
mode = few_shot
enc_hidden = 8
dec_hidden = 8
prior_hidden = 4
embed_hidden = 8
embed_dim = 4
z_dim = 2
synth_classes = 12
synth_test_classes = 10
eval_k = 4
log_every = 5
";

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

#[test]
fn help_succeeds_and_bad_arguments_fail() {
    assert!(memvae(&["--help"]).status.success());
    assert!(memvae(&["train", "--help"]).status.success());
    assert_eq!(memvae(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(memvae(&["train", "--steps", "many"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = memvae(&["train", "--config", "/nonexistent.cfg", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let r = memvae(&["eval", "--checkpoint", "/nonexistent.ckpt", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent.ckpt"));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "k = 1\n").unwrap();
    assert_eq!(memvae(&["train", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn train_is_reproducible_and_feeds_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = memvae(&["train", "--config", s(&cfg), "--steps", "20", "--out", s(out)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
    assert!(a.join("config.txt").is_file());

    let ckpt = a.join("model.ckpt");
    let common = ["--config", s(&cfg), "--checkpoint", s(&ckpt)];
    let runs: [(&[&str], &str); 5] = [
        (&["eval", "--episodes", "2"], "eval.txt"),
        (&["sweep", "--classes", "1,2", "--per-class", "1", "--targets-per-class", "2"], "sweep.csv"),
        (&["sample", "--rows", "3", "--cols", "2"], "samples.pgm"),
        (&["inspect", "--top", "3"], "histogram.csv"),
        (&["classify", "--way", "3", "--episodes", "4"], "classify.txt"),
    ];
    for (args, file) in runs {
        let out = dir.path().join(file);
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(&common);
        all.extend_from_slice(&["--out", s(&out)]);
        let r = memvae(&all);
        assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        assert!(out.join(file).is_file(), "{args:?} wrote no {file}");
    }
    let sweep = fs::read_to_string(dir.path().join("sweep.csv/sweep.csv")).unwrap();
    assert!(sweep.starts_with("C,N,nll,stderr,kl_a,kl_z,ref_logC"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn diverging_training_exits_with_the_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "lr = 1e300\n");
    let out = dir.path().join("run");
    let r = memvae(&["train", "--config", s(&cfg), "--steps", "50", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    let dump = fs::read_to_string(out.join("nonfinite.txt")).unwrap();
    assert!(dump.contains("batch_indices = ["));
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn gradcheck_reports_every_model() {
    let dir = tempfile::tempdir().unwrap();
    let r = memvae(&["gradcheck", "--seed", "3", "--out", s(dir.path())]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    for name in ["hard:", "vae:", "soft:"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with(" ok")), "{name}\n{text}");
    }
}
