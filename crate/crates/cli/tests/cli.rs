use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cst-seld")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", p(out)];
    args.extend_from_slice(extra);
    bin(&args)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

const SMALL: &str = "[model]\nvariant = \"dst\"\nuse_cmt = false\nconv_filters = 16\nheads = 2\nfc_hidden = 16\n\n[train]\nepochs = 1\nbatch_size = 4\nval_fraction = 0.0\n";

#[test]
fn synth_writes_pairs_and_manifest_reproducibly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = synth(d.path(), &["--clips", "8", "--seed", "1", "--duration", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let files = dir_bytes(a.path());
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".wav")).count(), 8);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".csv")).count(), 8);
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(files, dir_bytes(b.path()));
}

#[test]
fn mono_oracle_predictions_score_zero() {
    let d = tempfile::tempdir().unwrap();
    assert!(synth(d.path(), &["--clips", "3", "--overlap", "mono", "--seed", "2", "--duration", "3"]).status.success());
    for i in 0..3 {
        let csv = d.path().join(format!("clip_{i:04}.csv"));
        let o = bin(&["evaluate", "--pred", p(&csv), "--ref", p(&csv)]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("SELD_score 0\n"), "{}", stdout(&o));
    }
}

#[test]
fn evaluate_cases() {
    let d = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let path = d.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    };
    let reference = write("ref.csv", "0,0,0,0,0\n0,1,0,0,0\n");
    let empty = write("empty.csv", "");
    let golden = write("pred.csv", "0,0,0,10,0\n0,1,0,25,0\n0,2,0,90,0\n");

    let json = d.path().join("report.json");
    let o = bin(&["evaluate", "--pred", p(&empty), "--ref", p(&reference), "--out", p(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(&json).unwrap();
    assert!(report.contains("\"er\": 1.0") && report.contains("\"lr\": 0.0"), "{report}");

    let o = bin(&["evaluate", "--pred", p(&golden), "--ref", p(&reference)]);
    let out = stdout(&o);
    let score: f64 = out.lines().find_map(|l| l.strip_prefix("SELD_score ")).unwrap().parse().unwrap();
    assert!((score - (1.0 + 2.0 / 3.0 + 17.5 / 180.0) / 4.0).abs() < 1e-9, "{out}");
    assert!(out.contains("ER 1.0000  F 0.3333  LE 17.50  LR 1.0000"));

    let bad = write("bad.csv", "0,99,0,0,0\n");
    let o = bin(&["evaluate", "--pred", p(&bad), "--ref", p(&reference)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.csv"));
}

#[test]
fn train_infer_round_trip_and_truncated_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    assert!(synth(data.path(), &["--clips", "8", "--seed", "3", "--duration", "2"]).status.success());
    let run = tempfile::tempdir().unwrap();
    let cfg = run.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = run.path().join("run");
    let o = bin(&["train", "--config", p(&cfg), "--data", p(data.path()), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("model parameters: "));
    for f in ["config.toml", "log.txt", "metrics.csv", "checkpoints/best.ckpt", "checkpoints/last.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let ckpt = out.join("checkpoints/last.ckpt");
    let wav = data.path().join("clip_0000.wav");
    let pred = run.path().join("pred.csv");
    let o = bin(&["infer", "--checkpoint", p(&ckpt), "--wav", p(&wav), "--out", p(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin(&["evaluate", "--pred", p(&pred), "--ref", p(&data.path().join("clip_0000.csv"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    let bytes = std::fs::read(&ckpt).unwrap();
    let cut = run.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = bin(&["infer", "--checkpoint", p(&cut), "--wav", p(&wav), "--out", p(&pred)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn missing_data_directory_is_a_user_error() {
    let out = tempfile::tempdir().unwrap();
    let o = bin(&["train", "--data", "/nonexistent/clips", "--out", p(&out.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/clips") && stderr(&o).contains("does not exist"));
}

fn param_line(variant: &str, data: &Path, out: &Path) -> usize {
    let o = bin(&["train", "--data", p(data), "--out", p(out), "--variant", variant, "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().next().unwrap().to_string();
    line.strip_prefix("model parameters: ").unwrap().parse().unwrap()
}

#[test]
fn variant_flag_changes_the_parameter_count_by_the_channel_attention_ledger() {
    let data = tempfile::tempdir().unwrap();
    assert!(synth(data.path(), &["--clips", "1", "--seed", "4"]).status.success());
    let out = tempfile::tempdir().unwrap();
    let ule = param_line("ule", data.path(), &out.path().join("ule"));
    let dst = param_line("dst", data.path(), &out.path().join("dst"));
    // two blocks, each with layer norm (2·40) and four 40×40 projections with bias
    assert_eq!(ule - dst, 2 * (2 * 40 + 4 * (40 * 40 + 40)));
    assert_eq!(ule, 379_861);
}

#[test]
fn selftest_passes_and_detects_injected_gradient_faults() {
    let o = bin(&["selftest"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let checks: Vec<&str> = out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(checks.len() >= 10);
    assert!(checks.iter().all(|l| l.starts_with("PASS") && l.contains("tolerance")));
    assert!(out.contains("gradient") && out.contains("fold/unfold") && out.contains("softmax") && out.contains("metric matcher"));

    let o = bin(&["selftest", "--perturb-grad", "1e-3"]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    for l in out.lines().filter(|l| l.contains("gradient")) {
        assert!(l.starts_with("FAIL"), "{l}");
    }
    assert!(out.lines().filter(|l| !l.contains("gradient") && l.contains("tolerance")).all(|l| l.starts_with("PASS")));
}

#[test]
fn bad_flags_exit_with_user_error() {
    assert_eq!(bin(&["synth"]).status.code(), Some(1));
    assert_eq!(bin(&["train", "--data", "x", "--out", "y", "--variant", "xyz"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}
