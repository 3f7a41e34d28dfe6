use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hgad_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE};

fn hgad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgad"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn hgad")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = hgad(args, cwd);
    assert!(
        out.status.success(),
        "hgad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &str = r#"{
  "model": {
    "window": 8, "epochs": 1, "batch_size": 32,
    "tcn": {"layers": 1, "kernel_sizes": [2, 3], "conv_channels": 4, "residual_channels": 4, "skip_channels": 4},
    "gcn_channels": 4, "mlp_hidden": [4]
  },
  "synth": {"length": 1500}
}"#;

/// Writes the small config, a synthetic CSV and a prepared bundle.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), SMALL).unwrap();
    ok(&["synth", "-c", "c.json", "--seed", "3", "--out", "d.csv"], d);
    ok(&["prepare", "-c", "c.json", "--input", "d.csv", "--label-column", "label", "--out", "b"], d);
    let p = d.to_path_buf();
    (dir, p)
}

fn train_detect(d: &Path, run: &str, extra: &[&str], detector: &str) -> PathBuf {
    let mut args = vec!["train", "-c", "c.json", "--bundle", "b", "--out", run];
    args.extend_from_slice(extra);
    ok(&args, d);
    ok(
        &[
            "detect", "-c", "c.json", "--bundle", "b", "--checkpoint", &format!("{run}/checkpoint.bin"),
            "--detector", detector, "--out", run, "--force",
        ],
        d,
    );
    d.join(run)
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "7", "--length", "2000", "--out", "a.csv"], d);
    ok(&["synth", "--seed", "7", "--length", "2000", "--out", "b.csv"], d);
    ok(&["synth", "--seed", "8", "--length", "2000", "--out", "c.csv"], d);
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 6);
    assert_eq!(header[5], "label");
    assert_eq!(text.lines().count(), 2001);
}

#[test]
fn synth_rejects_bad_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = hgad(&["synth", "--rate", "0.9", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn existing_outputs_need_force() {
    let (_g, d) = fixture();
    let out = hgad(&["prepare", "--input", "d.csv", "--label-column", "label", "--out", "b"], &d);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    ok(&["prepare", "--input", "d.csv", "--label-column", "label", "--out", "b", "--force"], &d);
    let out = hgad(&["synth", "--out", "d.csv"], &d);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn required_labels_missing_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("u.csv"), "a,b\n1,2\n3,4\n5,6\n").unwrap();
    let out = hgad(&["prepare", "--input", "u.csv", "--require-labels", "--out", "b"], d);
    assert!(!out.status.success());
    assert!(matches!(out.status.code(), Some(EXIT_CONFIG) | Some(EXIT_DATA)));
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"modle": {}}"#).unwrap();
    let out = hgad(&["synth", "-c", "bad.json", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn zero_epoch_training_saves_the_initialisation() {
    let (_g, d) = fixture();
    ok(&["train", "-c", "c.json", "--bundle", "b", "--epochs", "0", "--seed", "5", "--out", "r0"], &d);
    ok(&["train", "-c", "c.json", "--bundle", "b", "--epochs", "0", "--seed", "5", "--out", "r1"], &d);
    let a = std::fs::read(d.join("r0/checkpoint.bin")).unwrap();
    assert_eq!(a, std::fs::read(d.join("r1/checkpoint.bin")).unwrap());
    let ck = hgad_core::model::Checkpoint::load(d.join("r0/checkpoint.bin")).unwrap();
    assert_eq!(ck.model.epoch, 0);
    assert!(ck.model.loss_history.is_empty());
    let fresh = hgad_core::model::Model::new(ck.model.config.clone(), ck.model.feature_names.clone()).unwrap();
    assert_eq!(fresh.params, ck.model.params);
    assert!(d.join("r0/laplacian/laplacian_epoch0.csv").exists());
    let loss = std::fs::read_to_string(d.join("r0/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1);
}

#[test]
fn training_writes_logs_per_epoch() {
    let (_g, d) = fixture();
    ok(&["train", "-c", "c.json", "--bundle", "b", "--epochs", "2", "--out", "r"], &d);
    let loss = std::fs::read_to_string(d.join("r/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    for e in 0..=2 {
        assert!(d.join(format!("r/laplacian/laplacian_epoch{e}.csv")).exists());
    }
    let cfg: hgad_cli::RunConfig =
        serde_json::from_str(&std::fs::read_to_string(d.join("r/config.json")).unwrap()).unwrap();
    assert_eq!(cfg.model.epochs, 2);
    // refuses to clobber without --force
    let out = hgad(&["train", "-c", "c.json", "--bundle", "b", "--out", "r"], &d);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn ablation_and_structure_flags() {
    let (_g, d) = fixture();
    let r = train_detect(&d, "nogcn", &["--ablation", "no_gcn"], "gmm");
    let ck = hgad_core::model::Checkpoint::load(r.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.model.config.ablation, "no_gcn".parse().unwrap());
    let r = train_detect(&d, "gsl", &["--structure", "gsl"], "gmm");
    let ck = hgad_core::model::Checkpoint::load(r.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.model.config.structure, hgad_core::model::StructureMode::Gsl);
    let out = hgad(&["train", "-c", "c.json", "--bundle", "b", "--ablation", "no_such", "--out", "x"], &d);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = hgad(&["train", "-c", "c.json", "--bundle", "b", "--structure", "tree", "--out", "x"], &d);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn pca_and_gmm_reports_share_a_schema() {
    let (_g, d) = fixture();
    let g = train_detect(&d, "run", &[], "gmm");
    let gmm = std::fs::read_to_string(g.join("report.csv")).unwrap();
    ok(
        &["detect", "-c", "c.json", "--bundle", "b", "--checkpoint", "run/checkpoint.bin", "--detector", "pca", "--out", "pca"],
        &d,
    );
    let pca = std::fs::read_to_string(d.join("pca/report.csv")).unwrap();
    assert_eq!(gmm.lines().next(), pca.lines().next());
    assert_eq!(gmm.lines().count(), pca.lines().count());
    let times = |s: &str| s.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(times(&gmm), times(&pca));

    let keys = |p: PathBuf| {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    assert_eq!(keys(g.join("report.json")), keys(d.join("pca/report.json")));
}

#[test]
fn max_threshold_flags_nothing_on_validation() {
    let (_g, d) = fixture();
    train_detect(&d, "run", &[], "gmm");
    for det in ["gmm", "pca"] {
        let out = ok(
            &[
                "detect", "-c", "c.json", "--bundle", "b", "--checkpoint", "run/checkpoint.bin", "--detector", det,
                "--threshold", "max", "--out", det,
            ],
            &d,
        );
        let msg = String::from_utf8(out.stdout).unwrap();
        assert!(msg.contains("(0 validation flags)"), "{msg}");
    }
}

#[test]
fn divergent_training_exits_4_and_keeps_logs() {
    let (_g, d) = fixture();
    let out = hgad(&["train", "-c", "c.json", "--bundle", "b", "--lr", "1e12", "--epochs", "3", "--out", "r"], &d);
    assert_eq!(out.status.code(), Some(EXIT_DIVERGENCE), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("r/laplacian/laplacian_epoch0.csv").exists());
    assert!(!d.join("r/checkpoint.bin").exists());
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let (_g, d) = fixture();
    let out = hgad(&["detect", "-c", "c.json", "--bundle", "b", "--checkpoint", "nope.bin", "--out", "r"], &d);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(!d.join("r/report.csv").exists());
}

fn test_labels(d: &Path) -> (Vec<usize>, Vec<bool>) {
    let text = std::fs::read_to_string(d.join("b/test.csv")).unwrap();
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("b/bundle.json")).unwrap()).unwrap();
    let rows = b["rows"].as_array().unwrap();
    let start = (rows[0].as_u64().unwrap() + rows[1].as_u64().unwrap()) as usize;
    let labels: Vec<bool> = text.lines().skip(1).map(|l| l.ends_with(",1")).collect();
    ((start..start + labels.len()).collect(), labels)
}

fn write_report(path: &Path, times: &[usize], flags: &[bool]) {
    let mut s = String::from("timestep,score,threshold,flag,top_feature\n");
    for (t, f) in times.iter().zip(flags) {
        s.push_str(&format!("{t},{},0.5,{},\n", *f as u8 as f64, *f as u8));
    }
    std::fs::write(path, s).unwrap();
}

fn metrics(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn evaluate_perfect_and_empty_reports() {
    let (_g, d) = fixture();
    let (times, labels) = test_labels(&d);
    assert!(labels.iter().any(|&l| l));
    write_report(&d.join("perfect.csv"), &times, &labels);
    let m = metrics(&ok(&["evaluate", "--report", "perfect.csv", "--bundle", "b"], &d));
    assert_eq!(m["f1"], 1.0);
    assert_eq!(m["precision"], 1.0);
    assert_eq!(m["recall"], 1.0);
    assert_eq!(m["n_anomalies"], labels.iter().filter(|&&l| l).count());
    assert!(d.join("metrics.json").exists());

    write_report(&d.join("empty.csv"), &[], &[]);
    let m = metrics(&ok(&["evaluate", "--report", "empty.csv", "--bundle", "b", "--out", "e.json"], &d));
    assert_eq!((m["precision"].as_f64(), m["recall"].as_f64(), m["f1"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));
}

#[test]
fn evaluate_point_adjust_fills_segments() {
    let (_g, d) = fixture();
    let (times, labels) = test_labels(&d);
    // flag only the first step of every labelled segment
    let flags: Vec<bool> = (0..labels.len()).map(|i| labels[i] && (i == 0 || !labels[i - 1])).collect();
    write_report(&d.join("first.csv"), &times, &flags);
    let raw = metrics(&ok(&["evaluate", "--report", "first.csv", "--bundle", "b", "--out", "raw.json"], &d));
    assert!(raw["recall"].as_f64().unwrap() < 1.0);
    let adj = metrics(&ok(
        &["evaluate", "--report", "first.csv", "--bundle", "b", "--point-adjust", "--out", "adj.json"],
        &d,
    ));
    assert_eq!(adj["f1"], 1.0);
}

#[test]
fn evaluate_rejects_mismatched_reports() {
    let (_g, d) = fixture();
    let (times, labels) = test_labels(&d);
    write_report(&d.join("short.csv"), &times[..10], &labels[..10]);
    let out = hgad(&["evaluate", "--report", "short.csv", "--bundle", "b"], &d);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    let shifted: Vec<usize> = times.iter().map(|t| t + 1000).collect();
    write_report(&d.join("late.csv"), &shifted, &labels);
    let out = hgad(&["evaluate", "--report", "late.csv", "--bundle", "b"], &d);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
}
