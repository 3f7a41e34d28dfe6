use std::io::Write;
use std::path::{Path, PathBuf};

use hgad_core::dataio::{clean, load_csv, minmax_apply, minmax_fit, split, synth_generate, write_csv, Windows};
use hgad_core::detectors::{compute_errors, AnomalyReport, Detector, FittedDetector};
use hgad_core::eval::{confusion, metrics, point_adjust, MetricsReport};
use hgad_core::hypergraph::snapshot_laplacian;
use hgad_core::model::{train, Checkpoint, Model, StructureMode};
use hgad_core::{Error, Result};

use crate::bundle::Bundle;
use crate::config::{parse_threshold, RunConfig};
use crate::{Command, Common};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const LAPLACIAN_DIR: &str = "laplacian";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "report.json";
pub const DETECTOR_FILE: &str = "detector.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if force || !path.exists() {
        return Ok(());
    }
    let non_empty_dir = path.is_dir()
        && std::fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .next()
            .is_some();
    if path.is_file() || non_empty_dir {
        return Err(config_err(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| config_err(format!("no {what} given (flag or config paths)")))
}

/// Explicit `--out`, else `<runs_dir>/<timestamp>-seed<seed>`.
fn run_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.paths.out.clone()).unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        cfg.paths
            .runs_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(format!("{stamp}-seed{}", cfg.seed()))
    })
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare {
            common,
            input,
            label_column,
            require_labels,
            timestamp_column,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(l) = label_column {
                cfg.schema.label_column = Some(l);
            }
            cfg.schema.require_labels |= require_labels;
            if timestamp_column.is_some() {
                cfg.schema.timestamp_column = timestamp_column;
            }
            cfg.validate()?;
            let input = required(input, &cfg.paths.input, "input CSV")?;
            let out = required(common.out, &cfg.paths.bundle, "bundle directory (--out)")?;
            prepare(&cfg, &input, &out, common.force)
        }
        Command::Synth { common, length, rate } => {
            let mut cfg = load_config(&common)?;
            if let Some(l) = length {
                cfg.synth.length = l;
            }
            if let Some(r) = rate {
                cfg.synth.anomaly_rate = r;
            }
            cfg.validate()?;
            let out = required(common.out, &cfg.paths.input, "output CSV (--out)")?;
            synth(&cfg, &out, common.force)
        }
        Command::Train {
            common,
            bundle,
            epochs,
            lr,
            ablation,
            structure,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.model.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.model.lr = lr;
            }
            if let Some(a) = ablation {
                cfg.model.ablation = a.parse()?;
            }
            if let Some(s) = structure {
                cfg.model.structure = match s.as_str() {
                    "mtcl" => StructureMode::Mtcl,
                    "gsl" => StructureMode::Gsl,
                    _ => return Err(config_err(format!("unknown structure {s:?}; use mtcl or gsl"))),
                };
            }
            cfg.validate()?;
            let bundle = required(bundle, &cfg.paths.bundle, "bundle directory (--bundle)")?;
            let dir = run_dir(&cfg, common.out);
            cmd_train(&cfg, &bundle, &dir, common.force).map(|_| ())
        }
        Command::Detect {
            common,
            bundle,
            checkpoint,
            detector,
            threshold,
            sliding_window,
            threads,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = detector {
                cfg.detector.kind = d.parse()?;
            }
            if let Some(t) = threshold {
                cfg.detector.threshold = parse_threshold(&t)?;
            }
            if sliding_window.is_some() {
                cfg.detector.sliding_window = sliding_window;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            cfg.validate()?;
            let bundle = required(bundle, &cfg.paths.bundle, "bundle directory (--bundle)")?;
            let ckpt = required(checkpoint, &cfg.paths.checkpoint, "checkpoint (--checkpoint)")?;
            let dir = common
                .out
                .or_else(|| cfg.paths.out.clone())
                .or_else(|| ckpt.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            cmd_detect(&cfg, &bundle, &ckpt, &dir, common.force).map(|_| ())
        }
        Command::Evaluate {
            common,
            report,
            bundle,
            point_adjust,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.point_adjust |= point_adjust;
            cfg.validate()?;
            let report = required(report, &cfg.paths.report, "report CSV (--report)")?;
            let bundle = required(bundle, &cfg.paths.bundle, "bundle directory (--bundle)")?;
            let out = common.out.unwrap_or_else(|| {
                report
                    .parent()
                    .map(|p| p.join(METRICS_FILE))
                    .unwrap_or_else(|| PathBuf::from(METRICS_FILE))
            });
            let m = cmd_evaluate(&cfg, &report, &bundle, &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
    }
}

pub fn prepare(cfg: &RunConfig, input: &Path, out: &Path, force: bool) -> Result<()> {
    refuse_existing(out, force)?;
    let ds = clean(&load_csv(input, &cfg.schema)?);
    let (train, val, test) = split(&ds, cfg.split, cfg.model.window, cfg.model.horizon)?;
    let norm = minmax_fit(&train);
    let parts = [
        minmax_apply(&train, &norm)?,
        minmax_apply(&val, &norm)?,
        minmax_apply(&test, &norm)?,
    ];
    let m = Bundle::write(out, [&parts[0], &parts[1], &parts[2]], &norm, Some(input.display().to_string()))?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    println!(
        "prepared {} features: train {}, val {}, test {} rows -> {}",
        m.feature_names.len(),
        m.rows[0],
        m.rows[1],
        m.rows[2],
        out.display()
    );
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    refuse_existing(out, force)?;
    let ds = synth_generate(&cfg.synth, cfg.seed.unwrap_or(0))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_csv(&ds, out)?;
    let n_anom = ds.labels().map_or(0, |l| l.iter().filter(|&&x| x).count());
    println!("wrote {} rows, {} anomalous -> {}", ds.len(), n_anom, out.display());
    Ok(())
}

fn write_loss(path: &Path, rows: &[(usize, f64, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut text = String::from("epoch,loss,mask_stage\n");
    for (e, l, s) in rows {
        text.push_str(&format!("{e},{l},{s}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Trains into `dir` and returns the checkpoint path.
pub fn cmd_train(cfg: &RunConfig, bundle: &Path, dir: &Path, force: bool) -> Result<PathBuf> {
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    refuse_existing(&ckpt_path, force)?;
    let b = Bundle::load(bundle)?;
    let mut model = Model::new(cfg.model.clone(), b.manifest.feature_names.clone())?;
    let n = b.n_features();
    let windows = Windows::new(b.train.values(), n, cfg.model.window, cfg.model.horizon, 0)?;

    create_dir(dir)?;
    let lap_dir = dir.join(LAPLACIAN_DIR);
    create_dir(&lap_dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let names = b.manifest.feature_names.clone();
    snapshot_laplacian(&model.laplacian()?, &names, &lap_dir, 0)?;

    let loss_path = dir.join(LOSS_FILE);
    let mut rows: Vec<(usize, f64, String)> = Vec::new();
    write_loss(&loss_path, &rows)?;
    let result = train(&mut model, &windows, |m, r| {
        rows.push((r.epoch + 1, r.loss, format!("{:?}", r.stage).to_lowercase()));
        write_loss(&loss_path, &rows)?;
        snapshot_laplacian(&m.laplacian()?, &names, &lap_dir, r.epoch + 1)?;
        eprintln!("epoch {} loss {:.6}", r.epoch + 1, r.loss);
        Ok(())
    });
    if let Err(e) = result {
        eprintln!("training stopped; partial logs kept in {}", dir.display());
        return Err(e);
    }
    Checkpoint {
        model,
        normalization: Some(b.normalization.clone()),
    }
    .save(&ckpt_path)?;
    println!("checkpoint -> {}", ckpt_path.display());
    Ok(ckpt_path)
}

/// Fits the detector on validation errors, writes the test report into
/// `dir` and returns it.
pub fn cmd_detect(cfg: &RunConfig, bundle: &Path, ckpt: &Path, dir: &Path, force: bool) -> Result<AnomalyReport> {
    let report_path = dir.join(REPORT_FILE);
    refuse_existing(&report_path, force)?;
    if !ckpt.is_file() {
        return Err(Error::Data(format!("checkpoint {} not found", ckpt.display())));
    }
    let ck = Checkpoint::load(ckpt)?;
    let b = Bundle::load(bundle)?;
    let model = &ck.model;
    if model.feature_names != b.manifest.feature_names {
        return Err(Error::Data(format!(
            "checkpoint features {:?} do not match bundle features {:?}",
            model.feature_names, b.manifest.feature_names
        )));
    }
    let n = b.n_features();
    let (k, h) = (model.config.window, model.config.horizon);
    let values = b.values();
    let (val_start, test_start) = b.offsets();
    let wv = Windows::new(&values[..test_start * n], n, k, h, val_start)?;
    let wt = Windows::new(&values, n, k, h, test_start)?;
    let pv = model.predict(&wv, cfg.threads)?;
    let pt = model.predict(&wt, cfg.threads)?;
    let ev = compute_errors(&pv)?;
    let et = compute_errors(&pt)?;

    let labels = b.labels();
    let val_labels: Option<Vec<bool>> = labels
        .as_ref()
        .map(|l| pv.target_indices.iter().map(|&t| l[t]).collect());
    let det = FittedDetector::fit(&ev, &cfg.detector, val_labels.as_deref())?;
    if let Detector::Pca(p) = &det.detector {
        if p.components == p.n_features {
            eprintln!(
                "warning: PCA kept all {} components at variance target {}; every score is 0",
                p.components, cfg.detector.variance_target
            );
        }
    }
    let val_flags = det.detect(&ev)?.n_flagged();
    let report = det.detect(&et)?;

    create_dir(dir)?;
    report.write_csv(&report_path, &b.manifest.feature_names)?;
    report.write_summary(dir.join(SUMMARY_FILE), det.kind().name())?;
    write_json(&dir.join(DETECTOR_FILE), &det)?;
    println!(
        "{} detector: threshold {:.6}, {} of {} test steps flagged ({} validation flags) -> {}",
        det.kind().name(),
        report.threshold,
        report.n_flagged(),
        report.scores.len(),
        val_flags,
        report_path.display()
    );
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig, report: &Path, bundle: &Path, out: &Path) -> Result<MetricsReport> {
    let b = Bundle::load(bundle)?;
    let labels = b
        .labels()
        .ok_or_else(|| Error::Data(format!("bundle {} has no labels", bundle.display())))?;
    let r = AnomalyReport::read_csv(report, &b.manifest.feature_names)?;
    let test_rows = b.manifest.rows[2];
    if !r.scores.is_empty() && r.scores.len() != test_rows {
        return Err(Error::Data(format!(
            "report has {} rows, test split has {test_rows}",
            r.scores.len()
        )));
    }
    let truth = r
        .timesteps
        .iter()
        .map(|&t| {
            labels
                .get(t)
                .copied()
                .ok_or_else(|| Error::Data(format!("report timestep {t} is beyond the labelled series")))
        })
        .collect::<Result<Vec<bool>>>()?;
    let flags = if cfg.point_adjust {
        point_adjust(&r.flags, &truth)?
    } else {
        r.flags.clone()
    };
    let m = metrics(&confusion(&flags, &truth)?);
    let out_report = MetricsReport {
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        threshold: if r.threshold.is_finite() { r.threshold } else { 0.0 },
        n_anomalies: flags.iter().filter(|&&f| f).count(),
    };
    write_json(out, &out_report)?;
    Ok(out_report)
}
