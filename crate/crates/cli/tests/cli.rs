use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use beamcast::io::{self, RunConfig};
use beamcast::trainer::{Precision, TrainState};

fn beamcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamcast"))
        .args(args)
        .env("BEAMCAST_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = beamcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    let text = r#"{
        "scenario": {"nt_high": 16, "nt_low": 4, "n_users": 2, "seed": 3},
        "samples": 10,
        "train": {"epochs": 1, "precision": "f64", "seed": 3},
        "width_divisor": 16
    }"#;
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_splits_four_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["gen-data", "--samples", "250", "--ratio", "4:1", "--seed", "7", "--out", out]);
    let ds = io::load_dataset(&dir.path().join("dataset.bin")).unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (200, 50));
    assert_eq!(ds.seed, 7);
    assert!(!ds.is_labeled());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(beamcast(&["--bogus"]).status.code(), Some(2));
    assert_eq!(beamcast(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(beamcast(&["gen-data", "--ratio", "4-1"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"samples\": \"many\"}").unwrap();
    let out = beamcast(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[usage]"));
}

#[test]
fn truncated_dataset_exits_3_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = small_config(dir.path());
    ok(&["gen-data", "--config", &cfg, "--out", out]);
    let path = dir.path().join("dataset.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    let res = beamcast(&["label", "--config", &cfg, "--out", out]);
    assert_eq!(res.status.code(), Some(3));
    let stderr = String::from_utf8(res.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("beamcast: error[corrupt]:"), "{stderr}");
}

#[test]
fn zero_epoch_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg_path = small_config(dir.path());
    ok(&["gen-data", "--config", &cfg_path, "--out", out]);
    ok(&["label", "--config", &cfg_path, "--out", out]);
    ok(&["train", "--config", &cfg_path, "--out", out, "--epochs", "0"]);

    let cfg = RunConfig::load(Path::new(&cfg_path)).unwrap();
    let ck = io::load_checkpoint::<f64>(&dir.path().join("checkpoint.bin")).unwrap();
    let fresh = TrainState::<f64>::new(&cfg.gan_config(), &cfg.train).unwrap();
    assert_eq!(ck.state, fresh);
    assert_eq!(ck.state.epoch, 0);
}

#[test]
fn full_pipeline_is_deterministic() {
    let run = |dir: &Path| {
        let out = dir.to_str().unwrap();
        let cfg = small_config(dir);
        ok(&["gen-data", "--config", &cfg, "--out", out]);
        ok(&["label", "--config", &cfg, "--out", out]);
        ok(&["train", "--config", &cfg, "--out", out, "--precision", "f32"]);
        ok(&["eval", "--config", &cfg, "--out", out]);
        ok(&["predict", "--config", &cfg, "--out", out]);
        ["dataset.bin", "checkpoint.bin", "eval_report.json", "predictions.json", "nmse_vs_iter.csv"]
            .map(|f| fs::read(dir.join(f)).unwrap())
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));

    assert_eq!(io::checkpoint_precision(&a.path().join("checkpoint.bin")).unwrap(), Precision::F32);
    let csv = fs::read_to_string(a.path().join("se_vs_nlow.csv")).unwrap();
    assert!(csv.starts_with(
        "nt_low,nt_high,spacing_wavelengths,se_wmmse,se_generated,se_zero_padding,nmse_db\n"
    ));
    let trace = fs::read_to_string(a.path().join("train_trace.csv")).unwrap();
    assert!(trace.starts_with("step,epoch,gen_updated,disc_updated,l1,gp,d_real,d_fake,l2\n"));
}

#[test]
fn resume_continues_where_training_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = small_config(dir.path());
    ok(&["gen-data", "--config", &cfg, "--out", out]);
    ok(&["label", "--config", &cfg, "--out", out]);

    let straight = dir.path().join("straight");
    ok(&["train", "--config", &cfg, "--out", straight.to_str().unwrap(), "--data", &format!("{out}/dataset.bin"), "--epochs", "2"]);
    let first = dir.path().join("first");
    ok(&["train", "--config", &cfg, "--out", first.to_str().unwrap(), "--data", &format!("{out}/dataset.bin"), "--epochs", "1"]);
    let resumed = dir.path().join("resumed");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--out",
        resumed.to_str().unwrap(),
        "--data",
        &format!("{out}/dataset.bin"),
        "--epochs",
        "2",
        "--resume",
        first.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(straight.join("checkpoint.bin")).unwrap(),
        fs::read(resumed.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn bench_writes_runtime_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = small_config(dir.path());
    ok(&["bench", "--config", &cfg, "--out", out, "--nt-high", "16", "--nt-low", "4", "--samples", "2"]);
    let csv = fs::read_to_string(dir.path().join("runtime_vs_nt.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "nt_high,nt_low,n_samples,reps,full_wmmse_s,low_wmmse_s,forward_s,pipeline_s,ratio"
    );
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(&row[..4], &[16.0, 4.0, 2.0, 5.0]);
    assert!((row[8] - row[7] / row[4]).abs() < 1e-12 * row[8].abs().max(1.0));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let table = RunConfig::load(&root.join("paper_table1.json")).unwrap();
    let holo = RunConfig::load(&root.join("holographic.json")).unwrap();
    let s = &table.scenario;
    assert_eq!((s.nt_high, s.nt_low, s.n_users, s.n_paths), (32, 8, 4, 5));
    assert_eq!((s.carrier_hz, s.bandwidth_hz, s.snr_db, s.cee_db), (60e9, 50e6, 10.0, Some(-20.0)));
    assert_eq!(s.spacing_wavelengths, 0.5);
    assert_eq!(holo.scenario.spacing_wavelengths, 0.1);
    assert_eq!((table.samples, table.split, table.train.epochs), (250, [4, 1], 50));
}
