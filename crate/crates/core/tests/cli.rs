use std::path::Path;
use std::process::{Command, Output};

use shockcal::calibnet::{AblationFlags, CalibArch, CalibModel};
use shockcal::formats::{CheckpointFile, DatasetFile};
use shockcal::signal::{ShockSignal, SignalPair, SAMPLE_RATE, SIGNAL_LEN};

fn shockcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shockcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", p(dir)];
    args.extend_from_slice(extra);
    shockcal(&args)
}

#[test]
fn synth_defaults_split_500_160() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), &[]);
    assert!(out.status.success());
    assert_eq!(DatasetFile::load(dir.path().join("train.shkd")).unwrap().pairs.len(), 500);
    assert_eq!(DatasetFile::load(dir.path().join("test.shkd")).unwrap().pairs.len(), 160);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin_low_g,bin_high_g,train,test");
    assert_eq!(lines.len(), 11);
    let total: usize = lines[1..]
        .iter()
        .map(|l| l.split(',').skip(2).map(|c| c.parse::<usize>().unwrap()).sum::<usize>())
        .sum();
    assert_eq!(total, 660);
}

#[test]
fn synth_same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(synth(d.path(), &["--pairs", "20", "--train", "15", "--seed", "7"]).status.success());
    }
    for f in ["train.shkd", "test.shkd"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn synth_rejects_train_above_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), &["--pairs", "10", "--train", "12"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_io_error() {
    let out = shockcal(&["eval", "--data", "/nonexistent/test.shkd", "--method", "raw"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_toy_file_and_ablation_header() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path(), &["--pairs", "6", "--train", "4", "--seed", "2"]).status.success());
    let data = dir.path().join("train.shkd");
    let model = dir.path().join("m.shkm");
    let out = shockcal(&["train", "--data", p(&data), "--out", p(&model), "--epochs", "1", "--ablate", "no-z"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let CheckpointFile::Calibnet(m) = CheckpointFile::load(&model).unwrap() else {
        panic!("expected a network checkpoint")
    };
    assert!(!m.flags.ppn_uses_z);
    assert!(m.flags.use_linf_term && m.flags.ppn_residual);
    let trace = std::fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0], "epoch,mean_shape_loss,mean_peak_loss");
    assert_eq!(rows.len(), 2);
    for v in rows[1].split(',') {
        assert!(v.parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn training_lowers_shape_loss() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path(), &["--pairs", "40", "--train", "32", "--seed", "4"]).status.success());
    let model = dir.path().join("m.shkm");
    let out = shockcal(&[
        "train",
        "--data",
        p(&dir.path().join("train.shkd")),
        "--out",
        p(&model),
        "--epochs",
        "6",
        "--batch",
        "8",
    ]);
    assert!(out.status.success());
    let trace = std::fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    let shape: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(shape.last().unwrap() < &shape[0], "{shape:?}");
}

#[test]
fn eval_identity_dataset_and_missing_model() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path(), &["--pairs", "12", "--train", "8", "--identity-sensor"]).status.success());
    let test = dir.path().join("test.shkd");
    let report = dir.path().join("r.csv");
    let out = shockcal(&["eval", "--data", p(&test), "--method", "raw", "--report", p(&report)]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(&report).unwrap(),
        "method,eps_p_percent,eps_s,n\nraw,0.000000,0.000000,4\n"
    );
    let out = shockcal(&["eval", "--data", p(&test), "--method", "net"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("net"));
}

#[test]
fn eval_five_methods_table() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path(), &["--pairs", "30", "--train", "24"]).status.success());
    let model = dir.path().join("m.shkm");
    let train = dir.path().join("train.shkd");
    assert!(shockcal(&["train", "--data", p(&train), "--out", p(&model), "--epochs", "1"]).status.success());
    let out = shockcal(&[
        "eval",
        "--data",
        p(&dir.path().join("test.shkd")),
        "--model",
        p(&model),
        "--train-data",
        p(&train),
        "--method",
        "raw",
        "--method",
        "lpf",
        "--method",
        "lr",
        "--method",
        "ae",
        "--method",
        "net",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["raw", "lpf", "lr", "ae", "net"]);
}

#[test]
fn srs_csv_rows_and_zero_signal() {
    let dir = tempfile::tempdir().unwrap();
    let zero = ShockSignal::new(vec![0.0; SIGNAL_LEN], SAMPLE_RATE);
    let data = DatasetFile::new(vec![SignalPair::new(zero.clone(), zero, 0).unwrap()]).unwrap();
    let data_path = dir.path().join("z.shkd");
    data.save(&data_path).unwrap();
    let model_path = dir.path().join("m.shkm");
    CheckpointFile::Calibnet(CalibModel::new(CalibArch::default(), AblationFlags::default(), 1).unwrap())
        .save(&model_path)
        .unwrap();
    let csv_path = dir.path().join("srs.csv");
    let svg_path = dir.path().join("srs.svg");
    let out = shockcal(&[
        "srs",
        "--data",
        p(&data_path),
        "--model",
        p(&model_path),
        "--index",
        "0",
        "--out",
        p(&csv_path),
        "--svg",
        p(&svg_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "freq_hz,srs_low,srs_high,srs_calibrated");
    assert_eq!(lines.len(), 42);
    for l in &lines[1..] {
        assert!(l.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0));
    }
    assert!(std::fs::read_to_string(&svg_path).unwrap().starts_with("<svg"));

    let out = shockcal(&[
        "srs",
        "--data",
        p(&data_path),
        "--model",
        p(&model_path),
        "--index",
        "5",
        "--out",
        p(&csv_path),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let a = shockcal(&["gradcheck", "--dims", "30,8,4", "--seed", "1", "--points", "3"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stdout));
    let b = shockcal(&["gradcheck", "--dims", "30,8,4", "--seed", "1", "--points", "3"]);
    assert_eq!(a.stdout, b.stdout);
    let bad = shockcal(&["gradcheck", "--points", "1", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(4));
    let malformed = shockcal(&["gradcheck", "--dims", "30,8"]);
    assert_eq!(malformed.status.code(), Some(2));
}

#[test]
fn gradcheck_defaults_pass() {
    assert!(shockcal(&["gradcheck"]).status.success());
}
