use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn segcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segcnn")).args(args).output().expect("spawn segcnn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) {
    let out = segcnn(&["gen-data", "--shape", "8,8,8", "--n-train", "6", "--n-val", "2", "--n-test", "2", "--seed", "3", "--out", p(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn count_params_prints_exact_counts() {
    let out = segcnn(&["count-params", "--arch", "baseline"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["conv_weights"], 219672);
    assert_eq!(v["fc_weights"], 590080);
    assert_eq!(v["flatten_size"], 2304);

    let out = segcnn(&["count-params", "--arch", "proposed"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["conv_weights"], 233280);
    assert_eq!(v["fc_weights"], 16640);
    assert_eq!(v["flatten_size"], 64);
}

#[test]
fn count_params_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = segcnn(&["count-params", "--hidden", "9216", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(dir.path().join("params.csv")).unwrap();
    assert!(csv.starts_with("spec,conv_weights,fc_weights,biases,batchnorm,total\n"));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("params.json")).unwrap()).unwrap();
    assert_eq!(v["fc_weights"], 599040);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&segcnn(&[])), 1);
    assert_eq!(code(&segcnn(&["train", "--nonsense"])), 1);
    assert_eq!(code(&segcnn(&["count-params", "--threads", "0"])), 1);
    assert_eq!(code(&segcnn(&["count-params", "--k", "0"])), 1);
    assert_eq!(code(&segcnn(&["count-params", "--arch", "wide"])), 1);
    assert_eq!(code(&segcnn(&["count-params", "--shape", "4,4"])), 1);
    assert_eq!(code(&segcnn(&["preprocess", "--strategy", "median", "a.bvol", "b.bvol"])), 1);
    assert_eq!(code(&segcnn(&["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&segcnn(&["train", "--data", p(&missing), "--out", p(dir.path())])), 2);

    let bad = dir.path().join("bad.bvol");
    fs::write(&bad, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let out = segcnn(&["segment", "--k", "2", p(&bad), p(&dir.path().join("seg.bvol"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn gen_data_then_preprocess_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = segcnn(&["gen-data", "--shape", "9,9,6", "--n-train", "3", "--n-val", "1", "--n-test", "1", "--out", p(&data)]);
    assert_eq!(code(&out), 0);
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    assert_eq!(manifest.lines().next(), Some("path,label,split"));

    let small = dir.path().join("small");
    let out = segcnn(&["preprocess", "--strategy", "max", "--factor", "3", p(&data), p(&small)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let vol = segcnn::data::read_volume::<f32>(&small.join("volumes/subject_0000.bvol")).unwrap();
    assert_eq!(vol.shape(), &[3, 3, 2]);
    assert!(small.join("preprocess.json").exists());
    assert!(small.join("preprocess.csv").exists());
}

#[test]
fn segment_writes_volume_and_plan() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let seg = dir.path().join("seg.bvol");
    let out = segcnn(&["segment", "--k", "2", p(&dir.path().join("volumes/subject_0000.bvol")), p(&seg)]);
    assert_eq!(code(&out), 0);
    let vol = segcnn::data::read_volume::<f32>(&seg).unwrap();
    assert_eq!(vol.shape(), &[7, 7, 7, 8]);
    let plan = fs::read_to_string(dir.path().join("seg.csv")).unwrap();
    assert_eq!(plan.lines().count(), 9);
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("seg.json")).unwrap()).unwrap();
    assert_eq!(v["plan"]["k"], 2);
}

#[test]
fn bench_conv_single_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = segcnn(&["bench-conv", "--ks", "1", "--reps", "1", "--base", "12", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "k,m,kdim,n,reps,threads,total_ms,mean_ms,std_ms");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,8,27,6912,1,1,"));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert!(v["verdict"].is_null());
}

#[test]
fn train_eval_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = segcnn(&[
            "train", "--data", p(&data), "--filters", "4,4,4,4", "--hidden", "8", "--epochs", "3", "--seeds", "2",
            "--batch-size", "2", "--save-weights", "--seed", "11", "--out", p(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = run("a");
    let b = run("b");

    let csv = fs::read_to_string(a.join("train.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows[0], "spec,k,seed,val_mse,test_mse,test_mae,minutes,best_epoch");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("4-4-4-4/k2/h8,2,11,"));
    assert!(rows[2].starts_with("4-4-4-4/k2/h8,2,12,"));

    // Everything except the wall-clock column matches.
    let strip = |s: String| s.lines().map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 6).map(|(_, f)| f.to_owned()).collect::<Vec<_>>()).collect::<Vec<_>>();
    assert_eq!(strip(csv.clone()), strip(fs::read_to_string(b.join("train.csv")).unwrap()));
    for seed in [11, 12] {
        let name = format!("weights_seed{seed}.rcnw");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("train.json")).unwrap()).unwrap();
    let test_mse = summary["summary"]["test_mse"]["mean"].as_f64().unwrap();

    let e = dir.path().join("eval");
    let out = segcnn(&[
        "eval", "--data", p(&data), "--filters", "4,4,4,4", "--hidden", "8", "--weights", p(&a.join("weights_seed11.rcnw")),
        "--out", p(&e),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(e.join("eval.json")).unwrap()).unwrap();
    let first = rows[1].split(',').nth(4).unwrap().parse::<f64>().unwrap();
    assert!((v["mse"].as_f64().unwrap() - first).abs() < 1e-5);
    assert!(test_mse.is_finite());

    // Weights for another layout are rejected as a format error.
    let out = segcnn(&[
        "eval", "--data", p(&data), "--filters", "4,4,4,8", "--hidden", "8", "--weights", p(&a.join("weights_seed11.rcnw")),
        "--out", p(&e),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sweeps_write_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let common = ["--data", p(&data), "--filters", "2,2,2,2", "--hidden", "4", "--epochs", "2", "--seeds", "1", "--batch-size", "3"];

    let out_k = dir.path().join("k");
    let mut args = vec!["sweep-k", "--ks", "1,2", "--out", p(&out_k)];
    args.extend(common);
    let out = segcnn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(out_k.join("sweep_k.csv")).unwrap().lines().count(), 3);
    let v: Value = serde_json::from_str(&fs::read_to_string(out_k.join("sweep_k.json")).unwrap()).unwrap();
    assert!([1, 2].contains(&v["selected_k"].as_u64().unwrap()));
    assert!(out_k.join("sweep_k_summary.csv").exists());

    let out_h = dir.path().join("h");
    let mut args = vec!["sweep-hidden", "--grid", "4,6", "--out", p(&out_h)];
    args.extend(common);
    assert_eq!(code(&segcnn(&args)), 0);
    let summary = fs::read_to_string(out_h.join("sweep_hidden_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(1).unwrap().starts_with("4,"));

    let out_s = dir.path().join("s");
    let mut args = vec!["sweep-size", "--sizes", "3,full", "--compare", "baseline", "--out", p(&out_s)];
    args.extend(common);
    let out = segcnn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(out_s.join("sweep_size.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(out_s.join("sweep_size.csv")).unwrap().lines().count(), 5);

    let mut args = vec!["sweep-size", "--sizes", "3,lots", "--out", p(&out_s)];
    args.extend(common);
    assert_eq!(code(&segcnn(&args)), 1);
}
