use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use serde_json::Value;
use umyops::datapipe::{write_slice, MultiSeqSlice, Provenance, Sequence, SliceRecord};
use umyops::{Class, LabelMask};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umyops"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("UMYOPS_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(out: &Path, seed: &str, misalign: &str) {
    ok(&["phantom", "--count", "4", "--seed", seed, "--misalign", misalign, "--size", "32", "--jobs", "2", "--out", s(out)]);
}

#[test]
fn phantom_sets_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, z) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("z"));
    phantoms(&a, "7", "8");
    phantoms(&b, "7", "8");
    phantoms(&z, "7", "0");
    let (ma, mb, mz) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")), json(&z.join("manifest.json")));
    let shas = |m: &Value| m["details"]["samples"].as_array().unwrap().iter().map(|e| e["sha256"].clone()).collect::<Vec<_>>();
    assert_eq!(shas(&ma).len(), 4);
    assert_eq!(shas(&ma), shas(&mb));
    assert_eq!(ma["command"], "phantom");
    for e in mz["details"]["samples"].as_array().unwrap() {
        for (_, d) in e["displacements"].as_object().unwrap() {
            assert!(d["deltas"].as_array().unwrap().iter().flat_map(|p| p.as_array().unwrap()).all(|v| v.as_f64() == Some(0.0)));
        }
    }
    assert_eq!(fs::read_dir(a.join("samples")).unwrap().count(), 8);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(run(&["phantom", "--misalign", "-1", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["phantom", "--count", "0", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    phantoms(&out, "1", "4");
    let ck = tmp.path().join("ck");
    assert_eq!(run(&["train", "--stage", "2", "--data", s(&out), "--out", s(&ck)]).status.code(), Some(2));
    assert_eq!(run(&["evaluate", "--data", s(&out), "--checkpoint", s(&ck), "--out", s(&ck)]).status.code(), Some(2));
}

const TINY: &str = r#"{
  "batch_size": 2, "eval_every": 2,
  "arch": { "size": 32, "channels": [4, 8, 8], "path_channels": [4, 8], "head_pool": 2, "head_hidden": 8 }
}"#;

#[test]
fn train_infer_evaluate_quantify() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let cfg = p("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    phantoms(&p("data"), "3", "4");
    let data = p("data");
    ok(&["train", "--stage", "1", "--data", s(&data), "--steps", "4", "--config", s(&cfg), "--out", s(&p("run"))]);
    assert!(p("run/stage1/params.safetensors").is_file());
    assert!(fs::read_to_string(p("run/stage1/train_log.csv")).unwrap().starts_with("step[umyops-trainlog/1]"));
    ok(&["train", "--stage", "2", "--data", s(&data), "--from-stage1", s(&p("run")), "--steps", "4", "--config", s(&cfg), "--out", s(&p("run"))]);
    let m = json(&p("run/manifest.json"));
    assert_eq!(m["details"]["stage1_sha256"]["identical"], true);

    ok(&["infer", "--checkpoint", s(&p("run")), "--data", s(&data), "--out", s(&p("pred"))]);
    assert_eq!(fs::read_dir(p("pred/predictions")).unwrap().count(), 8);

    ok(&["evaluate", "--checkpoint", s(&p("run")), "--data", s(&data), "--out", s(&p("ev1"))]);
    ok(&["evaluate", "--checkpoint", s(&p("run")), "--data", s(&data), "--out", s(&p("ev2"))]);
    assert_eq!(fs::read(p("ev1/eval.csv")).unwrap(), fs::read(p("ev2/eval.csv")).unwrap());

    let out = Command::new(env!("CARGO_BIN_EXE_umyops"))
        .args(["evaluate", "--predictions", s(&data), "--out", s(&p("gold"))])
        .env("UMYOPS_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(out.status.success());
    let means = json(&p("gold/manifest.json"))["details"]["means"].clone();
    for key in ["myo_dice", "scar_dice", "edema_dice"] {
        assert_eq!(means[key].as_f64(), Some(1.0), "{key}");
    }

    ok(&["quantify", "--data", s(&data), "--predictions", s(&p("pred")), "--out", s(&p("q"))]);
    let csv = fs::read_to_string(p("q/quant.csv")).unwrap();
    assert!(csv.starts_with("sample[umyops-quant/1]"));
    assert!(p("q/plots/sample_0000_gold.svg").is_file());
}

#[test]
fn diverging_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    phantoms(&p("data"), "5", "4");
    let cfg = p("boom.json");
    fs::write(&cfg, TINY.replacen('{', r#"{ "learning_rate": 1e30, "cosine_decay": false,"#, 1)).unwrap();
    let out = run(&["train", "--stage", "1", "--data", s(&p("data")), "--steps", "6", "--config", s(&cfg), "--out", s(&p("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

fn oracle_degrees(center: (f64, f64), r: usize, c: usize) -> f64 {
    let (up, right) = (center.0 - r as f64, c as f64 - center.1);
    (90.0 - up.atan2(right).to_degrees()).rem_euclid(360.0)
}

#[test]
fn quantify_counts_wedge_chords() {
    let tmp = tempfile::tempdir().unwrap();
    let (n, center, k, start) = (121usize, (60.0, 60.0), 23usize, 40usize);
    let labels = Array2::from_shape_fn((n, n), |(r, c)| {
        let rad = (r as f64 - center.0).hypot(c as f64 - center.1);
        let sector = (oracle_degrees(center, r, c) / 3.6).floor() as usize;
        let in_wedge = (sector + 100 - start) % 100 < k;
        if rad < 20.0 {
            Class::LeftVentricle.code()
        } else if rad < 34.0 {
            if in_wedge { Class::Scar.code() } else { Class::Myocardium.code() }
        } else {
            Class::Background.code()
        }
    });
    let slice = MultiSeqSlice::new(
        BTreeMap::from([(Sequence::Lge, Array2::zeros((n, n)))]),
        BTreeMap::from([(Sequence::Lge, LabelMask::new(labels).unwrap())]),
        (1.0, 1.0),
        Sequence::Lge,
        Provenance::default(),
    )
    .unwrap();
    let data = tmp.path().join("wedge");
    fs::create_dir_all(&data).unwrap();
    write_slice(&data.join("wedge"), &SliceRecord { slice, displacements: BTreeMap::new() }).unwrap();
    let out = tmp.path().join("q");
    ok(&["quantify", "--data", s(&data), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("quant.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "transmural_count").unwrap();
    assert_eq!(row[col], k.to_string());
}
