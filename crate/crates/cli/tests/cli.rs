use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn geovmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geovmf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn geovmf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_toy(dir: &Path, per_city: &str) {
    let o = geovmf(dir, &["toy", "--out", "corpus.jsonl", "--per-city", per_city]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn split_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path(), "25");
    for out in ["a", "b"] {
        let o = geovmf(
            dir.path(),
            &["split", "--in", "corpus.jsonl", "--fractions", "0.98,0.01,0.01", "--seed", "7", "--out-dir", out],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    let o = geovmf(
        dir.path(),
        &["split", "--in", "corpus.jsonl", "--fractions", "0.98,0.01,0.01", "--seed", "8", "--out-dir", "c"],
    );
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(dir.path().join("a/train.jsonl")).unwrap(),
        fs::read(dir.path().join("c/train.jsonl")).unwrap()
    );
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/train.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn complete_cases_excludes_missing_ids() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("gold.jsonl"),
        concat!(
            "{\"id\":\"a\",\"text\":\"x\",\"lat\":0.0,\"lon\":0.0}\n",
            "{\"id\":\"b\",\"text\":\"y\",\"lat\":10.0,\"lon\":10.0}\n",
            "{\"id\":\"c\",\"text\":\"z\",\"lat\":-20.0,\"lon\":30.0}\n",
        ),
    )
    .unwrap();
    fs::write(
        dir.path().join("preds.jsonl"),
        concat!(
            "{\"id\":\"a\",\"candidates\":[{\"lat\":0.0,\"lon\":1.0,\"score\":0.9},{\"lat\":5.0,\"lon\":5.0,\"score\":0.1}]}\n",
            "{\"id\":\"b\",\"candidates\":[{\"lat\":10.0,\"lon\":11.0}]}\n",
            "{\"id\":\"c\",\"candidates\":[]}\n",
        ),
    )
    .unwrap();
    let run = |mode: &str, out: &str| {
        let o = geovmf(
            dir.path(),
            &["evaluate", "--pred", "preds.jsonl", "--gold", "gold.jsonl", "--rule", "best", "--mode", mode, "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join(out)).unwrap()).unwrap();
        v[0].clone()
    };
    let cc = run("complete_cases", "cc.json");
    let imp = run("imputed", "imp.json");
    assert_eq!(cc["n"], 2);
    assert_eq!(cc["missing"], 1);
    assert_eq!(imp["n"], 3);
    assert_eq!(cc["n"].as_u64().unwrap() + cc["missing"].as_u64().unwrap(), imp["n"].as_u64().unwrap());
    assert!(dir.path().join("cc.json.manifest.json").is_file());
}

#[test]
fn gradcheck_passes_and_prints_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = geovmf(dir.path(), &["gradcheck", "--dims", "8,4,2", "--cases", "25", "--tol", "1e-4"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    let line = stdout.lines().find(|l| l.starts_with("max_rel_error\t")).expect("max_rel_error line");
    let err: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn impossible_tolerance_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = geovmf(dir.path(), &["gradcheck", "--cases", "2", "--tol", "1e-30"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = geovmf(dir.path(), &["split", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus"));
    assert_eq!(code(&geovmf(dir.path(), &["nosuchcommand"])), 1);
    assert_eq!(code(&geovmf(dir.path(), &["--help"])), 0);
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{\"id\":\"a\",\"text\":\"x\",\"lat\":95.0,\"lon\":0.0}\nnot json\n").unwrap();
    let o = geovmf(dir.path(), &["split", "--in", "bad.jsonl", "--out-dir", "s"]);
    assert_eq!(code(&o), 2);
    let o = geovmf(dir.path(), &["ingest", "--in", "bad.jsonl", "--out", "clean.jsonl", "--lenient"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.path().join("clean.jsonl")).unwrap(), "");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path(), "10");
    fs::write(dir.path().join("run.conf"), "# split settings\nfractions = 0.5,0.25,0.25\nseed = 3\nout-dir = viaconf\n").unwrap();
    let o = geovmf(dir.path(), &["split", "--in", "corpus.jsonl", "--config", "run.conf", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout), "train\t20\nval\t10\ntest\t10\n");
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("viaconf/train.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
}

#[test]
fn train_predict_contours_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path(), "10");
    let ok = |args: &[&str]| {
        let o = geovmf(dir.path(), args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["split", "--in", "corpus.jsonl", "--fractions", "0.8,0.1,0.1", "--out-dir", "s"]);
    ok(&[
        "train", "--train", "s/train.jsonl", "--val", "s/val.jsonl", "--out", "m.ckpt", "--log", "m.tsv", "--dim", "256",
        "--hidden", "16", "--components", "3", "--epochs", "2", "--batch-size", "8",
    ]);
    let log = fs::read_to_string(dir.path().join("m.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(&["predict", "--model", "m.ckpt", "--in", "s/test.jsonl", "--out", "p.jsonl", "--rule", "highProb"]);
    let preds = fs::read_to_string(dir.path().join("p.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    let first: Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    let comps = first["components"].as_array().unwrap();
    assert_eq!(comps.len(), 3);
    let rho: f64 = comps.iter().map(|c| c["rho"].as_f64().unwrap()).sum();
    assert!((rho - 1.0).abs() < 1e-9);
    assert_eq!(first["rule"], "highProb");

    let id = first["id"].as_str().unwrap().to_string();
    ok(&[
        "contours", "--pred", "p.jsonl", "--id", &id, "--gold", "64.1,-21.9", "--levels", "0.5,0.9", "--fine-res", "0.5",
        "--out", "c.geojson",
    ]);
    let fc: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("c.geojson")).unwrap()).unwrap();
    let features = fc["features"].as_array().unwrap();
    assert_eq!(features.iter().filter(|f| f["geometry"]["type"] == "MultiPolygon").count(), 2);
    assert!(features.iter().any(|f| f["properties"]["role"] == "actual"));

    let before = fs::read(dir.path().join("m.ckpt")).unwrap();
    let o = ok(&["replay", "--manifest", "m.ckpt.manifest.json"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("reproduced 2 outputs"));
    assert_eq!(fs::read(dir.path().join("m.ckpt")).unwrap(), before);

    let o = geovmf(dir.path(), &["predict", "--model", "m.ckpt", "--in", "s/test.jsonl", "--out", "q.jsonl", "--rule", "best"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sample_writes_points_near_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let o = geovmf(dir.path(), &["sample", "--lat", "-33.4", "--lon", "-70.6", "--kappa", "5000", "--n", "50"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lat,lon"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|(lat, lon)| (lat + 33.4).abs() < 5.0 && (lon + 70.6).abs() < 5.0));
}
