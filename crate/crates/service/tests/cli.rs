mod common;

use common::{fixture, path, run, Fixture};
use probsaint_core::checkpoint::Checkpoint;
use probsaint_core::metrics::MetricReport;
use std::fs;

fn fx() -> &'static Fixture {
    fixture("cli")
}

fn best_val(f: &Fixture) -> f64 {
    let mut reader = csv::Reader::from_path(f.train_dir.join("training_log.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[2], "val_nll");
    let vals: Vec<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    let ckpt = Checkpoint::load(&f.checkpoint).unwrap();
    assert!(ckpt.train_config.is_some());
    vals.into_iter().fold(f64::INFINITY, f64::min)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["generate", "--bogus"]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    let missing = fx().root.join("nope.ckpt");
    let out = fx().root.join("unused");
    assert_eq!(run(&["predict", "--checkpoint", path(&missing), "--data", path(&fx().data), "--out-dir", path(&out)]), 1);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn training_writes_its_artifacts() {
    let f = fx();
    for file in ["model.ckpt", "training_log.csv", "split.json"] {
        assert!(f.train_dir.join(file).exists(), "{file}");
    }
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.train_dir.join("split.json")).unwrap()).unwrap();
    assert!(split["train_rows"].as_u64().unwrap() > 0);
    assert!(split["test_rows"].as_u64().unwrap() > 0);
    for file in ["market.csv", "market_spec.json", "schema.json"] {
        assert!(f.data.parent().unwrap().join(file).exists(), "{file}");
    }
}

#[test]
fn validation_scores_reproduce_the_training_log() {
    let f = fx();
    let out = f.root.join("eval-val");
    let code = run(&[
        "evaluate", "--checkpoint", path(&f.checkpoint), "--data", path(&f.data), "--partition", "val", "--out-dir", path(&out),
    ]);
    assert_eq!(code, 0);
    let report = MetricReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let best = best_val(f);
    assert!((report.nll - best).abs() <= 1e-9, "{} vs {best}", report.nll);
    assert!(out.join("buckets.csv").exists());
    assert!(out.join("intervals.csv").exists());
}

#[test]
fn evaluation_defaults_to_the_test_window() {
    let f = fx();
    let out = f.root.join("eval-test");
    assert_eq!(run(&["evaluate", "--checkpoint", path(&f.checkpoint), "--data", path(&f.data), "--out-dir", path(&out)]), 0);
    let report = MetricReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.train_dir.join("split.json")).unwrap()).unwrap();
    assert_eq!(report.n as u64, split["test_rows"].as_u64().unwrap());
    let mc = f.root.join("eval-mc");
    let code = run(&[
        "evaluate", "--checkpoint", path(&f.checkpoint), "--data", path(&f.data), "--mc-dropout", "4", "--out-dir", path(&mc),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn predictions_cover_every_input_row() {
    let f = fx();
    let out = f.root.join("predict");
    assert_eq!(run(&["predict", "--checkpoint", path(&f.checkpoint), "--data", path(&f.data), "--out-dir", path(&out)]), 0);
    let mut reader = csv::Reader::from_path(out.join("predictions.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), ["row", "mu", "sigma", "confidence", "excluded", "error"]);
    let records: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 1500);
    assert!(records.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn sweep_defaults_and_overrides() {
    let f = fx();
    let mut rows = csv::Reader::from_path(&f.data).unwrap();
    let headers = rows.headers().unwrap().clone();
    let first = rows.records().next().unwrap().unwrap();
    let vehicle: serde_json::Map<String, serde_json::Value> = headers
        .iter()
        .zip(first.iter())
        .filter(|(h, v)| *h != "sale_price" && !v.is_empty())
        .map(|(h, v)| (h.to_string(), serde_json::Value::String(v.to_string())))
        .collect();
    let car = f.root.join("car.json");
    fs::write(&car, serde_json::Value::Object(vehicle).to_string()).unwrap();

    let out = f.root.join("sweep-default");
    assert_eq!(run(&["sweep", "--checkpoint", path(&f.checkpoint), "--data", path(&car), "--out-dir", path(&out)]), 0);
    let sweep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["durations"], serde_json::json!([15.0, 45.0, 75.0, 105.0, 150.0]));
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 6);

    let out = f.root.join("sweep-custom");
    let code = run(&[
        "sweep", "--checkpoint", path(&f.checkpoint), "--data", path(&car), "--durations", "10,20,30", "--out-dir", path(&out),
    ]);
    assert_eq!(code, 0);
    let sweep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["durations"], serde_json::json!([10.0, 20.0, 30.0]));

    let out = f.root.join("sweep-bad");
    let code = run(&[
        "sweep", "--checkpoint", path(&f.checkpoint), "--data", path(&car), "--durations", "0", "--out-dir", path(&out),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn a_corrupt_checkpoint_is_a_failure() {
    let f = fx();
    let mut bytes = fs::read(&f.checkpoint).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = f.root.join("corrupt.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = f.root.join("corrupt-out");
    assert_eq!(run(&["predict", "--checkpoint", path(&bad), "--data", path(&f.data), "--out-dir", path(&out)]), 2);
}

#[test]
fn a_tiny_search_keeps_the_best_trial() {
    let f = fx();
    let mut cfg = common::run_config();
    cfg.train.max_epochs = 1;
    cfg.search.dims = vec![8];
    cfg.search.depths = vec![1];
    cfg.search.heads = vec![2];
    cfg.search.dropouts = vec![0.0];
    cfg.search.trials = 2;
    let config = f.root.join("search.json");
    fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = f.root.join("search");
    let code = run(&[
        "search", "--schema", path(&f.schema), "--data", path(&f.data), "--config", path(&config), "--out-dir", path(&out),
    ]);
    assert_eq!(code, 0);
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trials.json")).unwrap()).unwrap();
    assert_eq!(table["trials"].as_array().unwrap().len(), 2);
    assert!(out.join("model.ckpt").exists());
}
