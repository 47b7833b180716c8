//! A small generated market and a quickly trained checkpoint, built once
//! per test binary through the CLI.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use probsaint_core::model::ModelConfig;
use probsaint_core::synth::MarketSpec;
use probsaint_core::train::TrainConfig;
use probsaint_service::cli;
use probsaint_service::config::RunConfig;

pub struct Fixture {
    pub root: PathBuf,
    pub data: PathBuf,
    pub schema: PathBuf,
    pub config: PathBuf,
    pub train_dir: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("probsaint").chain(args.iter().copied()))
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn run_config() -> RunConfig {
    let model = ModelConfig { dim: 8, heads: 2, dropout: 0.0, numeric_hidden: 8, context_size: 8, ..ModelConfig::default() };
    RunConfig {
        train: TrainConfig { batch_size: 32, max_epochs: 2, patience: 2, seed: 1, model, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

pub fn fixture(name: &str) -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("service-{name}"));
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let spec = root.join("spec.json");
        std::fs::write(&spec, MarketSpec { n_rows: 1500, ..MarketSpec::default() }.to_json().unwrap()).unwrap();
        let config = root.join("config.json");
        std::fs::write(&config, serde_json::to_string(&run_config()).unwrap()).unwrap();
        let data_dir = root.join("data");
        assert_eq!(run(&["generate", "--spec", path(&spec), "--seed", "5", "--out-dir", path(&data_dir)]), 0);
        let train_dir = root.join("train");
        let data = data_dir.join("market.csv");
        let schema = data_dir.join("schema.json");
        let code = run(&[
            "train",
            "--schema",
            path(&schema),
            "--data",
            path(&data),
            "--config",
            path(&config),
            "--out-dir",
            path(&train_dir),
        ]);
        assert_eq!(code, 0);
        let checkpoint = train_dir.join("model.ckpt");
        Fixture { root, data, schema, config, train_dir, checkpoint }
    })
}
