mod common;

use common::{tiny_config, weights, Market};
use probsaint_core::checkpoint::{fingerprint_rows, Checkpoint, FORMAT_VERSION};
use probsaint_core::inference::ContextPolicy;
use probsaint_core::train::{train, TrainConfig};
use probsaint_core::Error;
use std::sync::OnceLock;

fn trained() -> &'static (Market, Checkpoint) {
    static C: OnceLock<(Market, Checkpoint)> = OnceLock::new();
    C.get_or_init(|| {
        let m = Market::new(1200, 41);
        let cfg = TrainConfig { batch_size: 32, max_epochs: 1, seed: 2, model: tiny_config(), ..TrainConfig::default() };
        let out = train(&m.train, &m.val, &m.encoders, &cfg).unwrap();
        let ckpt = Checkpoint::from_training(
            out,
            &m.parts.train,
            &m.train,
            m.encoders.clone(),
            m.schema.clone(),
            &cfg,
            None,
        )
        .unwrap();
        (m, ckpt)
    })
}

#[test]
fn round_trip_is_bit_exact() {
    let (m, ckpt) = trained();
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(weights(&back.model), weights(&ckpt.model));
    assert_eq!(back.encoders, ckpt.encoders);
    assert_eq!(back.context_rows, ckpt.context_rows);
    assert_eq!(back.train_fingerprint.as_deref(), Some(fingerprint_rows(&m.parts.train).as_str()));
    assert_eq!(back.version_id().unwrap(), ckpt.version_id().unwrap());
    assert_eq!(ckpt.version_id().unwrap().len(), 16);

    let a = ckpt.predictor().unwrap().predict_encoded(&m.test, ContextPolicy::FixedContext).unwrap();
    let b = back.predictor().unwrap().predict_encoded(&m.test, ContextPolicy::FixedContext).unwrap();
    assert_eq!(a, b);
}

#[test]
fn context_rows_come_from_the_training_split() {
    let (m, ckpt) = trained();
    assert_eq!(ckpt.context_rows.len(), tiny_config().context_size);
    assert!(ckpt.context_rows.iter().all(|r| m.parts.train.contains(r)));
}

#[test]
fn a_flipped_byte_fails_the_checksum() {
    let bytes = trained().1.to_bytes().unwrap();
    let mut bad = bytes.clone();
    let i = bytes.len() - 32 - 100;
    bad[i] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() ^= 0x80;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
}

#[test]
fn truncation_is_an_integrity_error() {
    let bytes = trained().1.to_bytes().unwrap();
    for len in [bytes.len() - 1, bytes.len() / 2, 40, 0] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..len]), Err(Error::Integrity(_))), "length {len}");
    }
}

#[test]
fn other_format_versions_are_rejected() {
    let mut bytes = trained().1.to_bytes().unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::UnsupportedVersion { found, supported }) => assert_eq!((found, supported), (2, 1)),
        other => panic!("expected a version error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn foreign_files_are_rejected() {
    let mut bytes = trained().1.to_bytes().unwrap();
    bytes[..8].copy_from_slice(b"NOTMODEL");
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
}

#[test]
fn save_and_load_through_the_filesystem() {
    let (m, ckpt) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    let q = m.test.subset(&[0, 1, 2]);
    assert_eq!(
        back.predictor().unwrap().predict_encoded(&q, ContextPolicy::FixedContext).unwrap(),
        ckpt.predictor().unwrap().predict_encoded(&q, ContextPolicy::FixedContext).unwrap()
    );
    assert!(matches!(Checkpoint::load(dir.path().join("missing.ckpt")), Err(Error::Io(_))));
}

#[test]
fn fingerprints_see_every_field() {
    let rows = &trained().0.parts.train[..5];
    let base = fingerprint_rows(rows);
    assert_eq!(base.len(), 64);
    let mut changed = rows.to_vec();
    changed[2].set(0, None);
    assert_ne!(fingerprint_rows(&changed), base);
    let mut changed = rows.to_vec();
    changed.swap(0, 1);
    assert_ne!(fingerprint_rows(&changed), base);
}
