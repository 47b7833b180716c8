mod common;

use std::collections::HashSet;

use chrono::NaiveDate;
use common::{row, Market};
use probsaint_core::features::{
    default_test_start, derive_date_features, encode_rows, fit_encoders, month_cycle, parse_date, read_csv,
    time_split, write_csv, FeatureSchema, RawRow, Span, SplitWindows,
};
use probsaint_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_schema() -> FeatureSchema {
    FeatureSchema::from_json(
        r#"{
          "columns": [
            {"name": "brand", "kind": "categorical"},
            {"name": "odometer", "kind": "numeric"},
            {"name": "power", "kind": "numeric", "missing_placeholder": 90.0},
            {"name": "sale_date", "kind": "sale_date"},
            {"name": "price", "kind": "target"}
          ],
          "reference_date": "2020-01-01",
          "target": "price",
          "sale_date": "sale_date"
        }"#,
    )
    .unwrap()
}

fn date(s: &str) -> NaiveDate {
    parse_date(s).unwrap()
}

fn dated(d: &str) -> RawRow {
    row(&["A", "1000", "100", d, "5000"])
}

#[test]
fn month_encoding_examples() {
    let march = derive_date_features(date("2021-03-15"), date("2020-01-01"));
    assert_eq!(march.sin_month, 1.0);
    assert!(march.cos_month.abs() < 1e-12);
    let december = derive_date_features(date("2021-12-01"), date("2020-01-01"));
    assert!(december.sin_month.abs() < 1e-12);
    assert_eq!(december.cos_month, 1.0);
    let same = derive_date_features(date("2020-01-01"), date("2020-01-01"));
    assert_eq!(same.days_since_ref, 0.0);
    let before = derive_date_features(date("2019-12-30"), date("2020-01-01"));
    assert_eq!(before.days_since_ref, -2.0);
    assert_eq!((before.day, before.month, before.year), (30.0, 12.0, 2019.0));
}

#[test]
fn vocabulary_follows_first_appearance_with_unknown_at_zero() {
    let schema = toy_schema();
    let train = [row(&["B", "1", "1", "2021-01-01", "1"]), row(&["A", "2", "2", "2021-01-02", "2"]), row(&["B", "3", "3", "2021-01-03", "3"])];
    let enc = fit_encoders(&train, &schema).unwrap();
    let vocab = enc.vocabulary("brand").unwrap();
    assert_eq!(vocab.categories(), ["B", "A"]);
    assert_eq!(vocab.encode(Some("B")), 1);
    assert_eq!(vocab.encode(Some("A")), 2);
    assert_eq!(vocab.encode(Some("C")), 0);
    assert_eq!(vocab.encode(None), 0);
    assert_eq!(vocab.size(), 3);
    for c in ["A", "B"] {
        assert_eq!(vocab.decode(vocab.encode(Some(c))), Some(c));
    }
    assert_eq!(vocab.decode(0), None);
}

#[test]
fn constant_column_gets_unit_std_and_mean_maps_to_zero() {
    let schema = toy_schema();
    let train = [row(&["A", "7", "80", "2021-01-01", "10"]), row(&["A", "7", "120", "2021-01-02", "30"])];
    let enc = fit_encoders(&train, &schema).unwrap();
    let odo = &enc.numeric[enc.numeric_position("odometer").unwrap()];
    assert_eq!((odo.stats.mean, odo.stats.std), (7.0, 1.0));
    let power = &enc.numeric[enc.numeric_position("power").unwrap()];
    assert_eq!((power.stats.mean, power.stats.std), (100.0, 20.0));
    assert_eq!(power.stats.apply(100.0), 0.0);
    assert_eq!((enc.target.mean, enc.target.std), (20.0, 10.0));
}

#[test]
fn missing_values_use_placeholders_then_standardize() {
    let schema = toy_schema();
    let train = [row(&["A", "10000", "80", "2021-01-01", "10"]), row(&["B", "30000", "120", "2021-01-03", "30"])];
    let enc = fit_encoders(&train, &schema).unwrap();
    // Odometer missing: fitted mean 20000, so 0 after standardizing.
    // Power missing: schema placeholder 90, (90 - 100) / 20 = -0.5.
    let out = encode_rows(&[row(&["C", "", "", "2021-01-02", ""])], &schema, &enc).unwrap();
    assert!(out.errors.is_empty());
    let b = out.batch;
    assert_eq!(b.cat_row(0), [0]);
    let odo = enc.numeric_position("odometer").unwrap();
    let power = enc.numeric_position("power").unwrap();
    assert_eq!(b.num_row(0)[odo], 0.0);
    assert_eq!(b.num_row(0)[power], -0.5);
    assert!(b.num_values.iter().all(|v| v.is_finite()));
    assert_eq!(b.target_raw, [None]);
    // The sale date expands to six derived features.
    assert_eq!(b.n_num, 2 + 6);
    assert_eq!(enc.numeric_position("sale_date.sin_month"), Some(2 + 3));
}

#[test]
fn target_missing_everywhere_is_a_configuration_error() {
    let schema = toy_schema();
    let train = [row(&["A", "1", "1", "2021-01-01", ""])];
    assert!(matches!(fit_encoders(&train, &schema), Err(Error::Config(_))));
}

#[test]
fn bad_rows_are_reported_by_index_and_only_all_failing_aborts() {
    let schema = toy_schema();
    let enc = fit_encoders(&[dated("2021-01-01"), dated("2021-02-01")], &schema).unwrap();
    let rows = [dated("2021-03-01"), row(&["A", "1"]), row(&["A", "x", "1", "2021-01-01", "1"]), row(&["A", "1", "1", "01/02/2021", "1"])];
    let out = encode_rows(&rows, &schema, &enc).unwrap();
    assert_eq!(out.batch.len(), 1);
    assert_eq!(out.batch.source_rows, [0]);
    let bad: Vec<usize> = out.errors.iter().map(|e| e.row).collect();
    assert_eq!(bad, [1, 2, 3]);
    match encode_rows(&rows[1..], &schema, &enc) {
        Err(Error::AllRowsFailed(errs)) => assert_eq!(errs.len(), 3),
        other => panic!("expected AllRowsFailed, got {other:?}"),
    }
    assert!(encode_rows(&[], &schema, &enc).unwrap().batch.is_empty());
}

#[test]
fn worked_split_example_with_month_windows() {
    let schema = toy_schema();
    let b = SplitWindows::default().bounds(date("2022-03-20")).unwrap();
    assert_eq!(b.train_end, date("2022-02-20"));
    assert_eq!(b.val_start, date("2022-02-20"));
    assert_eq!(b.test_end, date("2022-06-20"));

    let days = ["2022-02-19", "2022-02-20", "2022-03-19", "2022-03-20", "2022-06-19", "2022-06-20"];
    let rows: Vec<RawRow> = days.iter().map(|d| dated(d)).collect();
    let p = time_split(&rows, &schema, date("2022-03-20"), &SplitWindows::default()).unwrap();
    assert_eq!(p.train, [dated("2022-02-19")]);
    assert_eq!(p.val, [dated("2022-02-20"), dated("2022-03-19")]);
    // The test-start day belongs to test, and the end is exclusive.
    assert_eq!(p.test, [dated("2022-03-20"), dated("2022-06-19")]);
}

#[test]
fn day_windows_are_supported() {
    let windows = SplitWindows { val: Span::Days(30), test: Span::Days(92), train_gap: Span::Days(30) };
    let b = windows.bounds(date("2022-03-20")).unwrap();
    assert_eq!(b.train_end, date("2022-02-18"));
    assert_eq!(b.val_start, date("2022-02-18"));
    assert_eq!(b.test_end, date("2022-06-20"));
}

#[test]
fn empty_partitions_name_the_boundary() {
    let schema = toy_schema();
    let rows = [dated("2022-03-25")];
    match time_split(&rows, &schema, date("2022-03-20"), &SplitWindows::default()) {
        Err(Error::Split(msg)) => assert!(msg.contains("2022-02-20"), "{msg}"),
        other => panic!("expected a split error, got {other:?}"),
    }
    let rows = [dated("2021-01-01")];
    match time_split(&rows, &schema, date("2022-03-20"), &SplitWindows::default()) {
        Err(Error::Split(msg)) => assert!(msg.contains("2022-03-20") && msg.contains("2022-06-20"), "{msg}"),
        other => panic!("expected a split error, got {other:?}"),
    }
}

#[test]
fn rows_without_sale_date_are_reported() {
    let schema = toy_schema();
    let rows = [dated("2021-01-01"), row(&["A", "1", "1", "", "1"]), dated("2022-04-01")];
    let p = time_split(&rows, &schema, date("2022-03-20"), &SplitWindows::default()).unwrap();
    assert_eq!(p.errors.len(), 1);
    assert_eq!(p.errors[0].row, 1);
}

#[test]
fn default_test_start_leaves_one_test_window_at_the_end() {
    let schema = toy_schema();
    let rows = [dated("2021-01-01"), dated("2022-08-20"), dated("2022-07-01")];
    assert_eq!(default_test_start(&rows, &schema, &SplitWindows::default()).unwrap(), date("2022-05-21"));
}

#[test]
fn encoders_never_see_validation_or_test_categories() {
    let m = Market::new(3000, 4);
    let col = m.schema.position("variant").unwrap();
    let train: HashSet<&str> = m.parts.train.iter().filter_map(|r| r.get(col)).collect();
    let later: HashSet<&str> = m.parts.val.iter().chain(&m.parts.test).filter_map(|r| r.get(col)).collect();
    let later_only: Vec<&str> = later.difference(&train).copied().collect();
    assert!(!later_only.is_empty(), "the market should launch variants after the training window");
    let vocab = m.encoders.vocabulary("variant").unwrap();
    assert!(later_only.iter().all(|c| !vocab.contains(c)));
    let all: Vec<RawRow> = m.parts.train.iter().chain(&m.parts.val).chain(&m.parts.test).cloned().collect();
    let refit = fit_encoders(&all, &m.schema).unwrap();
    assert_ne!(refit.vocabulary("variant"), Some(vocab));
    // Those rows encode to the unknown index.
    let test_codes: Vec<usize> = (0..m.test.len()).map(|i| m.test.cat_row(i)[2]).collect();
    assert!(test_codes.contains(&0));
}

#[test]
fn csv_round_trip_keeps_missing_values() {
    let schema = toy_schema();
    let rows = vec![row(&["A", "", "100", "2021-01-01", "5000"]), row(&["B,C", "12", "", "2021-01-02", ""])];
    let mut buf = Vec::new();
    write_csv(&mut buf, &schema, &rows).unwrap();
    let table = read_csv(buf.as_slice(), &schema).unwrap();
    assert_eq!(table.rows, rows);
    let no_target = "brand,odometer,power,sale_date\nA,1,2,2021-01-01\n";
    let table = read_csv(no_target.as_bytes(), &schema).unwrap();
    assert_eq!(table.rows[0].get(4), None);
    assert!(matches!(read_csv("brand,power\n".as_bytes(), &schema), Err(Error::Schema(_))));
}

fn days_after(base: &str, offsets: &[i64]) -> Vec<RawRow> {
    let base = date(base);
    offsets.iter().map(|&d| dated(&(base + chrono::Duration::days(d)).format("%Y-%m-%d").to_string())).collect()
}

proptest! {
    #[test]
    fn month_encoding_lies_on_the_unit_circle(month in 1u32..=12) {
        let (s, c) = month_cycle(month);
        prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partitions_are_ordered_in_time(offsets in prop::collection::vec(0i64..400, 1..80)) {
        let schema = toy_schema();
        let mut rows = days_after("2021-06-01", &offsets);
        rows.push(dated("2021-01-01"));
        rows.push(dated("2022-03-25"));
        let p = time_split(&rows, &schema, date("2022-03-20"), &SplitWindows::default()).unwrap();
        let col = schema.sale_date_position();
        let dates = |rs: &[RawRow]| rs.iter().map(|r| date(r.get(col).unwrap())).collect::<Vec<_>>();
        let (tr, va, te) = (dates(&p.train), dates(&p.val), dates(&p.test));
        if !va.is_empty() {
            prop_assert!(tr.iter().max() < va.iter().min());
            prop_assert!(va.iter().max() < te.iter().min());
        }
        prop_assert!(tr.iter().max() < te.iter().min());
        // With the default windows the validation span fills the gap exactly.
        let before_end = rows.iter().filter(|r| date(r.get(col).unwrap()) < date("2022-06-20")).count();
        prop_assert_eq!(tr.len() + va.len() + te.len(), before_end);
    }

    #[test]
    fn split_ignores_row_order(offsets in prop::collection::vec(0i64..400, 1..60), seed in any::<u64>()) {
        let schema = toy_schema();
        let mut rows = days_after("2021-06-01", &offsets);
        rows.push(dated("2021-01-01"));
        rows.push(dated("2022-03-25"));
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = time_split(&rows, &schema, date("2022-03-20"), &SplitWindows::default()).unwrap();
        let b = time_split(&shuffled, &schema, date("2022-03-20"), &SplitWindows::default()).unwrap();
        let sorted = |mut v: Vec<RawRow>| { v.sort_by(|x, y| x.0.cmp(&y.0)); v };
        prop_assert_eq!(sorted(a.train), sorted(b.train));
        prop_assert_eq!(sorted(a.val), sorted(b.val));
        prop_assert_eq!(sorted(a.test), sorted(b.test));
    }

    #[test]
    fn training_numerics_are_standardized(
        values in prop::collection::vec((-1e5f64..1e5, 0.0f64..500.0), 2..60),
    ) {
        let schema = toy_schema();
        let rows: Vec<RawRow> = values
            .iter()
            .enumerate()
            .map(|(i, (odo, power))| {
                let d = (date("2021-01-01") + chrono::Duration::days(i as i64 * 7)).format("%Y-%m-%d").to_string();
                row(&["A", &odo.to_string(), &power.to_string(), &d, "100"])
            })
            .collect();
        let enc = fit_encoders(&rows, &schema).unwrap();
        let b = encode_rows(&rows, &schema, &enc).unwrap().batch;
        let n = b.len() as f64;
        for (j, f) in enc.numeric.iter().enumerate() {
            let col: Vec<f64> = (0..b.len()).map(|i| b.num_row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9, "{} mean {}", f.name, mean);
            if f.stats.std != 1.0 || col.iter().any(|v| *v != col[0]) {
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9, "{} std {}", f.name, var.sqrt());
            }
        }
    }
}
