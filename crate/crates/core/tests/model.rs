mod common;

use common::{tiny_config, Market};
use probsaint_autodiff::Tensor;
use probsaint_core::features::EncodedBatch;
use probsaint_core::model::{inter_sample_attention, Architecture, ModelConfig, VarianceLink};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn market() -> &'static Market {
    static M: OnceLock<Market> = OnceLock::new();
    M.get_or_init(|| Market::new(1500, 9))
}

fn first(n: usize) -> EncodedBatch {
    market().train.subset(&(0..n).collect::<Vec<_>>())
}

/// Row 0 of the training split followed by `companions`.
fn with_companions(companions: &[usize]) -> EncodedBatch {
    let mut idx = vec![0];
    idx.extend_from_slice(companions);
    market().train.subset(&idx)
}

#[test]
fn output_shapes_follow_the_architecture() {
    let b = first(10);
    for arch in [Architecture::ProbSaint, Architecture::ProbMlp] {
        let out = market().model(ModelConfig { architecture: arch, ..tiny_config() }, 1).forward_eval(&b).unwrap();
        assert_eq!(out.mu_std.len(), 10);
        assert_eq!(out.s_raw.map(|s| s.len()), Some(10));
    }
    let point = market().model(ModelConfig { architecture: Architecture::SaintPoint, ..tiny_config() }, 1);
    let out = point.forward_eval(&b).unwrap();
    assert_eq!(out.mu_std.len(), 10);
    assert!(out.s_raw.is_none());
}

#[test]
fn outputs_are_finite_in_both_modes() {
    let b = first(32);
    let model = market().model(ModelConfig { dropout: 0.3, depth: 2, ..tiny_config() }, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for training in [false, true] {
        let out = model.forward(&b, training, &mut rng).unwrap();
        assert!(out.mu_std.iter().chain(out.s_raw.as_ref().unwrap()).all(|v| v.is_finite()));
    }
}

#[test]
fn empty_batches_and_bad_groups_are_rejected() {
    let model = market().model(tiny_config(), 1);
    assert!(model.forward_eval(&first(0)).is_err());
    assert!(model.forward_eval_groups(&first(10), 3).is_err());
}

#[test]
fn duplicated_rows_get_identical_outputs() {
    let b = market().train.subset(&[5; 6]);
    let out = market().model(tiny_config(), 4).forward_eval(&b).unwrap();
    assert!(out.mu_std.iter().all(|&v| v == out.mu_std[0]));
    let s = out.s_raw.unwrap();
    assert!(s.iter().all(|&v| v == s[0]));
}

#[test]
fn companions_change_a_rows_prediction() {
    let model = market().model(tiny_config(), 5);
    let a = model.forward_eval(&with_companions(&[1, 2, 3, 4, 5, 6, 7])).unwrap();
    let b = model.forward_eval(&with_companions(&[11, 12, 13, 14, 15, 16, 17])).unwrap();
    assert_ne!(a.mu_std[0], b.mu_std[0]);

    let mut zeroed = model.clone();
    zeroed.zero_inter_sample();
    let a = zeroed.forward_eval(&with_companions(&[1, 2, 3, 4, 5, 6, 7])).unwrap();
    let b = zeroed.forward_eval(&with_companions(&[11, 12, 13, 14, 15, 16, 17])).unwrap();
    let alone = zeroed.forward_eval(&with_companions(&[])).unwrap();
    for other in [&b, &alone] {
        assert!((a.mu_std[0] - other.mu_std[0]).abs() <= 1e-12);
        assert!((a.s_raw.as_ref().unwrap()[0] - other.s_raw.as_ref().unwrap()[0]).abs() <= 1e-12);
    }
}

#[test]
fn the_mlp_scores_rows_independently() {
    let model = market().model(ModelConfig { architecture: Architecture::ProbMlp, ..tiny_config() }, 5);
    let a = model.forward_eval(&with_companions(&[1, 2, 3])).unwrap();
    let b = model.forward_eval(&with_companions(&[11, 12, 13])).unwrap();
    assert_eq!(a.mu_std[0], b.mu_std[0]);
    assert!(!model.config.couples_rows());
}

#[test]
fn inter_sample_attention_keeps_the_shape() {
    let z = Tensor::new(vec![5, 3, 4], (0..60).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let out = inter_sample_attention(&z, 2, 1).unwrap();
    assert_eq!(out.shape(), [5, 3, 4]);
    assert!(out.is_finite());
    let single = Tensor::new(vec![1, 3, 4], z.data()[..12].to_vec()).unwrap();
    assert_eq!(inter_sample_attention(&single, 2, 1).unwrap().shape(), [1, 3, 4]);
    assert!(inter_sample_attention(&Tensor::zeros(&[3, 4]).unwrap(), 2, 1).is_err());
}

#[test]
fn inter_sample_attention_is_permutation_equivariant() {
    let (m, s, d) = (6, 2, 4);
    let z = Tensor::new(vec![m, s, d], (0..m * s * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let perm = [3, 0, 5, 1, 4, 2];
    let row = s * d;
    let permuted: Vec<f64> = perm.iter().flat_map(|&p| z.data()[p * row..(p + 1) * row].to_vec()).collect();
    let a = inter_sample_attention(&z, 2, 8).unwrap();
    let b = inter_sample_attention(&Tensor::new(vec![m, s, d], permuted).unwrap(), 2, 8).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for k in 0..row {
            assert!((b.data()[i * row + k] - a.data()[p * row + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn the_clamp_link_floors_and_softplus_stays_positive() {
    let clamp = tiny_config();
    assert_eq!(clamp.variance_link, VarianceLink::Clamp);
    assert_eq!(clamp.link(-3.0), clamp.epsilon);
    assert_eq!(clamp.link(0.0), clamp.epsilon);
    assert_eq!(clamp.link(0.25), 0.25);
    let soft = ModelConfig { variance_link: VarianceLink::Softplus, ..tiny_config() };
    for s in [-50.0, -1.0, 0.0, 1.0, 40.0] {
        assert!(soft.link(s) > soft.epsilon * 0.999);
    }
    assert!((soft.link(0.0) - (2f64.ln() + soft.epsilon)).abs() < 1e-15);
}

#[test]
fn the_single_block_shortcut_matches_full_episodes() {
    let m = market();
    let model = m.model(tiny_config(), 6);
    let context = first(8);
    let queries = m.val.subset(&(0..12).collect::<Vec<_>>());
    let fast = model.forward_fixed_context(&context, &queries, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let singles: Vec<EncodedBatch> = (0..queries.len()).map(|i| queries.subset(&[i])).collect();
    let parts: Vec<&EncodedBatch> = singles.iter().flat_map(|q| [&context, q]).collect();
    let episodes = EncodedBatch::concat(&parts);
    let full = model.forward_eval_groups(&episodes, 9).unwrap();
    let s_full = full.s_raw.unwrap();
    for i in 0..queries.len() {
        assert_eq!(fast.mu_std[i], full.mu_std[i * 9 + 8], "query {i}");
        assert_eq!(fast.s_raw.as_ref().unwrap()[i], s_full[i * 9 + 8], "query {i}");
    }
}

#[test]
fn deeper_networks_also_score_fixed_context_episodes() {
    let m = market();
    let model = m.model(ModelConfig { depth: 2, ..tiny_config() }, 6);
    let context = first(8);
    let queries = m.val.subset(&[0, 1, 2]);
    let out = model.forward_fixed_context(&context, &queries, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for i in 0..3 {
        let one = model.forward_fixed_context(&context, &queries.subset(&[i]), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(one.mu_std[0], out.mu_std[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_rows_permutes_outputs(keys in prop::collection::vec(any::<u32>(), 2..20), seed in 0u64..4) {
        let idx: Vec<usize> = (0..keys.len()).collect();
        let mut perm = idx.clone();
        perm.sort_by_key(|&i| keys[i]);
        let b = first(keys.len());
        let model = market().model(tiny_config(), seed);
        let base = model.forward_eval(&b).unwrap();
        let out = model.forward_eval(&b.subset(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(out.mu_std[i], base.mu_std[p]);
            prop_assert_eq!(out.s_raw.as_ref().unwrap()[i], base.s_raw.as_ref().unwrap()[p]);
        }
    }
}
