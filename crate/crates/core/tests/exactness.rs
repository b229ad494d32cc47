use gsd_core::cluster::ClusterStrategy;
use gsd_core::engine::{DecodeConfig, Method, Models};
use gsd_core::harness::{test_sequence_exactness, Lab};
use gsd_core::toy::{make_markov_model, make_perturbed_draft};
use gsd_core::TokenId;

fn small_config(method: Method) -> DecodeConfig {
    DecodeConfig {
        max_len: 4,
        draft_len: 2,
        top_k: 4,
        ..DecodeConfig::new(method, 4)
    }
}

#[test]
fn sd_and_sjd_match_the_ancestral_law() {
    let model = make_markov_model(4, 0.5, 21).unwrap();
    let draft = make_perturbed_draft(&model, 0.5, 3).unwrap();
    for method in [Method::Sd, Method::Sjd] {
        let models = Models {
            target: &model,
            draft: Some(&draft),
            strategy: None,
            dist: None,
        };
        let r = test_sequence_exactness(models, &small_config(method), &[TokenId(0)], 20_000, 4).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.tv_empirical <= r.noise_floor, "{r:?}");
    }
}

#[test]
fn sd_with_noiseless_draft_stays_within_noise() {
    let model = make_markov_model(4, 0.5, 22).unwrap();
    let draft = make_perturbed_draft(&model, 0.0, 3).unwrap();
    let models = Models {
        target: &model,
        draft: Some(&draft),
        strategy: None,
        dist: None,
    };
    let r = test_sequence_exactness(models, &small_config(Method::Sd), &[TokenId(2)], 20_000, 8).unwrap();
    assert!(r.tv_empirical <= r.noise_floor, "{r:?}");
}

#[test]
fn grouped_decoding_reports_its_divergence() {
    let lab = Lab::high_entropy(8, 5).unwrap();
    let strategy = ClusterStrategy::expert_window(8);
    let models = Models {
        target: &lab.target,
        draft: None,
        strategy: Some(&strategy),
        dist: None,
    };
    let cfg = DecodeConfig {
        top_k: 8,
        group_size: 8,
        ..small_config(Method::Gsd)
    };
    let r = test_sequence_exactness(models, &cfg, &[TokenId(0)], 20_000, 1).unwrap();
    assert_eq!(r.passed, r.tv_empirical <= r.threshold);
    assert!(r.tv_empirical > 0.0);
}
