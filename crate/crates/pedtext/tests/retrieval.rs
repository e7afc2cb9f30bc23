mod common;

use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pedtext::autograd::Mat;
use pedtext::checkpoint::Checkpoint;
use pedtext::data::DatasetManifest;
use pedtext::eval::{cross_domain_evaluate, evaluate, rank_k, RetrievalRun};
use pedtext::generator::{load_templates, GeneratorConfig};
use pedtext::ontology::AttributeOntology;
use pedtext::pretrain::PretrainConfig;
use pedtext::toy::{toy_dataset, toy_pretrain_config, ToyConfig};

use common::*;

/// A short pre-training run on the toy benchmark.
fn trained(seed: u64) -> (DatasetManifest, Checkpoint) {
    let m = toy_manifest(seed);
    let cfg = PretrainConfig {
        epochs: 2,
        ..toy_pretrain_config(&ToyConfig::default(), 0)
    };
    let run = pedtext::pretrain::pretrain_loop(&m, Path::new("."), &cfg, seed).unwrap();
    (m, run.checkpoint)
}

#[test]
fn untrained_model_scores_near_chance() {
    let mut total = 0.0;
    let seeds = 0..8u64;
    for seed in seeds.clone() {
        let m = toy_manifest(seed);
        let ck = random_init_checkpoint(&m, seed);
        let r = evaluate(&ck, &m, Path::new(".")).unwrap();
        assert_eq!(r.n_queries, 32);
        total += r.rank1;
    }
    // One matching gallery item among 32.
    let mean = total / seeds.count() as f64;
    assert!(mean < 0.15, "mean untrained Rank-1 {mean}");
}

#[test]
fn evaluation_is_deterministic() {
    let (m, ck) = trained(2);
    let a = evaluate(&ck, &m, Path::new(".")).unwrap();
    let b = evaluate(&ck, &m, Path::new(".")).unwrap();
    assert_eq!(a, b);
    assert!(a.rank1 <= a.rank5 && a.rank5 <= a.rank10);
    assert_eq!(a.config_hash, ck.config_hash());
}

#[test]
fn cross_domain_on_the_same_domain_is_plain_evaluation() {
    let (m, ck) = trained(3);
    let same = cross_domain_evaluate(&ck, &m, Path::new(".")).unwrap();
    assert_eq!(same.report, evaluate(&ck, &m, Path::new(".")).unwrap());
    assert!(same.total_tokens > 0);
}

#[test]
fn unseen_template_words_become_unknown() {
    let (_, ck) = trained(3);
    let alt = load_templates(&Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/templates_alt.tsv")).unwrap();
    let b = toy_dataset(&AttributeOntology::default_ontology(), &alt, &ToyConfig::default(), &GeneratorConfig::default(), 3).unwrap();
    let r = cross_domain_evaluate(&ck, &b, Path::new(".")).unwrap();
    assert!(r.unknown_tokens > 0 && r.unknown_tokens < r.total_tokens);
    assert_eq!(r.report.n_queries, 32);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Rank-k depends on the gallery as a set, not on its order.
    #[test]
    fn gallery_order_is_irrelevant(seed in 0u64..10_000, g in 2usize..40, q in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = g.min(6);
        let gallery_ids: Vec<u32> = (0..g).map(|i| (i % ids) as u32).collect();
        let query_ids: Vec<u32> = (0..q).map(|_| rng.random_range(0..ids as u32)).collect();
        let mut gen = |r| Mat::from_shape_fn((r, 4), |_| rng.random_range(-1.0..1.0));
        let (queries, gallery) = (gen(q), gen(g));
        let names: Vec<String> = (0..q).map(|i| format!("q{i}")).collect();
        let run = RetrievalRun::new(names.clone(), query_ids.clone(), &queries, gallery_ids.clone(), &gallery).unwrap();

        let mut order: Vec<usize> = (0..g).collect();
        order.shuffle(&mut rng);
        let shuffled = gallery.select(ndarray::Axis(0), &order);
        let shuffled_ids: Vec<u32> = order.iter().map(|&i| gallery_ids[i]).collect();
        let moved = RetrievalRun::new(names, query_ids, &queries, shuffled_ids, &shuffled).unwrap();
        for k in [1, 5, 10] {
            prop_assert_eq!(rank_k(&run, k).unwrap(), rank_k(&moved, k).unwrap());
        }
    }
}
