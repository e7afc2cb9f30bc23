//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pedtext::autograd::Mat;
use pedtext::data::{tokenize, Vocabulary, MAX_TEXT_LEN};
use pedtext::eval::{evaluate, rank_k, RetrievalRun};
use pedtext::finetune::{finetune_objective, id_loss, pgu_loss, ranking_loss, ranking_loss_from_similarity};
use pedtext::generator::{
    caption_manifest, corpus_stats, default_templates, record_bytes, select_optional, select_required,
    CaptionGenerator, GeneratorConfig, PromptBank,
};
use pedtext::model::Model;
use pedtext::ontology::{to_prompt, AttributeOntology, OPTIONAL_CATEGORIES};
use pedtext::pretrain::{contrastive_loss, mask_tokens, mlm_loss, pretrain_objective, EmbeddingBatch};
use pedtext::scorer::{ImageRecord, ScorerBackend};
use pedtext::toy::{toy_backend, toy_benchmark, ToyConfig};

use common::*;

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Labels over `n` items drawing on at least two identities.
fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    loop {
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        if y.iter().any(|&c| c != y[0]) {
            return y;
        }
    }
}

fn loss_oracles() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut check = |what: &str, got: f64, want: f64| {
        let e = (got - want).abs();
        assert!(e < 1e-6, "{what}: implementation {got} vs oracle {want}");
        worst = worst.max(e);
    };
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(2..=32);
        let (v, t) = (random_mat(&mut rng, n, d), random_mat(&mut rng, n, d));
        let (vr, tr) = (rows(&v), rows(&t));
        let tau = rng.random_range(0.5..20.0);

        let c = contrastive_loss(&EmbeddingBatch::new(v.clone(), t.clone()).unwrap(), tau).unwrap();
        let (i2t, t2i, con) = oracle_contrastive(&vr, &tr, tau);
        check("L_I2T", c.i2t, i2t);
        check("L_T2I", c.t2i, t2i);
        check("L_con", c.con, con);

        let vocab = rng.random_range(5..60);
        let m = rng.random_range(1..=n);
        let logits = Mat::from_shape_fn((m, vocab), |_| rng.random_range(-8.0..8.0));
        let targets: Vec<u32> = (0..m).map(|_| rng.random_range(0..vocab as u32)).collect();
        check("L_mlm", mlm_loss(&logits, &targets).unwrap(), oracle_mlm(&rows(&logits), &targets));

        let classes = rng.random_range(2..=8);
        let y = random_labels(&mut rng, n, classes);
        let w = random_mat(&mut rng, d, classes);
        let id = oracle_id(&vr, &tr, &y, &rows(&w));
        check("L_id", id_loss(&v, &t, &y, &w).unwrap(), id);
        let rk = oracle_ranking(&vr, &tr, &y, 0.2);
        check("L_rk", ranking_loss(&v, &t, &y, 0.2).unwrap(), rk);
        check("L_pgu", pgu_loss(&v, &t, &y, &w, 0.2).unwrap(), id + rk);
    }
    format!("5 losses x 100 batches, max |diff| {worst:.1e}")
}

fn gradient_checks() -> String {
    let mut report = Vec::new();
    for beta in [0u8, 1] {
        let model = tiny_model(None, 11);
        let batch = tiny_pretrain_batch(5);
        let loss = |m: &Model| {
            let (mut tape, p) = m.params.to_tape();
            let obj = pretrain_objective(m, &mut tape, &p, &batch, beta).unwrap();
            tape.scalar(obj.total)
        };
        let analytic = |m: &Model| {
            let (mut tape, p) = m.params.to_tape();
            let obj = pretrain_objective(m, &mut tape, &p, &batch, beta).unwrap();
            let g = tape.backward(obj.total);
            p.iter().map(|&v| g.get(v).cloned()).collect()
        };
        let mut cover = vec!["visual.", "text.", "log_tau"];
        if beta == 1 {
            cover.push("text.mlm");
        }
        let r = grad_check(&model, &loss, &analytic, 24, &cover, 100 + beta as u64);
        assert!(r.max_rel_error < 1e-4, "L_pre (beta={beta}): {r:?}");
        report.push(format!("L_pre b={beta} {}@{:.1e}", r.checked, r.max_rel_error));
    }
    for gamma in [0u8, 1] {
        let model = tiny_model(Some(tiny_head(gamma == 1)), 12);
        let batch = tiny_finetune_batch(6);
        let loss = |m: &Model| {
            let (mut tape, p) = m.params.to_tape();
            let obj = finetune_objective(m, &mut tape, &p, &batch, gamma, 0.2).unwrap();
            tape.scalar(obj.total)
        };
        let analytic = |m: &Model| {
            let (mut tape, p) = m.params.to_tape();
            let obj = finetune_objective(m, &mut tape, &p, &batch, gamma, 0.2).unwrap();
            let g = tape.backward(obj.total);
            p.iter().map(|&v| g.get(v).cloned()).collect()
        };
        let mut cover = vec!["visual.", "text.", "head.classifier"];
        if gamma == 1 {
            cover.extend(["pgu.prototypes", "pgu.map_", "pgu.classifier"]);
        }
        let r = grad_check(&model, &loss, &analytic, 24, &cover, 200 + gamma as u64);
        assert!(r.max_rel_error < 1e-4, "L_ft (gamma={gamma}): {r:?}");
        report.push(format!("L_ft g={gamma} {}@{:.1e}", r.checked, r.max_rel_error));
    }
    report.join(", ")
}

fn softmax(x: &[f64], scale: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (scale * (v - m)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn conquer_stage() -> String {
    let ontology = AttributeOntology::default_ontology();
    let toy = ToyConfig {
        identities: 50,
        images_per_identity: 4,
        ..ToyConfig::default()
    };
    let bench = toy_benchmark(&ontology, &toy, 21).unwrap();
    let backend = toy_backend(&ontology, &bench.truth, 21).unwrap();
    let bank = PromptBank::build(&ontology, &backend).unwrap();
    let (mut required, mut optional, mut included) = (0, 0, 0);
    for r in &bench.images.records {
        let img = backend
            .embed_image(&ImageRecord::new(r.image_id.clone(), record_bytes(r, Path::new(".")).unwrap()))
            .unwrap();
        let truth = &bench.truth[&r.image_id];
        for cat in ontology.required() {
            let (phrase, _) = select_required(&img, cat, &bank).unwrap();
            assert_eq!(phrase.surface, truth[&cat.name], "{} / {}", r.image_id, cat.name);
            required += 1;
        }
        for cat in ontology.optional() {
            let (chosen, _) = select_optional(&img, cat, &bank, 0.9, 100.0).unwrap();
            // Brute-force gate from raw prompt embeddings.
            let cands = cat.candidates();
            let sims: Vec<f64> = cands
                .iter()
                .map(|p| cos(img.as_slice(), backend.embed_text(&to_prompt(cat, p).unwrap()).unwrap().as_slice()))
                .collect();
            let probs = softmax(&sims, 100.0);
            let null = cands.len() - 1;
            let expected = (0..null).find(|&k| probs[k] > 0.9).map(|k| cands[k].surface.clone());
            assert_eq!(chosen.map(|p| p.surface), expected, "{} / {}", r.image_id, cat.name);
            included += expected.is_some() as usize;
            optional += 1;
        }
    }
    format!(
        "{} images: {required}/{required} required recovered, {optional} optional gates agree ({included} included)",
        bench.images.len()
    )
}

fn generation_determinism() -> String {
    let ontology = AttributeOntology::default_ontology();
    let templates = default_templates();
    let toy = ToyConfig {
        identities: 125,
        ..ToyConfig::default()
    };
    let bench = toy_benchmark(&ontology, &toy, 33).unwrap();
    let backend = toy_backend(&ontology, &bench.truth, 33).unwrap();
    let bank = PromptBank::build(&ontology, &backend).unwrap();
    let config = GeneratorConfig::default();
    let gen = CaptionGenerator {
        ontology: &ontology,
        templates: &templates,
        backend: &backend,
        bank: &bank,
        config: &config,
    };
    let run = |workers| {
        let m = caption_manifest(&gen, &bench.images, Path::new("."), 33, workers).unwrap();
        let text: Vec<String> = m.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        (m, text.join("\n"))
    };
    let (manifest, first) = run(1);
    assert_eq!(manifest.len(), 1000);
    for workers in [1, 2, 4] {
        assert!(run(workers).1 == first, "output differs with {workers} workers");
    }

    // Independent tally from the chosen templates' slot lists.
    let by_id: BTreeMap<u32, _> = templates.iter().map(|t| (t.id, t)).collect();
    let mut tally: BTreeMap<String, usize> = OPTIONAL_CATEGORIES.iter().map(|c| ((*c).to_owned(), 0)).collect();
    for r in &manifest.records {
        for slot in &by_id[&r.template_id.unwrap()].slots {
            if let Some(c) = tally.get_mut(slot) {
                *c += 1;
            }
        }
    }
    let stats = corpus_stats(&manifest);
    assert_eq!(stats.optional_counts, tally);
    assert_eq!(stats.caption_count, 1000);
    assert_eq!(stats.total_optional, tally.values().sum::<usize>());

    let vocab = Vocabulary::build(manifest.records.iter().map(|r| r.caption.as_str()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut eligible, mut masked) = (0usize, 0usize);
    while eligible < 10_000 {
        for r in &manifest.records {
            let t = tokenize(&r.caption, &vocab, MAX_TEXT_LEN);
            eligible += t.content_len() - 1;
            masked += mask_tokens(&t, 0.15, vocab.len(), &mut rng).unwrap().positions.len();
        }
    }
    let rate = masked as f64 / eligible as f64;
    assert!((0.14..=0.16).contains(&rate), "masked fraction {rate}");
    format!(
        "1000 captions identical across runs and 1/2/4 workers, stats match tally ({} optional), mask rate {rate:.4} over {eligible} tokens",
        stats.total_optional
    )
}

/// Rank-1 of untrained encoders.
fn chance_rank1(seed: u64) -> f64 {
    let manifest = toy_manifest(seed);
    evaluate(&random_init_checkpoint(&manifest, seed), &manifest, Path::new(".")).unwrap().rank1
}

fn toy_end_to_end() -> String {
    const SEEDS: [u64; 3] = [1, 2, 3];
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let chance = mean(&SEEDS.map(chance_rank1));

    let mut full = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let start = Instant::now();
        full.push(toy_rank1(seed, 1, 1));
        slowest = slowest.max(start.elapsed());
    }
    let no_mlm = SEEDS.map(|s| toy_rank1(s, 0, 1));
    let no_pgu = SEEDS.map(|s| toy_rank1(s, 1, 0));
    let summary = format!(
        "Rank-1 {:?} (chance {chance:.3}), slowest run {:.1}s; w/o MLM {:?}; w/o L_pgu {:?}",
        full,
        slowest.as_secs_f64(),
        no_mlm,
        no_pgu
    );
    let mut failures = Vec::new();
    if full.iter().any(|&r| r < 0.9) {
        failures.push("Rank-1 below 0.90");
    }
    if slowest >= Duration::from_secs(300) {
        failures.push("pipeline slower than 5 minutes");
    }
    if mean(&full) < mean(&no_mlm) {
        failures.push("mean Rank-1 with MLM is below without MLM");
    }
    if mean(&full) < mean(&no_pgu) {
        failures.push("mean Rank-1 with L_pgu is below without L_pgu");
    }
    assert!(failures.is_empty(), "{}: {summary}", failures.join("; "));
    summary
}

fn metric_correctness() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let g = rng.random_range(1..=50);
        let q = rng.random_range(1..=10);
        let ids = rng.random_range(1..=g.min(12));
        let gallery_ids: Vec<u32> = (0..g).map(|i| if i < ids { i as u32 } else { rng.random_range(0..ids as u32) }).collect();
        let query_ids: Vec<u32> = (0..q).map(|_| rng.random_range(0..ids as u32)).collect();
        let (queries, gallery) = (random_mat(&mut rng, q, 6), random_mat(&mut rng, g, 6));
        let run = RetrievalRun::new(
            (0..q).map(|i| format!("q{i}")).collect(),
            query_ids.clone(),
            &queries,
            gallery_ids.clone(),
            &gallery,
        )
        .unwrap();
        let scores: Vec<Vec<f64>> = rows(&queries)
            .iter()
            .map(|a| rows(&gallery).iter().map(|b| cos(a, b)).collect())
            .collect();
        let mut prev = 0.0;
        for k in [1, 5, 10] {
            let got = rank_k(&run, k).unwrap();
            assert_eq!(got, oracle_rank_k(&scores, &query_ids, &gallery_ids, k), "k={k}");
            assert!(got >= prev && (0.0..=1.0).contains(&got));
            prev = got;
        }
    }
    "1000 random runs agree with brute force for k in {1,5,10}; monotone".into()
}

fn invariances() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(2..=32);
        let (v, t) = (random_mat(&mut rng, n, d), random_mat(&mut rng, n, d));
        let tau = rng.random_range(0.5..10.0);
        let base = contrastive_loss(&EmbeddingBatch::new(v.clone(), t.clone()).unwrap(), tau).unwrap();
        let (cv, ct) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
        let scaled = contrastive_loss(&EmbeddingBatch::new(&v * cv, &t * ct).unwrap(), tau).unwrap();
        let e = (scaled.con - base.con).abs();
        assert!(e <= 1e-9, "rescaling moved L_con by {e}");
        worst = worst.max(e);
        let swapped = contrastive_loss(&EmbeddingBatch::new(t.clone(), v.clone()).unwrap(), tau).unwrap();
        assert!((swapped.i2t - base.t2i).abs() <= 1e-9 && (swapped.t2i - base.i2t).abs() <= 1e-9);
        assert!((swapped.con - base.con).abs() <= 1e-9);
    }
    let separated = ndarray::array![[1.0, -1.0], [-1.0, 1.0]];
    assert_eq!(ranking_loss_from_similarity(&separated, &[0, 1], 0.2).unwrap(), 0.0);
    let eye = Mat::eye(4);
    assert_eq!(ranking_loss(&eye, &eye, &[0, 1, 2, 3], 0.2).unwrap(), 0.0);
    format!("rescale max |diff| {worst:.1e}, V/T swap exchanges L_I2T/L_T2I, separated hinge = 0")
}

fn main() {
    let criteria: [(&str, fn() -> String); 7] = [
        ("loss-oracle equivalence", loss_oracles),
        ("gradient checks", gradient_checks),
        ("conquer-stage correctness", conquer_stage),
        ("generation determinism and statistics", generation_determinism),
        ("toy end-to-end", toy_end_to_end),
        ("metric correctness", metric_correctness),
        ("invariance suite", invariances),
    ];
    let limits = [30, 120, 30, 0, 0, 0, 0];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, ((name, f), limit)) in criteria.iter().zip(limits).enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(_) if limit > 0 && secs >= limit as f64 => Err(format!("took {secs:.1}s, limit {limit}s")),
            Ok(detail) => Ok(detail),
            Err(e) => Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
