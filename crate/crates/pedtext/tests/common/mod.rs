//! Helpers shared by the integration tests: tiny models, finite-difference
//! gradient checks, brute-force loss oracles and the toy pipeline.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pedtext::checkpoint::Checkpoint;
use pedtext::data::{tokenize, DatasetManifest, Vocabulary, MAX_TEXT_LEN};
use pedtext::eval::evaluate;
use pedtext::finetune::{finetune_loop, FinetuneBatch};
use pedtext::generator::{default_templates, GeneratorConfig};
use pedtext::model::{EncoderConfig, HeadConfig, Model, ModelConfig, PguConfig, Temperature, TowerConfig};
use pedtext::ontology::AttributeOntology;
use pedtext::pretrain::{mask_tokens, pretrain_loop, PretrainBatch};
use pedtext::toy::{toy_dataset, toy_finetune_config, toy_pretrain_config, ToyConfig};

pub const CAPTIONS: [&str; 4] = [
    "a woman in a red coat with a bag",
    "a man wearing blue jeans and a hat",
    "a young man in a black jacket",
    "a woman with long hair carrying an umbrella",
];

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::build(CAPTIONS)
}

/// `d = 8` encoders with one attention block per tower over 2-token
/// feature inputs of length 8.
pub fn tiny_model(head: Option<HeadConfig>, seed: u64) -> Model {
    let tower = TowerConfig {
        layers: 1,
        width: 8,
        heads: 2,
        mlp: 16,
    };
    let encoder = EncoderConfig {
        visual: tower.clone(),
        text: tower,
        embed_dim: 8,
        ..EncoderConfig::toy(8, 2, tiny_vocab().len())
    };
    Model::new(
        ModelConfig {
            encoder,
            temperature: Temperature::Learnable(2.0),
            head,
        },
        seed,
    )
    .unwrap()
}

pub fn tiny_head(pgu: bool) -> HeadConfig {
    HeadConfig {
        classes: 3,
        pgu: pgu.then_some(PguConfig { prototypes: 2, dim: 8 }),
    }
}

pub fn random_images(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn tiny_pretrain_batch(seed: u64) -> PretrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = tiny_vocab();
    let tokens: Vec<_> = CAPTIONS.iter().map(|c| tokenize(c, &vocab, MAX_TEXT_LEN)).collect();
    PretrainBatch {
        images: random_images(4, 8, &mut rng),
        texts: tokens.iter().map(|t| t.content().to_vec()).collect(),
        masked: tokens
            .iter()
            .map(|t| mask_tokens(t, 0.3, vocab.len(), &mut rng).unwrap())
            .collect(),
    }
}

pub fn tiny_finetune_batch(seed: u64) -> FinetuneBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = tiny_vocab();
    FinetuneBatch {
        images: random_images(4, 8, &mut rng),
        texts: CAPTIONS
            .iter()
            .map(|c| tokenize(c, &vocab, MAX_TEXT_LEN).content().to_vec())
            .collect(),
        labels: vec![0, 1, 2, 0],
    }
}

/// Result of comparing analytic gradients to central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// rounding noise on near-zero gradients from dominating.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `loss` at `samples` random scalars plus one scalar of every
/// parameter whose name starts with one of `must_cover`.
pub fn grad_check(
    model: &Model,
    loss: &dyn Fn(&Model) -> f64,
    analytic: &dyn Fn(&Model) -> Vec<Option<pedtext::autograd::Mat>>,
    samples: usize,
    must_cover: &[&str],
    seed: u64,
) -> GradCheck {
    let grads = analytic(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = model.params.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut k: usize| {
        for (i, &s) in sizes.iter().enumerate() {
            if k < s {
                return (i, k);
            }
            k -= s;
        }
        unreachable!()
    };
    let mut picks: Vec<(usize, usize)> = (0..samples).map(|_| locate(rng.random_range(0..total))).collect();
    for prefix in must_cover {
        let (i, p) = model
            .params
            .iter()
            .enumerate()
            .find(|(_, p)| p.name.starts_with(prefix))
            .unwrap_or_else(|| panic!("no parameter named {prefix}*"));
        picks.push((i, rng.random_range(0..p.value.len())));
    }

    let h = 1e-5;
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (i, k) in picks {
        let ncols = model.params.get(i).value.ncols();
        let (r, c) = (k / ncols, k % ncols);
        let mut plus = model.clone();
        plus.params.value_mut(i)[[r, c]] += h;
        let mut minus = model.clone();
        minus.params.value_mut(i)[[r, c]] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let a = grads[i].as_ref().map_or(0.0, |g| g[[r, c]]);
        let e = rel_error(a, numeric);
        if e >= out.max_rel_error {
            out.max_rel_error = e;
            out.worst = format!("{}[{r},{c}]: analytic {a:.3e} numeric {numeric:.3e}", model.params.get(i).name);
        }
        out.checked += 1;
    }
    out
}

// ---- brute-force oracles over plain vectors ----

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `−log softmax(logits)[target]` via log-sum-exp.
pub fn nll(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// `(L_I2T, L_T2I, L_con)` for paired rows of `v` and `t`.
pub fn oracle_contrastive(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> (f64, f64, f64) {
    let n = v.len();
    let s: Vec<Vec<f64>> = v.iter().map(|a| t.iter().map(|b| tau * cos(a, b)).collect()).collect();
    let i2t = (0..n).map(|i| nll(&s[i], i)).sum::<f64>() / n as f64;
    let t2i = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| s[i][j]).collect();
            nll(&col, j)
        })
        .sum::<f64>()
        / n as f64;
    (i2t, t2i, (i2t + t2i) / 2.0)
}

pub fn oracle_mlm(logits: &[Vec<f64>], targets: &[u32]) -> f64 {
    logits.iter().zip(targets).map(|(l, &y)| nll(l, y as usize)).sum::<f64>() / targets.len() as f64
}

/// Rows of `x · W` for a `d × C` classifier given as rows of length `C`.
fn classify(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let classes = w[0].len();
    (0..classes).map(|c| x.iter().zip(w).map(|(xi, row)| xi * row[c]).sum()).collect()
}

pub fn oracle_id(v: &[Vec<f64>], t: &[Vec<f64>], y: &[usize], w: &[Vec<f64>]) -> f64 {
    let n = v.len() as f64;
    v.iter()
        .zip(t)
        .zip(y)
        .map(|((a, b), &c)| nll(&classify(a, w), c) + nll(&classify(b, w), c))
        .sum::<f64>()
        / n
}

/// Hardest negative strictly below the positive, else hardest negative.
pub fn oracle_mine(sims: &[f64], labels: &[usize], anchor: usize, positive: f64) -> Option<usize> {
    let negatives: Vec<usize> = (0..sims.len()).filter(|&j| labels[j] != anchor).collect();
    let argmax = |cands: &[usize]| -> Option<usize> {
        let mut best: Option<usize> = None;
        for &j in cands {
            if best.is_none() || sims[j] > sims[best.unwrap()] {
                best = Some(j);
            }
        }
        best
    };
    let semi: Vec<usize> = negatives.iter().copied().filter(|&j| sims[j] < positive).collect();
    argmax(&semi).or_else(|| argmax(&negatives))
}

pub fn oracle_ranking(v: &[Vec<f64>], t: &[Vec<f64>], y: &[usize], alpha: f64) -> f64 {
    let n = v.len();
    let s: Vec<Vec<f64>> = v.iter().map(|a| t.iter().map(|b| cos(a, b)).collect()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let row = s[i].clone();
        let col: Vec<f64> = (0..n).map(|k| s[k][i]).collect();
        let tn = oracle_mine(&row, y, y[i], s[i][i]).unwrap();
        let vn = oracle_mine(&col, y, y[i], s[i][i]).unwrap();
        total += (alpha - s[i][i] + s[i][tn]).max(0.0) + (alpha - s[i][i] + s[vn][i]).max(0.0);
    }
    total / n as f64
}

/// Fraction of queries with a correct identity in the top `k` after a full
/// stable sort by descending score.
pub fn oracle_rank_k(scores: &[Vec<f64>], query_ids: &[u32], gallery_ids: &[u32], k: usize) -> f64 {
    let mut hits = 0;
    for (q, row) in scores.iter().enumerate() {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        // Insertion sort: an independent ordering path.
        for a in 1..idx.len() {
            let mut b = a;
            while b > 0 && row[idx[b]] > row[idx[b - 1]] {
                idx.swap(b, b - 1);
                b -= 1;
            }
        }
        if idx.iter().take(k).any(|&g| gallery_ids[g] == query_ids[q]) {
            hits += 1;
        }
    }
    hits as f64 / scores.len() as f64
}

// ---- toy pipeline ----

pub fn toy_manifest(seed: u64) -> DatasetManifest {
    toy_dataset(
        &AttributeOntology::default_ontology(),
        &default_templates(),
        &ToyConfig::default(),
        &GeneratorConfig::default(),
        seed,
    )
    .unwrap()
}

/// Pre-trains (when `pretrain_epochs > 0`) and fine-tunes on `manifest`
/// with the toy recipe; returns the final checkpoint.
pub fn toy_train(manifest: &DatasetManifest, seed: u64, beta: u8, gamma: u8) -> Checkpoint {
    let toy = ToyConfig::default();
    let pre = pretrain_loop(manifest, Path::new("."), &toy_pretrain_config(&toy, beta), seed).unwrap();
    finetune_loop(
        manifest,
        Path::new("."),
        Some(&pre.checkpoint),
        &toy_finetune_config(&toy, gamma),
        seed,
    )
    .unwrap()
    .checkpoint
}

pub fn toy_rank1(seed: u64, beta: u8, gamma: u8) -> f64 {
    let m = toy_manifest(seed);
    evaluate(&toy_train(&m, seed, beta, gamma), &m, Path::new(".")).unwrap().rank1
}

pub fn rows(m: &pedtext::autograd::Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Untrained encoders with the toy architecture, ready for evaluation.
pub fn random_init_checkpoint(manifest: &DatasetManifest, seed: u64) -> Checkpoint {
    use pedtext::checkpoint::Stage;
    use pedtext::data::Split;
    let train = manifest.split(Split::Train);
    let vocab = Vocabulary::build(train.iter().map(|r| r.caption.as_str()));
    let cfg = toy_pretrain_config(&ToyConfig::default(), 0);
    let model = Model::new(
        ModelConfig {
            encoder: cfg.arch.encoder_config(train[0], vocab.len()).unwrap(),
            temperature: cfg.temperature,
            head: None,
        },
        seed,
    )
    .unwrap();
    Checkpoint::new(Stage::Pretrain, seed, &model, serde_json::json!({}), &vocab, None, &ChaCha8Rng::seed_from_u64(seed))
}
