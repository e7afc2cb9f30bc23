//! Supervised fine-tuning: identity classification through a classifier
//! shared by both modalities, a bidirectional semi-hard ranking loss, and
//! the same two losses on prototype-unified features.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::checkpoint::{Checkpoint, Stage};
use crate::data::{epoch_batches, tokenize, BatchMode, DatasetManifest, Vocabulary, MAX_TEXT_LEN};
use crate::error::{Error, Result};
use crate::model::{load_visuals, HeadConfig, Model, ModelConfig, PguConfig, Temperature, VisualInput};
use crate::optim::{warmup_factor, GroupRates, Optimizer, OptimizerConfig};
use crate::pretrain::{check_gate, cosine_matrix, training_records, ArchConfig, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rates: GroupRates,
    pub warmup_fraction: f64,
    pub alpha: f64,
    /// 1 builds the prototype head and adds its loss, 0 leaves it out.
    pub gamma: u8,
    pub prototypes: usize,
    /// Unified feature size; defaults to the embedding dimension.
    pub pgu_dim: Option<usize>,
    /// Random horizontal flips; only applies to image files.
    pub flip: bool,
    /// Encoder sizes when training without a pre-trained checkpoint.
    pub arch: ArchConfig,
    pub log_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            rates: GroupRates {
                visual: 1e-4,
                text: 1e-5,
                head: 1e-4,
            },
            warmup_fraction: 0.0,
            alpha: 0.2,
            gamma: 1,
            prototypes: 6,
            pgu_dim: None,
            flip: true,
            arch: ArchConfig::default(),
            log_every: 10,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_gate("gamma", self.gamma)?;
        check_alpha(self.alpha)?;
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be ≥ 1 and batch_size ≥ 2".into()));
        }
        if self.prototypes == 0 || self.pgu_dim == Some(0) {
            return Err(Error::Config("PGU needs at least one prototype and dim ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        self.rates.validate()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {y} is outside {classes} classes")));
    }
    Ok(())
}

/// `−(log ŷ_v[y] + log ŷ_t[y])`, averaged over pairs.
pub fn id_graph(tape: &mut Tape, logits_v: Var, logits_t: Var, labels: &[usize]) -> Var {
    let coords: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let mut mean_log_prob = |logits: Var| {
        let lp = tape.log_softmax_rows(logits);
        let picked = tape.pick(lp, &coords);
        tape.mean(picked)
    };
    let v = mean_log_prob(logits_v);
    let t = mean_log_prob(logits_t);
    let sum = tape.add(v, t);
    tape.scale(sum, -1.0)
}

/// Identity loss of paired embeddings under a `d × C` classifier.
pub fn id_loss(v: &Mat, t: &Mat, labels: &[usize], classifier: &Mat) -> Result<f64> {
    if v.dim() != t.dim() || v.nrows() != labels.len() || v.ncols() != classifier.nrows() {
        return Err(Error::Contract("id_loss inputs have inconsistent shapes".into()));
    }
    check_labels(labels, classifier.ncols())?;
    let mut tape = Tape::new();
    let (v, t, w) = (
        tape.constant(v.clone()),
        tape.constant(t.clone()),
        tape.constant(classifier.clone()),
    );
    let lv = tape.matmul(v, w);
    let lt = tape.matmul(t, w);
    let l = id_graph(&mut tape, lv, lt, labels);
    Ok(tape.scalar(l))
}

/// Index of the hardest negative whose similarity is still below
/// `positive`; when none is, the hardest negative overall. Candidates
/// sharing `anchor_label` are never returned. Ties go to the lower index.
pub fn mine_semi_hard(similarities: &[f64], labels: &[usize], anchor_label: usize, positive: f64) -> Result<usize> {
    if similarities.len() != labels.len() {
        return Err(Error::Contract("one label per candidate is required".into()));
    }
    let best = |pred: &dyn Fn(f64) -> bool| {
        let mut found: Option<usize> = None;
        for (j, (&s, &y)) in similarities.iter().zip(labels).enumerate() {
            if y != anchor_label && pred(s) && found.is_none_or(|b| s > similarities[b]) {
                found = Some(j);
            }
        }
        found
    };
    best(&|s| s < positive)
        .or_else(|| best(&|_| true))
        .ok_or_else(|| Error::Mining(format!("no candidate with a label other than {anchor_label}")))
}

/// Mined indices for every pair of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedNegatives {
    /// Per image anchor `i`: index of its negative text.
    pub texts: Vec<usize>,
    /// Per text anchor `i`: index of its negative image.
    pub images: Vec<usize>,
}

/// Mines both directions of a cosine matrix `s` whose diagonal holds the
/// positives.
pub fn mine_batch(s: &Mat, labels: &[usize]) -> Result<MinedNegatives> {
    let n = s.nrows();
    if s.ncols() != n || labels.len() != n {
        return Err(Error::Contract("similarity matrix must be square with one label per row".into()));
    }
    let mut texts = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = s.row(i).to_vec();
        texts.push(mine_semi_hard(&row, labels, labels[i], s[[i, i]])?);
        let col: Vec<f64> = s.column(i).to_vec();
        images.push(mine_semi_hard(&col, labels, labels[i], s[[i, i]])?);
    }
    Ok(MinedNegatives { texts, images })
}

/// Batch mean of `max(α − S[i,i] + S[i,t⁻], 0) + max(α − S[i,i] + S[v⁻,i], 0)`.
pub fn ranking_graph(tape: &mut Tape, s: Var, neg: &MinedNegatives, alpha: f64) -> Var {
    let n = neg.texts.len();
    let pos: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let to_text: Vec<(usize, usize)> = neg.texts.iter().enumerate().map(|(i, &j)| (i, j)).collect();
    let to_image: Vec<(usize, usize)> = neg.images.iter().enumerate().map(|(i, &j)| (j, i)).collect();
    let pos = tape.pick(s, &pos);
    let mut hinge = |coords: &[(usize, usize)]| {
        let negs = tape.pick(s, coords);
        let gap = tape.sub(negs, pos);
        let shifted = tape.add_const(gap, alpha);
        tape.relu(shifted)
    };
    let h_text = hinge(&to_text);
    let h_image = hinge(&to_image);
    let both = tape.add(h_text, h_image);
    let total = tape.sum(both);
    tape.scale(total, 1.0 / n as f64)
}

/// Ranking loss on a precomputed similarity matrix.
pub fn ranking_loss_from_similarity(s: &Mat, labels: &[usize], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let neg = mine_batch(s, labels)?;
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let l = ranking_graph(&mut tape, sv, &neg, alpha);
    Ok(tape.scalar(l))
}

pub fn ranking_loss(v: &Mat, t: &Mat, labels: &[usize], alpha: f64) -> Result<f64> {
    if v.dim() != t.dim() {
        return Err(Error::Contract("V and T must have the same shape".into()));
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(v.clone()), tape.constant(t.clone()));
    let s = cosine_matrix(&mut tape, a, b);
    ranking_loss_from_similarity(tape.value(s), labels, alpha)
}

/// Identity plus ranking loss on unified features.
pub fn pgu_loss(v: &Mat, t: &Mat, labels: &[usize], classifier: &Mat, alpha: f64) -> Result<f64> {
    Ok(id_loss(v, t, labels, classifier)? + ranking_loss(v, t, labels, alpha)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLossReport {
    pub id: f64,
    pub rk: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pgu: Option<f64>,
    pub ft: f64,
    pub gamma: u8,
    pub alpha: f64,
}

/// Image inputs, caption ids (no padding) and class labels.
#[derive(Clone, Debug, Default)]
pub struct FinetuneBatch {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct FinetuneObjective {
    pub total: Var,
    pub id: Var,
    pub rk: Var,
    pub pgu: Option<Var>,
}

fn id_and_rank(
    tape: &mut Tape,
    v: Var,
    t: Var,
    logits_v: Var,
    logits_t: Var,
    labels: &[usize],
    alpha: f64,
) -> Result<(Var, Var)> {
    let id = id_graph(tape, logits_v, logits_t, labels);
    let s = cosine_matrix(tape, v, t);
    let neg = mine_batch(tape.value(s), labels)?;
    let rk = ranking_graph(tape, s, &neg, alpha);
    Ok((id, rk))
}

/// Builds `L_id + L_rk + γ·L_pgu` on `tape`.
pub fn finetune_objective(
    model: &Model,
    tape: &mut Tape,
    p: &[Var],
    batch: &FinetuneBatch,
    gamma: u8,
    alpha: f64,
) -> Result<FinetuneObjective> {
    check_gate("gamma", gamma)?;
    check_alpha(alpha)?;
    let classes = model
        .classes()
        .ok_or_else(|| Error::Contract("fine-tuning needs a model with an identity head".into()))?;
    let n = batch.labels.len();
    if batch.images.len() != n || batch.texts.len() != n {
        return Err(Error::Contract("batch parts have different lengths".into()));
    }
    check_labels(&batch.labels, classes)?;
    if batch.labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::Mining("batch holds a single identity".into()));
    }
    if gamma == 1 && !model.has_pgu() {
        return Err(Error::Contract("gamma = 1 needs the prototype head".into()));
    }
    let images: Vec<&[f64]> = batch.images.iter().map(Vec::as_slice).collect();
    let texts: Vec<&[u32]> = batch.texts.iter().map(Vec::as_slice).collect();
    let v = model.encode_images(tape, p, &images)?;
    let t = model.encode_texts(tape, p, &texts)?;
    let lv = model.classify(tape, p, v.pooled)?;
    let lt = model.classify(tape, p, t.pooled)?;
    let (id, rk) = id_and_rank(tape, v.pooled, t.pooled, lv, lt, &batch.labels, alpha)?;
    let base = tape.add(id, rk);
    if gamma == 0 {
        return Ok(FinetuneObjective {
            total: base,
            id,
            rk,
            pgu: None,
        });
    }
    let vu = model.unify(tape, p, &v)?;
    let tu = model.unify(tape, p, &t)?;
    let luv = model.classify_unified(tape, p, vu)?;
    let lut = model.classify_unified(tape, p, tu)?;
    let (id_u, rk_u) = id_and_rank(tape, vu, tu, luv, lut, &batch.labels, alpha)?;
    let pgu = tape.add(id_u, rk_u);
    let total = tape.add(base, pgu);
    Ok(FinetuneObjective {
        total,
        id,
        rk,
        pgu: Some(pgu),
    })
}

pub fn finetune_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &FinetuneBatch,
    gamma: u8,
    alpha: f64,
    rates: &GroupRates,
    batch_id: usize,
) -> Result<FinetuneLossReport> {
    let (mut tape, p) = model.params.to_tape();
    let obj = finetune_objective(model, &mut tape, &p, batch, gamma, alpha)?;
    let report = FinetuneLossReport {
        id: tape.scalar(obj.id),
        rk: tape.scalar(obj.rk),
        pgu: obj.pgu.map(|v| tape.scalar(v)),
        ft: tape.scalar(obj.total),
        gamma,
        alpha,
    };
    if !report.ft.is_finite() {
        return Err(Error::Numeric(format!(
            "batch {batch_id}: non-finite loss (L_id={}, L_rk={}, L_pgu={:?})",
            report.id, report.rk, report.pgu
        )));
    }
    let grads = tape.backward(obj.total);
    optimizer.step(&mut model.params, &p, &grads, rates);
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord<FinetuneLossReport>>,
}

/// Fine-tunes from `init`, or from freshly initialised encoders when `init`
/// is `None`.
pub fn finetune_loop(
    manifest: &DatasetManifest,
    base: &Path,
    init: Option<&Checkpoint>,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    config.validate()?;
    let train = training_records(manifest)?;
    let identities: Vec<u32> = train
        .iter()
        .map(|r| {
            r.identity
                .ok_or_else(|| Error::Validation(format!("record {} has no identity", r.image_id)))
        })
        .collect::<Result<BTreeSet<_>>>()?
        .into_iter()
        .collect();
    let labels: Vec<usize> = train
        .iter()
        .map(|r| identities.binary_search(&r.identity.expect("checked")).expect("present"))
        .collect();

    let vocab = match init {
        Some(ck) => ck.vocabulary()?,
        None => Vocabulary::build(train.iter().map(|r| r.caption.as_str())),
    };
    let encoder_model = match init {
        Some(ck) => ck.model()?,
        None => Model::new(
            ModelConfig {
                encoder: config.arch.encoder_config(train[0], vocab.len())?,
                temperature: Temperature::default(),
                head: None,
            },
            seed,
        )?,
    };
    let embed_dim = encoder_model.config.encoder.embed_dim;
    let head = HeadConfig {
        classes: identities.len(),
        pgu: (config.gamma == 1).then(|| PguConfig {
            prototypes: config.prototypes,
            dim: config.pgu_dim.unwrap_or(embed_dim),
        }),
    };
    let mut model = encoder_model.with_head(head, seed)?;
    let input = model.config.encoder.visual_input;
    let flip = config.flip && matches!(input, VisualInput::Patches(_));
    let mut optimizer = Optimizer::new(OptimizerConfig::default(), &model.params);
    let tokens: Vec<Vec<u32>> = train
        .iter()
        .map(|r| tokenize(&r.caption, &vocab, MAX_TEXT_LEN).content().to_vec())
        .collect();
    let preloaded = if flip {
        None
    } else {
        Some(load_visuals(&train, &input, base, None).map_err(|e| e.in_stage("load"))?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);

    let make_batch = |idx: &[usize], rng: &mut ChaCha8Rng| -> Result<FinetuneBatch> {
        let images = match &preloaded {
            Some(all) => idx.iter().map(|&i| all[i].clone()).collect(),
            None => {
                let recs: Vec<_> = idx.iter().map(|&i| train[i]).collect();
                let flips: Vec<bool> = idx.iter().map(|_| rng.random_bool(0.5)).collect();
                load_visuals(&recs, &input, base, Some(&flips)).map_err(|e| e.in_stage("load"))?
            }
        };
        Ok(FinetuneBatch {
            images,
            texts: idx.iter().map(|&i| tokens[i].clone()).collect(),
            labels: idx.iter().map(|&i| labels[i]).collect(),
        })
    };

    let per_epoch = train.len() / config.batch_size;
    let total = config.epochs * per_epoch;
    let mut history = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in epoch_batches(train.len(), config.batch_size, seed, epoch, BatchMode::Contrastive)? {
            let rates = config.rates.scaled(warmup_factor(step, total, config.warmup_fraction));
            let batch = make_batch(&idx, &mut rng)?;
            let report = match finetune_step(&mut model, &mut optimizer, &batch, config.gamma, config.alpha, &rates, step)
            {
                Err(Error::Mining(first)) => {
                    log::warn!("batch {step}: {first}; resampling once");
                    let idx: Vec<usize> =
                        rand::seq::index::sample(&mut rng, train.len(), config.batch_size).into_vec();
                    let batch = make_batch(&idx, &mut rng)?;
                    finetune_step(&mut model, &mut optimizer, &batch, config.gamma, config.alpha, &rates, step)
                }
                other => other,
            }
            .map_err(|e| e.in_stage("finetune"))?;
            if config.log_every > 0 && step % config.log_every == 0 {
                log::info!(
                    "finetune epoch {epoch} step {step}: L_id {:.4} L_rk {:.4} L_pgu {} L_ft {:.4}",
                    report.id,
                    report.rk,
                    report.pgu.map_or("-".into(), |v| format!("{v:.4}")),
                    report.ft
                );
            }
            history.push(StepRecord { epoch, step, report });
            step += 1;
        }
    }
    let training = serde_json::json!({
        "config": config,
        "identities": identities,
        "init": init.map(Checkpoint::config_hash),
    });
    let checkpoint = Checkpoint::new(
        Stage::Finetune,
        seed,
        &model,
        training,
        &vocab,
        Some(&optimizer),
        &rng,
    );
    Ok(FinetuneRun { checkpoint, history })
}
