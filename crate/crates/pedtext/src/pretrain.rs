//! Pre-training on image–caption pairs: symmetric contrastive loss over the
//! in-batch similarity matrix plus an optional masked-language-model term.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::checkpoint::{Checkpoint, Stage};
use crate::data::{
    epoch_batches, tokenize, BatchMode, DatasetManifest, ImageSource, PatchGridSpec, PersonRecord, Split,
    TokenizedText, Vocabulary, MAX_TEXT_LEN,
};
use crate::error::{Error, Result};
use crate::model::{
    load_visuals, EncoderConfig, Model, ModelConfig, Temperature, TowerConfig, VisualInput,
};
use crate::optim::{warmup_factor, GroupRates, Optimizer, OptimizerConfig, OptimizerKind};

/// Encoder sizes; input kind and vocabulary size come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub text_layers: usize,
    pub visual_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp: usize,
    pub embed_dim: usize,
    /// Chunks an inline feature vector is split into.
    pub feature_tokens: usize,
    pub patch_grid: PatchGridSpec,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            text_layers: 2,
            visual_layers: 2,
            width: 32,
            heads: 2,
            mlp: 64,
            embed_dim: 32,
            feature_tokens: 1,
            patch_grid: PatchGridSpec::default(),
        }
    }
}

impl ArchConfig {
    pub fn encoder_config(&self, sample: &PersonRecord, vocab_size: usize) -> Result<EncoderConfig> {
        let visual_input = match sample.image()? {
            ImageSource::Features(f) => VisualInput::Features {
                dim: f.len(),
                tokens: self.feature_tokens,
            },
            ImageSource::Path(_) => VisualInput::Patches(self.patch_grid),
        };
        let tower = |layers| TowerConfig {
            layers,
            width: self.width,
            heads: self.heads,
            mlp: self.mlp,
        };
        let cfg = EncoderConfig {
            visual_input,
            visual: tower(self.visual_layers),
            text: tower(self.text_layers),
            vocab_size,
            max_len: MAX_TEXT_LEN,
            embed_dim: self.embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// 1 adds the MLM term, 0 trains the contrastive loss alone.
    pub beta: u8,
    pub mask_rate: f64,
    pub temperature: Temperature,
    /// Log a loss line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            epochs: 15,
            batch_size: 512,
            lr: 1e-5,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            beta: 1,
            mask_rate: 0.15,
            temperature: Temperature::Fixed(1.0),
            log_every: 10,
        }
    }
}

pub fn check_gate(name: &str, value: u8) -> Result<()> {
    if value > 1 {
        return Err(Error::Config(format!("{name} must be 0 or 1")));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_gate("beta", self.beta)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive batches need at least 2 pairs".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("mask_rate and warmup_fraction must lie in [0, 1]".into()));
        }
        GroupRates::uniform(self.lr).validate()
    }
}

/// Paired global embeddings; row `i` of `v` matches row `i` of `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    v: Mat,
    t: Mat,
}

impl EmbeddingBatch {
    pub fn new(v: Mat, t: Mat) -> Result<Self> {
        if v.dim() != t.dim() {
            return Err(Error::Contract(format!("V is {:?} but T is {:?}", v.dim(), t.dim())));
        }
        if v.nrows() < 2 {
            return Err(Error::Contract("a contrastive batch needs N ≥ 2".into()));
        }
        if v.iter().chain(t.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("embedding batch contains NaN or Inf".into()));
        }
        Ok(Self { v, t })
    }

    pub fn v(&self) -> &Mat {
        &self.v
    }

    pub fn t(&self) -> &Mat {
        &self.t
    }

    /// Cosine similarity matrix, `S[i][j] = cos(v_i, t_j)`.
    pub fn similarity(&self) -> Mat {
        let mut tape = Tape::new();
        let v = tape.constant(self.v.clone());
        let t = tape.constant(self.t.clone());
        let s = cosine_matrix(&mut tape, v, t);
        tape.value(s).clone()
    }
}

pub(crate) fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Var {
    let a = tape.l2_normalize_rows(a);
    let b = tape.l2_normalize_rows(b);
    tape.matmul_t(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLoss {
    pub i2t: f64,
    pub t2i: f64,
    pub con: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveVars {
    pub i2t: Var,
    pub t2i: Var,
    pub con: Var,
}

fn diagonal_nll(tape: &mut Tape, logits: Var) -> Var {
    let n = tape.value(logits).nrows();
    let lp = tape.log_softmax_rows(logits);
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let picked = tape.pick(lp, &diag);
    let mean = tape.mean(picked);
    tape.scale(mean, -1.0)
}

/// Symmetric contrastive loss. `scale` is a `1×1` node multiplying the
/// cosine similarities.
pub fn contrastive_graph(tape: &mut Tape, v: Var, t: Var, scale: Var) -> ContrastiveVars {
    let s = cosine_matrix(tape, v, t);
    let logits = tape.scale_by(s, scale);
    let i2t = diagonal_nll(tape, logits);
    let cols = tape.transpose(logits);
    let t2i = diagonal_nll(tape, cols);
    let sum = tape.add(i2t, t2i);
    let con = tape.scale(sum, 0.5);
    ContrastiveVars { i2t, t2i, con }
}

pub fn contrastive_loss(batch: &EmbeddingBatch, tau: f64) -> Result<ContrastiveLoss> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature scale must be positive, got {tau}")));
    }
    let mut tape = Tape::new();
    let v = tape.constant(batch.v.clone());
    let t = tape.constant(batch.t.clone());
    let scale = tape.constant(Mat::from_elem((1, 1), tau));
    let c = contrastive_graph(&mut tape, v, t, scale);
    Ok(ContrastiveLoss {
        i2t: tape.scalar(c.i2t),
        t2i: tape.scalar(c.t2i),
        con: tape.scalar(c.con),
    })
}

/// A caption with some positions hidden for MLM.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedText {
    pub original: Vec<u32>,
    pub masked: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

impl MaskedText {
    /// The corrupted ids without trailing padding.
    pub fn masked_content(&self) -> &[u32] {
        let len = self.original.iter().take_while(|&&i| i != Vocabulary::PAD).count();
        &self.masked[..len]
    }
}

/// Selects each non-`[CLS]`, non-pad position with probability `rate`
/// (forcing one if none is drawn) and corrupts selected positions:
/// 80% `[MASK]`, 10% a random regular token, 10% unchanged.
pub fn mask_tokens<R: Rng + ?Sized>(
    text: &TokenizedText,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedText> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} is outside [0, 1]")));
    }
    let first_regular = Vocabulary::SPECIALS.len() as u32;
    if vocab_size as u32 <= first_regular {
        return Err(Error::Contract("vocabulary has no regular tokens".into()));
    }
    let len = text.content_len();
    if len < 2 {
        return Err(Error::Contract("caption has no maskable tokens".into()));
    }
    let mut positions: Vec<usize> = (1..len).filter(|_| rng.random_bool(rate)).collect();
    if positions.is_empty() {
        positions.push(rng.random_range(1..len));
    }
    let mut masked = text.ids.clone();
    for &p in &positions {
        let u: f64 = rng.random();
        if u < 0.8 {
            masked[p] = Vocabulary::MASK;
        } else if u < 0.9 {
            masked[p] = rng.random_range(first_regular..vocab_size as u32);
        }
    }
    let targets = positions.iter().map(|&p| text.ids[p]).collect();
    Ok(MaskedText {
        original: text.ids.clone(),
        masked,
        positions,
        targets,
    })
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn mlm_graph(tape: &mut Tape, logits: Var, targets: &[u32]) -> Var {
    let lp = tape.log_softmax_rows(logits);
    let coords: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t as usize)).collect();
    let picked = tape.pick(lp, &coords);
    let mean = tape.mean(picked);
    tape.scale(mean, -1.0)
}

/// MLM loss from logits at the masked positions (one row per target).
pub fn mlm_loss(logits: &Mat, targets: &[u32]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Contract("no masked positions".into()));
    }
    if logits.nrows() != targets.len() {
        return Err(Error::Contract(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= logits.ncols()) {
        return Err(Error::Contract(format!("target {t} is outside the vocabulary")));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = mlm_graph(&mut tape, l, targets);
    Ok(tape.scalar(loss))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub i2t: f64,
    pub t2i: f64,
    pub con: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm: Option<f64>,
    pub pre: f64,
    pub beta: u8,
}

/// Inputs for one step: image inputs, clean caption ids (no padding), and
/// masked captions when the MLM term is on.
#[derive(Clone, Debug, Default)]
pub struct PretrainBatch {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<u32>>,
    pub masked: Vec<MaskedText>,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainObjective {
    pub total: Var,
    pub contrastive: ContrastiveVars,
    pub mlm: Option<Var>,
}

/// Builds `L_con + β·L_mlm` on `tape`.
pub fn pretrain_objective(
    model: &Model,
    tape: &mut Tape,
    p: &[Var],
    batch: &PretrainBatch,
    beta: u8,
) -> Result<PretrainObjective> {
    check_gate("beta", beta)?;
    if batch.images.len() != batch.texts.len() || batch.images.len() < 2 {
        return Err(Error::Contract(format!(
            "a batch needs N ≥ 2 image–text pairs, got {} images and {} texts",
            batch.images.len(),
            batch.texts.len()
        )));
    }
    let images: Vec<&[f64]> = batch.images.iter().map(Vec::as_slice).collect();
    let texts: Vec<&[u32]> = batch.texts.iter().map(Vec::as_slice).collect();
    let v = model.encode_images(tape, p, &images)?;
    let t = model.encode_texts(tape, p, &texts)?;
    let scale = model.temperature(tape, p);
    let contrastive = contrastive_graph(tape, v.pooled, t.pooled, scale);
    if beta == 0 {
        return Ok(PretrainObjective {
            total: contrastive.con,
            contrastive,
            mlm: None,
        });
    }
    if batch.masked.len() != batch.texts.len() {
        return Err(Error::Contract("the MLM term needs one masked caption per pair".into()));
    }
    let masked: Vec<&[u32]> = batch.masked.iter().map(MaskedText::masked_content).collect();
    let enc = model.encode_texts(tape, p, &masked)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (m, seg) in batch.masked.iter().zip(&enc.segments) {
        rows.extend(m.positions.iter().map(|&pos| seg.start + pos));
        targets.extend_from_slice(&m.targets);
    }
    let logits = model.mlm_logits(tape, p, enc.hidden, &rows);
    let mlm = mlm_graph(tape, logits, &targets);
    let total = tape.add(contrastive.con, mlm);
    Ok(PretrainObjective {
        total,
        contrastive,
        mlm: Some(mlm),
    })
}

/// One optimizer step on the pre-training objective.
pub fn pretrain_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &PretrainBatch,
    beta: u8,
    rates: &GroupRates,
    batch_id: usize,
) -> Result<LossReport> {
    let (mut tape, p) = model.params.to_tape();
    let obj = pretrain_objective(model, &mut tape, &p, batch, beta)?;
    let report = LossReport {
        i2t: tape.scalar(obj.contrastive.i2t),
        t2i: tape.scalar(obj.contrastive.t2i),
        con: tape.scalar(obj.contrastive.con),
        mlm: obj.mlm.map(|m| tape.scalar(m)),
        pre: tape.scalar(obj.total),
        beta,
    };
    if !report.pre.is_finite() {
        return Err(Error::Numeric(format!(
            "batch {batch_id}: non-finite loss (L_I2T={}, L_T2I={}, L_mlm={:?})",
            report.i2t, report.t2i, report.mlm
        )));
    }
    let grads = tape.backward(obj.total);
    optimizer.step(&mut model.params, &p, &grads, rates);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<R> {
    pub epoch: usize,
    pub step: usize,
    pub report: R,
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord<LossReport>>,
}

/// Training pairs of a manifest: records in the train split (untagged
/// records count as train), each with a non-empty caption.
pub(crate) fn training_records(manifest: &DatasetManifest) -> Result<Vec<&PersonRecord>> {
    let train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Validation("manifest has no training records".into()));
    }
    if let Some(r) = train.iter().find(|r| r.caption.trim().is_empty()) {
        return Err(Error::Validation(format!("record {} has an empty caption", r.image_id)));
    }
    Ok(train)
}

pub fn pretrain_loop(
    manifest: &DatasetManifest,
    base: &Path,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainRun> {
    config.validate()?;
    let train = training_records(manifest)?;
    let vocab = Vocabulary::build(train.iter().map(|r| r.caption.as_str()));
    let encoder = config.arch.encoder_config(train[0], vocab.len())?;
    let input = encoder.visual_input;
    let mut model = Model::new(
        ModelConfig {
            encoder,
            temperature: config.temperature,
            head: None,
        },
        seed,
    )?;
    let mut optimizer = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay: config.weight_decay,
            ..OptimizerConfig::default()
        },
        &model.params,
    );
    let images = load_visuals(&train, &input, base, None).map_err(|e| e.in_stage("load"))?;
    let tokens: Vec<TokenizedText> = train
        .iter()
        .map(|r| tokenize(&r.caption, &vocab, MAX_TEXT_LEN))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);

    let per_epoch = train.len() / config.batch_size.max(1);
    let total = config.epochs * per_epoch;
    let mut history = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in epoch_batches(train.len(), config.batch_size, seed, epoch, BatchMode::Contrastive)? {
            let masked = if config.beta == 1 {
                idx.iter()
                    .map(|&i| mask_tokens(&tokens[i], config.mask_rate, vocab.len(), &mut rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch = PretrainBatch {
                images: idx.iter().map(|&i| images[i].clone()).collect(),
                texts: idx.iter().map(|&i| tokens[i].content().to_vec()).collect(),
                masked,
            };
            let rates = GroupRates::uniform(config.lr * warmup_factor(step, total, config.warmup_fraction));
            let report = pretrain_step(&mut model, &mut optimizer, &batch, config.beta, &rates, step)
                .map_err(|e| e.in_stage("pretrain"))?;
            if config.log_every > 0 && step % config.log_every == 0 {
                log::info!(
                    "pretrain epoch {epoch} step {step}: L_con {:.4} L_mlm {} L_pre {:.4}",
                    report.con,
                    report.mlm.map_or("-".into(), |m| format!("{m:.4}")),
                    report.pre
                );
            }
            history.push(StepRecord { epoch, step, report });
            step += 1;
        }
    }
    let checkpoint = Checkpoint::new(
        Stage::Pretrain,
        seed,
        &model,
        serde_json::to_value(config)?,
        &vocab,
        Some(&optimizer),
        &rng,
    );
    Ok(PretrainRun { checkpoint, history })
}
