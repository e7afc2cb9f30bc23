//! Toy dual encoder: transformer-style image and text towers, a per-token
//! linear projection into a shared space followed by max-pooling, an MLM
//! head, and (for fine-tuning) a shared identity classifier and a prototype
//! attention head.

use std::ops::Range;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use rayon::prelude::*;

use crate::autograd::{Mat, Tape, Var};
use crate::data::{load_patch_grid, ImageSource, PatchGridSpec, PersonRecord, Vocabulary};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Visual,
    Text,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

/// Ordered parameter storage. A parameter's index is also its [`Var`] index
/// on a tape produced by [`ParamSet::to_tape`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.params[i].value
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// A fresh tape holding every parameter as a leaf.
    pub fn to_tape(&self) -> (Tape, Vec<Var>) {
        let mut tape = Tape::new();
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        (tape, vars)
    }

    /// Copies values by name from `other`. Every parameter of `self` that
    /// exists in `other` must have the same shape.
    pub fn assign_from(&mut self, other: &ParamSet) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.dim() != p.value.dim() {
                    return Err(Error::Validation(format!(
                        "parameter {} has shape {:?}, checkpoint has {:?}",
                        p.name,
                        p.value.dim(),
                        src.value.dim()
                    )));
                }
                p.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// What the visual tower consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualInput {
    /// Inline feature vectors of `dim` values, split into `tokens` equal
    /// chunks.
    Features { dim: usize, tokens: usize },
    /// Decoded image files cut into square patches.
    Patches(PatchGridSpec),
}

impl VisualInput {
    pub fn tokens(&self) -> usize {
        match self {
            VisualInput::Features { tokens, .. } => *tokens,
            VisualInput::Patches(spec) => spec.patches(),
        }
    }

    pub fn token_dim(&self) -> usize {
        match self {
            VisualInput::Features { dim, tokens } => dim / tokens,
            VisualInput::Patches(spec) => spec.patch_dim(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.tokens() * self.token_dim()
    }
}

/// Reads one record's image in the layout `input` expects. Relative image
/// paths resolve against `base`; `flip` mirrors file images horizontally.
pub fn load_visual(record: &PersonRecord, input: &VisualInput, base: &Path, flip: bool) -> Result<Vec<f64>> {
    let fail = |message: String| Error::Input {
        id: record.image_id.clone(),
        message,
    };
    match (record.image()?, input) {
        (ImageSource::Features(f), VisualInput::Features { dim, .. }) => {
            if f.len() != *dim {
                return Err(fail(format!("feature vector has {} values, expected {dim}", f.len())));
            }
            Ok(f.to_vec())
        }
        (ImageSource::Path(p), VisualInput::Patches(spec)) => load_patch_grid(&base.join(p), spec, flip),
        (ImageSource::Features(_), VisualInput::Patches(_)) => {
            Err(fail("model expects image files, record has inline features".into()))
        }
        (ImageSource::Path(_), VisualInput::Features { .. }) => {
            Err(fail("model expects inline features, record has an image path".into()))
        }
    }
}

/// [`load_visual`] over many records, decoded in parallel, returned in order.
pub fn load_visuals(
    records: &[&PersonRecord],
    input: &VisualInput,
    base: &Path,
    flips: Option<&[bool]>,
) -> Result<Vec<Vec<f64>>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| load_visual(r, input, base, flips.is_some_and(|f| f[i])))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerConfig {
    /// Transformer blocks; 0 gives a linear encoder.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp: usize,
}

impl TowerConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.mlp == 0 {
            return Err(Error::Config(format!("{what}: sizes must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{what}: width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub visual_input: VisualInput,
    pub visual: TowerConfig,
    pub text: TowerConfig,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Shared embedding dimension after projection.
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// Small defaults for feature-vector inputs of `dim` values.
    pub fn toy(dim: usize, tokens: usize, vocab_size: usize) -> Self {
        let tower = TowerConfig {
            layers: 2,
            width: 32,
            heads: 2,
            mlp: 64,
        };
        Self {
            visual_input: VisualInput::Features { dim, tokens },
            visual: tower.clone(),
            text: tower,
            vocab_size,
            max_len: crate::data::MAX_TEXT_LEN,
            embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate("visual tower")?;
        self.text.validate("text tower")?;
        match self.visual_input {
            VisualInput::Features { dim, tokens } => {
                if dim == 0 || tokens == 0 || dim % tokens != 0 {
                    return Err(Error::Config(format!(
                        "feature dim {dim} must be a positive multiple of {tokens} tokens"
                    )));
                }
            }
            VisualInput::Patches(spec) => spec.validate()?,
        }
        if self.embed_dim == 0 || self.max_len < 2 {
            return Err(Error::Config("embed_dim must be ≥ 1 and max_len ≥ 2".into()));
        }
        if self.vocab_size <= Vocabulary::SPECIALS.len() {
            return Err(Error::Config("vocabulary has no regular tokens".into()));
        }
        Ok(())
    }
}

/// How the contrastive logit scale is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// Similarities are multiplied by this constant.
    Fixed(f64),
    /// The scale is `exp(θ)` with `θ` trained, starting from `ln(init)`.
    Learnable(f64),
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::Fixed(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PguConfig {
    pub prototypes: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub classes: usize,
    /// `None` when the granularity-unified branch is disabled.
    pub pgu: Option<PguConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub temperature: Temperature,
    pub head: Option<HeadConfig>,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct TowerIdx {
    input_w: usize,
    input_b: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    proj_w: usize,
    proj_b: usize,
}

#[derive(Clone, Debug)]
struct PguIdx {
    prototypes: usize,
    map_w: usize,
    map_b: usize,
    classifier: usize,
}

#[derive(Clone, Debug)]
struct HeadIdx {
    classifier: usize,
    pgu: Option<PguIdx>,
}

#[derive(Clone, Debug)]
struct Layout {
    visual: TowerIdx,
    text: TowerIdx,
    mlm_w: usize,
    mlm_b: usize,
    log_tau: Option<usize>,
    head: Option<HeadIdx>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        Array2::from_shape_fn((rows, cols), |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }

    /// `N(0, 1/fan_in)`
    fn weight(&mut self, rows: usize, cols: usize) -> Mat {
        self.normal(rows, cols, 1.0 / (rows as f64).sqrt())
    }
}

fn zeros(cols: usize) -> Mat {
    Mat::zeros((1, cols))
}

fn ones(cols: usize) -> Mat {
    Mat::ones((1, cols))
}

fn add_tower(
    ps: &mut ParamSet,
    init: &mut Init,
    prefix: &str,
    group: ParamGroup,
    tower: &TowerConfig,
    input_rows: usize,
    positions: usize,
    embed_dim: usize,
) -> TowerIdx {
    let w = tower.width;
    let name = |s: &str| format!("{prefix}.{s}");
    // Token embedding tables are looked up by id, other inputs go through a
    // linear map; both are stored as `input_rows × width`.
    let input_w = ps.add(name("input_w"), group, init.weight(input_rows, w));
    let input_b = ps.add(name("input_b"), group, zeros(w));
    let pos = ps.add(name("pos"), group, init.normal(positions, w, 0.02));
    let blocks = (0..tower.layers)
        .map(|l| {
            let n = |s: &str| format!("{prefix}.block{l}.{s}");
            BlockIdx {
                ln1_g: ps.add(n("ln1_g"), group, ones(w)),
                ln1_b: ps.add(n("ln1_b"), group, zeros(w)),
                wq: ps.add(n("wq"), group, init.weight(w, w)),
                wk: ps.add(n("wk"), group, init.weight(w, w)),
                wv: ps.add(n("wv"), group, init.weight(w, w)),
                wo: ps.add(n("wo"), group, init.weight(w, w)),
                bo: ps.add(n("bo"), group, zeros(w)),
                ln2_g: ps.add(n("ln2_g"), group, ones(w)),
                ln2_b: ps.add(n("ln2_b"), group, zeros(w)),
                w1: ps.add(n("w1"), group, init.weight(w, tower.mlp)),
                b1: ps.add(n("b1"), group, zeros(tower.mlp)),
                w2: ps.add(n("w2"), group, init.weight(tower.mlp, w)),
                b2: ps.add(n("b2"), group, zeros(w)),
            }
        })
        .collect();
    TowerIdx {
        input_w,
        input_b,
        pos,
        blocks,
        lnf_g: ps.add(name("lnf_g"), group, ones(w)),
        lnf_b: ps.add(name("lnf_b"), group, zeros(w)),
        proj_w: ps.add(name("proj_w"), group, init.weight(w, embed_dim)),
        proj_b: ps.add(name("proj_b"), group, zeros(embed_dim)),
    }
}

fn add_head(ps: &mut ParamSet, init: &mut Init, head: &HeadConfig, embed_dim: usize) -> HeadIdx {
    let classifier = ps.add("head.classifier", ParamGroup::Head, init.weight(embed_dim, head.classes));
    let pgu = head.pgu.as_ref().map(|cfg| PguIdx {
        prototypes: ps.add("pgu.prototypes", ParamGroup::Head, init.normal(cfg.prototypes, embed_dim, 1.0)),
        map_w: ps.add("pgu.map_w", ParamGroup::Head, init.weight(cfg.prototypes * embed_dim, cfg.dim)),
        map_b: ps.add("pgu.map_b", ParamGroup::Head, zeros(cfg.dim)),
        classifier: ps.add("pgu.classifier", ParamGroup::Head, init.weight(cfg.dim, head.classes)),
    });
    HeadIdx { classifier, pgu }
}

/// Output of one tower over a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final hidden states of every token, stacked (`Σ len × width`).
    pub hidden: Var,
    /// Projected token features (`Σ len × embed_dim`).
    pub projected: Var,
    /// Max-pooled global embeddings (`N × embed_dim`).
    pub pooled: Var,
    /// Row range of each item inside `hidden` / `projected`.
    pub segments: Vec<Range<usize>>,
}

/// Projects each token with `w, b` and max-pools every segment.
pub fn project_and_pool(
    tape: &mut Tape,
    tokens: Var,
    w: Var,
    b: Var,
    segments: &[Range<usize>],
) -> Result<(Var, Var)> {
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("cannot pool an empty token sequence".into()));
    }
    let projected = tape.linear(tokens, w, b);
    let pooled = tape.segment_max(projected, segments);
    Ok((projected, pooled))
}

fn layer_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Var {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let s = tape.mul_row(n, g);
    tape.add_row(s, b)
}

/// Multi-head self-attention plus MLP, pre-normalised, attention restricted
/// to each segment.
fn block_forward(
    tape: &mut Tape,
    p: &[Var],
    b: &BlockIdx,
    x: Var,
    segments: &[Range<usize>],
    heads: usize,
) -> Var {
    let width = tape.value(x).ncols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h = layer_norm(tape, x, p[b.ln1_g], p[b.ln1_b]);
    let q = tape.matmul(h, p[b.wq]);
    let k = tape.matmul(h, p[b.wk]);
    let v = tape.matmul(h, p[b.wv]);
    let mut per_segment = Vec::with_capacity(segments.len());
    for seg in segments {
        let (qs, ks, vs) = (
            tape.slice_rows(q, seg.clone()),
            tape.slice_rows(k, seg.clone()),
            tape.slice_rows(v, seg.clone()),
        );
        let mut per_head = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qs, ks, vs)
            } else {
                let cols = hd * dh..(hd + 1) * dh;
                (
                    tape.slice_cols(qs, cols.clone()),
                    tape.slice_cols(ks, cols.clone()),
                    tape.slice_cols(vs, cols),
                )
            };
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            per_head.push(tape.matmul(attn, vh));
        }
        per_segment.push(if heads == 1 { per_head[0] } else { tape.concat_cols(&per_head) });
    }
    let attn = if per_segment.len() == 1 {
        per_segment[0]
    } else {
        tape.concat_rows(&per_segment)
    };
    let o = tape.linear(attn, p[b.wo], p[b.bo]);
    let x = tape.add(x, o);
    let h2 = layer_norm(tape, x, p[b.ln2_g], p[b.ln2_b]);
    let m = tape.linear(h2, p[b.w1], p[b.b1]);
    let m = tape.gelu(m);
    let m = tape.linear(m, p[b.w2], p[b.b2]);
    tape.add(x, m)
}

fn tower_forward(
    tape: &mut Tape,
    p: &[Var],
    idx: &TowerIdx,
    cfg: &TowerConfig,
    x: Var,
    segments: Vec<Range<usize>>,
) -> Result<Encoded> {
    let mut x = x;
    for b in &idx.blocks {
        x = block_forward(tape, p, b, x, &segments, cfg.heads);
    }
    let hidden = if idx.blocks.is_empty() {
        x
    } else {
        layer_norm(tape, x, p[idx.lnf_g], p[idx.lnf_b])
    };
    let (projected, pooled) = project_and_pool(tape, hidden, p[idx.proj_w], p[idx.proj_b], &segments)?;
    Ok(Encoded {
        hidden,
        projected,
        pooled,
        segments,
    })
}

/// All trainable state of the retrieval model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let (Temperature::Fixed(t) | Temperature::Learnable(t)) = config.temperature;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature scale must be positive, got {t}")));
        }
        let enc = &config.encoder;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut ps = ParamSet::default();
        let visual = add_tower(
            &mut ps,
            &mut init,
            "visual",
            ParamGroup::Visual,
            &enc.visual,
            enc.visual_input.token_dim(),
            enc.visual_input.tokens(),
            enc.embed_dim,
        );
        let text = add_tower(
            &mut ps,
            &mut init,
            "text",
            ParamGroup::Text,
            &enc.text,
            enc.vocab_size,
            enc.max_len,
            enc.embed_dim,
        );
        let mlm_w = ps.add("text.mlm_w", ParamGroup::Text, init.weight(enc.text.width, enc.vocab_size));
        let mlm_b = ps.add("text.mlm_b", ParamGroup::Text, zeros(enc.vocab_size));
        let log_tau = match config.temperature {
            Temperature::Learnable(t) => Some(ps.add("log_tau", ParamGroup::Head, Mat::from_elem((1, 1), t.ln()))),
            Temperature::Fixed(_) => None,
        };
        let head = match &config.head {
            Some(h) => Some(Self::checked_head(h, &mut ps, &mut init, enc.embed_dim)?),
            None => None,
        };
        Ok(Self {
            layout: Layout {
                visual,
                text,
                mlm_w,
                mlm_b,
                log_tau,
                head,
            },
            config,
            params: ps,
        })
    }

    fn checked_head(h: &HeadConfig, ps: &mut ParamSet, init: &mut Init, embed_dim: usize) -> Result<HeadIdx> {
        if h.classes == 0 {
            return Err(Error::Config("the classifier needs at least one class".into()));
        }
        if let Some(p) = &h.pgu {
            if p.prototypes == 0 || p.dim == 0 {
                return Err(Error::Config("PGU needs at least one prototype and dim ≥ 1".into()));
            }
        }
        Ok(add_head(ps, init, h, embed_dim))
    }

    /// Adds (or replaces) the fine-tuning head. Encoder parameters are kept.
    pub fn with_head(&self, head: HeadConfig, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.head = Some(head);
        let mut fresh = Model::new(config, seed)?;
        let encoder_only = ParamSet {
            params: self
                .params
                .iter()
                .filter(|p| p.group != ParamGroup::Head || p.name == "log_tau")
                .cloned()
                .collect(),
        };
        fresh.params.assign_from(&encoder_only)?;
        Ok(fresh)
    }

    /// Rebuilds a model of `config` holding `params`, which must match the
    /// layout exactly.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        if m.params.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, found {}",
                m.params.len(),
                params.len()
            )));
        }
        let copied = m.params.assign_from(&params)?;
        if copied != params.len() {
            return Err(Error::Validation("checkpoint parameter names do not match the model".into()));
        }
        Ok(m)
    }

    pub fn has_pgu(&self) -> bool {
        self.layout.head.as_ref().is_some_and(|h| h.pgu.is_some())
    }

    pub fn classes(&self) -> Option<usize> {
        self.config.head.as_ref().map(|h| h.classes)
    }

    /// The contrastive logit scale as a `1×1` node.
    pub fn temperature(&self, tape: &mut Tape, p: &[Var]) -> Var {
        match (self.config.temperature, self.layout.log_tau) {
            (Temperature::Learnable(_), Some(i)) => tape.exp(p[i]),
            (Temperature::Fixed(t), _) | (Temperature::Learnable(t), None) => {
                tape.constant(Mat::from_elem((1, 1), t))
            }
        }
    }

    /// Encodes images given as flattened `tokens × token_dim` inputs.
    pub fn encode_images(&self, tape: &mut Tape, p: &[Var], images: &[&[f64]]) -> Result<Encoded> {
        let input = self.config.encoder.visual_input;
        let (tokens, dim) = (input.tokens(), input.token_dim());
        if images.is_empty() {
            return Err(Error::Contract("empty image batch".into()));
        }
        let mut data = Vec::with_capacity(images.len() * tokens * dim);
        for img in images {
            if img.len() != tokens * dim {
                return Err(Error::Contract(format!(
                    "image input has {} values, expected {}",
                    img.len(),
                    tokens * dim
                )));
            }
            data.extend_from_slice(img);
        }
        let x = tape.constant(Mat::from_shape_vec((images.len() * tokens, dim), data).expect("shape"));
        let t = &self.layout.visual;
        let x = tape.linear(x, p[t.input_w], p[t.input_b]);
        let positions: Vec<usize> = (0..images.len()).flat_map(|_| 0..tokens).collect();
        let pos = tape.gather_rows(p[t.pos], &positions);
        let x = tape.add(x, pos);
        let segments = (0..images.len()).map(|i| i * tokens..(i + 1) * tokens).collect();
        tower_forward(tape, p, t, &self.config.encoder.visual, x, segments)
    }

    /// Encodes token-id sequences (padding already removed).
    pub fn encode_texts(&self, tape: &mut Tape, p: &[Var], texts: &[&[u32]]) -> Result<Encoded> {
        let enc = &self.config.encoder;
        if texts.is_empty() {
            return Err(Error::Contract("empty text batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(texts.len());
        for t in texts {
            if t.is_empty() {
                return Err(Error::Contract("cannot encode an all-padding sequence".into()));
            }
            if t.len() > enc.max_len {
                return Err(Error::Contract(format!("sequence of {} tokens exceeds {}", t.len(), enc.max_len)));
            }
            let start = ids.len();
            for (pos, &id) in t.iter().enumerate() {
                if id as usize >= enc.vocab_size {
                    return Err(Error::Contract(format!("token id {id} is outside the vocabulary")));
                }
                ids.push(id as usize);
                positions.push(pos);
            }
            segments.push(start..ids.len());
        }
        let t = &self.layout.text;
        let x = tape.gather_rows(p[t.input_w], &ids);
        let x = tape.add_row(x, p[t.input_b]);
        let pos = tape.gather_rows(p[t.pos], &positions);
        let x = tape.add(x, pos);
        tower_forward(tape, p, t, &enc.text, x, segments)
    }

    /// Vocabulary logits at the given rows of `hidden`.
    pub fn mlm_logits(&self, tape: &mut Tape, p: &[Var], hidden: Var, rows: &[usize]) -> Var {
        let h = tape.gather_rows(hidden, rows);
        tape.linear(h, p[self.layout.mlm_w], p[self.layout.mlm_b])
    }

    fn head(&self) -> Result<&HeadIdx> {
        self.layout
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no identity head".into()))
    }

    /// Identity logits from the classifier shared by both modalities.
    pub fn classify(&self, tape: &mut Tape, p: &[Var], embeddings: Var) -> Result<Var> {
        let w = p[self.head()?.classifier];
        Ok(tape.matmul(embeddings, w))
    }

    /// Identity logits for granularity-unified features.
    pub fn classify_unified(&self, tape: &mut Tape, p: &[Var], unified: Var) -> Result<Var> {
        let pgu = self.pgu_idx()?;
        Ok(tape.matmul(unified, p[pgu.classifier]))
    }

    fn pgu_idx(&self) -> Result<&PguIdx> {
        self.head()?
            .pgu
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no PGU head".into()))
    }

    /// Granularity-unified features for one modality's projected tokens.
    pub fn unify(&self, tape: &mut Tape, p: &[Var], encoded: &Encoded) -> Result<Var> {
        let pgu = self.pgu_idx()?;
        pgu_features(
            tape,
            encoded.projected,
            &encoded.segments,
            p[pgu.prototypes],
            p[pgu.map_w],
            p[pgu.map_b],
        )
    }
}

/// Prototype cross-attention: every prototype attends over each item's
/// tokens (softmax of scaled dot products), the `K` attended vectors are
/// concatenated and mapped linearly.
pub fn pgu_features(
    tape: &mut Tape,
    tokens: Var,
    segments: &[Range<usize>],
    prototypes: Var,
    map_w: Var,
    map_b: Var,
) -> Result<Var> {
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("PGU over an empty token sequence".into()));
    }
    let (k, width) = tape.value(prototypes).dim();
    let scale = 1.0 / (width as f64).sqrt();
    let mut rows = Vec::with_capacity(segments.len());
    for seg in segments {
        let x = tape.slice_rows(tokens, seg.clone());
        let scores = tape.matmul_t(prototypes, x);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        let attended = tape.matmul(attn, x);
        rows.push(tape.reshape(attended, 1, k * width));
    }
    let stacked = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
    Ok(tape.linear(stacked, map_w, map_b))
}
