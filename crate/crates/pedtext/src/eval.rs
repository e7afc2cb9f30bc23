//! Text-to-image retrieval and Rank-k accuracy.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::checkpoint::Checkpoint;
use crate::data::{tokenize, DatasetManifest, PersonRecord, Split, Vocabulary, MAX_TEXT_LEN};
use crate::error::{Error, Result};
use crate::model::{load_visuals, Model};
use crate::scorer::cosine_similarity;

/// Gallery indices by descending cosine similarity to `query`; equal
/// similarities keep the lower index first.
pub fn retrieve(query: &[f64], gallery: &Mat) -> Result<Vec<usize>> {
    if gallery.nrows() == 0 {
        return Err(Error::Contract("empty gallery".into()));
    }
    if gallery.ncols() != query.len() {
        return Err(Error::Contract(format!(
            "query has dimension {}, gallery {}",
            query.len(),
            gallery.ncols()
        )));
    }
    let sims = gallery
        .rows()
        .into_iter()
        .map(|row| cosine_similarity(query, row.as_slice().expect("standard layout")))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    Ok(order)
}

/// Ranked gallery lists with identity labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalRun {
    pub query_names: Vec<String>,
    pub query_identities: Vec<u32>,
    pub gallery_identities: Vec<u32>,
    pub rankings: Vec<Vec<usize>>,
}

impl RetrievalRun {
    /// Ranks every row of `queries` against `gallery`.
    pub fn new(
        query_names: Vec<String>,
        query_identities: Vec<u32>,
        queries: &Mat,
        gallery_identities: Vec<u32>,
        gallery: &Mat,
    ) -> Result<Self> {
        if queries.nrows() != query_identities.len() || query_names.len() != query_identities.len() {
            return Err(Error::Contract("one name and identity per query is required".into()));
        }
        if gallery.nrows() != gallery_identities.len() {
            return Err(Error::Contract("one identity per gallery item is required".into()));
        }
        let rankings = queries
            .rows()
            .into_iter()
            .map(|q| retrieve(&q.to_vec(), gallery))
            .collect::<Result<_>>()?;
        Ok(Self {
            query_names,
            query_identities,
            gallery_identities,
            rankings,
        })
    }
}

/// Fraction of queries with a correct identity among their first `k`
/// results.
pub fn rank_k(run: &RetrievalRun, k: usize) -> Result<f64> {
    if run.rankings.is_empty() {
        return Err(Error::Evaluation("no queries".into()));
    }
    let mut hits = 0;
    for (q, ranking) in run.rankings.iter().enumerate() {
        let id = run.query_identities[q];
        if !run.gallery_identities.contains(&id) {
            return Err(Error::Evaluation(format!(
                "query {} has identity {id}, which is absent from the gallery",
                run.query_names[q]
            )));
        }
        if ranking.iter().take(k).any(|&g| run.gallery_identities[g] == id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / run.rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankKReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub n_queries: usize,
    pub config_hash: String,
}

impl RankKReport {
    pub fn from_run(run: &RetrievalRun, config_hash: impl Into<String>) -> Result<Self> {
        Ok(Self {
            rank1: rank_k(run, 1)?,
            rank5: rank_k(run, 5)?,
            rank10: rank_k(run, 10)?,
            n_queries: run.rankings.len(),
            config_hash: config_hash.into(),
        })
    }
}

impl fmt::Display for RankKReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8} {:>8} {:>8}", "queries", "Rank-1", "Rank-5", "Rank-10")?;
        writeln!(
            f,
            "{:<8} {:>7.2}% {:>7.2}% {:>7.2}%",
            self.n_queries,
            100.0 * self.rank1,
            100.0 * self.rank5,
            100.0 * self.rank10
        )
    }
}

const EMBED_CHUNK: usize = 64;

fn stack(rows: Vec<Mat>) -> Mat {
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Retrieval features of captions: unified features when the model has a
/// prototype head, pooled embeddings otherwise.
pub fn embed_texts(model: &Model, vocab: &Vocabulary, captions: &[&str]) -> Result<Mat> {
    let ids: Vec<Vec<u32>> = captions
        .iter()
        .map(|c| tokenize(c, vocab, MAX_TEXT_LEN).content().to_vec())
        .collect();
    let mut parts = Vec::new();
    for chunk in ids.chunks(EMBED_CHUNK) {
        let (mut tape, p) = model.params.to_tape();
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let enc = model.encode_texts(&mut tape, &p, &refs)?;
        let out = if model.has_pgu() { model.unify(&mut tape, &p, &enc)? } else { enc.pooled };
        parts.push(tape.value(out).clone());
    }
    Ok(stack(parts))
}

/// Retrieval features of images; see [`embed_texts`].
pub fn embed_images(model: &Model, records: &[&PersonRecord], base: &Path) -> Result<Mat> {
    let input = model.config.encoder.visual_input;
    let mut parts = Vec::new();
    for chunk in records.chunks(EMBED_CHUNK) {
        let images = load_visuals(chunk, &input, base, None)?;
        let (mut tape, p) = model.params.to_tape();
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let enc = model.encode_images(&mut tape, &p, &refs)?;
        let out = if model.has_pgu() { model.unify(&mut tape, &p, &enc)? } else { enc.pooled };
        parts.push(tape.value(out).clone());
    }
    Ok(stack(parts))
}

fn identities(records: &[&PersonRecord]) -> Result<Vec<u32>> {
    records
        .iter()
        .map(|r| {
            r.identity
                .ok_or_else(|| Error::Validation(format!("record {} has no identity", r.image_id)))
        })
        .collect()
}

/// Embeds the query captions and gallery images of `manifest` and ranks.
pub fn retrieval_run(model: &Model, vocab: &Vocabulary, manifest: &DatasetManifest, base: &Path) -> Result<RetrievalRun> {
    let queries = manifest.split(Split::Query);
    let gallery = manifest.split(Split::Gallery);
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Validation("manifest needs records in both the query and gallery splits".into()));
    }
    let captions: Vec<&str> = queries.iter().map(|r| r.caption.as_str()).collect();
    let q = embed_texts(model, vocab, &captions)?;
    let g = embed_images(model, &gallery, base)?;
    RetrievalRun::new(
        queries.iter().map(|r| r.image_id.clone()).collect(),
        identities(&queries)?,
        &q,
        identities(&gallery)?,
        &g,
    )
}

pub fn evaluate(checkpoint: &Checkpoint, manifest: &DatasetManifest, base: &Path) -> Result<RankKReport> {
    let model = checkpoint.model()?;
    let vocab = checkpoint.vocabulary()?;
    let run = retrieval_run(&model, &vocab, manifest, base)?;
    RankKReport::from_run(&run, checkpoint.config_hash())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub report: RankKReport,
    /// Query word tokens missing from the checkpoint vocabulary.
    pub unknown_tokens: usize,
    pub total_tokens: usize,
}

/// [`evaluate`] on a manifest from another domain; words the checkpoint
/// has never seen map to `[UNK]`.
pub fn cross_domain_evaluate(
    checkpoint: &Checkpoint,
    manifest_b: &DatasetManifest,
    base: &Path,
) -> Result<CrossDomainReport> {
    let vocab = checkpoint.vocabulary()?;
    let (mut unknown, mut total) = (0, 0);
    for r in manifest_b.split(Split::Query) {
        let t = tokenize(&r.caption, &vocab, MAX_TEXT_LEN);
        let words = &t.content()[1..];
        total += words.len();
        unknown += words.iter().filter(|&&i| i == Vocabulary::UNK).count();
    }
    if unknown > 0 {
        log::info!("cross-domain queries: {unknown} of {total} tokens are unknown to the checkpoint");
    }
    Ok(CrossDomainReport {
        report: evaluate(checkpoint, manifest_b, base)?,
        unknown_tokens: unknown,
        total_tokens: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run_with_first_hits(ranks: &[usize]) -> RetrievalRun {
        // Gallery of 10: identity 0 at position `r - 1` of query q's list,
        // everything else identity 1.
        let rankings = ranks
            .iter()
            .map(|&r| {
                let mut list: Vec<usize> = (1..10).collect();
                list.insert(r - 1, 0);
                list
            })
            .collect();
        RetrievalRun {
            query_names: ranks.iter().map(|r| format!("q{r}")).collect(),
            query_identities: vec![0; ranks.len()],
            gallery_identities: std::iter::once(0).chain(std::iter::repeat_n(1, 9)).collect(),
            rankings,
        }
    }

    #[test]
    fn counting_example() {
        let run = run_with_first_hits(&[1, 2, 4]);
        assert!((rank_k(&run, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rank_k(&run, 5).unwrap(), 1.0);
        assert_eq!(rank_k(&run, 10).unwrap(), 1.0);
        assert_eq!(rank_k(&run_with_first_hits(&[1, 1]), 1).unwrap(), 1.0);
    }

    #[test]
    fn absent_identity_names_the_query() {
        let mut run = run_with_first_hits(&[1]);
        run.query_identities = vec![7];
        let err = rank_k(&run, 1).unwrap_err();
        assert!(err.to_string().contains("q1"));
    }

    #[test]
    fn retrieve_examples() {
        let g = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(retrieve(&[0.0, 2.0], &g).unwrap()[0], 1);
        assert_eq!(retrieve(&[1.0, 0.0], &array![[3.0, 1.0]]).unwrap(), vec![0]);
        assert!(retrieve(&[1.0], &g).is_err());
        let ties = array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        assert_eq!(retrieve(&[1.0, 0.0], &ties).unwrap(), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn ordering_matches_pairwise_comparison(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Mat::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0));
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let order = retrieve(&q, &g).unwrap();
            let sim = |i: usize| cosine_similarity(&q, g.row(i).as_slice().unwrap()).unwrap();
            // Each item is preceded by exactly the items that beat it.
            for (pos, &i) in order.iter().enumerate() {
                let better = (0..10).filter(|&j| sim(j) > sim(i) || (sim(j) == sim(i) && j < i)).count();
                prop_assert_eq!(better, pos);
            }
        }
    }
}
