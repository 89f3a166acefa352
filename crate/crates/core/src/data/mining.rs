use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use super::{CanonicalSample, Format};
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::numerics::kernels;

/// Ranks dropped from the top of the full similarity ranking. With the
/// default of 1 only the top hit (normally the positive itself) goes.
pub const DEFAULT_SKIP_TOP: usize = 1;

/// Anything that maps text to a vector; similarity is taken as cosine.
pub trait Embedder: Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

impl<T> Embedder for T
where
    T: Fn(&str) -> Vec<f32> + Sync,
{
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self(text))
    }
}

impl Embedder for EmbeddingModel<f32> {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.embed_text(text)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (kernels::l2_norm(a) as f64, kernels::l2_norm(b) as f64);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    kernels::dot(a, b) as f64 / (na * nb)
}

/// For each query, ranks `corpus` by cosine similarity (descending, ties by
/// lower index), removes the query's known positive and the first
/// `skip_top` ranks, and returns the next `k` corpus indices.
///
/// Fewer than `k` are returned when the corpus runs out.
pub fn mine_hard_negatives(
    queries: &[String],
    positives: &[usize],
    corpus: &[String],
    embedder: &dyn Embedder,
    k: usize,
    skip_top: usize,
) -> Result<Vec<Vec<usize>>> {
    if corpus.is_empty() {
        return Err(Error::invalid("mining corpus is empty"));
    }
    if queries.len() != positives.len() {
        return Err(Error::invalid("every query needs its known positive"));
    }
    if k == 0 {
        return Ok(vec![Vec::new(); queries.len()]);
    }
    let docs: Vec<Vec<f32>> = corpus.par_iter().map(|d| embedder.embed(d)).collect::<Result<_>>()?;
    queries
        .par_iter()
        .zip(positives.par_iter())
        .map(|(q, &pos)| {
            let qe = embedder.embed(q)?;
            let mut ranked: Vec<(f64, usize)> = docs.iter().enumerate().map(|(i, d)| (cosine(&qe, d), i)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            Ok(ranked
                .into_iter()
                .enumerate()
                .filter(|&(rank, (_, idx))| rank >= skip_top && idx != pos)
                .map(|(_, (_, idx))| idx)
                .take(k)
                .collect())
        })
        .collect()
}

/// Mines negatives for retrieval samples against the positives of their own
/// source and appends them (deduplicated) to each sample's negatives.
pub fn attach_mined_negatives(
    samples: &mut [CanonicalSample],
    embedder: &dyn Embedder,
    k: usize,
    skip_top: usize,
) -> Result<()> {
    let mut by_source: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.format == Format::Retrieval {
            by_source.entry(s.source.clone()).or_default().push(i);
        }
    }
    for members in by_source.values() {
        let mut corpus: Vec<String> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut positives = Vec::with_capacity(members.len());
        for &i in members {
            let p = samples[i].positive.as_str();
            let idx = *index.entry(p).or_insert_with(|| {
                corpus.push(p.to_string());
                corpus.len() - 1
            });
            positives.push(idx);
        }
        let queries: Vec<String> = members.iter().map(|&i| samples[i].query.clone()).collect();
        let mined = mine_hard_negatives(&queries, &positives, &corpus, embedder, k, skip_top)?;
        for (&i, negs) in members.iter().zip(mined) {
            for n in negs {
                let text = &corpus[n];
                if !samples[i].negatives.contains(text) {
                    samples[i].negatives.push(text.clone());
                }
            }
        }
    }
    Ok(())
}
