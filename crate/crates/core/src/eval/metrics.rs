use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;

/// nDCG@k of `ranking` (doc ids, best first) against graded `relevant` gains.
pub fn ndcg_at_k(ranking: &[usize], relevant: &BTreeMap<usize, f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("ndcg cutoff k must be at least 1"));
    }
    if relevant.is_empty() {
        return Err(Error::invalid("ndcg needs a nonempty relevant set"));
    }
    let discount = |i: usize| ((i + 2) as f64).log2();
    let mut dcg = 0.0;
    for (i, doc) in ranking.iter().take(k).enumerate() {
        if let Some(&g) = relevant.get(doc) {
            dcg += g / discount(i);
        }
    }
    let mut ideal: Vec<f64> = relevant.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let mut idcg = 0.0;
    for (i, g) in ideal.iter().take(k).enumerate() {
        idcg += g / discount(i);
    }
    if idcg <= 0.0 {
        return Err(Error::invalid("ndcg needs at least one positive gain"));
    }
    Ok(dcg / idcg)
}

/// 1-based fractional ranks; tied values share their average rank.
fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average-tie ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length lists of at least 2 scores"));
    }
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman inputs must be finite"));
    }
    let (rp, rg) = (fractional_ranks(pred), fractional_ranks(gold));
    let n = rp.len() as f64;
    let (mp, mg) = (rp.iter().sum::<f64>() / n, rg.iter().sum::<f64>() / n);
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rg) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::invalid("spearman is undefined when either side has constant ranks"));
    }
    Ok(cov / (vp * vg).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdAccuracy {
    pub accuracy: f64,
    /// Pairs with similarity strictly above this are predicted positive.
    pub threshold: f64,
}

/// Best accuracy of `sim > threshold ⇒ label 1` over every midpoint
/// between distinct sorted similarities and both infinities. Ties go to
/// the lowest threshold.
pub fn best_threshold_accuracy(sims: &[f64], labels: &[u8]) -> Result<ThresholdAccuracy> {
    if sims.len() != labels.len() || sims.len() < 2 {
        return Err(Error::invalid("pair accuracy needs at least 2 labelled pairs"));
    }
    if labels.iter().any(|&l| l > 1) || sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("labels must be 0/1 and similarities finite"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::invalid("pair accuracy needs both labels present"));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]));
    let n = sims.len();
    // threshold −∞: everything predicted positive
    let mut correct = positives as i64;
    let mut best = (correct, f64::NEG_INFINITY);
    let mut i = 0;
    while i < n {
        let v = sims[order[i]];
        while i < n && sims[order[i]] == v {
            correct += if labels[order[i]] == 0 { 1 } else { -1 };
            i += 1;
        }
        let threshold = if i < n { (v + sims[order[i]]) / 2.0 } else { f64::INFINITY };
        if correct > best.0 {
            best = (correct, threshold);
        }
    }
    Ok(ThresholdAccuracy {
        accuracy: best.0 as f64 / n as f64,
        threshold: best.1,
    })
}

/// Best-threshold accuracy of the cosine similarity of each embedding pair.
pub fn pair_accuracy(pairs: &[(Vec<f32>, Vec<f32>)], labels: &[u8]) -> Result<ThresholdAccuracy> {
    let sims: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| {
            let (na, nb) = (kernels::l2_norm(a) as f64, kernels::l2_norm(b) as f64);
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                kernels::dot(a, b) as f64 / (na * nb)
            }
        })
        .collect();
    best_threshold_accuracy(&sims, labels)
}
