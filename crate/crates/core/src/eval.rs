//! Similarity metrics: rank correlation, alignment and uniformity, rendering
//! averaging, rater agreement and retrieval recall.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::ScoredPairSet;
use crate::error::{Error, Result};
use crate::index::EmbeddingIndex;
use crate::nn::loss::{cosine, norm};
use crate::rng;

pub const POSITIVE_THRESHOLD: f64 = 4.0;

/// Ranks starting at 1; tied values share the mean of the ranks they cover.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimMismatch { expected: xs.len(), got: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::DimMismatch { expected: xs.len(), got: ys.len() });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between unit-normalized embeddings of positive pairs.
pub fn alignment(embeddings: &BTreeMap<String, Vec<f64>>, pairs: &ScoredPairSet, threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in pairs.pairs.iter().filter(|p| p.score >= threshold) {
        let a = embeddings.get(&p.id_a).ok_or_else(|| Error::NotFound(format!("embedding for {}", p.id_a)))?;
        let b = embeddings.get(&p.id_b).ok_or_else(|| Error::NotFound(format!("embedding for {}", p.id_b)))?;
        total += sq_dist(&normalized(a)?, &normalized(b)?);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!("no positive pairs with score >= {threshold}")));
    }
    Ok(total / n as f64)
}

/// Log of the mean Gaussian potential `e^{-2|x-y|^2}` over unordered pairs of
/// unit-normalized embeddings; self-pairs only when `include_self`.
pub fn uniformity(embeddings: &[Vec<f64>], include_self: bool) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::invalid("uniformity needs at least two embeddings"));
    }
    let units = embeddings.iter().map(|e| normalized(e)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..units.len() {
        let start = if include_self { i } else { i + 1 };
        for j in start..units.len() {
            total += (-2.0 * sq_dist(&units[i], &units[j])).exp();
            n += 1;
        }
    }
    Ok((total / n as f64).ln())
}

/// Mean of cosines over every rendering combination of the two ids.
pub fn pair_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("pair with no renderings"));
    }
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += cosine(x, y)?;
        }
    }
    let n = a.len() * b.len();
    Ok((total / n as f64, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spearman: f64,
    pub n_pairs: usize,
    pub alignment: Option<f64>,
    pub uniformity: Option<f64>,
    #[serde(default)]
    pub recall_at_k: BTreeMap<usize, f64>,
    /// Rendering combinations averaged per pair, in pair order.
    pub combinations: Vec<usize>,
    pub model_id: String,
    pub split: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub id_a: String,
    pub id_b: String,
    pub gold: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<PairPrediction>,
}

/// Scores a pair set from per-id rendering embeddings.
///
/// Alignment uses the first rendering of each id; uniformity covers the first
/// rendering of every id appearing in the pairs. Either is `None` when
/// undefined (no positive pairs, fewer than two ids).
pub fn evaluate(
    renderings: &BTreeMap<String, Vec<Vec<f64>>>,
    pairs: &ScoredPairSet,
    model_id: &str,
    seed: u64,
) -> Result<Evaluation> {
    let lookup = |id: &str| {
        renderings
            .get(id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::NotFound(format!("no rendering for utterance {id}")))
    };
    let mut predictions = Vec::with_capacity(pairs.len());
    let mut combinations = Vec::with_capacity(pairs.len());
    for p in &pairs.pairs {
        let (sim, n) = pair_similarity(lookup(&p.id_a)?, lookup(&p.id_b)?)?;
        predictions.push(PairPrediction { id_a: p.id_a.clone(), id_b: p.id_b.clone(), gold: p.score, predicted: sim });
        combinations.push(n);
    }
    let predicted: Vec<f64> = predictions.iter().map(|p| p.predicted).collect();
    let rho = spearman(&predicted, &pairs.scores())?;

    let firsts: BTreeMap<String, Vec<f64>> =
        pairs.ids().into_iter().map(|id| Ok((id.to_string(), lookup(id)?[0].clone()))).collect::<Result<_>>()?;
    let alignment = alignment(&firsts, pairs, POSITIVE_THRESHOLD).ok();
    let all: Vec<Vec<f64>> = firsts.values().cloned().collect();
    let uniformity = uniformity(&all, false).ok();
    Ok(Evaluation {
        report: EvalReport {
            spearman: rho,
            n_pairs: pairs.len(),
            alignment,
            uniformity,
            recall_at_k: BTreeMap::new(),
            combinations,
            model_id: model_id.to_string(),
            split: pairs.split.to_string(),
            seed,
        },
        predictions,
    })
}

/// Per-pair CSV: `id_a,id_b,gold,predicted`.
pub fn predictions_csv(preds: &[PairPrediction]) -> String {
    let mut out = String::from("id_a,id_b,gold,predicted\n");
    for p in preds {
        out.push_str(&format!("{},{},{:.6},{:.9}\n", p.id_a, p.id_b, p.gold, p.predicted));
    }
    out
}

/// Scatter data, one row per model: `model, uniformity, alignment, spearman`.
pub fn plot_tsv(reports: &[EvalReport]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into());
    let mut out = String::from("model\tuniformity\talignment\tspearman\n");
    for r in reports {
        out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.model_id, fmt(r.uniformity), fmt(r.alignment), r.spearman));
    }
    out
}

/// Mean Spearman over all rater pairs of an `n_raters x n_items` matrix.
pub fn inter_rater_agreement(ratings: &[Vec<f64>]) -> Result<f64> {
    if ratings.len() < 2 {
        return Err(Error::invalid("agreement needs at least two raters"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..ratings.len() {
        for j in i + 1..ratings.len() {
            total += spearman(&ratings[i], &ratings[j])?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Fraction of queries whose target id appears in the top `k` results.
pub fn recall_at_k(
    queries: &[Vec<f64>],
    targets: &[String],
    index: &EmbeddingIndex,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if queries.len() != targets.len() {
        return Err(Error::DimMismatch { expected: queries.len(), got: targets.len() });
    }
    if queries.is_empty() {
        return Err(Error::invalid("recall needs at least one query"));
    }
    let ks: BTreeSet<usize> = ks.iter().copied().collect();
    let kmax = *ks.last().ok_or_else(|| Error::validation("k", "no cut-offs given"))?;
    if ks.contains(&0) || kmax > index.len() {
        return Err(Error::validation("k", format!("must lie in 1..={}", index.len())));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (q, t) in queries.iter().zip(targets) {
        let ranked = index.search(q, kmax)?;
        if let Some(pos) = ranked.iter().position(|h| &h.id == t) {
            for (&k, c) in hits.iter_mut() {
                if pos < k {
                    *c += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|(k, c)| (k, c as f64 / queries.len() as f64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PermutationTest {
    pub observed: f64,
    /// Shuffles whose correlation reached the observed value.
    pub n_at_least: usize,
    pub n_shuffles: usize,
    /// `(n_at_least + 1) / (n_shuffles + 1)`.
    pub p_value: f64,
}

/// One-sided test of Spearman(pred, gold) against shuffled gold scores.
pub fn permutation_test(pred: &[f64], gold: &[f64], n_shuffles: usize, seed: u64) -> Result<PermutationTest> {
    let observed = spearman(pred, gold)?;
    let rp = average_ranks(pred);
    let mut rg = average_ranks(gold);
    let mut r = rng::rng(seed, "permutation", 0);
    let mut n_at_least = 0;
    for _ in 0..n_shuffles {
        rg.shuffle(&mut r);
        if pearson(&rp, &rg)? >= observed {
            n_at_least += 1;
        }
    }
    Ok(PermutationTest {
        observed,
        n_at_least,
        n_shuffles,
        p_value: (n_at_least + 1) as f64 / (n_shuffles + 1) as f64,
    })
}
