//! Oracle-scored utterance pairs, stratified over ten equal-width score bins.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{bag_counts, Corpus};
use crate::error::{Error, Result};
use crate::rng;

pub const N_BINS: usize = 10;
const MAX_ENUMERATED_PAIRS: usize = 4_000_000;
const PAIRS_HEADER: &str = "id_a\tid_b\tscore";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::validation("split", format!("expected dev or test, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub id_a: String,
    pub id_b: String,
    /// Similarity on the 0–5 scale.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPairSet {
    pub pairs: Vec<ScoredPair>,
    pub split: Split,
}

impl ScoredPairSet {
    pub fn new(pairs: Vec<ScoredPair>, split: Split) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &pairs {
            if !(0.0..=5.0).contains(&p.score) {
                return Err(Error::validation("score", format!("{} for ({}, {}) outside [0,5]", p.score, p.id_a, p.id_b)));
            }
            let key = if p.id_a <= p.id_b { (&p.id_a, &p.id_b) } else { (&p.id_b, &p.id_a) };
            if !seen.insert(key) {
                return Err(Error::validation("pairs", format!("duplicate pair ({}, {})", p.id_a, p.id_b)));
            }
        }
        Ok(ScoredPairSet { pairs, split })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.score).collect()
    }

    /// Every id referenced by a pair, in first-appearance order.
    pub fn ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            for id in [p.id_a.as_str(), p.id_b.as_str()] {
                if seen.insert(id) {
                    out.push(id);
                }
            }
        }
        out
    }

    pub fn check_ids(&self, corpus: &Corpus) -> Result<()> {
        let index = corpus.id_index();
        for id in self.ids() {
            if !index.contains_key(id) {
                return Err(Error::NotFound(format!("pair id {id} is not in the corpus")));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(PAIRS_HEADER);
        out.push('\n');
        for p in &self.pairs {
            out.push_str(&format!("{}\t{}\t{}\n", p.id_a, p.id_b, p.score));
        }
        out
    }

    pub fn from_tsv(text: &str, split: Split, origin: &str) -> Result<Self> {
        let line_err = |line: usize, reason: String| Error::Line { path: origin.to_string(), line, reason };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == PAIRS_HEADER => {}
            _ => return Err(line_err(1, format!("expected header {PAIRS_HEADER:?}"))),
        }
        let mut pairs = Vec::new();
        for (i, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols[0].is_empty() || cols[1].is_empty() {
                return Err(line_err(i + 1, "expected id_a<TAB>id_b<TAB>score".into()));
            }
            let score: f64 = cols[2].parse().map_err(|_| line_err(i + 1, format!("bad score {:?}", cols[2])))?;
            if !score.is_finite() {
                return Err(line_err(i + 1, "non-finite score".into()));
            }
            pairs.push(ScoredPair { id_a: cols[0].to_string(), id_b: cols[1].to_string(), score });
        }
        Self::new(pairs, split)
    }
}

pub fn write_pairs(path: &Path, set: &ScoredPairSet) -> Result<()> {
    crate::binio::write_file(path, set.to_tsv().as_bytes())
}

pub fn read_pairs(path: &Path, split: Split) -> Result<ScoredPairSet> {
    let bytes = crate::binio::read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "pairs file is not UTF-8"))?;
    ScoredPairSet::from_tsv(text, split, &path.display().to_string())
}

/// Human-readable label of a bin on the 0–5 scale, e.g. `[4.5,5.0]`.
pub fn bin_label(bin: usize) -> String {
    let lo = bin as f64 * 0.5;
    let close = if bin + 1 == N_BINS { ']' } else { ')' };
    format!("[{lo:.1},{:.1}{close}", lo + 0.5)
}

fn bin_of(sim: f64) -> usize {
    ((sim * N_BINS as f64).floor() as usize).min(N_BINS - 1)
}

/// Samples `n_pairs` oracle-scored pairs spread evenly over ten score bins.
///
/// Bins short of their quota borrow from the nearest bins with spare pairs;
/// no bin ends up more than 20% away from `n_pairs / 10`.
pub fn build_scored_pairs(corpus: &Corpus, n_pairs: usize, seed: u64, split: Split) -> Result<ScoredPairSet> {
    if n_pairs < N_BINS {
        return Err(Error::validation("n_pairs", format!("need at least {N_BINS}, got {n_pairs}")));
    }
    if !corpus.has_ground_truth() {
        return Err(Error::Unsupported("scored pairs need ground-truth symbols for every utterance".into()));
    }
    let n = corpus.len();
    let alphabet = corpus
        .utterances
        .iter()
        .flat_map(|u| u.symbols.as_deref().unwrap_or(&[]).iter().copied())
        .max()
        .map_or(0, |m| m as usize + 1);
    let unit_counts: Vec<Vec<f64>> = corpus
        .utterances
        .iter()
        .map(|u| {
            let mut v = vec![0.0; alphabet];
            for (s, c) in bag_counts(u.symbols.as_deref().unwrap_or(&[])) {
                v[s as usize] = c;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v
        })
        .collect();
    let sim = |i: usize, j: usize| -> f64 {
        let d: f64 = unit_counts[i].iter().zip(&unit_counts[j]).map(|(a, b)| a * b).sum();
        d.clamp(0.0, 1.0)
    };

    let mut bins: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); N_BINS];
    let total = n.saturating_sub(1) * n / 2;
    if total <= MAX_ENUMERATED_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                let s = sim(i, j);
                bins[bin_of(s)].push((i, j, s));
            }
        }
    } else {
        let mut rng = rng::rng(seed, "pair-candidates", 0);
        let mut seen = HashSet::new();
        while seen.len() < MAX_ENUMERATED_PAIRS {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a == b {
                continue;
            }
            let (i, j) = (a.min(b), a.max(b));
            if seen.insert((i, j)) {
                let s = sim(i, j);
                bins[bin_of(s)].push((i, j, s));
            }
        }
        bins.iter_mut().for_each(|b| b.sort_by_key(|&(i, j, _)| (i, j)));
    }

    if let Some(empty) = bins.iter().position(Vec::is_empty) {
        let populable: Vec<String> = (0..N_BINS).filter(|&b| !bins[b].is_empty()).map(bin_label).collect();
        return Err(Error::invalid(format!(
            "score bin {} is empty; only {} populable",
            bin_label(empty),
            if populable.is_empty() { "no bins".to_string() } else { populable.join(", ") }
        )));
    }

    let quota = n_pairs as f64 / N_BINS as f64;
    let floor = (0.8 * quota).ceil() as usize;
    let ceil = (1.2 * quota).floor() as usize;
    let mut target: Vec<usize> = vec![n_pairs / N_BINS; N_BINS];
    for t in target.iter_mut().take(n_pairs % N_BINS) {
        *t += 1;
    }
    let mut take: Vec<usize> = (0..N_BINS).map(|b| target[b].min(bins[b].len())).collect();
    for b in 0..N_BINS {
        if take[b] < floor {
            return Err(Error::invalid(format!(
                "score bin {} holds only {} candidate pairs, need at least {floor}",
                bin_label(b),
                bins[b].len()
            )));
        }
    }
    let mut deficit: usize = n_pairs - take.iter().sum::<usize>();
    // Deficits come from thin bins; hand them to the nearest bins with spare pairs.
    for b in 0..N_BINS {
        let mut need = target[b] - take[b];
        let mut dist = 1;
        while need > 0 && dist < N_BINS {
            for nb in [b.checked_sub(dist), Some(b + dist).filter(|&x| x < N_BINS)].into_iter().flatten() {
                let spare = bins[nb].len().min(ceil).saturating_sub(take[nb]);
                let moved = spare.min(need);
                take[nb] += moved;
                need -= moved;
                deficit -= moved;
            }
            dist += 1;
        }
    }
    if deficit > 0 {
        return Err(Error::invalid(format!("corpus too small: {deficit} of {n_pairs} pairs could not be placed")));
    }

    let mut chosen = Vec::with_capacity(n_pairs);
    for (b, cands) in bins.iter_mut().enumerate() {
        let mut rng = rng::rng(seed, "pair-bin", b as u64);
        let (picked, _) = cands.partial_shuffle(&mut rng, take[b]);
        chosen.extend_from_slice(picked);
    }
    chosen.sort_by_key(|&(i, j, _)| (i, j));
    let pairs = chosen
        .into_iter()
        .map(|(i, j, s)| ScoredPair {
            id_a: corpus.utterances[i].id.clone(),
            id_b: corpus.utterances[j].id.clone(),
            score: s * 5.0,
        })
        .collect();
    ScoredPairSet::new(pairs, split)
}
