//! Acoustic unit discovery: k-means over frames, nearest-centroid labeling,
//! and merging of consecutive repeated labels into unit sequences.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;

use crate::binio::{self, Reader};
use crate::corpus::{Corpus, FeatureSequence};
use crate::error::{Error, Result};
use crate::rng;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"SEMK";
pub const CODEBOOK_VERSION: u16 = 1;
pub const DEFAULT_CLUSTER_SIZES: [usize; 3] = [50, 100, 200];

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    /// Objective after each assignment pass; never increases.
    pub inertia_history: Vec<f64>,
    /// Notes about re-seeded empty clusters.
    pub diagnostics: Vec<String>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::validation("codebook", "k and dim must be positive"));
        }
        if centroids.len() != k * dim {
            return Err(Error::DimMismatch { expected: k * dim, got: centroids.len() });
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook centroids".into()));
        }
        Ok(Codebook { k, dim, centroids, inertia_history: Vec::new(), diagnostics: Vec::new() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Index of the nearest centroid (squared Euclidean), lowest index on ties.
    pub fn nearest(&self, frame: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k {
            let d = sq_dist(frame, self.centroid(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.centroids.len() * 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        binio::put_f32s(&mut out, self.centroids.iter().copied());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CODEBOOK_MAGIC)?;
        r.version(CODEBOOK_VERSION)?;
        let at = r.offset();
        let k = r.u32("k")? as usize;
        let d = r.u32("dim")? as usize;
        if k == 0 || d == 0 {
            return Err(Error::parse(at, "k and dim must be positive"));
        }
        let n = k
            .checked_mul(d)
            .filter(|n| n.checked_mul(4) == Some(r.remaining()))
            .ok_or_else(|| Error::parse(r.offset(), format!("payload of {} bytes does not match {k}x{d}", r.remaining())))?;
        let centroids = r.f32s(n, "centroids")?;
        r.finish()?;
        Codebook::new(k, d, centroids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Optional cap on training frames, subsampled uniformly by seed.
    pub max_frames: Option<usize>,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { k: 100, max_iters: 100, tol: 1e-6, seed: 0, max_frames: None, n_init: 4 }
    }
}

/// Lloyd's algorithm with k-means++ seeding over a flat list of frames.
pub fn train_kmeans(frames: &[&[f32]], cfg: &KMeansConfig) -> Result<Codebook> {
    if cfg.k == 0 {
        return Err(Error::validation("k", "must be positive"));
    }
    if !(cfg.tol >= 0.0) {
        return Err(Error::validation("tol", "must be non-negative"));
    }
    let dim = frames.first().map_or(0, |f| f.len());
    if let Some(bad) = frames.iter().find(|f| f.len() != dim) {
        return Err(Error::DimMismatch { expected: dim, got: bad.len() });
    }
    let mut rng = rng::rng(cfg.seed, "kmeans-subsample", 0);
    let frames: Vec<&[f32]> = match cfg.max_frames {
        Some(cap) if cap < frames.len() => {
            let mut idx = index::sample(&mut rng, frames.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| frames[i]).collect()
        }
        _ => frames.to_vec(),
    };
    let distinct: HashSet<Vec<u32>> = frames.iter().map(|f| f.iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < cfg.k {
        return Err(Error::invalid(format!("k-means needs at least k={} distinct frames, got {}", cfg.k, distinct.len())));
    }

    let mut best: Option<(Vec<Vec<f64>>, Vec<f64>, Vec<String>)> = None;
    for restart in 0..cfg.n_init.max(1) {
        let mut rng = rng::rng(cfg.seed, "kmeans-init", restart as u64);
        let (centroids, history, mut diagnostics) = lloyd(&frames, cfg, &mut rng);
        let last = *history.last().expect("at least one iteration");
        if let Some((_, bh, _)) = &best {
            if last >= *bh.last().expect("non-empty") {
                continue;
            }
        }
        for d in diagnostics.iter_mut() {
            *d = format!("restart {restart}: {d}");
        }
        best = Some((centroids, history, diagnostics));
    }
    let (centroids, history, diagnostics) = best.expect("n_init >= 1");

    let flat: Vec<f32> = centroids.iter().flatten().map(|&v| v as f32).collect();
    let mut cb = Codebook::new(cfg.k, dim, flat)?;
    cb.inertia_history = history;
    cb.diagnostics = diagnostics;
    Ok(cb)
}

fn lloyd(frames: &[&[f32]], cfg: &KMeansConfig, rng: &mut rng::Rng) -> (Vec<Vec<f64>>, Vec<f64>, Vec<String>) {
    let n = frames.len();
    let dim = frames[0].len();
    let mut centroids = kmeanspp(frames, cfg.k, rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0f64; n];
    let mut history: Vec<f64> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut previous = centroids.clone();

    for iter in 0..cfg.max_iters.max(1) {
        let inertia = assign_all(frames, &centroids, &mut labels, &mut dists);
        if let Some(&prev) = history.last() {
            if inertia > prev {
                // Round-off at convergence: keep the centroids that scored `prev`.
                centroids = previous;
                break;
            }
        }
        history.push(inertia);
        if history.len() >= 2 {
            let prev = history[history.len() - 2];
            if prev == 0.0 || (prev - inertia) / prev < cfg.tol {
                break;
            }
        } else if inertia == 0.0 {
            break;
        }
        if iter + 1 == cfg.max_iters {
            break;
        }

        let mut sums = vec![vec![0f64; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (f, &l) in frames.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(f.iter()) {
                *s += v as f64;
            }
        }
        previous = centroids.clone();
        let mut taken = HashSet::new();
        for c in 0..cfg.k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Empty cluster: move it onto the frame farthest from its centroid.
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("at least k frames");
                taken.insert(far);
                diagnostics.push(format!("iteration {iter}: cluster {c} empty, re-seeded at frame {far}"));
                centroids[c] = frames[far].iter().map(|&v| v as f64).collect();
            }
        }
    }
    (centroids, history, diagnostics)
}

fn kmeanspp(frames: &[&[f32]], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = frames.len();
    let first = rng.gen_range(0..n);
    let mut centroids: Vec<Vec<f64>> = vec![frames[first].iter().map(|&v| v as f64).collect()];
    let mut d2: Vec<f64> = frames.iter().map(|f| sq_dist64(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            // Unreachable with >= k distinct frames, kept for totality.
            rng.gen_range(0..n)
        };
        let c: Vec<f64> = frames[pick].iter().map(|&v| v as f64).collect();
        for (d, f) in d2.iter_mut().zip(frames) {
            *d = d.min(sq_dist64(f, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign_all(frames: &[&[f32]], centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, f) in frames.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, cent) in centroids.iter().enumerate() {
            let d = sq_dist64(f, cent);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        inertia += best_d;
    }
    inertia
}

/// Trains a codebook on every frame of a corpus.
pub fn train_corpus_codebook(corpus: &Corpus, cfg: &KMeansConfig) -> Result<Codebook> {
    let frames: Vec<&[f32]> = corpus.utterances.iter().flat_map(|u| u.features.frames()).collect();
    train_kmeans(&frames, cfg)
}

/// Per-frame nearest-centroid labels.
pub fn assign(fs: &FeatureSequence, cb: &Codebook) -> Result<Vec<usize>> {
    if fs.dim() != cb.dim() {
        return Err(Error::DimMismatch { expected: cb.dim(), got: fs.dim() });
    }
    Ok(fs.frames().map(|f| cb.nearest(f)).collect())
}

/// A deduplicated sequence of cluster ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub source_id: String,
    pub units: Vec<u32>,
}

/// Collapses runs of equal adjacent labels.
pub fn deduplicate(labels: &[usize]) -> Result<Vec<u32>> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot deduplicate an empty label sequence"));
    }
    let mut out: Vec<u32> = Vec::with_capacity(labels.len());
    for &l in labels {
        if out.last() != Some(&(l as u32)) {
            out.push(l as u32);
        }
    }
    Ok(out)
}

pub fn quantize_utterance(id: &str, fs: &FeatureSequence, cb: &Codebook) -> Result<UnitSequence> {
    let labels = assign(fs, cb).map_err(|e| Error::invalid(format!("utterance {id}: {e}")))?;
    Ok(UnitSequence { source_id: id.to_string(), units: deduplicate(&labels)? })
}

pub fn quantize_corpus(corpus: &Corpus, cb: &Codebook) -> Result<Vec<UnitSequence>> {
    corpus.utterances.iter().map(|u| quantize_utterance(&u.id, &u.features, cb)).collect()
}

const UNITS_HEADER: &str = "id\tunits";

/// One `id<TAB>space separated ids` line per sequence after an `id<TAB>units` header.
pub fn format_unit_corpus<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [u32])>) -> String {
    let mut out = String::from(UNITS_HEADER);
    out.push('\n');
    for (id, units) in rows {
        out.push_str(id);
        out.push('\t');
        let mut first = true;
        for u in units {
            if !first {
                out.push(' ');
            }
            first = false;
            out.push_str(&u.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_unit_corpus(text: &str, origin: &str) -> Result<Vec<UnitSequence>> {
    let err = |line: usize, reason: String| Error::Line { path: origin.to_string(), line, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == UNITS_HEADER => {}
        _ => return Err(err(1, format!("expected header {UNITS_HEADER:?}"))),
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| err(i + 1, "missing TAB".into()))?;
        if id.is_empty() {
            return Err(err(i + 1, "empty id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(i + 1, format!("duplicate id {id}")));
        }
        let units = rest
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u32>().map_err(|_| err(i + 1, format!("bad unit id {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if units.is_empty() {
            return Err(err(i + 1, format!("{id} has no units")));
        }
        out.push(UnitSequence { source_id: id.to_string(), units });
    }
    Ok(out)
}

pub fn write_unit_corpus(path: &Path, seqs: &[UnitSequence]) -> Result<()> {
    let text = format_unit_corpus(seqs.iter().map(|s| (s.source_id.as_str(), s.units.as_slice())));
    binio::write_file(path, text.as_bytes())
}

pub fn read_unit_corpus(path: &Path) -> Result<Vec<UnitSequence>> {
    let bytes = binio::read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "unit corpus is not UTF-8"))?;
    parse_unit_corpus(text, &path.display().to_string())
}

/// Fraction of frames whose cluster's majority label matches their own.
pub fn purity(clusters: &[usize], truth: &[usize]) -> f64 {
    use std::collections::HashMap;
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&c, &t) in clusters.iter().zip(truth) {
        *table.entry(c).or_default().entry(t).or_default() += 1;
    }
    let majority: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / clusters.len().max(1) as f64
}
