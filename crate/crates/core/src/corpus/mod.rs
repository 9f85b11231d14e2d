//! Synthetic feature corpora with a known latent symbol sequence per
//! utterance, manifest I/O for ingested corpora, and stratified pair sets.

mod features;
mod pairs;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use features::{read_features, write_features, FeatureSequence, FEATURE_MAGIC, FEATURE_VERSION};
pub use pairs::{build_scored_pairs, bin_label, read_pairs, write_pairs, ScoredPair, ScoredPairSet, Split};

pub const DEFAULT_MAX_FRAMES: usize = 1000;

fn default_max_frames() -> usize {
    DEFAULT_MAX_FRAMES
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub alphabet_size: usize,
    pub feature_dim: usize,
    pub frames_per_symbol_range: [usize; 2],
    pub n_speakers: usize,
    pub speaker_offset_scale: f64,
    pub noise_scale: f64,
    pub utterance_len_range: [usize; 2],
    pub n_utterances: usize,
    pub seed: u64,
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            alphabet_size: 16,
            feature_dim: 16,
            frames_per_symbol_range: [2, 4],
            n_speakers: 4,
            speaker_offset_scale: 0.1,
            noise_scale: 0.05,
            utterance_len_range: [3, 8],
            n_utterances: 2000,
            seed: 0,
            max_frames: DEFAULT_MAX_FRAMES,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(Error::validation("alphabet_size", "must be at least 2"));
        }
        if self.feature_dim < 2 {
            return Err(Error::validation("feature_dim", "must be at least 2"));
        }
        check_range("frames_per_symbol_range", self.frames_per_symbol_range)?;
        check_range("utterance_len_range", self.utterance_len_range)?;
        if self.n_speakers == 0 {
            return Err(Error::validation("n_speakers", "must be at least 1"));
        }
        if self.n_utterances == 0 {
            return Err(Error::validation("n_utterances", "must be at least 1"));
        }
        for (field, v) in [("speaker_offset_scale", self.speaker_offset_scale), ("noise_scale", self.noise_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(field, "must be finite and non-negative"));
            }
        }
        let longest = self.frames_per_symbol_range[1] * self.utterance_len_range[1];
        if self.max_frames == 0 || longest > self.max_frames {
            return Err(Error::validation(
                "max_frames",
                format!("longest possible utterance has {longest} frames, cap is {}", self.max_frames),
            ));
        }
        Ok(())
    }
}

fn check_range(field: &str, r: [usize; 2]) -> Result<()> {
    if r[0] == 0 || r[0] > r[1] {
        return Err(Error::validation(field, format!("need 1 <= min <= max, got {r:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: usize,
    /// Latent ground-truth symbols; absent for ingested data.
    pub symbols: Option<Vec<u32>>,
    pub features: FeatureSequence,
}

/// Generator-side facts kept alongside a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub centroids: Vec<Vec<f64>>,
    pub speaker_offsets: Vec<Vec<f64>>,
}

impl SyntheticTruth {
    pub fn min_centroid_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.centroids.iter().enumerate() {
            for b in &self.centroids[i + 1..] {
                best = best.min(euclid(a, b));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub truth: Option<SyntheticTruth>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn id_index(&self) -> BTreeMap<&str, usize> {
        self.utterances.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.dim())
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.utterances.is_empty() && self.utterances.iter().all(|u| u.symbols.is_some())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gaussian_vec(rng: &mut rng::Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut rng::Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const CENTROID_ATTEMPTS: usize = 100_000;

fn draw_centroids(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::rng(spec.seed, "centroids", 0);
    let min_dist = (4.0 * spec.noise_scale).max(1e-6);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.alphabet_size);
    let mut attempts = 0;
    while out.len() < spec.alphabet_size {
        attempts += 1;
        if attempts > CENTROID_ATTEMPTS {
            return Err(Error::validation(
                "noise_scale",
                format!("cannot place {} centroids {min_dist:.3} apart on the unit sphere", spec.alphabet_size),
            ));
        }
        let c = unit_vec(&mut rng, spec.feature_dim);
        if out.iter().all(|o| euclid(o, &c) > min_dist) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Generates a corpus as a pure function of `spec` (including its seed).
///
/// Symbol sequences never repeat a symbol back to back, so deduplicated
/// frame labels of a noise-free corpus reproduce them exactly.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let centroids = draw_centroids(spec)?;
    let mut srng = rng::rng(spec.seed, "speakers", 0);
    let speaker_offsets: Vec<Vec<f64>> = (0..spec.n_speakers)
        .map(|_| unit_vec(&mut srng, spec.feature_dim).into_iter().map(|x| x * spec.speaker_offset_scale).collect())
        .collect();

    let utterances = (0..spec.n_utterances)
        .map(|i| {
            let mut rng = rng::rng(spec.seed, "utterance", i as u64);
            let speaker_id = rng.gen_range(0..spec.n_speakers);
            let len = rng.gen_range(spec.utterance_len_range[0]..=spec.utterance_len_range[1]);
            let mut symbols = Vec::with_capacity(len);
            for _ in 0..len {
                let s = match symbols.last() {
                    None => rng.gen_range(0..spec.alphabet_size as u32),
                    Some(&prev) => {
                        let s = rng.gen_range(0..spec.alphabet_size as u32 - 1);
                        if s >= prev {
                            s + 1
                        } else {
                            s
                        }
                    }
                };
                symbols.push(s);
            }
            let mut data = Vec::new();
            let mut n_frames = 0;
            for &s in &symbols {
                let run = rng.gen_range(spec.frames_per_symbol_range[0]..=spec.frames_per_symbol_range[1]);
                for _ in 0..run {
                    for (c, o) in centroids[s as usize].iter().zip(&speaker_offsets[speaker_id]) {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        data.push((c + o + spec.noise_scale * noise) as f32);
                    }
                    n_frames += 1;
                }
            }
            Ok(Utterance {
                id: format!("utt{i:05}"),
                speaker_id,
                symbols: Some(symbols),
                features: FeatureSequence::new(n_frames, spec.feature_dim, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus { utterances, truth: Some(SyntheticTruth { centroids, speaker_offsets }) })
}

/// Cosine similarity of the two bag-of-symbols count vectors.
pub fn ground_truth_similarity(a: &Utterance, b: &Utterance) -> Result<f64> {
    let (Some(sa), Some(sb)) = (&a.symbols, &b.symbols) else {
        return Err(Error::Unsupported(format!(
            "ground-truth similarity needs symbols on both {} and {}",
            a.id, b.id
        )));
    };
    Ok(bag_cosine(sa, sb))
}

pub(crate) fn bag_counts(symbols: &[u32]) -> BTreeMap<u32, f64> {
    let mut m = BTreeMap::new();
    for &s in symbols {
        *m.entry(s).or_insert(0.0) += 1.0;
    }
    m
}

pub(crate) fn bag_cosine(a: &[u32], b: &[u32]) -> f64 {
    let (ca, cb) = (bag_counts(a), bag_counts(b));
    let dot: f64 = ca.iter().filter_map(|(k, x)| cb.get(k).map(|y| x * y)).sum();
    let na = ca.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: usize,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbols: Option<Vec<u32>>,
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Line {
            path: origin.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Line { path: origin.to_string(), line: i + 1, reason: format!("duplicate id {}", entry.id) });
        }
        out.push(entry);
    }
    Ok(out)
}

/// Writes `manifest.jsonl` plus one feature file per utterance under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let mut manifest = String::new();
    for u in &corpus.utterances {
        let rel = format!("features/{}.semf", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        let entry = ManifestEntry { id: u.id.clone(), speaker: u.speaker_id, path: rel, symbols: u.symbols.clone() };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    crate::binio::write_file(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Loads a corpus from a manifest; feature paths resolve relative to it.
pub fn read_corpus(manifest: &Path, max_frames: usize) -> Result<Corpus> {
    let text = String::from_utf8(crate::binio::read_file(manifest)?)
        .map_err(|e| Error::parse(e.utf8_error().valid_up_to(), "manifest is not UTF-8"))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, &manifest.display().to_string())?;
    let mut utterances = Vec::with_capacity(entries.len());
    let mut dim = None;
    for e in entries {
        let features = read_features(&base.join(&e.path))?;
        if features.n_frames() > max_frames {
            return Err(Error::validation(
                format!("utterance {}", e.id),
                format!("{} frames exceeds the cap of {max_frames}", features.n_frames()),
            ));
        }
        match dim {
            None => dim = Some(features.dim()),
            Some(d) if d != features.dim() => return Err(Error::DimMismatch { expected: d, got: features.dim() }),
            _ => {}
        }
        utterances.push(Utterance { id: e.id, speaker_id: e.speaker, symbols: e.symbols, features });
    }
    Ok(Corpus { utterances, truth: None })
}
