//! Pipeline configuration as a sectioned TOML document. Unknown keys are
//! rejected; every section has defaults so an empty document is valid.

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::distill::{DistillConfig, StudentPooling};
use crate::error::{Error, Result};
use crate::nn::{Conditioning, EncoderConfig};
use crate::quantizer::KMeansConfig;
use crate::teachers::{MlmConfig, Pooling, TeacherConfig};
use crate::training::TrainRunConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Every stage seed is derived from this one value.
    pub seed: u64,
    pub corpus: SyntheticSpec,
    pub pairs: PairsSection,
    pub quantizer: QuantizerSection,
    pub tokenizer: TokenizerSection,
    pub mlm: MlmSection,
    pub wavembed: WavEmbedSection,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSection {
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for PairsSection {
    fn default() -> Self {
        PairsSection { n_dev: 200, n_test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Training-frame budget; 0 uses every frame.
    pub max_frames: usize,
    pub n_init: usize,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        QuantizerSection { k: 50, max_iters: 100, tol: 1e-6, max_frames: 20000, n_init: 4 }
    }
}

impl QuantizerSection {
    pub fn kmeans(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            max_iters: self.max_iters,
            tol: self.tol,
            seed,
            max_frames: (self.max_frames > 0).then_some(self.max_frames),
            n_init: self.n_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_size: 120 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmSection {
    pub encoder: EncoderConfig,
    pub pooling: Pooling,
    pub train: MlmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WavEmbedSection {
    pub encoder: EncoderConfig,
    pub decoder: EncoderConfig,
    pub conditioning: Conditioning,
    pub max_target_len: usize,
    /// Trailing utterances held out for dev loss.
    pub dev_size: usize,
    pub run: TrainRunConfig,
}

impl Default for WavEmbedSection {
    fn default() -> Self {
        WavEmbedSection {
            encoder: EncoderConfig::default(),
            decoder: EncoderConfig::default(),
            conditioning: Conditioning::default(),
            max_target_len: 128,
            dev_size: 100,
            run: TrainRunConfig { epochs: 4, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub encoder: EncoderConfig,
    pub decoder: EncoderConfig,
    pub pooling: Pooling,
    pub dev_size: usize,
    pub train: TeacherConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            encoder: EncoderConfig::default(),
            decoder: EncoderConfig::default(),
            pooling: Pooling::default(),
            dev_size: 100,
            train: TeacherConfig { run: TrainRunConfig { epochs: 3, ..Default::default() }, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub encoder: EncoderConfig,
    pub pooling: StudentPooling,
    pub dev_size: usize,
    pub train: DistillConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        let mut train = DistillConfig::default();
        train.run.epochs = 4;
        DistillSection { encoder: EncoderConfig::default(), pooling: StudentPooling::default(), dev_size: 100, train }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub recall_ks: Vec<usize>,
    pub permutations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { recall_ks: vec![1, 5, 10], permutations: 1000 }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map_or(0, |s| s.start);
            Error::parse(at, format!("config: {}", e.message().trim()))
        })?;
        Ok(cfg)
    }

    /// Copies the top-level seed into every stage and checks ranges.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::validation("seed", "must fit in a signed 64-bit integer"));
        }
        let s = self.seed;
        self.corpus.seed = s;
        self.mlm.train.seed = s;
        self.wavembed.run.seed = s;
        self.teacher.train.run.seed = s;
        self.distill.train.run.seed = s;
        self.corpus.validate()?;
        if self.quantizer.k == 0 || self.quantizer.n_init == 0 {
            return Err(Error::validation("quantizer.k", "k and n_init must be positive"));
        }
        for (name, e) in [
            ("mlm.encoder", &self.mlm.encoder),
            ("wavembed.encoder", &self.wavembed.encoder),
            ("wavembed.decoder", &self.wavembed.decoder),
            ("teacher.encoder", &self.teacher.encoder),
            ("teacher.decoder", &self.teacher.decoder),
            ("distill.encoder", &self.distill.encoder),
        ] {
            e.validate().map_err(|err| Error::validation(name, err.to_string()))?;
        }
        self.wavembed.run.validate()?;
        self.teacher.train.validate()?;
        self.distill.train.validate()?;
        if self.eval.recall_ks.contains(&0) {
            return Err(Error::validation("eval.recall_ks", "every k must be positive"));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = PipelineConfig::from_toml("[quantizer]\nclusters = 8\n").unwrap_err();
        assert!(e.to_string().contains("clusters"), "{e}");
        let e = PipelineConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert_eq!(e.kind(), "parse");
    }

    #[test]
    fn resolved_config_round_trips_and_propagates_seed() {
        let cfg = PipelineConfig::from_toml("seed = 3\n[quantizer]\nk = 8\n[wavembed.run]\nepochs = 1\n")
            .unwrap()
            .resolve(Some(11))
            .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.wavembed.run.seed, 11);
        assert_eq!(cfg.corpus.seed, 11);
        assert_eq!(cfg.quantizer.k, 8);
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn resolve_rejects_bad_ranges() {
        let cfg = PipelineConfig::from_toml("[teacher.train]\ndeletion_ratio = 1.5\n").unwrap();
        assert!(cfg.resolve(None).is_err());
        let cfg = PipelineConfig::from_toml("[wavembed.encoder]\nheads = 5\n").unwrap();
        assert!(cfg.resolve(None).is_err());
    }
}
