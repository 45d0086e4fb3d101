use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use codavamp_core::codec::CodecConfig;
use codavamp_core::eval::{CovarianceMode, ProbeConfig};
use codavamp_core::matm::{LoraConfig, MatmConfig, TrainConfig};
use codavamp_core::rng::{derive, derive_named};
use codavamp_core::synth::CorpusConfig;
use codavamp_core::vamp::{presets, PromptSettings};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FadSettings {
    pub embedding: String,
    pub covariance: CovarianceMode,
}

impl Default for FadSettings {
    fn default() -> Self {
        Self { embedding: "matm-pooled".into(), covariance: CovarianceMode::Unbiased }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSettings {
    pub chunk_ms: Vec<f64>,
    /// `codec`, `identity` or `zero`.
    pub reconstructor: String,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self { chunk_ms: vec![2.27, 22.7], reconstructor: "codec".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub window: usize,
    pub hop: usize,
    pub floor: f64,
    /// Empty means every built-in embedding that can be built.
    pub embeddings: Vec<String>,
    pub covariance: CovarianceMode,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            window: 512,
            hop: 128,
            floor: codavamp_core::audio::DEFAULT_SPECTRAL_FLOOR,
            embeddings: Vec::new(),
            covariance: CovarianceMode::Unbiased,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub task: String,
    /// `full`, `no-finetune`, `base` (random init), `tokenizer`,
    /// `random-projection`, `onset`, `energy`.
    pub variants: Vec<String>,
    pub classifier: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            task: "rhythm".into(),
            variants: ["full", "no-finetune", "base", "tokenizer", "random-projection"].map(String::from).to_vec(),
            classifier: ProbeConfig::default(),
        }
    }
}

/// Everything a subcommand may read. Sub-seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub matm: MatmConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub finetune: TrainConfig,
    pub prompts: BTreeMap<String, PromptSettings>,
    pub fad: FadSettings,
    pub recon: ReconSettings,
    pub calibration: CalibrationSettings,
    pub probe: ProbeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            out_dir: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            codec: CodecConfig::default(),
            matm: MatmConfig::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            finetune: TrainConfig::default(),
            prompts: presets(),
            fad: FadSettings::default(),
            recon: ReconSettings::default(),
            calibration: CalibrationSettings::default(),
            probe: ProbeSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Prompt entries in the file override or extend the built-in presets.
    pub fn merge_presets(&mut self) {
        let mut all = presets();
        all.append(&mut self.prompts);
        self.prompts = all;
    }

    /// Push the top-level seed into every randomized stage.
    pub fn derive_seeds(&mut self) {
        let s = self.seed;
        self.corpus.seed = derive_named(s, "corpus");
        self.codec.seed = derive_named(s, "codec");
        self.train.seed = derive_named(s, "train-matm");
        self.finetune.seed = derive_named(s, "finetune");
        let probe = derive_named(s, "probe");
        self.probe.classifier.seeds = (0..self.probe.classifier.seeds.len() as u64).map(|i| derive(probe, &[i])).collect();
    }

    pub fn prompt(&self, source: &str) -> Result<PromptSettings, CliError> {
        let s = self.prompts.get(source).cloned().ok_or_else(|| {
            CliError::config(format!(
                "unknown source {source:?}; known: {}",
                self.prompts.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        s.validate()?;
        Ok(s)
    }
}
