//! Pipeline configuration loaded from TOML or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::CorpusConfig;
use super::eval::E2eConfig;
use super::sweep::DEFAULT_FRACTIONS;
use crate::error::{Error, Result};
use crate::seq2lip::{Hyper, PretrainConfig, TrainConfig};
use crate::ttslite::VoiceParams;

/// Second speaker used for lip-space adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerShiftConfig {
    pub seed: u64,
    /// Scale of the rest-shape offset relative to the reference speaker.
    pub magnitude: f64,
    pub minutes: f64,
    pub f0_hz: f64,
    pub voice: VoiceParams,
}

impl Default for SpeakerShiftConfig {
    fn default() -> Self {
        Self {
            seed: 5,
            magnitude: 1.0,
            minutes: 6.25,
            f0_hz: 135.0,
            voice: VoiceParams {
                formant_scale: 1.08,
                gain: 0.3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Seconds of landmark video used to fit the lip space.
    pub lipspace_seconds: f64,
    pub corpus: CorpusConfig,
    pub model: Hyper,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub e2e: E2eConfig,
    pub sweep_fractions: Vec<f64>,
    pub speaker_b: SpeakerShiftConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lipspace_seconds: 600.0,
            corpus: CorpusConfig::default(),
            model: Hyper::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            e2e: E2eConfig::default(),
            sweep_fractions: DEFAULT_FRACTIONS.to_vec(),
            speaker_b: SpeakerShiftConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse by extension: `.toml`, otherwise JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.sample_rate != self.corpus.sample_rate {
            return Err(Error::Config(format!(
                "model sample rate {} differs from corpus {}",
                self.model.sample_rate, self.corpus.sample_rate
            )));
        }
        if self.model.n_mels != self.model.mel.n_mels {
            return Err(Error::Config("model.n_mels must equal model.mel.n_mels".into()));
        }
        if !self.model.d_model.is_multiple_of(self.model.heads) {
            return Err(Error::Config("d_model must be divisible by heads".into()));
        }
        if self.model.cross_slopes.len() > self.model.heads {
            return Err(Error::Config("more cross-attention slopes than heads".into()));
        }
        if self.sweep_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("sweep fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[train]\nepochs = 7\n[model]\nd_model = 32\n").unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.optimizer, TrainConfig::default().optimizer);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.heads, 4);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = PipelineConfig::default();
        std::fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(PipelineConfig::load(&p).unwrap(), c);
        std::fs::write(&p, r#"{"model": {"heads": 5}}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\ntop_k = 3\n").unwrap();
        let err = PipelineConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("top_k"), "{err}");
    }
}
