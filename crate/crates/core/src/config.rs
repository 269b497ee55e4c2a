//! Pipeline configuration, read from TOML.
//!
//! Every seed lives in `[seeds]` and every one of them is required; the
//! section structs below carry everything else. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Color, Shape, SizeClass, SyntheticCorpusSpec};
use crate::encoder::ToyEncoderConfig;
use crate::error::{Error, Result};
use crate::transform::TransformConfig;
use crate::trigger::{AdversarialBudget, NoiseSpec, NoiseType, PatchSpec, Strategy};
use crate::verify::{ResMode, VerificationThresholds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub corpus: u64,
    /// Owner encoder, basic-trigger sampling, and trigger noise.
    pub owner: u64,
    /// Independently trained encoders standing in for other parties.
    pub foreign: Vec<u64>,
    /// Transform initialization and anchor sampling.
    pub transform: u64,
    pub attack: u64,
    pub stealth: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSettings {
    pub name: String,
    pub image_size: (usize, usize),
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub sizes: Vec<SizeClass>,
    pub samples_per_class: usize,
    pub jitter: usize,
    pub background_noise: f64,
}

impl CorpusSettings {
    pub fn spec(&self, seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            name: self.name.clone(),
            image_size: self.image_size,
            shapes: self.shapes.clone(),
            colors: self.colors.clone(),
            sizes: self.sizes.clone(),
            samples_per_class: self.samples_per_class,
            jitter: self.jitter,
            background_noise: self.background_noise,
            seed,
        }
    }
}

impl From<&SyntheticCorpusSpec> for CorpusSettings {
    fn from(s: &SyntheticCorpusSpec) -> Self {
        Self {
            name: s.name.clone(),
            image_size: s.image_size,
            shapes: s.shapes.clone(),
            colors: s.colors.clone(),
            sizes: s.sizes.clone(),
            samples_per_class: s.samples_per_class,
            jitter: s.jitter,
            background_noise: s.background_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub embed_dim: usize,
    pub image_hidden: usize,
    pub text_hidden: usize,
    pub token_dim: usize,
    pub input_gain: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub holdout_fraction: f64,
}

impl EncoderSettings {
    pub fn config(&self, seed: u64) -> ToyEncoderConfig {
        ToyEncoderConfig {
            embed_dim: self.embed_dim,
            image_hidden: self.image_hidden,
            text_hidden: self.text_hidden,
            token_dim: self.token_dim,
            input_gain: self.input_gain,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            temperature: self.temperature,
            holdout_fraction: self.holdout_fraction,
            seed,
        }
    }
}

impl From<&ToyEncoderConfig> for EncoderSettings {
    fn from(c: &ToyEncoderConfig) -> Self {
        Self {
            embed_dim: c.embed_dim,
            image_hidden: c.image_hidden,
            text_hidden: c.text_hidden,
            token_dim: c.token_dim,
            input_gain: c.input_gain,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            temperature: c.temperature,
            holdout_fraction: c.holdout_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSettings {
    /// Basic pairs drawn per model; only accepted triggers are kept.
    pub k: usize,
    pub noise_type: NoiseType,
    pub strategy: Strategy,
    pub intensity: f64,
    pub patch: PatchSpec,
    pub budget: AdversarialBudget,
}

impl TriggerSettings {
    pub fn noise(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            noise_type: self.noise_type,
            strategy: self.strategy,
            intensity: self.intensity,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSettings {
    pub lambda: f64,
    pub eta: f64,
    pub epsilon2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub freeze_text_head: bool,
    pub init_scale: f64,
    pub anchor_pairs: usize,
    pub anchor_weight: f64,
}

impl TransformSettings {
    pub fn config(&self, seed: u64) -> TransformConfig {
        TransformConfig {
            lambda: self.lambda,
            eta: self.eta,
            epsilon2: self.epsilon2,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            hidden_dim: self.hidden_dim,
            freeze_text_head: self.freeze_text_head,
            init_scale: self.init_scale,
            anchor_pairs: self.anchor_pairs,
            anchor_weight: self.anchor_weight,
        }
    }
}

impl From<&TransformConfig> for TransformSettings {
    fn from(c: &TransformConfig) -> Self {
        Self {
            lambda: c.lambda,
            eta: c.eta,
            epsilon2: c.epsilon2,
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            hidden_dim: c.hidden_dim,
            freeze_text_head: c.freeze_text_head,
            init_scale: c.init_scale,
            anchor_pairs: c.anchor_pairs,
            anchor_weight: c.anchor_weight,
        }
    }
}

/// With `calibrate`, σ and τ come from the owner's model and module after
/// `train-transform`; otherwise both must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySettings {
    pub aggregate_threshold: f64,
    pub mode: ResMode,
    pub calibrate: bool,
    pub calibration_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl VerifySettings {
    /// The fixed thresholds, when calibration is off.
    pub fn fixed_thresholds(&self) -> Result<Option<VerificationThresholds>> {
        if self.calibrate {
            return Ok(None);
        }
        match (self.sigma, self.tau) {
            (Some(sigma), Some(tau)) => VerificationThresholds::new(sigma, tau, self.mode).map(Some),
            (None, _) => Err(Error::InvalidConfig("verify.sigma is required when verify.calibrate = false".into())),
            (_, None) => Err(Error::InvalidConfig("verify.tau is required when verify.calibrate = false".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    /// Triggers per scenario.
    pub trials: usize,
    pub forged_noise_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StealthSettings {
    pub pairs: usize,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Artifact root; the command line and the environment take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<PathBuf>,
    pub seeds: Seeds,
    pub corpus: CorpusSettings,
    pub encoder: EncoderSettings,
    pub triggers: TriggerSettings,
    pub transform: TransformSettings,
    pub verify: VerifySettings,
    pub attack: AttackSettings,
    pub stealth: StealthSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            artifacts: None,
            seeds: Seeds {
                corpus: 7,
                owner: 7,
                foreign: vec![8, 9],
                transform: 11,
                attack: 7,
                stealth: 3,
            },
            corpus: CorpusSettings::from(&SyntheticCorpusSpec::default()),
            encoder: EncoderSettings::from(&ToyEncoderConfig::default()),
            triggers: TriggerSettings {
                k: 16,
                noise_type: NoiseType::Adversarial,
                strategy: Strategy::Optimized,
                intensity: 1.0,
                patch: PatchSpec::default(),
                budget: AdversarialBudget::default(),
            },
            transform: TransformSettings::from(&TransformConfig::default()),
            verify: VerifySettings {
                aggregate_threshold: 0.5,
                mode: ResMode::Behavioral,
                calibrate: true,
                calibration_pairs: 128,
                sigma: None,
                tau: None,
            },
            attack: AttackSettings {
                trials: 16,
                forged_noise_intensity: 0.1,
            },
            stealth: StealthSettings {
                pairs: 16,
                intensity: 0.1,
            },
        }
    }
}

impl PipelineConfig {
    /// Parses and validates. Schema errors name the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// Replaces the owner seed and re-validates.
    pub fn with_owner_seed(mut self, seed: u64) -> Result<Self> {
        self.seeds.owner = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.seeds;
        let distinct: BTreeSet<u64> = s.foreign.iter().copied().collect();
        if distinct.len() != s.foreign.len() {
            return Err(Error::InvalidConfig("seeds.foreign contains a repeated seed".into()));
        }
        if distinct.contains(&s.owner) {
            return Err(Error::InvalidConfig(format!(
                "seeds.owner {} is also listed in seeds.foreign",
                s.owner
            )));
        }
        self.corpus.spec(s.corpus).validate()?;
        self.encoder.config(s.owner).validate()?;
        if self.triggers.k == 0 {
            return Err(Error::InvalidConfig("triggers.k must be positive".into()));
        }
        self.triggers.noise(s.owner).validate()?;
        self.triggers.budget.validate()?;
        self.triggers.patch.origin(self.corpus.image_size)?;
        self.transform.config(s.transform).validate()?;
        let v = &self.verify;
        if !(v.aggregate_threshold > 0.0 && v.aggregate_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "verify.aggregate_threshold {} must be in (0, 1]",
                v.aggregate_threshold
            )));
        }
        v.fixed_thresholds()?;
        if v.calibrate && v.calibration_pairs < crate::verify::MIN_CLEAN_PAIRS {
            return Err(Error::InvalidConfig(format!(
                "verify.calibration_pairs must be at least {}",
                crate::verify::MIN_CLEAN_PAIRS
            )));
        }
        if self.attack.trials == 0 {
            return Err(Error::InvalidConfig("attack.trials must be positive".into()));
        }
        if !(self.attack.forged_noise_intensity >= 0.0 && self.attack.forged_noise_intensity <= 1.0) {
            return Err(Error::InvalidConfig("attack.forged_noise_intensity must be in [0, 1]".into()));
        }
        if self.stealth.pairs == 0 {
            return Err(Error::InvalidConfig("stealth.pairs must be positive".into()));
        }
        if !(self.stealth.intensity >= 0.0 && self.stealth.intensity <= 1.0) {
            return Err(Error::InvalidConfig("stealth.intensity must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_seed_is_an_error_naming_it() {
        let text = PipelineConfig::default().to_toml_string().replace("transform = 11\n", "");
        let err = PipelineConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("transform"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = PipelineConfig::default().to_toml_string().replace("[attack]\n", "[attack]\nbogus = 1\n");
        let err = PipelineConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn owner_seed_may_not_collide_with_a_foreign_seed() {
        assert!(PipelineConfig::default().with_owner_seed(8).is_err());
        assert_eq!(PipelineConfig::default().with_owner_seed(21).unwrap().seeds.owner, 21);
    }

    #[test]
    fn fixed_thresholds_need_both_values() {
        let mut c = PipelineConfig::default();
        c.verify.calibrate = false;
        c.verify.sigma = Some(0.6);
        assert!(c.validate().unwrap_err().to_string().contains("verify.tau"));
        c.verify.tau = Some(0.1);
        c.validate().unwrap();
    }
}
