//! Experiment configuration: one TOML file with a section per stage, plus
//! dotted `key=value` overrides.
//!
//! `Default` carries the full-scale hyper-parameters; `toy()` is the
//! desk-scale preset used for the toy corpus (`configs/toy.toml`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sentiscale_nn::OptimConfig;

use crate::classifier::ClassifierConfig;
use crate::corpus::Segmentation;
use crate::cyclegan::CycleConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::embedding::SkipGramConfig;
use crate::error::{CoreError, Result};
use crate::lm::LmConfig;
use crate::metrics::MetricsConfig;
use crate::plug_and_play::{AnnealSchedule, LatentOptConfig, VraeConfig};
use crate::rl::{RewardWeights, RlConfig};
use crate::seq2seq::Seq2SeqConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Seed of the toy generator (`gen-toy`).
    pub toy_seed: u64,
    pub toy_pairs: usize,
    pub toy_labeled: usize,
    pub segmentation: Segmentation,
    pub vocab_size: usize,
    /// Held-out dialogue pairs for evaluation.
    pub test_size: usize,
    /// Held-out labeled sentences (classifier report and CycleGAN transfer).
    pub labeled_test_size: usize,
    pub split_seed: u64,
    /// Classifier-confidence margin for relabel-and-filter.
    pub relabel_margin: f64,
    /// Cap on VRAE training sentences; 0 uses every response.
    pub vrae_sentences: usize,
    /// Restrict CycleGAN training sentences to items holding exactly one
    /// toy-lexicon word.
    pub toy_single_polarity: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            toy_seed: 0,
            toy_pairs: 1000,
            toy_labeled: 1000,
            segmentation: Segmentation::Word,
            vocab_size: 50_000,
            test_size: 1000,
            labeled_test_size: 1000,
            split_seed: 0,
            relabel_margin: 0.3,
            vrae_sentences: 0,
            toy_single_polarity: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { bind: "127.0.0.1:8080".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub embedding: SkipGramConfig,
    pub classifier: ClassifierConfig,
    pub baseline: Seq2SeqConfig,
    pub persona: Seq2SeqConfig,
    /// Seq2seq behind the R1 reward; same architecture as the baseline.
    pub coherence: Seq2SeqConfig,
    pub discriminator: DiscriminatorConfig,
    pub rl: RlConfig,
    pub rl_weights: RewardWeights,
    pub vrae: VraeConfig,
    pub latent: LatentOptConfig,
    pub cyclegan: CycleConfig,
    pub metrics: MetricsConfig,
    pub service: ServiceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        use sentiscale_nn::LrSchedule;
        let rl_seq2seq = Seq2SeqConfig {
            unit_size: 300,
            layers: 4,
            batch_size: 64,
            max_len: 50,
            optim: OptimConfig::sgd(LrSchedule { initial: 0.5, decay_every: 500, decay_rate: 0.99 }),
            ..Default::default()
        };
        ExperimentConfig {
            data: DataConfig::default(),
            embedding: SkipGramConfig::default(),
            classifier: ClassifierConfig::default(),
            baseline: rl_seq2seq.clone(),
            persona: Seq2SeqConfig { seed: 1, ..Default::default() },
            coherence: Seq2SeqConfig { seed: 7, ..rl_seq2seq },
            discriminator: DiscriminatorConfig::default(),
            rl: RlConfig { iterations: 2000, ..Default::default() },
            rl_weights: RewardWeights::default(),
            vrae: VraeConfig::default(),
            latent: LatentOptConfig::default(),
            cyclegan: CycleConfig::default(),
            metrics: MetricsConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset for the toy corpus; every stage finishes in seconds
    /// to a couple of minutes on one core.
    pub fn toy() -> Self {
        let s2s = Seq2SeqConfig { embed_dim: 16, unit_size: 32, batch_size: 32, max_len: 15, epochs: 14, optim: OptimConfig::adam(0.01), ..Default::default() };
        let classifier = ClassifierConfig { embed_dim: 16, unit_size: 16, epochs: 3, optim: OptimConfig::adam(0.01), ..Default::default() };
        let discriminator = DiscriminatorConfig { embed_dim: 16, unit_size: 32, hidden: 32, batch_size: 32, epochs: 10, optim: OptimConfig::adam(0.01), ..Default::default() };
        ExperimentConfig {
            data: DataConfig { vocab_size: 500, test_size: 100, labeled_test_size: 200, vrae_sentences: 200, toy_single_polarity: true, ..Default::default() },
            embedding: SkipGramConfig { dim: 32, epochs: 20, ..Default::default() },
            classifier: classifier.clone(),
            baseline: s2s.clone(),
            persona: Seq2SeqConfig { seed: 1, ..s2s.clone() },
            coherence: Seq2SeqConfig { seed: 7, ..s2s.clone() },
            discriminator: discriminator.clone(),
            rl: RlConfig { iterations: 60, batch_size: 32, optim: OptimConfig::adam(0.003), ..Default::default() },
            rl_weights: RewardWeights::default(),
            vrae: VraeConfig {
                embed_dim: 16,
                unit_size: 64,
                latent_dim: 32,
                batch_size: 16,
                epochs: 130,
                optim: OptimConfig::adam(0.005),
                word_dropout: 0.3,
                anneal: AnnealSchedule { enabled: true, warmup_steps: 1700 },
                ..Default::default()
            },
            latent: LatentOptConfig::default(),
            cyclegan: CycleConfig {
                unit_size: 32,
                batch_size: 16,
                iterations: 1000,
                identity_loss: true,
                optim: OptimConfig { beta1: 0.5, beta2: 0.9, ..OptimConfig::adam(0.001) },
                ..Default::default()
            },
            metrics: MetricsConfig {
                coherence: Seq2SeqConfig { seed: 101, ..s2s },
                discriminator: DiscriminatorConfig { seed: 102, ..discriminator },
                classifier: ClassifierConfig { seed: 103, ..classifier },
                lm: LmConfig { embed_dim: 16, unit_size: 32, layers: 2, batch_size: 32, max_len: 15, epochs: 5, seed: 104, optim: OptimConfig::adam(0.01) },
            },
            service: ServiceConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| CoreError::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| CoreError::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields at least one key");
            let mut node = &mut root;
            for k in parents {
                node = node.get_mut(*k).filter(|v| v.is_table()).ok_or_else(|| CoreError::Config(format!("unknown configuration key {path}")))?;
            }
            let table = node.as_table_mut().ok_or_else(|| CoreError::Config(format!("unknown configuration key {path}")))?;
            if !table.contains_key(*last) && !optional_key(last) {
                return Err(CoreError::Config(format!("unknown configuration key {path}")));
            }
            table.insert(last.to_string(), value);
        }
        root.try_into().map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))
    }
}

/// Keys that serialize to nothing when unset.
fn optional_key(k: &str) -> bool {
    k == "clip_norm"
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_toy_file_matches_preset() {
        let text = include_str!("../../../configs/toy.toml");
        assert_eq!(ExperimentConfig::from_toml(text).unwrap(), ExperimentConfig::toy());
    }

    #[test]
    fn toml_round_trip() {
        for c in [ExperimentConfig::default(), ExperimentConfig::toy()] {
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn missing_sections_take_defaults() {
        let c = ExperimentConfig::from_toml("[rl]\niterations = 5\n").unwrap();
        assert_eq!(c.rl.iterations, 5);
        assert_eq!(c.rl.batch_size, 64);
        assert_eq!(c.cyclegan, CycleConfig::default());
    }

    #[test]
    fn full_scale_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.classifier.unit_size, c.classifier.batch_size, c.classifier.max_len), (256, 32, 40));
        assert_eq!((c.persona.unit_size, c.persona.batch_size, c.persona.max_len), (256, 64, 15));
        assert_eq!((c.baseline.unit_size, c.baseline.layers, c.baseline.max_len), (300, 4, 50));
        assert_eq!((c.rl_weights.alpha, c.rl_weights.beta), (0.3, 0.3));
        assert_eq!((c.vrae.unit_size, c.vrae.batch_size), (500, 48));
        assert_eq!((c.latent.gamma, c.latent.delta), (400.0, 25.0));
        assert_eq!((c.cyclegan.unit_size, c.cyclegan.gen_steps, c.cyclegan.disc_steps), (256, 1, 1));
        assert_eq!(c.cyclegan.optim.schedule.initial, 0.0001);
        assert_eq!(c.metrics.lm.layers, 2);
        assert_eq!(c.embedding.dim, 300);
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::toy();
        let o = c.with_overrides(&["rl.iterations=7".into(), "cyclegan.identity_loss=false".into(), "service.bind=0.0.0.0:9000".into(), "rl_weights.alpha=0.1".into()]).unwrap();
        assert_eq!(o.rl.iterations, 7);
        assert!(!o.cyclegan.identity_loss);
        assert_eq!(o.service.bind, "0.0.0.0:9000");
        assert_eq!(o.rl_weights.alpha, 0.1);
        assert_eq!(o.baseline, c.baseline);
        assert!(c.with_overrides(&["rl.nope=1".into()]).is_err());
        assert!(c.with_overrides(&["rl.iterations=many".into()]).is_err());
        assert!(c.with_overrides(&["noequals".into()]).is_err());
        let clipped = c.with_overrides(&["baseline.optim.clip_norm=5.0".into()]).unwrap();
        assert_eq!(clipped.baseline.optim.clip_norm, Some(5.0));
    }
}
