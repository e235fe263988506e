#![allow(dead_code)]

use std::path::Path;

use sentiscale::pipeline::Pipeline;
use sentiscale::workspace::Workspace;
use sentiscale_core::config::ExperimentConfig;

/// Toy preset shrunk so that every stage finishes in a few seconds.
pub fn small_config() -> ExperimentConfig {
    ExperimentConfig::toy()
        .with_overrides(&[
            "data.toy_pairs=300".into(),
            "data.toy_labeled=300".into(),
            "data.test_size=20".into(),
            "data.labeled_test_size=60".into(),
            "baseline.epochs=4".into(),
            "persona.epochs=4".into(),
            "metrics.coherence.epochs=2".into(),
            "metrics.discriminator.epochs=2".into(),
            "metrics.classifier.epochs=2".into(),
            "metrics.lm.epochs=2".into(),
        ])
        .unwrap()
}

pub fn pipeline(dir: &Path, cfg: ExperimentConfig) -> Pipeline {
    Pipeline::new(Workspace::with_models(dir, dir.join("models")), cfg)
}

/// Data, classifier, baseline, persona and metric bundle in `dir`.
pub fn small_workspace(dir: &Path) -> Pipeline {
    let p = pipeline(dir, small_config());
    p.gen_toy(0).unwrap();
    p.prepare_data().unwrap();
    p.train_classifier().unwrap();
    p.train_baseline().unwrap();
    p.train_persona().unwrap();
    p.train_metrics().unwrap();
    p
}
