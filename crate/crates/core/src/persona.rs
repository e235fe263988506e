//! Sentiment-conditioned responder: the decoder reads a scalar score channel
//! at every step, trained with SC of the reference and steered at inference.

use std::path::Path;

use crate::checkpoint::model_id;
use crate::classifier::SentimentModel;
use crate::corpus::{DialoguePair, Vocabulary};
use crate::error::{CoreError, Result};
use crate::seq2seq::{encode_pairs, Seq2Seq, Seq2SeqConfig, TrainReport};

#[derive(Clone, Debug)]
pub struct PersonaModel {
    pub model: Seq2Seq,
}

pub fn validate_score(score: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&score) {
        Ok(score)
    } else {
        Err(CoreError::InvalidScore(score))
    }
}

impl PersonaModel {
    pub fn new(cfg: Seq2SeqConfig, vocab: Vocabulary) -> Result<Self> {
        Ok(PersonaModel { model: Seq2Seq::new(cfg, vocab, 1)? })
    }

    /// Greedy response with the score channel fixed to `desired_score`.
    pub fn respond(&self, x: &[usize], desired_score: f64) -> Result<Vec<usize>> {
        self.model.decode(x, Some(validate_score(desired_score)?))
    }

    pub fn classifier_id(&self) -> Option<&str> {
        self.model.meta.get("classifier_id").and_then(|v| v.as_str())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = Seq2Seq::load(dir)?;
        if model.cond_dim != 1 {
            return Err(CoreError::Config(format!("{} is not a persona checkpoint", dir.display())));
        }
        Ok(PersonaModel { model })
    }
}

/// MLE training where each example's decoder reads SC(ŷ) from the frozen
/// classifier; scores are computed once up front.
pub fn train_persona(pairs: &[DialoguePair], sc: Option<&SentimentModel>, vocab: &Vocabulary, cfg: &Seq2SeqConfig) -> Result<(PersonaModel, TrainReport)> {
    let sc = sc.ok_or_else(|| CoreError::MissingDependency("persona training needs a sentiment classifier".into()))?;
    if pairs.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let mut examples = encode_pairs(pairs, vocab, cfg.max_len);
    let ys: Vec<Vec<usize>> = examples.iter().map(|e| e.y.clone()).collect();
    let scores = sc.score_batch(&ys)?;
    for (e, s) in examples.iter_mut().zip(scores) {
        e.cond = Some(s);
    }
    let mut persona = PersonaModel::new(cfg.clone(), vocab.clone())?;
    persona.model.meta.insert("classifier_id".into(), model_id(&sc.store).into());
    let report = persona.model.fit(&examples, cfg.epochs)?;
    Ok((persona, report))
}
