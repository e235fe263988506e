//! Reward-driven fine-tuning of a pretrained responder with REINFORCE.
//!
//! R1 is the length-normalised log-probability under a separate coherence
//! model, R2 the pair discriminator and R3 the sentiment classifier.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sentiscale_nn::parallel::{batch_gradients, map};
use sentiscale_nn::{Gradients, Graph, OptimConfig, Optimizer, ParamStore};

use crate::classifier::SentimentModel;
use crate::corpus::{VocabMap, Vocabulary};
use crate::discriminator::PairDiscriminator;
use crate::error::{CoreError, Result};
use crate::seq2seq::Seq2Seq;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { alpha: 0.3, beta: 0.3 }
    }
}

impl RewardWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = RewardWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.alpha, self.beta);
        if a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0 && a + b < 1.0 {
            Ok(())
        } else {
            Err(CoreError::InvalidWeights { alpha: a, beta: b })
        }
    }

    pub fn gamma(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }
}

pub fn total_reward(w: RewardWeights, r1: f64, r2: f64, r3: f64) -> Result<f64> {
    w.validate()?;
    Ok(w.alpha * r1 + w.beta * r2 + w.gamma() * r3)
}

/// Per-token log-probability of `y` (EOS step included) under `coh`.
pub fn reward_r1(coh: &Seq2Seq, x: &[usize], y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(CoreError::EmptySentence);
    }
    let lp = coh.sequence_logprob(x, y, None)?;
    Ok(lp / coh.scored_len(&y[..y.len().min(coh.max_len())]) as f64)
}

pub fn reward_r2(d: &PairDiscriminator, x: &[usize], y: &[usize]) -> Result<f64> {
    d.score(x, y)
}

pub fn reward_r3(sc: &SentimentModel, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(CoreError::EmptySentence);
    }
    sc.score(y)
}

/// Frozen reward models, each with its own vocabulary.
pub struct RewardModels<'a> {
    pub coherence: &'a Seq2Seq,
    pub discriminator: &'a PairDiscriminator,
    pub classifier: &'a SentimentModel,
    to_coh: VocabMap,
    to_disc: VocabMap,
    to_sc: VocabMap,
}

impl<'a> RewardModels<'a> {
    /// `policy_vocab` is the vocabulary of the ids passed to [`Self::components`].
    pub fn new(policy_vocab: &Vocabulary, coherence: &'a Seq2Seq, discriminator: &'a PairDiscriminator, classifier: &'a SentimentModel) -> Self {
        RewardModels {
            to_coh: VocabMap::new(policy_vocab, &coherence.vocab),
            to_disc: VocabMap::new(policy_vocab, &discriminator.vocab),
            to_sc: VocabMap::new(policy_vocab, &classifier.vocab),
            coherence,
            discriminator,
            classifier,
        }
    }

    /// (R1, R2, R3) for one pair. An empty response gets the coherence
    /// model's log-probability of stopping immediately and zero for R2, R3.
    pub fn components(&self, x: &[usize], y: &[usize]) -> Result<[f64; 3]> {
        if y.is_empty() {
            let cx = self.to_coh.apply(x);
            let mut g = Graph::new();
            let lp = self.coherence.logprob_graph(&mut g, &self.coherence.store, &cx, &[], None);
            return Ok([g.scalar(lp), 0.0, 0.0]);
        }
        Ok([
            reward_r1(self.coherence, &self.to_coh.apply(x), &self.to_coh.apply(y))?,
            reward_r2(self.discriminator, &self.to_disc.apply(x), &self.to_disc.apply(y))?,
            reward_r3(self.classifier, &self.to_sc.apply(y))?,
        ])
    }

    pub fn sentiment(&self, y: &[usize]) -> Result<f64> {
        if y.is_empty() {
            return Ok(0.0);
        }
        reward_r3(self.classifier, &self.to_sc.apply(y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub baseline_decay: f64,
    pub optim: OptimConfig,
    pub seed: u64,
    pub probe_size: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            iterations: 2500,
            batch_size: 64,
            temperature: 1.0,
            baseline_decay: 0.9,
            optim: OptimConfig::sgd(sentiscale_nn::LrSchedule { initial: 0.5, decay_every: 500, decay_rate: 0.99 }),
            seed: 0,
            probe_size: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlLogEntry {
    pub iter: usize,
    #[serde(rename = "mean_R")]
    pub mean_r: f64,
    #[serde(rename = "mean_R1")]
    pub mean_r1: f64,
    #[serde(rename = "mean_R2")]
    pub mean_r2: f64,
    #[serde(rename = "mean_R3")]
    pub mean_r3: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub log: Vec<RlLogEntry>,
    /// Mean R3 of greedy responses on the probe inputs before and after.
    pub probe_r3_initial: f64,
    pub probe_r3_final: f64,
}

pub fn write_log(entries: &[RlLogEntry], path: &Path) -> Result<()> {
    crate::checkpoint::write_jsonl(path, entries)
}

/// Gradient of −Σᵢ aᵢ·log π(yᵢ|xᵢ) with respect to the policy parameters.
pub fn reinforce_gradients(policy: &Seq2Seq, store: &ParamStore, samples: &[(Vec<usize>, Vec<usize>, f64)]) -> (f64, Gradients) {
    batch_gradients(store, samples, |(x, y, adv)| {
        let s = store;
        let mut g = Graph::new();
        let lp = policy.logprob_graph(&mut g, s, x, y, None);
        let loss = g.scale(lp, -adv);
        let grads = g.backward(loss).gradients(&g, s);
        (g.scalar(loss), grads)
    })
}

fn probe_sentiment(policy: &Seq2Seq, rewards: &RewardModels, probe: &[Vec<usize>]) -> Result<f64> {
    if probe.is_empty() {
        return Ok(0.0);
    }
    let scores = map(probe, |x| policy.decode(x, None).and_then(|y| rewards.sentiment(&y)));
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// REINFORCE from `pretrained` with an exponential-moving-average baseline
/// seeded by the first batch mean. `inputs` are policy-vocabulary ids.
pub fn train_policy(pretrained: &Seq2Seq, rewards: &RewardModels, w: RewardWeights, cfg: &RlConfig, inputs: &[Vec<usize>]) -> Result<(Seq2Seq, RlReport)> {
    w.validate()?;
    if pretrained.cond_dim != 0 {
        return Err(CoreError::Config("policy must be an unconditioned responder".into()));
    }
    if cfg.iterations > 0 && inputs.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    if inputs.iter().any(|x| x.is_empty()) {
        return Err(CoreError::EmptySentence);
    }
    if !(cfg.baseline_decay >= 0.0 && cfg.baseline_decay < 1.0) {
        return Err(CoreError::Config(format!("baseline decay {} outside [0,1)", cfg.baseline_decay)));
    }
    let mut policy = pretrained.clone();
    let probe: Vec<Vec<usize>> = inputs.iter().take(cfg.probe_size).cloned().collect();
    let probe_r3_initial = probe_sentiment(&policy, rewards, &probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optim.clone());
    let mut baseline: Option<f64> = None;
    let mut log = Vec::with_capacity(cfg.iterations);
    let batch_size = cfg.batch_size.max(1);
    for iter in 0..cfg.iterations {
        let batch: Vec<(u64, &Vec<usize>)> = (0..batch_size).map(|_| (rand::Rng::gen::<u64>(&mut rng), inputs.choose(&mut rng).expect("non-empty"))).collect();
        let scored = map(&batch, |&(seed, x)| -> Result<(Vec<usize>, [f64; 3])> {
            let y = policy.sample_seeded(x, None, cfg.temperature, seed)?;
            let r = rewards.components(x, &y)?;
            Ok((y, r))
        });
        let scored: Vec<(Vec<usize>, [f64; 3])> = scored.into_iter().collect::<Result<_>>()?;
        let totals: Vec<f64> = scored.iter().map(|(_, r)| w.alpha * r[0] + w.beta * r[1] + w.gamma() * r[2]).collect();
        let n = totals.len() as f64;
        let means: Vec<f64> = (0..3).map(|k| scored.iter().map(|(_, r)| r[k]).sum::<f64>() / n).collect();
        let mean_r = totals.iter().sum::<f64>() / n;
        let b = *baseline.get_or_insert(mean_r);
        let samples: Vec<(Vec<usize>, Vec<usize>, f64)> =
            batch.iter().zip(scored).zip(&totals).map(|(((_, x), (y, _)), &r)| ((*x).clone(), y, (r - b) / n)).collect();
        let (loss, grads) = reinforce_gradients(&policy, &policy.store, &samples);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(CoreError::TrainingDiverged { at: iter });
        }
        opt.apply(&mut policy.store, &grads);
        baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean_r);
        log.push(RlLogEntry { iter, mean_r, mean_r1: means[0], mean_r2: means[1], mean_r3: means[2] });
    }
    let probe_r3_final = probe_sentiment(&policy, rewards, &probe)?;
    policy.meta.insert("rl_weights".into(), serde_json::json!({"alpha": w.alpha, "beta": w.beta}));
    policy.meta.insert("rl_iterations".into(), cfg.iterations.into());
    Ok((policy, RlReport { log, probe_r3_initial, probe_r3_final }))
}

/// Inputs of a corpus as policy-vocabulary ids, dropping empty ones.
pub fn policy_inputs(policy: &Seq2Seq, inputs: &[Vec<String>]) -> Vec<Vec<usize>> {
    inputs.iter().map(|t| policy.vocab.encode(t)).filter(|ids| !ids.is_empty()).collect()
}
