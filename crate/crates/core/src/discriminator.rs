//! Dialogue-pair discriminator D(x, y) ∈ [0,1]: two GRU encoders, their
//! final states concatenated, a ReLU hidden layer and a sigmoid head.
//!
//! Positives and negatives share the same marginals over x and over y, so
//! only interactions between the two encodings are informative. A tanh hidden
//! layer is odd around zero and its cross terms vanish at initialisation,
//! which leaves training stuck at chance; ReLU has them from the first step.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sentiscale_nn::{Embedding, Gradients, Graph, Gru, Linear, OptimConfig, Optimizer, ParamStore, Var};

use crate::checkpoint::{load_params_like, read_json, write_json};
use crate::corpus::{split_corpus, truncate, DialoguePair, Vocabulary};
use crate::error::{CoreError, Result};
use crate::trainer::run_epochs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub embed_dim: usize,
    pub unit_size: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Fraction of pairs held out for the accuracy report.
    pub heldout_fraction: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            embed_dim: 300,
            unit_size: 256,
            hidden: 128,
            batch_size: 64,
            max_len: 30,
            epochs: 10,
            seed: 0,
            optim: OptimConfig::adam(0.0005),
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairDiscriminator {
    pub cfg: DiscriminatorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub emb: Embedding,
    pub enc_x: Gru,
    pub enc_y: Gru,
    pub fc: Linear,
    pub head: Linear,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub epoch_loss: Vec<f64>,
    pub heldout_accuracy: f64,
    pub heldout_true_mean: f64,
    pub heldout_mismatched_mean: f64,
    pub heldout_pairs: usize,
}

impl PairDiscriminator {
    pub fn new(cfg: DiscriminatorConfig, vocab: Vocabulary) -> Result<Self> {
        if [cfg.embed_dim, cfg.unit_size, cfg.hidden, cfg.batch_size, cfg.max_len].contains(&0) {
            return Err(CoreError::Config("discriminator sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (e, h) = (cfg.embed_dim, cfg.unit_size);
        let emb = Embedding::new(&mut store, "emb", vocab.len(), e, &mut rng);
        let enc_x = Gru::new(&mut store, "enc_x", e, h, 1, &mut rng);
        let enc_y = Gru::new(&mut store, "enc_y", e, h, 1, &mut rng);
        let fc = Linear::new(&mut store, "fc", 2 * h, cfg.hidden, true, &mut rng);
        let head = Linear::new(&mut store, "head", cfg.hidden, 1, true, &mut rng);
        Ok(PairDiscriminator { cfg, vocab, store, emb, enc_x, enc_y, fc, head })
    }

    pub fn logit_graph<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, x: &[usize], y: &[usize]) -> Var {
        let xs: Vec<Var> = x.iter().map(|&t| self.emb.lookup(g, s, t)).collect();
        let ys: Vec<Var> = y.iter().map(|&t| self.emb.lookup(g, s, t)).collect();
        let ix = self.enc_x.zero_state(g);
        let iy = self.enc_y.zero_state(g);
        let (_, hx) = self.enc_x.run(g, s, &xs, ix);
        let (_, hy) = self.enc_y.run(g, s, &ys, iy);
        let cat = g.concat(&[hx[0], hy[0]]);
        let hid = self.fc.forward(g, s, cat);
        let hid = g.relu(hid);
        self.head.forward(g, s, hid)
    }

    pub fn score(&self, x: &[usize], y: &[usize]) -> Result<f64> {
        if x.is_empty() || y.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        if let Some(i) = x.iter().chain(y).find(|&&i| i >= self.vocab.len()) {
            return Err(CoreError::Encoding(format!("token id {i} outside vocabulary")));
        }
        let x = truncate(x, self.cfg.max_len);
        let y = truncate(y, self.cfg.max_len);
        let mut g = Graph::new();
        let z = self.logit_graph(&mut g, &self.store, &x, &y);
        let p = g.sigmoid(z);
        Ok(g.scalar(p))
    }

    fn bce(&self, s: &ParamStore, ex: &(Vec<usize>, Vec<usize>, u8)) -> (f64, Gradients) {
        let mut g = Graph::new();
        let z = self.logit_graph(&mut g, s, &ex.0, &ex.1);
        let signed = if ex.2 == 1 { z } else { g.scale(z, -1.0) };
        let p = g.sigmoid(signed);
        let lp = g.log(p);
        let loss = g.scale(lp, -1.0);
        let grads = g.backward(loss).gradients(&g, s);
        (g.scalar(loss), grads)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &self.cfg)?;
        self.vocab.save(&dir.join("vocab.json"))?;
        self.store.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: DiscriminatorConfig = read_json(&dir.join("config.json"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let mut d = PairDiscriminator::new(cfg, vocab)?;
        d.store = load_params_like(dir, &d.store)?;
        Ok(d)
    }
}

/// Pairs every input with the response of a uniformly drawn different pair
/// whose response differs from its own.
pub fn mismatched_pairs<R: Rng>(pairs: &[(Vec<usize>, Vec<usize>)], rng: &mut R) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let distinct = pairs.iter().any(|p| p.1 != pairs[0].1);
    if pairs.len() < 2 || !distinct {
        return Err(CoreError::DegenerateCorpus("need at least two distinct responses to form negatives".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (i, (x, y)) in pairs.iter().enumerate() {
        // Every input has at least one usable partner because responses are
        // not all equal; rejection sampling terminates with probability 1.
        let j = loop {
            let j = rng.gen_range(0..pairs.len());
            if j != i && pairs[j].1 != *y {
                break j;
            }
        };
        out.push((x.clone(), pairs[j].1.clone()));
    }
    Ok(out)
}

pub fn train_pair_discriminator(pairs: &[DialoguePair], vocab: &Vocabulary, cfg: &DiscriminatorConfig) -> Result<(PairDiscriminator, DiscriminatorReport)> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let encoded: Vec<(Vec<usize>, Vec<usize>)> =
        pairs.iter().map(|p| (truncate(&vocab.encode(&p.input), cfg.max_len), truncate(&vocab.encode(&p.response), cfg.max_len))).collect();
    let test_size = ((encoded.len() as f64 * cfg.heldout_fraction).round() as usize).max(1);
    let (train, test) = if encoded.len() > 2 * test_size {
        let sp = split_corpus(&encoded, test_size, cfg.seed)?;
        (sp.train, sp.test)
    } else {
        (encoded.clone(), encoded.clone())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd15c);
    // Validate up front so the error surfaces before any training.
    mismatched_pairs(&train, &mut rng.clone())?;
    let mut d = PairDiscriminator::new(cfg.clone(), vocab.clone())?;
    let mut opt = Optimizer::new(cfg.optim.clone());
    let mut store = std::mem::take(&mut d.store);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let negatives = mismatched_pairs(&train, &mut rng)?;
        let mut items: Vec<(Vec<usize>, Vec<usize>, u8)> = train.iter().map(|(x, y)| (x.clone(), y.clone(), 1)).collect();
        items.extend(negatives.into_iter().map(|(x, y)| (x, y, 0)));
        let this = &d;
        let h = run_epochs(&mut store, &mut opt, &items, cfg.batch_size, 1, &mut rng, |s, ex| this.bce(s, ex));
        if let Err(e) = h {
            d.store = store;
            return Err(e);
        }
        epoch_loss.extend(h?);
    }
    d.store = store;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let negatives = if test.len() >= 2 && test.iter().any(|p| p.1 != test[0].1) { mismatched_pairs(&test, &mut eval_rng)? } else { mismatched_pairs(&encoded, &mut eval_rng)?.into_iter().take(test.len()).collect() };
    let pos = sentiscale_nn::parallel::map(&test, |(x, y)| d.score(x, y));
    let neg = sentiscale_nn::parallel::map(&negatives, |(x, y)| d.score(x, y));
    let pos: Vec<f64> = pos.into_iter().collect::<Result<_>>()?;
    let neg: Vec<f64> = neg.into_iter().collect::<Result<_>>()?;
    let correct = pos.iter().filter(|&&p| p > 0.5).count() + neg.iter().filter(|&&p| p <= 0.5).count();
    let report = DiscriminatorReport {
        epoch_loss,
        heldout_accuracy: correct as f64 / (pos.len() + neg.len()) as f64,
        heldout_true_mean: pos.iter().sum::<f64>() / pos.len() as f64,
        heldout_mismatched_mean: neg.iter().sum::<f64>() / neg.len() as f64,
        heldout_pairs: pos.len(),
    };
    Ok((d, report))
}
