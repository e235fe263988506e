//! Latent-space steering: a variational recurrent autoencoder over responses,
//! and gradient ascent on its latent code through a soft-argmax bridge into
//! the sentiment classifier.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sentiscale_nn::parallel::map;
use sentiscale_nn::{Embedding, Gradients, Graph, Gru, Linear, OptimConfig, Optimizer, ParamStore, Tensor, Var};

use crate::checkpoint::{load_params_like, read_json, write_json};
use crate::classifier::SentimentModel;
use crate::corpus::{truncate, VocabMap, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{CoreError, Result};
use crate::seq2seq::Seq2Seq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    pub enabled: bool,
    pub warmup_steps: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { enabled: true, warmup_steps: 10_000 }
    }
}

/// Linear warmup from 0 to 1; constant 1 when annealing is off.
pub fn kl_weight(step: usize, schedule: &AnnealSchedule) -> f64 {
    if !schedule.enabled || schedule.warmup_steps == 0 {
        return 1.0;
    }
    (step as f64 / schedule.warmup_steps as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VraeConfig {
    pub embed_dim: usize,
    /// Per-direction encoder size; the decoder uses the same width.
    pub unit_size: usize,
    pub latent_dim: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub word_dropout: f64,
    pub anneal: AnnealSchedule,
}

impl Default for VraeConfig {
    fn default() -> Self {
        VraeConfig {
            embed_dim: 300,
            unit_size: 500,
            latent_dim: 500,
            batch_size: 48,
            max_len: 15,
            epochs: 10,
            seed: 0,
            optim: OptimConfig::adam(0.001),
            word_dropout: 0.3,
            anneal: AnnealSchedule::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vrae {
    pub cfg: VraeConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    emb: Embedding,
    enc_f: Gru,
    enc_b: Gru,
    mu: Linear,
    logvar: Linear,
    init: Linear,
    dec: Gru,
    out: Linear,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VraeReport {
    /// Mean per-sentence loss (reconstruction NLL + weighted KL) per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean unweighted KL per epoch.
    pub epoch_kl: Vec<f64>,
    pub reconstruction_accuracy: f64,
}

struct Elbo {
    total: Var,
    kl: Var,
}

impl Vrae {
    pub fn new(cfg: VraeConfig, vocab: Vocabulary) -> Result<Self> {
        if [cfg.embed_dim, cfg.unit_size, cfg.latent_dim, cfg.batch_size, cfg.max_len].contains(&0) {
            return Err(CoreError::Config("VRAE sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.word_dropout) {
            return Err(CoreError::Config(format!("word dropout {} outside [0,1)", cfg.word_dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (e, h, z) = (cfg.embed_dim, cfg.unit_size, cfg.latent_dim);
        let emb = Embedding::new(&mut store, "emb", vocab.len(), e, &mut rng);
        let enc_f = Gru::new(&mut store, "enc_f", e, h, 1, &mut rng);
        let enc_b = Gru::new(&mut store, "enc_b", e, h, 1, &mut rng);
        let mu = Linear::new(&mut store, "mu", 2 * h, z, true, &mut rng);
        let logvar = Linear::new(&mut store, "logvar", 2 * h, z, true, &mut rng);
        let init = Linear::new(&mut store, "init", z, h, true, &mut rng);
        let dec = Gru::new(&mut store, "dec", e + z, h, 1, &mut rng);
        let out = Linear::new(&mut store, "out", h, vocab.len(), true, &mut rng);
        Ok(Vrae { cfg, vocab, store, emb, enc_f, enc_b, mu, logvar, init, dec, out })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn check(&self, y: &[usize]) -> Result<Vec<usize>> {
        if y.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        if let Some(i) = y.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(CoreError::Encoding(format!("token id {i} outside vocabulary")));
        }
        Ok(truncate(y, self.cfg.max_len))
    }

    fn encode_graph<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, y: &[usize]) -> (Var, Var) {
        let xs: Vec<Var> = y.iter().map(|&t| self.emb.lookup(g, s, t)).collect();
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let i_f = self.enc_f.zero_state(g);
        let i_b = self.enc_b.zero_state(g);
        let (_, hf) = self.enc_f.run(g, s, &xs, i_f);
        let (_, hb) = self.enc_b.run(g, s, &rev, i_b);
        let both = g.concat(&[hf[0], hb[0]]);
        (self.mu.forward(g, s, both), self.logvar.forward(g, s, both))
    }

    fn initial_state<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, z: Var) -> Vec<Var> {
        let h = self.init.forward(g, s, z);
        vec![g.tanh(h)]
    }

    /// One decoder step; the latent code is appended to every input.
    fn step<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, input: Var, z: Var, state: &[Var]) -> (Var, Vec<Var>) {
        let inp = g.concat(&[input, z]);
        let state = self.dec.step(g, s, inp, state);
        let logits = self.out.forward(g, s, state[0]);
        (g.mask(logits, &[PAD, BOS]), state)
    }

    fn targets(&self, y: &[usize]) -> Vec<usize> {
        if y.len() < self.cfg.max_len {
            y.iter().copied().chain([EOS]).collect()
        } else {
            y.to_vec()
        }
    }

    fn elbo<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, y: &[usize], eps: &[f64], inputs: &[usize], kl_w: f64) -> Elbo {
        let (mu, lv) = self.encode_graph(g, s, y);
        let half = g.scale(lv, 0.5);
        let sd = g.exp(half);
        let e = g.vector(eps.to_vec());
        let noise = g.mul(sd, e);
        let z = g.add(mu, noise);
        let mut state = self.initial_state(g, s, z);
        let mut terms = Vec::with_capacity(inputs.len());
        for (&inp, &t) in inputs.iter().zip(&self.targets(y)) {
            let x = self.emb.lookup(g, s, inp);
            let (logits, next) = self.step(g, s, x, z, &state);
            let lp = g.log_softmax(logits);
            terms.push(g.pick(lp, t));
            state = next;
        }
        let v = g.concat(&terms);
        let ll = g.sum(v);
        // KL(N(mu, e^lv) || N(0, I)) = ½ Σ (mu² + e^lv − 1 − lv)
        let m2 = g.square(mu);
        let ev = g.exp(lv);
        let a = g.add(m2, ev);
        let b = g.sub(a, lv);
        let b = g.shift(b, -1.0);
        let ks = g.sum(b);
        let kl = g.scale(ks, 0.5);
        let wkl = g.scale(kl, kl_w);
        let nll = g.scale(ll, -1.0);
        let total = g.add(nll, wkl);
        Elbo { total, kl }
    }

    /// Decoder inputs for `y`: BOS then the reference prefix, each token
    /// independently replaced by UNK with probability `p`.
    fn dropout_inputs<R: Rng>(&self, y: &[usize], p: f64, rng: &mut R) -> Vec<usize> {
        let n = self.targets(y).len();
        std::iter::once(BOS).chain(y.iter().map(|&t| if p > 0.0 && rng.gen::<f64>() < p { UNK } else { t })).take(n).collect()
    }

    fn example_gradients(&self, s: &ParamStore, y: &[usize], seed: u64, kl_w: f64) -> (f64, f64, Gradients) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..self.cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let inputs = self.dropout_inputs(y, self.cfg.word_dropout, &mut rng);
        let mut g = Graph::new();
        let e = self.elbo(&mut g, s, y, &eps, &inputs, kl_w);
        let grads = g.backward(e.total).gradients(&g, s);
        (g.scalar(e.total), g.scalar(e.kl), grads)
    }

    /// Posterior mean of the latent code.
    pub fn encode_mean(&self, y: &[usize]) -> Result<Vec<f64>> {
        let y = self.check(y)?;
        let mut g = Graph::new();
        let (mu, _) = self.encode_graph(&mut g, &self.store, &y);
        Ok(g.data(mu).to_vec())
    }

    /// Greedy decode from a latent code, stopping at EOS or `max_len`.
    pub fn decode_greedy(&self, h: &[f64]) -> Result<Vec<usize>> {
        if h.len() != self.cfg.latent_dim {
            return Err(CoreError::InvalidArgument(format!("latent code has {} dims, expected {}", h.len(), self.cfg.latent_dim)));
        }
        let s = &self.store;
        let mut g = Graph::new();
        let z = g.vector(h.to_vec());
        let mut state = self.initial_state(&mut g, s, z);
        let mut prev = BOS;
        let mut out = Vec::new();
        while out.len() < self.cfg.max_len {
            let x = self.emb.lookup(&mut g, s, prev);
            let (logits, next) = self.step(&mut g, s, x, z, &state);
            let t = sentiscale_nn::tensor::argmax(g.data(logits));
            if t == EOS {
                break;
            }
            out.push(t);
            state = next;
            prev = t;
        }
        Ok(out)
    }

    pub fn reconstruct(&self, y: &[usize]) -> Result<Vec<usize>> {
        self.decode_greedy(&self.encode_mean(y)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &self.cfg)?;
        self.vocab.save(&dir.join("vocab.json"))?;
        self.store.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: VraeConfig = read_json(&dir.join("config.json"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let mut v = Vrae::new(cfg, vocab)?;
        v.store = load_params_like(dir, &v.store)?;
        Ok(v)
    }
}

/// Position-wise token accuracy of greedy reconstructions, normalised by the
/// longer of reference and output.
pub fn reconstruction_accuracy(vrae: &Vrae, sentences: &[Vec<usize>]) -> Result<f64> {
    let per = map(sentences, |y| -> Result<(usize, usize)> {
        let y = truncate(y, vrae.cfg.max_len);
        let r = vrae.reconstruct(&y)?;
        let hits = y.iter().zip(&r).filter(|(a, b)| a == b).count();
        Ok((hits, y.len().max(r.len())))
    });
    let (mut hits, mut total) = (0, 0);
    for p in per {
        let (h, t) = p?;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(CoreError::EmptyCorpus);
    }
    Ok(hits as f64 / total as f64)
}

pub fn train_vrae(sentences: &[Vec<usize>], vocab: &Vocabulary, cfg: &VraeConfig) -> Result<(Vrae, VraeReport)> {
    let data: Vec<Vec<usize>> = sentences.iter().filter(|s| !s.is_empty()).map(|s| truncate(s, cfg.max_len)).collect();
    if data.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let mut vrae = Vrae::new(cfg.clone(), vocab.clone())?;
    for y in &data {
        vrae.check(y)?;
    }
    let mut opt = Optimizer::new(cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a3e);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = VraeReport::default();
    let mut step = 0usize;
    let batch_size = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kl_sum) = (0.0, 0.0);
        for chunk in order.chunks(batch_size) {
            let kl_w = kl_weight(step, &cfg.anneal);
            let items: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, rng.gen())).collect();
            let parts = map(&items, |&(i, seed)| vrae.example_gradients(&vrae.store, &data[i], seed, kl_w));
            let (mut loss, mut kl) = (0.0, 0.0);
            let mut grads = Gradients::for_store(&vrae.store);
            for (l, k, g) in parts {
                loss += l;
                kl += k;
                grads.merge(g);
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(CoreError::TrainingDiverged { at: step });
            }
            grads.scale(1.0 / items.len() as f64);
            opt.apply(&mut vrae.store, &grads);
            loss_sum += loss;
            kl_sum += kl;
            step += 1;
        }
        report.epoch_loss.push(loss_sum / data.len() as f64);
        report.epoch_kl.push(kl_sum / data.len() as f64);
    }
    report.reconstruction_accuracy = reconstruction_accuracy(&vrae, &data)?;
    Ok((vrae, report))
}

/// Softmax of `logits / temperature` mixed over the rows of `table`.
pub fn soft_argmax(g: &mut Graph<'_>, logits: Var, temperature: f64, table: Var) -> Var {
    let scaled = g.scale(logits, 1.0 / temperature);
    let p = g.softmax(scaled);
    g.matvec_t(table, p)
}

pub fn soft_argmax_values(logits: &[f64], temperature: f64, table: &Tensor) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(CoreError::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if logits.len() != table.rows() {
        return Err(CoreError::InvalidArgument(format!("{} logits for {} table rows", logits.len(), table.rows())));
    }
    let mut g = Graph::new();
    let l = g.vector(logits.to_vec());
    let t = g.constant(table.clone());
    let v = soft_argmax(&mut g, l, temperature, t);
    Ok(g.data(v).to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentOptConfig {
    pub gamma: f64,
    pub delta: f64,
    pub step_size: f64,
    pub max_steps: usize,
    pub target_score: f64,
    pub softargmax_temperature: f64,
    /// Push the score down instead of up; the target then reads as 1 − target.
    pub descend: bool,
}

impl Default for LatentOptConfig {
    fn default() -> Self {
        LatentOptConfig { gamma: 400.0, delta: 25.0, step_size: 0.01, max_steps: 200, target_score: 0.8, softargmax_temperature: 1.0, descend: false }
    }
}

impl LatentOptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.delta >= 0.0
            && self.gamma + self.delta > 0.0
            && self.step_size >= 0.0
            && self.step_size.is_finite()
            && self.target_score > 0.0
            && self.target_score <= 1.0
            && self.softargmax_temperature > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid latent optimisation settings: {self:?}")))
        }
    }

    fn reached(&self, score: f64) -> bool {
        if self.descend {
            score <= 1.0 - self.target_score
        } else {
            score >= self.target_score
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentLogEntry {
    pub step: usize,
    pub sc: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentResult {
    pub h: Vec<f64>,
    /// Classifier score of the hard decode of `h`.
    pub score: f64,
    pub steps: usize,
    pub reached: bool,
    pub log: Vec<LatentLogEntry>,
}

/// Frozen VRAE + classifier pair with the classifier's embedding rows laid
/// out in VRAE vocabulary order.
pub struct Steering<'a> {
    pub vrae: &'a Vrae,
    pub sc: &'a SentimentModel,
    bridge: Tensor,
    to_sc: VocabMap,
}

impl<'a> Steering<'a> {
    pub fn new(vrae: &'a Vrae, sc: &'a SentimentModel) -> Self {
        let to_sc = VocabMap::new(&vrae.vocab, &sc.vocab);
        let table = sc.store.get(sc.embedding().table);
        let mut bridge = Tensor::zeros(vrae.vocab.len(), table.cols());
        for (i, &j) in to_sc.apply(&(0..vrae.vocab.len()).collect::<Vec<_>>()).iter().enumerate() {
            bridge.row_mut(i).copy_from_slice(table.row(j));
        }
        Steering { vrae, sc, bridge, to_sc }
    }

    /// Classifier score of the hard decode of `h`; 0 for an empty decode.
    pub fn hard_score(&self, h: &[f64]) -> Result<(Vec<usize>, f64)> {
        let y = self.vrae.decode_greedy(h)?;
        let s = if y.is_empty() { 0.0 } else { self.sc.score(&self.to_sc.apply(&y))? };
        Ok((y, s))
    }

    /// γ·SC(soft-decode(h)) − δ·MSE(h, h0) over `len` soft steps, and its
    /// gradient in `h` (sign of the first term flipped when descending).
    pub fn objective(&self, h: &[f64], h0: &[f64], len: usize, cfg: &LatentOptConfig) -> (f64, Vec<f64>) {
        let v = self.vrae;
        let s = &v.store;
        let mut g = Graph::new();
        let hv = g.vector(h.to_vec());
        let h0v = g.constant(Tensor::vector(h0.to_vec()));
        let bridge = g.constant(self.bridge.clone());
        let table = v.emb.table(&mut g, s);
        let mut state = v.initial_state(&mut g, s, hv);
        let mut input = v.emb.lookup(&mut g, s, BOS);
        let mut soft = Vec::with_capacity(len);
        for _ in 0..len.max(1) {
            let (logits, next) = v.step(&mut g, s, input, hv, &state);
            soft.push(soft_argmax(&mut g, logits, cfg.softargmax_temperature, bridge));
            input = soft_argmax(&mut g, logits, cfg.softargmax_temperature, table);
            state = next;
        }
        let z = self.sc.logit_embedded(&mut g, &self.sc.store, &soft);
        let score = g.sigmoid(z);
        let sign = if cfg.descend { -cfg.gamma } else { cfg.gamma };
        let a = g.scale(score, sign);
        let mse = g.mse(hv, h0v);
        let b = g.scale(mse, cfg.delta);
        let j = g.sub(a, b);
        let grad = g.backward(j).wrt(hv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; h.len()]);
        (g.scalar(j), grad)
    }

    /// Gradient ascent from `h0` until the hard-decoded score reaches the
    /// target or `max_steps` updates. Soft decodes follow the current hard
    /// decode length, capped at `ref_len + 2`.
    pub fn optimize(&self, h0: &[f64], ref_len: usize, cfg: &LatentOptConfig) -> Result<LatentResult> {
        cfg.validate()?;
        if h0.len() != self.vrae.latent_dim() {
            return Err(CoreError::InvalidArgument(format!("latent code has {} dims, expected {}", h0.len(), self.vrae.latent_dim())));
        }
        let mut h = h0.to_vec();
        let mut log = Vec::new();
        let mse = |h: &[f64]| h.iter().zip(h0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h.len() as f64;
        let mut step = 0;
        loop {
            let (y, score) = self.hard_score(&h)?;
            log.push(LatentLogEntry { step, sc: score, mse: mse(&h) });
            let reached = cfg.reached(score);
            if reached || step == cfg.max_steps {
                return Ok(LatentResult { h, score, steps: step, reached, log });
            }
            let len = y.len().clamp(1, ref_len + 2);
            let (_, grad) = self.objective(&h, h0, len, cfg);
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::OptimizationDiverged { step });
            }
            for (hi, gi) in h.iter_mut().zip(&grad) {
                *hi += cfg.step_size * gi;
            }
            step += 1;
        }
    }
}

pub fn optimize_latent(vrae: &Vrae, sc: &SentimentModel, h0: &[f64], ref_len: usize, cfg: &LatentOptConfig) -> Result<LatentResult> {
    Steering::new(vrae, sc).optimize(h0, ref_len, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformed {
    /// Baseline response, in the responder's vocabulary.
    pub original: Vec<usize>,
    /// Steered response, in the responder's vocabulary.
    pub response: Vec<usize>,
    pub latent: LatentResult,
}

/// Baseline response → posterior mean → latent ascent → greedy decode.
pub fn transform_response(seq2seq: &Seq2Seq, steering: &Steering, x: &[usize], cfg: &LatentOptConfig) -> Result<Transformed> {
    let y = seq2seq.decode(x, None)?;
    if y.is_empty() {
        return Err(CoreError::EmptySentence);
    }
    let to_vrae = VocabMap::new(&seq2seq.vocab, &steering.vrae.vocab);
    let back = VocabMap::new(&steering.vrae.vocab, &seq2seq.vocab);
    let vy = to_vrae.apply(&y);
    let h0 = steering.vrae.encode_mean(&vy)?;
    let latent = steering.optimize(&h0, vy.len(), cfg)?;
    let out = steering.vrae.decode_greedy(&latent.h)?;
    Ok(Transformed { original: y, response: back.apply(&out), latent })
}
