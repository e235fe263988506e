//! Attention encoder–decoder over token ids.
//!
//! GRU encoder and decoder, global multiplicative attention
//! (`score_i = h_i · W_a s_t`), and an attentional hidden layer
//! `tanh(W_c [ctx; s_t] + b)` feeding the vocabulary projection. An optional
//! scalar condition channel is appended to every decoder input; the persona
//! model uses it for the sentiment score.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sentiscale_nn::tensor::{argmax, log_softmax, softmax};
use sentiscale_nn::{Embedding, Gradients, Graph, Gru, Linear, OptimConfig, Optimizer, ParamId, ParamStore, Var};

use crate::checkpoint::{load_params_like, read_json, write_json};
use crate::corpus::{truncate, DialoguePair, Vocabulary, BOS, EOS, PAD};
use crate::error::{CoreError, Result};
use crate::trainer::run_epochs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    pub embed_dim: usize,
    pub unit_size: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub share_embeddings: bool,
    pub beam_width: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            embed_dim: 300,
            unit_size: 256,
            layers: 1,
            batch_size: 64,
            max_len: 15,
            epochs: 10,
            seed: 0,
            optim: OptimConfig::adam(0.001),
            share_embeddings: true,
            beam_width: 1,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.embed_dim, self.unit_size, self.layers, self.batch_size, self.max_len, self.beam_width];
        if positive.contains(&0) {
            return Err(CoreError::Config("seq2seq sizes, max_len and beam_width must be positive".into()));
        }
        Ok(())
    }
}

/// One training/scoring example. `cond` must be set iff the model has a
/// condition channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub cond: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_nll: f64,
    /// Mean per-token negative log-likelihood after each epoch's updates.
    pub epoch_nll: Vec<f64>,
    pub final_nll: f64,
}

#[derive(Serialize, Deserialize)]
struct Seq2SeqManifest {
    config: Seq2SeqConfig,
    cond_dim: usize,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub cfg: Seq2SeqConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub cond_dim: usize,
    /// Free-form provenance recorded in the checkpoint.
    pub meta: serde_json::Map<String, serde_json::Value>,
    enc_emb: Embedding,
    dec_emb: Embedding,
    encoder: Gru,
    decoder: Gru,
    attn: ParamId,
    combine: Linear,
    out: Linear,
}

/// Encoder outputs stacked as an `L × H` matrix plus the final state.
pub struct Encoded {
    pub outs: Var,
    pub state: Vec<Var>,
}

/// Output of one decoder step.
pub struct StepOut {
    /// Masked logits (PAD and BOS at `-inf`).
    pub logits: Var,
    pub state: Vec<Var>,
}

impl Seq2Seq {
    pub fn new(cfg: Seq2SeqConfig, vocab: Vocabulary, cond_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let v = vocab.len();
        let (e, h) = (cfg.embed_dim, cfg.unit_size);
        let (enc_emb, dec_emb) = if cfg.share_embeddings {
            let emb = Embedding::new(&mut store, "emb", v, e, &mut rng);
            (emb.clone(), emb)
        } else {
            (Embedding::new(&mut store, "enc_emb", v, e, &mut rng), Embedding::new(&mut store, "dec_emb", v, e, &mut rng))
        };
        let encoder = Gru::new(&mut store, "enc", e, h, cfg.layers, &mut rng);
        let decoder = Gru::new(&mut store, "dec", e + cond_dim, h, cfg.layers, &mut rng);
        let attn = store.add_glorot("attn.w", h, h, &mut rng);
        let combine = Linear::new(&mut store, "combine", 2 * h, h, true, &mut rng);
        let out = Linear::new(&mut store, "out", h, v, true, &mut rng);
        Ok(Seq2Seq { cfg, vocab, store, cond_dim, meta: Default::default(), enc_emb, dec_emb, encoder, decoder, attn, combine, out })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    /// Input-weight column of the decoder's first layer that reads the
    /// condition channel.
    pub fn condition_column(&self) -> Option<(ParamId, usize)> {
        (self.cond_dim > 0).then(|| (self.decoder.cells[0].wx, self.cfg.embed_dim))
    }

    pub fn embedding_table(&self) -> ParamId {
        self.dec_emb.table
    }

    /// Number of ids the decoder can emit (everything except PAD and BOS).
    pub fn emittable(&self) -> usize {
        self.vocab.len() - 2
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.vocab.len()) {
            Some(i) => Err(CoreError::Encoding(format!("token id {i} outside vocabulary of {}", self.vocab.len()))),
            None => Ok(()),
        }
    }

    fn check_cond(&self, cond: Option<f64>) -> Result<()> {
        match (self.cond_dim, cond) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(CoreError::InvalidArgument("model has no condition channel".into())),
            (_, None) => Err(CoreError::InvalidArgument("model requires a condition value".into())),
            (_, Some(c)) if !c.is_finite() => Err(CoreError::InvalidArgument("condition must be finite".into())),
            _ => Ok(()),
        }
    }

    pub fn encode<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, x: &[usize]) -> Encoded {
        let xs: Vec<Var> = x.iter().map(|&t| self.enc_emb.lookup(g, s, t)).collect();
        let init = self.encoder.zero_state(g);
        let (outs, state) = self.encoder.run(g, s, &xs, init);
        Encoded { outs: g.stack(&outs), state }
    }

    /// Decoder step given an already-embedded input vector.
    pub fn step_embedded<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, enc: &Encoded, input: Var, cond: Option<Var>, state: &[Var]) -> StepOut {
        let inp = match cond {
            Some(c) => g.concat(&[input, c]),
            None => input,
        };
        let state = self.decoder.step(g, s, inp, state);
        let top = *state.last().expect("decoder has layers");
        let wa = g.param(s, self.attn);
        let q = g.matvec(wa, top);
        let scores = g.matvec(enc.outs, q);
        let alpha = g.softmax(scores);
        let ctx = g.matvec_t(enc.outs, alpha);
        let cat = g.concat(&[ctx, top]);
        let hid = self.combine.forward(g, s, cat);
        let hid = g.tanh(hid);
        let logits = self.out.forward(g, s, hid);
        StepOut { logits: g.mask(logits, &[PAD, BOS]), state }
    }

    pub fn step<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, enc: &Encoded, prev: usize, cond: Option<Var>, state: &[Var]) -> StepOut {
        let e = self.dec_emb.lookup(g, s, prev);
        self.step_embedded(g, s, enc, e, cond, state)
    }

    fn cond_var(&self, g: &mut Graph<'_>, cond: Option<f64>) -> Option<Var> {
        cond.map(|c| g.vector(vec![c]))
    }

    /// Σ_t log P(y_t | y_<t, x), plus the EOS step when `y` is shorter than
    /// `max_len` (generation stops unconditionally at `max_len`).
    pub fn logprob_graph<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, x: &[usize], y: &[usize], cond: Option<f64>) -> Var {
        let enc = self.encode(g, s, x);
        let c = self.cond_var(g, cond);
        let mut state = enc.state.clone();
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(y.len() + 1);
        let targets: Vec<usize> = if y.len() < self.cfg.max_len { y.iter().copied().chain([EOS]).collect() } else { y.to_vec() };
        for &t in &targets {
            let so = self.step(g, s, &enc, prev, c, &state);
            let lp = g.log_softmax(so.logits);
            terms.push(g.pick(lp, t));
            state = so.state;
            prev = t;
        }
        let v = g.concat(&terms);
        g.sum(v)
    }

    /// Number of scored steps for `y` (tokens plus EOS unless capped).
    pub fn scored_len(&self, y: &[usize]) -> usize {
        if y.len() < self.cfg.max_len {
            y.len() + 1
        } else {
            y.len()
        }
    }

    pub fn sequence_logprob(&self, x: &[usize], y: &[usize], cond: Option<f64>) -> Result<f64> {
        if y.is_empty() || x.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        self.check_ids(x)?;
        self.check_ids(y)?;
        self.check_cond(cond)?;
        let x = truncate(x, self.cfg.max_len);
        let y = truncate(y, self.cfg.max_len);
        let mut g = Graph::new();
        let lp = self.logprob_graph(&mut g, &self.store, &x, &y, cond);
        Ok(g.scalar(lp))
    }

    /// Next-token distribution after `prefix`, computed from scratch.
    pub fn next_distribution(&self, x: &[usize], prefix: &[usize], cond: Option<f64>) -> Result<Vec<f64>> {
        self.check_ids(x)?;
        self.check_ids(prefix)?;
        self.check_cond(cond)?;
        let mut g = Graph::new();
        let s = &self.store;
        let enc = self.encode(&mut g, s, x);
        let c = self.cond_var(&mut g, cond);
        let mut state = enc.state.clone();
        let mut prev = BOS;
        let mut logits = None;
        for &t in prefix.iter().chain(std::iter::once(&usize::MAX)) {
            let so = self.step(&mut g, s, &enc, prev, c, &state);
            logits = Some(so.logits);
            state = so.state;
            prev = t;
        }
        Ok(softmax(g.data(logits.expect("at least one step"))))
    }

    /// Negative log-likelihood and parameter gradients for one example.
    pub fn nll_gradients(&self, s: &ParamStore, ex: &Example) -> (f64, Gradients) {
        let mut g = Graph::new();
        let lp = self.logprob_graph(&mut g, s, &ex.x, &ex.y, ex.cond);
        let loss = g.scale(lp, -1.0);
        let grads = g.backward(loss).gradients(&g, s);
        (g.scalar(loss), grads)
    }

    /// Mean per-token NLL over `examples`.
    pub fn mean_token_nll(&self, examples: &[Example]) -> f64 {
        let losses = sentiscale_nn::parallel::map(examples, |ex| {
            let mut g = Graph::new();
            let lp = self.logprob_graph(&mut g, &self.store, &ex.x, &ex.y, ex.cond);
            -g.scalar(lp)
        });
        let tokens: usize = examples.iter().map(|e| self.scored_len(&e.y)).sum();
        losses.iter().sum::<f64>() / tokens.max(1) as f64
    }

    pub fn prepare(&self, x: &[usize], y: &[usize], cond: Option<f64>) -> Result<Example> {
        if x.is_empty() || y.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        self.check_ids(x)?;
        self.check_ids(y)?;
        self.check_cond(cond)?;
        Ok(Example { x: truncate(x, self.cfg.max_len), y: truncate(y, self.cfg.max_len), cond })
    }

    /// Teacher-forced maximum-likelihood training for `epochs` passes.
    pub fn fit(&mut self, examples: &[Example], epochs: usize) -> Result<TrainReport> {
        if examples.is_empty() {
            return Err(CoreError::EmptyCorpus);
        }
        let initial_nll = self.mean_token_nll(examples);
        let tokens: usize = examples.iter().map(|e| self.scored_len(&e.y)).sum();
        let mut opt = Optimizer::new(self.cfg.optim.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut store = std::mem::take(&mut self.store);
        let this = &*self;
        let history = run_epochs(&mut store, &mut opt, examples, self.cfg.batch_size, epochs, &mut rng, |s, ex| this.nll_gradients(s, ex));
        self.store = store;
        let history = history?;
        let per_token = examples.len() as f64 / tokens as f64;
        let final_nll = self.mean_token_nll(examples);
        if !final_nll.is_finite() {
            return Err(CoreError::TrainingDiverged { at: epochs });
        }
        Ok(TrainReport { initial_nll, epoch_nll: history.iter().map(|l| l * per_token).collect(), final_nll })
    }

    /// Greedy (beam width 1) or beam-search decoding. Output excludes EOS.
    pub fn decode(&self, x: &[usize], cond: Option<f64>) -> Result<Vec<usize>> {
        if x.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        self.check_ids(x)?;
        self.check_cond(cond)?;
        let x = truncate(x, self.cfg.max_len);
        if self.cfg.beam_width > 1 {
            return Ok(self.beam_search(&x, cond));
        }
        let mut g = Graph::new();
        let s = &self.store;
        let enc = self.encode(&mut g, s, &x);
        let c = self.cond_var(&mut g, cond);
        let mut state = enc.state.clone();
        let mut prev = BOS;
        let mut out = Vec::new();
        while out.len() < self.cfg.max_len {
            let so = self.step(&mut g, s, &enc, prev, c, &state);
            let t = argmax(g.data(so.logits));
            if t == EOS {
                break;
            }
            out.push(t);
            state = so.state;
            prev = t;
        }
        Ok(out)
    }

    fn beam_search(&self, x: &[usize], cond: Option<f64>) -> Vec<usize> {
        struct Beam {
            tokens: Vec<usize>,
            score: f64,
            state: Vec<Var>,
            done: bool,
        }
        let mut g = Graph::new();
        let s = &self.store;
        let enc = self.encode(&mut g, s, x);
        let c = self.cond_var(&mut g, cond);
        let mut beams = vec![Beam { tokens: Vec::new(), score: 0.0, state: enc.state.clone(), done: false }];
        for _ in 0..self.cfg.max_len {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut next: Vec<Beam> = Vec::new();
            for b in beams {
                if b.done {
                    next.push(b);
                    continue;
                }
                let prev = b.tokens.last().copied().unwrap_or(BOS);
                let so = self.step(&mut g, s, &enc, prev, c, &b.state);
                let lp = log_softmax(g.data(so.logits));
                let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
                order.sort_by(|&a, &b2| lp[b2].total_cmp(&lp[a]).then(a.cmp(&b2)));
                for &t in order.iter().take(self.cfg.beam_width) {
                    let mut tokens = b.tokens.clone();
                    let done = t == EOS;
                    if !done {
                        tokens.push(t);
                    }
                    next.push(Beam { tokens, score: b.score + lp[t], state: so.state.clone(), done });
                }
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score));
            next.truncate(self.cfg.beam_width);
            beams = next;
        }
        beams.into_iter().next().map(|b| b.tokens).unwrap_or_default()
    }

    /// Samples from the temperature-scaled distribution; deterministic for a
    /// given rng state.
    pub fn sample<R: Rng>(&self, x: &[usize], cond: Option<f64>, temperature: f64, rng: &mut R) -> Result<Vec<usize>> {
        if !(temperature > 0.0) {
            return Err(CoreError::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
        if x.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        self.check_ids(x)?;
        self.check_cond(cond)?;
        let x = truncate(x, self.cfg.max_len);
        let mut g = Graph::new();
        let s = &self.store;
        let enc = self.encode(&mut g, s, &x);
        let c = self.cond_var(&mut g, cond);
        let mut state = enc.state.clone();
        let mut prev = BOS;
        let mut out = Vec::new();
        while out.len() < self.cfg.max_len {
            let so = self.step(&mut g, s, &enc, prev, c, &state);
            let scaled: Vec<f64> = g.data(so.logits).iter().map(|l| l / temperature).collect();
            let t = sample_index(&softmax(&scaled), rng.gen::<f64>());
            if t == EOS {
                break;
            }
            out.push(t);
            state = so.state;
            prev = t;
        }
        Ok(out)
    }

    pub fn sample_seeded(&self, x: &[usize], cond: Option<f64>, temperature: f64, seed: u64) -> Result<Vec<usize>> {
        self.sample(x, cond, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &Seq2SeqManifest { config: self.cfg.clone(), cond_dim: self.cond_dim, meta: self.meta.clone() })?;
        self.vocab.save(&dir.join("vocab.json"))?;
        self.store.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Seq2SeqManifest = read_json(&dir.join("config.json"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let mut model = Seq2Seq::new(m.config, vocab, m.cond_dim)?;
        model.store = load_params_like(dir, &model.store)?;
        model.meta = m.meta;
        Ok(model)
    }
}

/// Inverse-CDF draw from `probs` with uniform `u ∈ [0,1)`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Encodes dialogue pairs, truncating both sides to `max_len`.
pub fn encode_pairs(pairs: &[DialoguePair], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    pairs
        .iter()
        .map(|p| Example { x: truncate(&vocab.encode(&p.input), max_len), y: truncate(&vocab.encode(&p.response), max_len), cond: None })
        .collect()
}

/// Builds and trains a baseline model.
pub fn train_mle(pairs: &[DialoguePair], vocab: &Vocabulary, cfg: &Seq2SeqConfig) -> Result<(Seq2Seq, TrainReport)> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let mut model = Seq2Seq::new(cfg.clone(), vocab.clone(), 0)?;
    let examples = encode_pairs(pairs, vocab, cfg.max_len);
    let report = model.fit(&examples, cfg.epochs)?;
    Ok((model, report))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, Segmentation};
    use sentiscale_nn::gradcheck::check_store_gradients;
    use sentiscale_nn::Tensor;

    pub fn words(n: usize) -> Vocabulary {
        let s: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        build_vocabulary(&[s], n + 4, Segmentation::Word).unwrap()
    }

    pub fn tiny_cfg(max_len: usize) -> Seq2SeqConfig {
        Seq2SeqConfig { embed_dim: 4, unit_size: 5, layers: 1, batch_size: 4, max_len, epochs: 0, seed: 3, optim: OptimConfig::adam(0.05), ..Default::default() }
    }

    pub fn zero_output(model: &mut Seq2Seq) {
        for id in model.store.ids_with_prefix("out.").collect::<Vec<_>>() {
            let t = model.store.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    #[test]
    fn uniform_model_logprob() {
        // 12-token vocabulary: 10 emittable ids.
        let mut m = Seq2Seq::new(tiny_cfg(10), words(8), 0).unwrap();
        zero_output(&mut m);
        assert_eq!(m.emittable(), 10);
        let lp = m.sequence_logprob(&[4, 5], &[6, 7], None).unwrap();
        assert!((lp - 3.0 * 0.1f64.ln()).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn step_distributions_are_valid() {
        let m = Seq2Seq::new(tiny_cfg(6), words(5), 0).unwrap();
        for prefix in [vec![], vec![4], vec![5, 6, 7]] {
            let p = m.next_distribution(&[4, 5, 6], &prefix, None).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert_eq!(p[PAD], 0.0);
            assert_eq!(p[BOS], 0.0);
        }
    }

    #[test]
    fn logprob_matches_chain_rule() {
        let m = Seq2Seq::new(tiny_cfg(6), words(3), 0).unwrap();
        let x = [4, 6, 5];
        let y = [5, 3, 6, 4];
        let mut expected = 0.0;
        for t in 0..=y.len() {
            let p = m.next_distribution(&x, &y[..t], None).unwrap();
            expected += p[if t < y.len() { y[t] } else { EOS }].ln();
        }
        let lp = m.sequence_logprob(&x, &y, None).unwrap();
        assert!((lp - expected).abs() < 1e-9, "{lp} vs {expected}");
        assert!(lp <= 0.0);
    }

    #[test]
    fn probabilities_sum_to_one_over_all_sequences() {
        // |V| = 3 emittable ids (EOS, UNK, w0), max_len 3.
        let m = Seq2Seq::new(tiny_cfg(3), words(1), 0).unwrap();
        let x = [4, 3];
        let alphabet = [3usize, 4];
        let mut total = m.next_distribution(&x, &[], None).unwrap()[EOS];
        let mut seqs: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..3 {
            seqs = seqs.iter().flat_map(|s| alphabet.iter().map(move |&a| [s.clone(), vec![a]].concat())).collect();
            for s in &seqs {
                total += m.sequence_logprob(&x, s, None).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-5, "{total}");
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let m = Seq2Seq::new(Seq2SeqConfig { unit_size: 8, ..tiny_cfg(6) }, words(4), 0).unwrap();
        let exs = [Example { x: vec![4, 5], y: vec![6, 7], cond: None }, Example { x: vec![7, 6, 5], y: vec![4], cond: None }];
        let loss = |s: &ParamStore| exs.iter().map(|e| m.nll_gradients(s, e).0).sum::<f64>();
        let mut grads = Gradients::for_store(&m.store);
        for e in &exs {
            grads.merge(m.nll_gradients(&m.store, e).1);
        }
        let r = check_store_gradients(&m.store, &grads, loss, 1e-5, 12);
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn overfits_single_pair() {
        let mut m = Seq2Seq::new(Seq2SeqConfig { unit_size: 16, embed_dim: 8, ..tiny_cfg(8) }, words(6), 0).unwrap();
        let ex = Example { x: vec![4, 5, 6], y: vec![7, 8, 9, 4], cond: None };
        let report = m.fit(&vec![ex.clone(); 4], 60).unwrap();
        assert!(report.final_nll <= report.initial_nll);
        assert_eq!(m.decode(&ex.x, None).unwrap(), ex.y);
    }

    #[test]
    fn untrained_nll_near_uniform() {
        let m = Seq2Seq::new(tiny_cfg(8), words(20), 0).unwrap();
        let exs: Vec<Example> = (0..10).map(|i| Example { x: vec![4 + i, 5 + i], y: vec![6 + i, 7, 8], cond: None }).collect();
        let nll = m.mean_token_nll(&exs);
        let uniform = (m.emittable() as f64).ln();
        assert!((nll - uniform).abs() / uniform < 0.2, "{nll} vs {uniform}");
    }

    #[test]
    fn decoding_properties() {
        let m = Seq2Seq::new(tiny_cfg(3), words(6), 0).unwrap();
        let x = [4, 5, 6];
        let a = m.decode(&x, None).unwrap();
        assert_eq!(a, m.decode(&x, None).unwrap());
        assert!(a.len() <= 3);
        assert!(a.iter().all(|&t| t != PAD && t != BOS));
        assert_eq!(m.sample_seeded(&x, None, 1e-9, 1).unwrap(), a);
        assert_eq!(m.sample_seeded(&x, None, 1.0, 9).unwrap(), m.sample_seeded(&x, None, 1.0, 9).unwrap());
        assert!(m.sample_seeded(&x, None, 0.0, 1).is_err());
        assert!(matches!(m.sequence_logprob(&x, &[99], None), Err(CoreError::Encoding(_))));
    }

    #[test]
    fn sampling_matches_model_distribution() {
        let m = Seq2Seq::new(Seq2SeqConfig { max_len: 1, ..tiny_cfg(1) }, words(3), 0).unwrap();
        let x = [4, 5];
        let p = m.next_distribution(&x, &[], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; p.len()];
        let n = 10_000;
        for _ in 0..n {
            let s = m.sample(&x, None, 1.0, &mut rng).unwrap();
            counts[s.first().copied().unwrap_or(EOS)] += 1;
        }
        let tv: f64 = p.iter().zip(&counts).map(|(q, &c)| (q - c as f64 / n as f64).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn beam_search_paths() {
        let m = Seq2Seq::new(tiny_cfg(4), words(5), 0).unwrap();
        let x = [4, 6];
        assert_eq!(m.beam_search(&x, None), m.decode(&x, None).unwrap());
        let mut wide = m.clone();
        wide.cfg.beam_width = 3;
        let b = wide.decode(&x, None).unwrap();
        assert!(b.len() <= 4 && b.iter().all(|&t| t != PAD && t != BOS && t != EOS));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Seq2Seq::new(tiny_cfg(5), words(4), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let l = Seq2Seq::load(dir.path()).unwrap();
        assert_eq!(l.store, m.store);
        assert_eq!(l.decode(&[4, 5], Some(0.3)).unwrap(), m.decode(&[4, 5], Some(0.3)).unwrap());
    }
}
