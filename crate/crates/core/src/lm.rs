//! Two-layer GRU language model over responses, used by the LM metric.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sentiscale_nn::tensor::softmax;
use sentiscale_nn::{Embedding, Gradients, Graph, Gru, Linear, OptimConfig, Optimizer, ParamStore, Var};

use crate::checkpoint::{load_params_like, read_json, write_json};
use crate::corpus::{truncate, Vocabulary, BOS, EOS, PAD};
use crate::error::{CoreError, Result};
use crate::trainer::run_epochs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub unit_size: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { embed_dim: 300, unit_size: 256, layers: 2, batch_size: 32, max_len: 40, epochs: 10, seed: 0, optim: OptimConfig::adam(0.001) }
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    emb: Embedding,
    rnn: Gru,
    out: Linear,
}

impl LanguageModel {
    pub fn new(cfg: LmConfig, vocab: Vocabulary) -> Result<Self> {
        if [cfg.embed_dim, cfg.unit_size, cfg.layers, cfg.batch_size, cfg.max_len].contains(&0) {
            return Err(CoreError::Config("language model sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", vocab.len(), cfg.embed_dim, &mut rng);
        let rnn = Gru::new(&mut store, "rnn", cfg.embed_dim, cfg.unit_size, cfg.layers, &mut rng);
        let out = Linear::new(&mut store, "out", cfg.unit_size, vocab.len(), true, &mut rng);
        Ok(LanguageModel { cfg, vocab, store, emb, rnn, out })
    }

    /// Tokens plus EOS, unless `y` already fills `max_len`.
    pub fn scored_len(&self, y: &[usize]) -> usize {
        if y.len() < self.cfg.max_len {
            y.len() + 1
        } else {
            y.len()
        }
    }

    fn step<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, prev: usize, state: &[Var]) -> (Var, Vec<Var>) {
        let e = self.emb.lookup(g, s, prev);
        let state = self.rnn.step(g, s, e, state);
        let logits = self.out.forward(g, s, *state.last().expect("rnn has layers"));
        (g.mask(logits, &[PAD, BOS]), state)
    }

    /// Σ_t log P(y_t | y_<t) including the EOS step.
    pub fn logprob_graph<'a>(&self, g: &mut Graph<'a>, s: &'a ParamStore, y: &[usize]) -> Var {
        let mut state = self.rnn.zero_state(g);
        let mut prev = BOS;
        let targets: Vec<usize> = if y.len() < self.cfg.max_len { y.iter().copied().chain([EOS]).collect() } else { y.to_vec() };
        let mut terms = Vec::with_capacity(targets.len());
        for &t in &targets {
            let (logits, next) = self.step(g, s, prev, &state);
            let lp = g.log_softmax(logits);
            terms.push(g.pick(lp, t));
            state = next;
            prev = t;
        }
        let v = g.concat(&terms);
        g.sum(v)
    }

    fn check(&self, y: &[usize]) -> Result<Vec<usize>> {
        if y.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        if let Some(i) = y.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(CoreError::Encoding(format!("token id {i} outside vocabulary of {}", self.vocab.len())));
        }
        Ok(truncate(y, self.cfg.max_len))
    }

    pub fn sequence_logprob(&self, y: &[usize]) -> Result<f64> {
        let y = self.check(y)?;
        let mut g = Graph::new();
        let lp = self.logprob_graph(&mut g, &self.store, &y);
        Ok(g.scalar(lp))
    }

    /// Length-normalised log-probability (negative log perplexity).
    pub fn score(&self, y: &[usize]) -> Result<f64> {
        let y = self.check(y)?;
        let mut g = Graph::new();
        let lp = self.logprob_graph(&mut g, &self.store, &y);
        Ok(g.scalar(lp) / self.scored_len(&y) as f64)
    }

    pub fn score_tokens(&self, tokens: &[String]) -> Result<f64> {
        self.score(&self.vocab.encode(tokens))
    }

    pub fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some(i) = prefix.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(CoreError::Encoding(format!("token id {i} outside vocabulary of {}", self.vocab.len())));
        }
        let mut g = Graph::new();
        let mut state = self.rnn.zero_state(&mut g);
        let mut prev = BOS;
        let mut logits = None;
        for &t in prefix.iter().chain(std::iter::once(&usize::MAX)) {
            let (l, next) = self.step(&mut g, &self.store, prev, &state);
            logits = Some(l);
            state = next;
            prev = t;
        }
        Ok(softmax(g.data(logits.expect("at least one step"))))
    }

    fn nll(&self, s: &ParamStore, y: &[usize]) -> (f64, Gradients) {
        let mut g = Graph::new();
        let lp = self.logprob_graph(&mut g, s, y);
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
        let cfg: LmConfig = read_json(&dir.join("config.json"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let mut m = LanguageModel::new(cfg, vocab)?;
        m.store = load_params_like(dir, &m.store)?;
        Ok(m)
    }
}

/// MLE training on encoded sentences; returns the mean per-sentence NLL of
/// every epoch.
pub fn train_lm(sentences: &[Vec<usize>], vocab: &Vocabulary, cfg: &LmConfig) -> Result<(LanguageModel, Vec<f64>)> {
    let data: Vec<Vec<usize>> = sentences.iter().filter(|s| !s.is_empty()).map(|s| truncate(s, cfg.max_len)).collect();
    if data.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let mut lm = LanguageModel::new(cfg.clone(), vocab.clone())?;
    let mut opt = Optimizer::new(cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6d);
    let template = lm.clone();
    let history = run_epochs(&mut lm.store, &mut opt, &data, cfg.batch_size, cfg.epochs, &mut rng, |s, y| template.nll(s, y))?;
    Ok((lm, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::tests::words;
    use sentiscale_nn::gradcheck::check_store_gradients;
    use sentiscale_nn::Tensor;

    fn tiny(vocab: usize) -> LanguageModel {
        let cfg = LmConfig { embed_dim: 3, unit_size: 4, layers: 2, batch_size: 4, max_len: 6, epochs: 0, seed: 5, optim: OptimConfig::adam(0.05) };
        LanguageModel::new(cfg, words(vocab)).unwrap()
    }

    fn zero_out(m: &mut LanguageModel) {
        for id in m.store.ids_with_prefix("out.").collect::<Vec<_>>() {
            let t = m.store.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    #[test]
    fn uniform_lm_scores_log_of_inverse_vocab() {
        // words(1) gives UNK, EOS and one word as emittable ids: add one more.
        let mut m = tiny(2);
        zero_out(&mut m);
        assert_eq!(m.vocab.len() - 2, 4);
        let y = [4];
        let s = m.score(&y).unwrap();
        assert!((s - (2.0 * 0.25f64.ln()) / 2.0).abs() < 1e-12, "{s}");
        assert!((s + 1.3863).abs() < 1e-4);
        let longer = m.score(&[4, 5, 4]).unwrap();
        assert!((longer - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalisation_of_two_steps() {
        let s = (0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((s + 1.0397).abs() < 1e-4);
    }

    #[test]
    fn score_matches_chain_rule_enumeration() {
        let m = tiny(1);
        let y = [4, 3, 4];
        let mut total = 0.0;
        let mut prefix = vec![];
        for &t in y.iter().chain([EOS].iter()) {
            let p = m.next_distribution(&prefix).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p[PAD], 0.0);
            total += p[t].ln();
            prefix.push(t);
        }
        assert!((m.score(&y).unwrap() - total / 4.0).abs() < 1e-9);
    }

    #[test]
    fn sentence_probabilities_sum_to_one() {
        // max_len 2 over a 3-token emittable set (UNK, EOS, w0): every
        // sentence is a sequence of non-EOS ids terminated by EOS or the cap.
        let cfg = LmConfig { max_len: 2, ..tiny(1).cfg };
        let m = LanguageModel::new(cfg, words(1)).unwrap();
        let toks = [3usize, 4];
        let mut mass = m.next_distribution(&[]).unwrap()[EOS];
        for &a in &toks {
            mass += m.sequence_logprob(&[a]).unwrap().exp();
            for &b in &toks {
                mass += m.sequence_logprob(&[a, b]).unwrap().exp();
            }
        }
        assert!((mass - 1.0).abs() < 1e-9, "{mass}");
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let m = tiny(3);
        let y = vec![4, 6, 5];
        let (_, analytic) = m.nll(&m.store, &y);
        let report = check_store_gradients(&m.store, &analytic, |s| m.nll(s, &y).0, 1e-5, 20);
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn errors_and_round_trip() {
        let m = tiny(3);
        assert!(matches!(m.score(&[]), Err(CoreError::EmptySentence)));
        assert!(matches!(m.score(&[99]), Err(CoreError::Encoding(_))));
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = LanguageModel::load(dir.path()).unwrap();
        assert_eq!(back.score(&[4, 5]).unwrap(), m.score(&[4, 5]).unwrap());
    }

    #[test]
    fn training_lowers_nll() {
        let sents: Vec<Vec<usize>> = (0..12).map(|i| if i % 2 == 0 { vec![4, 5] } else { vec![6, 4] }).collect();
        let cfg = LmConfig { epochs: 15, ..tiny(3).cfg };
        let (m, hist) = train_lm(&sents, &words(3), &cfg).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        assert!(m.score(&[4, 5]).unwrap() > m.score(&[5, 5]).unwrap());
    }
}
