//! Machine metrics (COH1, COH2, SCL, LM), system evaluation, comparison
//! tables and the blinded human-evaluation export.
//!
//! Metric models are trained separately from every model used as a reward
//! or during training; `MetricBundle::check_independence` enforces that their
//! checkpoint ids differ.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{model_id, write_json, write_jsonl};
use crate::classifier::{train_classifier, ClassifierConfig, SentimentModel};
use crate::corpus::{detokenize, DialoguePair, LabeledSentence, Segmentation, Vocabulary};
use crate::discriminator::{train_pair_discriminator, DiscriminatorConfig, PairDiscriminator};
use crate::error::{CoreError, Result};
use crate::lm::{train_lm, LanguageModel, LmConfig};
use crate::rl::{reward_r1, reward_r2};
use crate::seq2seq::{train_mle, Seq2Seq, Seq2SeqConfig};

pub const METRIC_NAMES: [&str; 4] = ["coh1", "coh2", "scl", "lm"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub coh1: f64,
    pub coh2: f64,
    pub scl: f64,
    pub lm: f64,
}

impl MetricScores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.coh1, self.coh2, self.scl, self.lm]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        MetricScores { coh1: a[0], coh2: a[1], scl: a[2], lm: a[3] }
    }

    /// coh1, lm ≤ 0 and coh2, scl ∈ [0,1].
    pub fn within_bounds(&self) -> bool {
        self.coh1 <= 0.0 && self.lm <= 0.0 && (0.0..=1.0).contains(&self.coh2) && (0.0..=1.0).contains(&self.scl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub coherence: Seq2SeqConfig,
    pub discriminator: DiscriminatorConfig,
    pub classifier: ClassifierConfig,
    pub lm: LmConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        use sentiscale_nn::{LrSchedule, OptimConfig};
        MetricsConfig {
            coherence: Seq2SeqConfig {
                unit_size: 300,
                layers: 4,
                batch_size: 32,
                max_len: 50,
                seed: 101,
                optim: OptimConfig::sgd(LrSchedule { initial: 0.5, decay_every: 500, decay_rate: 0.99 }),
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                unit_size: 200,
                hidden: 100,
                batch_size: 64,
                max_len: 30,
                seed: 102,
                optim: OptimConfig::sgd(LrSchedule { initial: 0.0005, decay_every: 5000, decay_rate: 0.98 }),
                ..Default::default()
            },
            classifier: ClassifierConfig {
                unit_size: 300,
                batch_size: 64,
                seed: 103,
                optim: OptimConfig::sgd(LrSchedule { initial: 0.0005, decay_every: 5000, decay_rate: 0.98 }),
                ..Default::default()
            },
            lm: LmConfig { seed: 104, ..Default::default() },
        }
    }
}

/// The four frozen metric models.
#[derive(Clone, Debug)]
pub struct MetricBundle {
    pub coherence: Seq2Seq,
    pub discriminator: PairDiscriminator,
    pub classifier: SentimentModel,
    pub lm: LanguageModel,
}

impl MetricBundle {
    pub fn coh1(&self, x: &[String], y: &[String]) -> Result<f64> {
        let v = &self.coherence.vocab;
        let x = nonempty(v.encode(x))?;
        reward_r1(&self.coherence, &x, &v.encode(y))
    }

    pub fn coh2(&self, x: &[String], y: &[String]) -> Result<f64> {
        let v = &self.discriminator.vocab;
        reward_r2(&self.discriminator, &v.encode(x), &v.encode(y))
    }

    pub fn scl(&self, y: &[String]) -> Result<f64> {
        if y.is_empty() {
            return Err(CoreError::EmptySentence);
        }
        self.classifier.score_tokens(y)
    }

    /// Takes no input sentence.
    pub fn lm_score(&self, y: &[String]) -> Result<f64> {
        self.lm.score_tokens(y)
    }

    pub fn score(&self, x: &[String], y: &[String]) -> Result<MetricScores> {
        Ok(MetricScores { coh1: self.coh1(x, y)?, coh2: self.coh2(x, y)?, scl: self.scl(y)?, lm: self.lm_score(y)? })
    }

    pub fn model_ids(&self) -> [String; 4] {
        [model_id(&self.coherence.store), model_id(&self.discriminator.store), model_id(&self.classifier.store), model_id(&self.lm.store)]
    }

    /// Fails if any metric model shares a checkpoint id with `others`.
    pub fn check_independence(&self, others: &[String]) -> Result<()> {
        for (name, id) in METRIC_NAMES.iter().zip(self.model_ids()) {
            if others.contains(&id) {
                return Err(CoreError::Config(format!("metric model {name} ({id}) is also a training or reward model")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.coherence.save(&dir.join("coh1"))?;
        self.discriminator.save(&dir.join("coh2"))?;
        self.classifier.save(&dir.join("scl"))?;
        self.lm.save(&dir.join("lm"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(MetricBundle {
            coherence: Seq2Seq::load(&dir.join("coh1"))?,
            discriminator: PairDiscriminator::load(&dir.join("coh2"))?,
            classifier: SentimentModel::load(&dir.join("scl"))?,
            lm: LanguageModel::load(&dir.join("lm"))?,
        })
    }
}

fn nonempty(ids: Vec<usize>) -> Result<Vec<usize>> {
    if ids.is_empty() {
        Err(CoreError::EmptySentence)
    } else {
        Ok(ids)
    }
}

pub fn train_metric_bundle(pairs: &[DialoguePair], labeled: &[LabeledSentence], vocab: &Vocabulary, cfg: &MetricsConfig) -> Result<MetricBundle> {
    let (coherence, _) = train_mle(pairs, vocab, &cfg.coherence)?;
    let (discriminator, _) = train_pair_discriminator(pairs, vocab, &cfg.discriminator)?;
    let (classifier, _) = train_classifier(labeled, vocab, &cfg.classifier)?;
    let responses: Vec<Vec<usize>> = pairs.iter().map(|p| vocab.encode(&p.response)).collect();
    let (lm, _) = train_lm(&responses, vocab, &cfg.lm)?;
    Ok(MetricBundle { coherence, discriminator, classifier, lm })
}

/// Anything that maps an input sentence to a response.
pub trait Responder: Sync {
    fn respond(&self, x: &[String]) -> Result<Vec<String>>;
}

impl<F> Responder for F
where
    F: Fn(&[String]) -> Result<Vec<String>> + Sync,
{
    fn respond(&self, x: &[String]) -> Result<Vec<String>> {
        self(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub index: usize,
    pub input: String,
    pub response: Option<String>,
    pub scores: Option<MetricScores>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system: String,
    pub coh1: f64,
    pub coh2: f64,
    pub scl: f64,
    pub lm: f64,
    /// Items included in the averages.
    pub n: usize,
    pub failures: usize,
}

impl MetricReport {
    pub fn scores(&self) -> MetricScores {
        MetricScores { coh1: self.coh1, coh2: self.coh2, scl: self.scl, lm: self.lm }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemEvaluation {
    pub report: MetricReport,
    pub items: Vec<ItemResult>,
}

impl SystemEvaluation {
    pub fn write_items(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.items)
    }
}

/// Generates a response for every test input and averages the four metrics.
/// Items whose response or scoring fails are recorded and excluded.
pub fn evaluate_system(system: &str, responder: &dyn Responder, test: &[DialoguePair], bundle: &MetricBundle, mode: Segmentation) -> Result<SystemEvaluation> {
    if test.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let indexed: Vec<(usize, &DialoguePair)> = test.iter().enumerate().collect();
    let items = sentiscale_nn::parallel::map(&indexed, |&(index, pair)| {
        let input = detokenize(&pair.input, mode);
        let scored = responder.respond(&pair.input).and_then(|y| {
            let s = bundle.score(&pair.input, &y);
            Ok((detokenize(&y, mode), s))
        });
        match scored {
            Ok((response, Ok(s))) => ItemResult { index, input, response: Some(response), scores: Some(s), error: None },
            Ok((response, Err(e))) => ItemResult { index, input, response: Some(response), scores: None, error: Some(e.to_string()) },
            Err(e) => ItemResult { index, input, response: None, scores: None, error: Some(e.to_string()) },
        }
    });
    let ok: Vec<MetricScores> = items.iter().filter_map(|i| i.scores).collect();
    let n = ok.len();
    let mut sums = [0.0; 4];
    for s in &ok {
        for (acc, v) in sums.iter_mut().zip(s.as_array()) {
            *acc += v;
        }
    }
    let means = if n == 0 { [f64::NAN; 4] } else { sums.map(|v| v / n as f64) };
    let report = MetricReport { system: system.to_string(), coh1: means[0], coh2: means[1], scl: means[2], lm: means[3], n, failures: items.len() - n };
    Ok(SystemEvaluation { report, items })
}

/// Running-mean recomputation of a report's averages from its items.
pub fn streaming_means(items: &[ItemResult]) -> (MetricScores, usize) {
    let mut mean = [0.0; 4];
    let mut k = 0usize;
    for s in items.iter().filter_map(|i| i.scores) {
        k += 1;
        for (m, v) in mean.iter_mut().zip(s.as_array()) {
            *m += (v - *m) / k as f64;
        }
    }
    (MetricScores::from_array(mean), k)
}

/// Competition ranks per column, larger is better; ties share the best rank.
pub fn rankings(reports: &[MetricReport]) -> Vec<[usize; 4]> {
    let cols: Vec<[f64; 4]> = reports.iter().map(|r| r.scores().as_array()).collect();
    cols.iter()
        .map(|row| {
            let mut ranks = [0; 4];
            for (c, rank) in ranks.iter_mut().enumerate() {
                *rank = 1 + cols.iter().filter(|o| o[c] > row[c]).count();
            }
            ranks
        })
        .collect()
}

pub fn render_table(reports: &[MetricReport]) -> String {
    let ranks = rankings(reports);
    let name_w = reports.iter().map(|r| r.system.len()).max().unwrap_or(0).max("system".len());
    let mut out = format!("{:<name_w$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>5}\n", "system", "COH1", "COH2", "SCL", "LM", "n");
    for (r, rk) in reports.iter().zip(&ranks) {
        out.push_str(&format!("{:<name_w$}", r.system));
        for (v, k) in r.scores().as_array().iter().zip(rk) {
            out.push_str(&format!("  {:>12}", format!("{v:.3} ({k})")));
        }
        out.push_str(&format!("  {:>5}\n", r.n));
    }
    out
}

pub fn render_csv(reports: &[MetricReport]) -> Result<String> {
    let ranks = rankings(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["system", "coh1", "coh2", "scl", "lm", "n", "failures", "rank_coh1", "rank_coh2", "rank_scl", "rank_lm"]).map_err(csv_err)?;
    for (r, rk) in reports.iter().zip(&ranks) {
        let mut rec = vec![r.system.clone()];
        rec.extend(r.scores().as_array().iter().map(|v| v.to_string()));
        rec.push(r.n.to_string());
        rec.push(r.failures.to_string());
        rec.extend(rk.iter().map(|k| k.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CoreError::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_reports(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &reports)?;
    std::fs::write(dir.join("table.txt"), render_table(reports))?;
    std::fs::write(dir.join("table.csv"), render_csv(reports)?)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Parse { line: e.position().map(|p| p.line() as usize).unwrap_or(0), message: e.to_string() }
}

/// Responses of one system, aligned with a shared input list.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemResponses {
    pub system: String,
    pub pairs: Vec<(String, String)>,
}

/// Writes a shuffled annotation sheet with blank 0–5 score columns and a
/// separate key mapping item ids to systems. Returns the number of rows.
pub fn export_human_eval(systems: &[SystemResponses], sheet: &Path, key: &Path, seed: u64) -> Result<usize> {
    if systems.is_empty() {
        return Err(CoreError::InvalidArgument("human evaluation export needs at least one system".into()));
    }
    let mut rows: Vec<(&str, &str, &str)> = systems.iter().flat_map(|s| s.pairs.iter().map(move |(x, y)| (s.system.as_str(), x.as_str(), y.as_str()))).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for p in [sheet, key] {
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
    }
    let mut ws = csv::Writer::from_path(sheet).map_err(csv_err)?;
    let mut wk = csv::Writer::from_path(key).map_err(csv_err)?;
    ws.write_record(["item_id", "input", "response", "q_coherence", "q_sentiment", "q_grammar"]).map_err(csv_err)?;
    wk.write_record(["item_id", "system"]).map_err(csv_err)?;
    for (i, (system, x, y)) in rows.iter().enumerate() {
        let id = i.to_string();
        ws.write_record([id.as_str(), x, y, "", "", ""]).map_err(csv_err)?;
        wk.write_record([id.as_str(), system]).map_err(csv_err)?;
    }
    ws.flush()?;
    wk.flush()?;
    Ok(rows.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanScores {
    pub coherence: f64,
    pub sentiment: f64,
    pub grammar: f64,
}

/// Reads a filled-in sheet; 0–5 ratings are mapped to [0,1].
pub fn import_human_eval(sheet: &Path) -> Result<BTreeMap<usize, HumanScores>> {
    let mut r = csv::Reader::from_path(sheet).map_err(csv_err)?;
    let mut out = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parse = |col: usize| -> Result<f64> {
            let field = rec.get(col).unwrap_or("").trim();
            let v: f64 = field.parse().map_err(|_| CoreError::Parse { line: line + 2, message: format!("expected a rating, found {field:?}") })?;
            if !(0.0..=5.0).contains(&v) {
                return Err(CoreError::Parse { line: line + 2, message: format!("rating {v} outside 0..=5") });
            }
            Ok(v / 5.0)
        };
        let id = rec.get(0).unwrap_or("").parse().map_err(|_| CoreError::Parse { line: line + 2, message: "bad item_id".into() })?;
        out.insert(id, HumanScores { coherence: parse(3)?, sentiment: parse(4)?, grammar: parse(5)? });
    }
    Ok(out)
}

/// Per-system means of imported ratings, joined through the key file.
pub fn aggregate_human_eval(scores: &BTreeMap<usize, HumanScores>, key: &Path) -> Result<BTreeMap<String, HumanScores>> {
    let mut r = csv::Reader::from_path(key).map_err(csv_err)?;
    let mut acc: BTreeMap<String, ([f64; 3], usize)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let id: usize = rec.get(0).unwrap_or("").parse().map_err(|_| CoreError::Parse { line: 0, message: "bad item_id in key".into() })?;
        if let Some(s) = scores.get(&id) {
            let e = acc.entry(rec.get(1).unwrap_or("").to_string()).or_default();
            e.0[0] += s.coherence;
            e.0[1] += s.sentiment;
            e.0[2] += s.grammar;
            e.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, HumanScores { coherence: s[0] / n as f64, sentiment: s[1] / n as f64, grammar: s[2] / n as f64 })).collect())
}
