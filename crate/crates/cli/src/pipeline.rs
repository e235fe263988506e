//! One function per CLI stage. Each reads its inputs from the workspace,
//! writes its outputs back, and returns a one-line summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sentiscale_core::checkpoint::{model_id, write_json, write_jsonl};
use sentiscale_core::classifier::{evaluate_classifier, relabel_filter, train_classifier, SentimentModel};
use sentiscale_core::config::ExperimentConfig;
use sentiscale_core::corpus::{
    build_vocabulary, load_dialogue_corpus, load_sentiment_corpus, split_corpus, write_dialogue_corpus, write_sentiment_corpus, DialoguePair, LabeledSentence,
    Vocabulary,
};
use sentiscale_core::cyclegan::{train_cyclegan, transfer, CycleGan, Direction};
use sentiscale_core::discriminator::{train_pair_discriminator, PairDiscriminator};
use sentiscale_core::embedding::{train_skipgram, EmbeddingTable};
use sentiscale_core::metrics::{evaluate_system, export_human_eval, train_metric_bundle, write_reports, MetricBundle, MetricReport, SystemResponses};
use sentiscale_core::persona::{train_persona, PersonaModel};
use sentiscale_core::plug_and_play::{train_vrae, transform_response, LatentOptConfig, Steering, Vrae};
use sentiscale_core::rl::{policy_inputs, train_policy, write_log, RewardModels};
use sentiscale_core::seq2seq::{train_mle, Seq2Seq};
use sentiscale_core::toy::{generate_toy_corpus, single_polarity};
use sentiscale_core::CoreError;

use crate::error::{CliError, Result};
use crate::registry::{Entry, Kind, RegistryFile, Snapshot};
use crate::workspace::Workspace;

/// Checkpoint directory names under the registry root.
pub mod dirs {
    pub const EMBEDDINGS: &str = "embeddings";
    pub const CLASSIFIER: &str = "classifier";
    pub const BASELINE: &str = "baseline";
    pub const PERSONA: &str = "persona";
    pub const COHERENCE: &str = "coherence";
    pub const DISCRIMINATOR: &str = "discriminator";
    pub const RL: &str = "rl";
    pub const VRAE: &str = "vrae";
    pub const CYCLEGAN: &str = "cyclegan";
    pub const METRICS: &str = "metrics";
}

pub struct Pipeline {
    pub ws: Workspace,
    pub cfg: ExperimentConfig,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CoreError::MissingDependency(format!("{what} not found at {}; run the stage that produces it first", path.display())).into())
    }
}

fn entry(kind: Kind, path: &str, deps: &[(&str, &str)]) -> Entry {
    Entry { kind, path: path.into(), deps: deps.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(), metadata: Default::default() }
}

impl Pipeline {
    pub fn new(ws: Workspace, cfg: ExperimentConfig) -> Self {
        Pipeline { ws, cfg }
    }

    fn mode(&self) -> sentiscale_core::corpus::Segmentation {
        self.cfg.data.segmentation
    }

    fn report(&self, name: &str) -> PathBuf {
        self.ws.root.join("reports").join(name)
    }

    fn training(&self) -> Result<()> {
        self.ws.ensure_not_served()
    }

    fn register(&self, id: &str, e: Entry) -> Result<()> {
        RegistryFile::upsert(self.ws.models(), id, e)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        require(&self.ws.vocab(), "vocabulary")?;
        Ok(Vocabulary::load(&self.ws.vocab())?)
    }

    pub fn train_pairs(&self) -> Result<Vec<DialoguePair>> {
        require(&self.ws.train_pairs(), "training pairs")?;
        Ok(load_dialogue_corpus(&self.ws.train_pairs(), self.mode())?)
    }

    pub fn test_pairs(&self) -> Result<Vec<DialoguePair>> {
        require(&self.ws.test_pairs(), "test pairs")?;
        Ok(load_dialogue_corpus(&self.ws.test_pairs(), self.mode())?)
    }

    pub fn labeled_train(&self) -> Result<Vec<LabeledSentence>> {
        require(&self.ws.labeled_train(), "labeled sentences")?;
        Ok(load_sentiment_corpus(&self.ws.labeled_train(), self.mode())?)
    }

    pub fn labeled_test(&self) -> Result<Vec<LabeledSentence>> {
        require(&self.ws.labeled_test(), "labeled test sentences")?;
        Ok(load_sentiment_corpus(&self.ws.labeled_test(), self.mode())?)
    }

    fn load<T>(&self, dir: &str, what: &str, f: impl FnOnce(&Path) -> sentiscale_core::Result<T>) -> Result<T> {
        let p = self.ws.model(dir);
        require(&p, what)?;
        Ok(f(&p)?)
    }

    pub fn classifier(&self) -> Result<SentimentModel> {
        self.load(dirs::CLASSIFIER, "sentiment classifier", SentimentModel::load)
    }

    pub fn baseline(&self) -> Result<Seq2Seq> {
        self.load(dirs::BASELINE, "baseline seq2seq", Seq2Seq::load)
    }

    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        self.load(dirs::EMBEDDINGS, "word embeddings", EmbeddingTable::load)
    }

    pub fn gen_toy(&self, seed: u64) -> Result<String> {
        let d = &self.cfg.data;
        let toy = generate_toy_corpus(seed, d.toy_pairs, d.toy_labeled);
        std::fs::create_dir_all(self.ws.root.join("raw"))?;
        write_dialogue_corpus(&self.ws.raw_dialogue(), &toy.pairs, self.mode())?;
        write_sentiment_corpus(&self.ws.raw_sentiment(), &toy.labeled, self.mode())?;
        Ok(format!("wrote {} dialogue pairs and {} labeled sentences to {}", toy.pairs.len(), toy.labeled.len(), self.ws.root.join("raw").display()))
    }

    pub fn prepare_data(&self) -> Result<String> {
        let d = &self.cfg.data;
        require(&self.ws.raw_dialogue(), "raw dialogue corpus")?;
        require(&self.ws.raw_sentiment(), "raw sentiment corpus")?;
        let pairs = load_dialogue_corpus(&self.ws.raw_dialogue(), d.segmentation)?;
        let labeled = load_sentiment_corpus(&self.ws.raw_sentiment(), d.segmentation)?;
        let ps = split_corpus(&pairs, d.test_size, d.split_seed)?;
        let ls = split_corpus(&labeled, d.labeled_test_size, d.split_seed)?;
        let mut sentences: Vec<Vec<String>> = ps.train.iter().flat_map(|p| [p.input.clone(), p.response.clone()]).collect();
        sentences.extend(ls.train.iter().map(|l| l.text.clone()));
        let vocab = build_vocabulary(&sentences, d.vocab_size, d.segmentation)?;
        std::fs::create_dir_all(self.ws.root.join("data"))?;
        write_dialogue_corpus(&self.ws.train_pairs(), &ps.train, d.segmentation)?;
        write_dialogue_corpus(&self.ws.test_pairs(), &ps.test, d.segmentation)?;
        write_sentiment_corpus(&self.ws.labeled_train(), &ls.train, d.segmentation)?;
        write_sentiment_corpus(&self.ws.labeled_test(), &ls.test, d.segmentation)?;
        vocab.save(&self.ws.vocab())?;
        Ok(format!("{} train / {} test pairs, {} train / {} test labeled, vocabulary of {}", ps.train.len(), ps.test.len(), ls.train.len(), ls.test.len(), vocab.len()))
    }

    pub fn train_embeddings(&self) -> Result<String> {
        self.training()?;
        let vocab = self.vocab()?;
        let mut ids: Vec<Vec<usize>> = self.train_pairs()?.iter().flat_map(|p| [vocab.encode(&p.input), vocab.encode(&p.response)]).collect();
        ids.extend(self.labeled_train()?.iter().map(|l| vocab.encode(&l.text)));
        let table = train_skipgram(&ids, &vocab, &self.cfg.embedding)?;
        table.save(&self.ws.model(dirs::EMBEDDINGS))?;
        Ok(format!("embeddings {}x{} checksum {:016x}", table.len(), table.dim(), table.checksum()))
    }

    pub fn train_classifier(&self) -> Result<String> {
        self.training()?;
        let vocab = self.vocab()?;
        let (model, train) = train_classifier(&self.labeled_train()?, &vocab, &self.cfg.classifier)?;
        let report = evaluate_classifier(&model, &self.labeled_test()?)?;
        model.save(&self.ws.model(dirs::CLASSIFIER))?;
        write_json(&self.report("classifier.json"), &serde_json::json!({"train": train, "test": report}))?;
        let auc = report.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into());
        Ok(format!("classifier accuracy {:.4} auc {auc} on {} held-out sentences", report.accuracy, report.n))
    }

    pub fn train_baseline(&self) -> Result<String> {
        self.training()?;
        let (model, report) = train_mle(&self.train_pairs()?, &self.vocab()?, &self.cfg.baseline)?;
        model.save(&self.ws.model(dirs::BASELINE))?;
        write_json(&self.report("baseline.json"), &report)?;
        self.register("baseline", entry(Kind::Baseline, dirs::BASELINE, &[]))?;
        Ok(format!("baseline token NLL {:.4} -> {:.4}", report.initial_nll, report.final_nll))
    }

    pub fn train_persona(&self) -> Result<String> {
        self.training()?;
        let sc = self.classifier()?;
        let (model, report) = train_persona(&self.train_pairs()?, Some(&sc), &self.vocab()?, &self.cfg.persona)?;
        model.save(&self.ws.model(dirs::PERSONA))?;
        write_json(&self.report("persona.json"), &report)?;
        self.register("persona", entry(Kind::Persona, dirs::PERSONA, &[("classifier", dirs::CLASSIFIER)]))?;
        Ok(format!("persona token NLL {:.4} -> {:.4}", report.initial_nll, report.final_nll))
    }

    /// The seq2seq behind the coherence reward.
    pub fn train_coherence(&self) -> Result<String> {
        self.training()?;
        let (model, report) = train_mle(&self.train_pairs()?, &self.vocab()?, &self.cfg.coherence)?;
        model.save(&self.ws.model(dirs::COHERENCE))?;
        write_json(&self.report("coherence.json"), &report)?;
        Ok(format!("coherence seq2seq token NLL {:.4} -> {:.4}", report.initial_nll, report.final_nll))
    }

    pub fn train_discriminator(&self) -> Result<String> {
        self.training()?;
        let (model, report) = train_pair_discriminator(&self.train_pairs()?, &self.vocab()?, &self.cfg.discriminator)?;
        model.save(&self.ws.model(dirs::DISCRIMINATOR))?;
        write_json(&self.report("discriminator.json"), &report)?;
        Ok(format!("discriminator held-out accuracy {:.4}", report.heldout_accuracy))
    }

    /// Trains the coherence seq2seq first when it is missing.
    pub fn train_rl(&self) -> Result<String> {
        self.training()?;
        if !self.ws.model(dirs::COHERENCE).exists() {
            self.train_coherence()?;
        }
        let pretrained = self.baseline()?;
        let coh = self.load(dirs::COHERENCE, "coherence seq2seq", Seq2Seq::load)?;
        let d = self.load(dirs::DISCRIMINATOR, "pair discriminator", PairDiscriminator::load)?;
        let sc = self.classifier()?;
        let rewards = RewardModels::new(&pretrained.vocab, &coh, &d, &sc);
        let inputs: Vec<Vec<String>> = self.train_pairs()?.into_iter().map(|p| p.input).collect();
        let inputs = policy_inputs(&pretrained, &inputs);
        let (policy, report) = train_policy(&pretrained, &rewards, self.cfg.rl_weights, &self.cfg.rl, &inputs)?;
        policy.save(&self.ws.model(dirs::RL))?;
        write_log(&report.log, &self.report("rl_log.jsonl"))?;
        let deps = [("pretrained", dirs::BASELINE), ("coherence", dirs::COHERENCE), ("discriminator", dirs::DISCRIMINATOR), ("classifier", dirs::CLASSIFIER)];
        let mut e = entry(Kind::Rl, dirs::RL, &deps);
        e.metadata.insert("alpha".into(), self.cfg.rl_weights.alpha.into());
        e.metadata.insert("beta".into(), self.cfg.rl_weights.beta.into());
        self.register("rl", e)?;
        Ok(format!("rl probe sentiment {:.4} -> {:.4} after {} iterations", report.probe_r3_initial, report.probe_r3_final, report.log.len()))
    }

    /// Trains the VRAE and registers the plug-and-play responder
    /// (baseline + VRAE + classifier).
    pub fn train_vrae(&self) -> Result<String> {
        self.training()?;
        let vocab = self.vocab()?;
        let mut sentences: Vec<Vec<usize>> = self.train_pairs()?.iter().map(|p| vocab.encode(&p.response)).filter(|s| !s.is_empty()).collect();
        if self.cfg.data.vrae_sentences > 0 {
            sentences.truncate(self.cfg.data.vrae_sentences);
        }
        let (vrae, report) = train_vrae(&sentences, &vocab, &self.cfg.vrae)?;
        vrae.save(&self.ws.model(dirs::VRAE))?;
        write_json(&self.report("vrae.json"), &report)?;
        require(&self.ws.model(dirs::BASELINE), "baseline seq2seq")?;
        require(&self.ws.model(dirs::CLASSIFIER), "sentiment classifier")?;
        self.cfg.latent.validate()?;
        let mut e = entry(Kind::Plugplay, dirs::VRAE, &[("responder", dirs::BASELINE), ("classifier", dirs::CLASSIFIER)]);
        e.metadata.insert("latent".into(), serde_json::to_value(&self.cfg.latent).map_err(CoreError::from)?);
        self.register("plugplay", e)?;
        Ok(format!("vrae reconstruction accuracy {:.4} on {} sentences", report.reconstruction_accuracy, sentences.len()))
    }

    /// Single-polarity training sets: relabel-and-filter with the classifier,
    /// then split by label.
    pub fn cyclegan_sets(&self, table: &EmbeddingTable) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let sc = self.classifier()?;
        let mut kept = relabel_filter(&self.labeled_train()?, &sc, self.cfg.data.relabel_margin)?;
        if self.cfg.data.toy_single_polarity {
            kept = single_polarity(&kept);
        }
        let enc = |label: u8| -> Vec<Vec<usize>> { kept.iter().filter(|l| l.label == label).map(|l| table.vocab.encode(&l.text)).filter(|s| !s.is_empty()).collect() };
        Ok((enc(1), enc(0)))
    }

    pub fn train_cyclegan(&self) -> Result<String> {
        self.training()?;
        let table = self.embeddings()?;
        let (pos, neg) = self.cyclegan_sets(&table)?;
        let (gan, report) = train_cyclegan(&pos, &neg, &table, &self.cfg.cyclegan)?;
        gan.save(&self.ws.model(dirs::CYCLEGAN))?;
        write_jsonl(&self.report("cyclegan_log.jsonl"), &report.log)?;
        require(&self.ws.model(dirs::BASELINE), "baseline seq2seq")?;
        self.register("cyclegan", entry(Kind::Cyclegan, dirs::CYCLEGAN, &[("responder", dirs::BASELINE), ("embeddings", dirs::EMBEDDINGS)]))?;
        Ok(format!("cyclegan trained on {} positive / {} negative sentences", pos.len(), neg.len()))
    }

    pub fn train_metrics(&self) -> Result<String> {
        self.training()?;
        let bundle = train_metric_bundle(&self.train_pairs()?, &self.labeled_train()?, &self.vocab()?, &self.cfg.metrics)?;
        bundle.check_independence(&self.training_model_ids())?;
        bundle.save(&self.ws.model(dirs::METRICS))?;
        let mut r = RegistryFile::load(self.ws.models())?;
        r.metrics = Some(dirs::METRICS.into());
        r.save(self.ws.models())?;
        Ok(format!("metric bundle ids {}", bundle.model_ids().join(" ")))
    }

    /// Parameter ids of every training-side checkpoint present on disk.
    pub fn training_model_ids(&self) -> Vec<String> {
        let m = |d: &str| self.ws.model(d);
        let mut ids = Vec::new();
        for d in [dirs::BASELINE, dirs::COHERENCE, dirs::RL] {
            if let Ok(s) = Seq2Seq::load(&m(d)) {
                ids.push(model_id(&s.store));
            }
        }
        if let Ok(p) = PersonaModel::load(&m(dirs::PERSONA)) {
            ids.push(model_id(&p.model.store));
        }
        if let Ok(s) = SentimentModel::load(&m(dirs::CLASSIFIER)) {
            ids.push(model_id(&s.store));
        }
        if let Ok(d) = PairDiscriminator::load(&m(dirs::DISCRIMINATOR)) {
            ids.push(model_id(&d.store));
        }
        if let Ok(v) = Vrae::load(&m(dirs::VRAE)) {
            ids.push(model_id(&v.store));
        }
        if let Ok(c) = CycleGan::load(&m(dirs::CYCLEGAN)) {
            ids.push(model_id(&c.store));
        }
        ids
    }

    fn snapshot(&self) -> Result<Snapshot> {
        Snapshot::load(self.ws.models(), 0)
    }

    fn metrics_of(snap: &Snapshot) -> Result<&MetricBundle> {
        snap.metrics.as_ref().ok_or_else(|| CoreError::MissingDependency("no metric bundle registered; run train-metrics".into()).into())
    }

    /// Scores every requested system on the test pairs. `systems` empty
    /// means all registered models. Writes the JSON report to `out`, the
    /// text and CSV tables next to it, and per-item results under
    /// `<out dir>/items/`.
    pub fn evaluate(&self, systems: &[String], out: Option<&Path>) -> Result<(Vec<MetricReport>, String)> {
        let snap = self.snapshot()?;
        let bundle = Self::metrics_of(&snap)?;
        let mut others = self.training_model_ids();
        others.extend(snap.models.values().map(|m| m.checkpoint.clone()));
        bundle.check_independence(&others)?;
        let ids = select(&snap, systems)?;
        let test = self.test_pairs()?;
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| self.ws.eval_dir().join("report.json"));
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reports = Vec::new();
        for id in &ids {
            let model = &snap.models[id];
            let s = model.evaluation_sentiment();
            let responder = |x: &[String]| -> sentiscale_core::Result<Vec<String>> { model.respond(x, s).map(|r| r.tokens).map_err(into_core) };
            let eval = evaluate_system(id, &responder, &test, bundle, self.mode())?;
            eval.write_items(&dir.join("items").join(format!("{id}.jsonl")))?;
            reports.push(eval.report);
        }
        write_reports(&dir, &reports)?;
        write_json(&out, &reports)?;
        let table = sentiscale_core::metrics::render_table(&reports);
        Ok((reports, table))
    }

    /// Responses of the requested systems on the first `n` test inputs,
    /// exported as a blind annotation sheet plus key.
    pub fn export_human_eval(&self, systems: &[String], n: usize, sheet: &Path, key: &Path, seed: u64) -> Result<String> {
        let snap = self.snapshot()?;
        let ids = select(&snap, systems)?;
        let test = self.test_pairs()?;
        let test = &test[..n.min(test.len())];
        let mut out = Vec::new();
        for id in &ids {
            let model = &snap.models[id];
            let s = model.evaluation_sentiment();
            let mut pairs = Vec::new();
            for p in test {
                if let Ok(r) = model.respond(&p.input, s) {
                    pairs.push((sentiscale_core::corpus::detokenize(&p.input, self.mode()), sentiscale_core::corpus::detokenize(&r.tokens, self.mode())));
                }
            }
            out.push(SystemResponses { system: id.clone(), pairs });
        }
        let rows = export_human_eval(&out, sheet, key, seed)?;
        Ok(format!("wrote {rows} rows to {} (key {})", sheet.display(), key.display()))
    }

    /// Sentiment transfer of one sentence. `method` is `cyclegan`
    /// (embedding-space translation) or `plugplay` (latent steering of the
    /// baseline's reply to `text`). The plug-and-play run log goes to `log`.
    pub fn transfer(&self, method: &str, text: &str, direction: Direction, log: Option<&Path>) -> Result<String> {
        let mode = self.mode();
        let tokens = sentiscale_core::corpus::tokenize(text, mode)?;
        match method {
            "cyclegan" => {
                let table = self.embeddings()?;
                let gan = self.load(dirs::CYCLEGAN, "cyclegan", CycleGan::load)?;
                let ids = table.vocab.encode(&tokens);
                let out = transfer(&gan, &table, &ids, direction)?;
                Ok(sentiscale_core::corpus::detokenize(&table.vocab.decode(&out), mode))
            }
            "plugplay" => {
                let base = self.baseline()?;
                let vrae = self.load(dirs::VRAE, "vrae", Vrae::load)?;
                let sc = self.classifier()?;
                let cfg = LatentOptConfig { descend: matches!(direction, Direction::PosToNeg), ..self.cfg.latent.clone() };
                cfg.validate()?;
                let ids = base.vocab.encode(&tokens);
                if ids.is_empty() {
                    return Err(CoreError::EmptySentence.into());
                }
                let t = transform_response(&base, &Steering::new(&vrae, &sc), &ids, &cfg)?;
                if let Some(p) = log {
                    write_jsonl(p, &t.latent.log)?;
                }
                Ok(format!(
                    "{} => {} (sc {:.3}, {} steps)",
                    sentiscale_core::corpus::detokenize(&base.vocab.decode(&t.original), mode),
                    sentiscale_core::corpus::detokenize(&base.vocab.decode(&t.response), mode),
                    t.latent.score,
                    t.latent.steps
                ))
            }
            other => Err(CliError::Usage(format!("unknown transfer method {other:?}; expected cyclegan or plugplay"))),
        }
    }
}

pub fn into_core(e: CliError) -> CoreError {
    match e {
        CliError::Core(c) => c,
        other => CoreError::InvalidArgument(other.to_string()),
    }
}

/// Requested ids in registry order by kind; empty selects every model.
pub fn select(snap: &Snapshot, systems: &[String]) -> Result<Vec<String>> {
    if snap.models.is_empty() {
        return Err(CoreError::MissingDependency("the model registry is empty".into()).into());
    }
    let by_kind: BTreeMap<(Kind, &String), ()> = snap.models.iter().map(|(id, m)| ((m.entry.kind, id), ())).collect();
    let all: Vec<String> = by_kind.into_keys().map(|(_, id)| id.clone()).collect();
    if systems.is_empty() {
        return Ok(all);
    }
    for s in systems {
        if !snap.models.contains_key(s) {
            return Err(CoreError::InvalidArgument(format!("unknown system {s:?}; registered: {}", all.join(", "))).into());
        }
    }
    Ok(systems.to_vec())
}
