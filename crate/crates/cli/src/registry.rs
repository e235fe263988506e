//! Model registry: `registry.json` under the registry root, and the loaded
//! responders it describes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sentiscale_core::checkpoint::model_id;
use sentiscale_core::classifier::SentimentModel;
use sentiscale_core::corpus::{VocabMap, Vocabulary};
use sentiscale_core::cyclegan::{transfer, CycleGan, Direction};
use sentiscale_core::embedding::EmbeddingTable;
use sentiscale_core::metrics::MetricBundle;
use sentiscale_core::persona::{validate_score, PersonaModel};
use sentiscale_core::plug_and_play::{transform_response, LatentOptConfig, Steering, Vrae};
use sentiscale_core::seq2seq::Seq2Seq;
use sentiscale_core::CoreError;

use crate::error::Result;

pub const REGISTRY_FILE: &str = "registry.json";
pub const FIXED_NOTICE: &str = "sentiment fixed by training";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Baseline,
    Persona,
    Rl,
    Plugplay,
    Cyclegan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub kind: Kind,
    /// Checkpoint directory, relative to the registry root.
    pub path: String,
    /// Other checkpoints the responder needs, by role.
    #[serde(default)]
    pub deps: BTreeMap<String, String>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryFile {
    pub models: BTreeMap<String, Entry>,
    /// Metric bundle directory, relative to the registry root.
    #[serde(default)]
    pub metrics: Option<String>,
}

impl RegistryFile {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(REGISTRY_FILE);
        if !path.exists() {
            return Ok(RegistryFile::default());
        }
        Ok(sentiscale_core::checkpoint::read_json(&path)?)
    }

    /// Write-then-rename, so readers see the old or the new file.
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let tmp = root.join(format!("{REGISTRY_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(self).map_err(CoreError::from)?)?;
        std::fs::rename(tmp, root.join(REGISTRY_FILE))?;
        Ok(())
    }

    pub fn upsert(root: &Path, id: &str, entry: Entry) -> Result<()> {
        let mut r = Self::load(root)?;
        r.models.insert(id.to_string(), entry);
        r.save(root)
    }
}

/// A loaded responder.
pub enum Responder {
    Seq2Seq(Seq2Seq),
    Persona(PersonaModel),
    PlugPlay { base: Seq2Seq, vrae: Vrae, sc: SentimentModel, latent: LatentOptConfig },
    Cyclegan { base: Seq2Seq, gan: CycleGan, table: EmbeddingTable },
}

pub struct LoadedModel {
    pub id: String,
    pub entry: Entry,
    /// Checksum-derived id of the responder's own parameters.
    pub checkpoint: String,
    pub responder: Responder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub tokens: Vec<String>,
    pub notice: Option<String>,
}

fn dep(root: &Path, entry: &Entry, role: &str) -> Result<PathBuf> {
    entry
        .deps
        .get(role)
        .map(|p| root.join(p))
        .ok_or_else(|| CoreError::MissingDependency(format!("registry entry {} lacks a {role} dependency", entry.path)).into())
}

/// Names the checkpoint in load failures.
fn named(path: &Path, e: CoreError) -> CoreError {
    match e {
        CoreError::Io(io) => CoreError::MissingDependency(format!("checkpoint {}: {io}", path.display())),
        CoreError::Json(j) => CoreError::Config(format!("checkpoint {}: {j}", path.display())),
        other => other,
    }
}

impl LoadedModel {
    pub fn load(root: &Path, id: &str, entry: &Entry) -> Result<Self> {
        let path = root.join(&entry.path);
        let wrap = |e| named(&path, e);
        let responder = match entry.kind {
            Kind::Baseline | Kind::Rl => Responder::Seq2Seq(Seq2Seq::load(&path).map_err(wrap)?),
            Kind::Persona => Responder::Persona(PersonaModel::load(&path).map_err(wrap)?),
            Kind::Plugplay => {
                let base = dep(root, entry, "responder")?;
                let sc = dep(root, entry, "classifier")?;
                let latent = match entry.metadata.get("latent") {
                    Some(v) => serde_json::from_value(v.clone()).map_err(CoreError::from)?,
                    None => LatentOptConfig::default(),
                };
                Responder::PlugPlay {
                    base: Seq2Seq::load(&base).map_err(|e| named(&base, e))?,
                    vrae: Vrae::load(&path).map_err(wrap)?,
                    sc: SentimentModel::load(&sc).map_err(|e| named(&sc, e))?,
                    latent,
                }
            }
            Kind::Cyclegan => {
                let base = dep(root, entry, "responder")?;
                let emb = dep(root, entry, "embeddings")?;
                let table = EmbeddingTable::load(&emb).map_err(|e| named(&emb, e))?;
                let gan = CycleGan::load(&path).map_err(wrap)?;
                Responder::Cyclegan { base: Seq2Seq::load(&base).map_err(|e| named(&base, e))?, gan, table }
            }
        };
        let checkpoint = match &responder {
            Responder::Seq2Seq(m) => model_id(&m.store),
            Responder::Persona(p) => model_id(&p.model.store),
            Responder::PlugPlay { vrae, .. } => model_id(&vrae.store),
            Responder::Cyclegan { gan, .. } => model_id(&gan.store),
        };
        Ok(LoadedModel { id: id.to_string(), entry: entry.clone(), checkpoint, responder })
    }

    pub fn vocab(&self) -> &Vocabulary {
        match &self.responder {
            Responder::Seq2Seq(m) => &m.vocab,
            Responder::Persona(p) => &p.model.vocab,
            Responder::PlugPlay { base, .. } | Responder::Cyclegan { base, .. } => &base.vocab,
        }
    }

    /// Whether the request's sentiment value steers this model.
    pub fn uses_sentiment(&self) -> bool {
        matches!(self.entry.kind, Kind::Persona | Kind::Plugplay)
    }

    /// Sentiment used for offline evaluation: fully positive for persona,
    /// the configured target for plug-and-play.
    pub fn evaluation_sentiment(&self) -> f64 {
        match &self.responder {
            Responder::PlugPlay { latent, .. } => latent.target_score,
            _ => 1.0,
        }
    }

    /// Generates a reply. `sentiment` drives persona models directly; for
    /// plug-and-play it is the target score (values below 0.5 steer
    /// downwards to 1 − target). Other kinds ignore it.
    pub fn respond(&self, x: &[String], sentiment: f64) -> Result<Reply> {
        let sentiment = validate_score(sentiment)?;
        let notice = (!self.uses_sentiment()).then(|| FIXED_NOTICE.to_string());
        let ids = self.vocab().encode(x);
        if ids.is_empty() {
            return Err(CoreError::EmptySentence.into());
        }
        let out = match &self.responder {
            Responder::Seq2Seq(m) => m.decode(&ids, None)?,
            Responder::Persona(p) => p.respond(&ids, sentiment)?,
            Responder::PlugPlay { base, vrae, sc, latent } => {
                let cfg = if sentiment >= 0.5 {
                    LatentOptConfig { target_score: sentiment, descend: false, ..latent.clone() }
                } else {
                    LatentOptConfig { target_score: 1.0 - sentiment, descend: true, ..latent.clone() }
                };
                let steering = Steering::new(vrae, sc);
                transform_response(base, &steering, &ids, &cfg)?.response
            }
            Responder::Cyclegan { base, gan, table } => {
                let y = base.decode(&ids, None)?;
                if y.is_empty() {
                    y
                } else {
                    let to_table = VocabMap::new(&base.vocab, &table.vocab);
                    let back = VocabMap::new(&table.vocab, &base.vocab);
                    back.apply(&transfer(gan, table, &to_table.apply(&y), Direction::NegToPos)?)
                }
            }
        };
        Ok(Reply { tokens: self.vocab().decode(&out), notice })
    }
}

/// Every loaded responder plus the metric bundle, as one immutable value.
pub struct Snapshot {
    pub version: u64,
    pub models: BTreeMap<String, LoadedModel>,
    pub metrics: Option<MetricBundle>,
}

impl Snapshot {
    pub fn load(root: &Path, version: u64) -> Result<Self> {
        let file = RegistryFile::load(root)?;
        let mut models = BTreeMap::new();
        for (id, entry) in &file.models {
            models.insert(id.clone(), LoadedModel::load(root, id, entry)?);
        }
        let metrics = match &file.metrics {
            Some(p) => {
                let dir = root.join(p);
                Some(MetricBundle::load(&dir).map_err(|e| named(&dir, e))?)
            }
            None => None,
        };
        Ok(Snapshot { version, models, metrics })
    }
}
