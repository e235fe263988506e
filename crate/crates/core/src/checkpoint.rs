//! Checkpoint directory helpers: JSON sidecars plus a named parameter blob.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sentiscale_nn::ParamStore;

use crate::error::{CoreError, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::MissingDependency(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

/// Hex id derived from parameter names, shapes and bits.
pub fn model_id(store: &ParamStore) -> String {
    format!("{:016x}", store.checksum())
}

/// Loads `dir` into a store with the same layout as `template`.
pub fn load_params_like(dir: &Path, template: &ParamStore) -> Result<ParamStore> {
    let loaded = ParamStore::load(dir)?;
    if loaded.len() != template.len() {
        return Err(CoreError::Config(format!(
            "{}: checkpoint has {} parameters, model expects {}",
            dir.display(),
            loaded.len(),
            template.len()
        )));
    }
    for id in template.ids() {
        if loaded.name(id) != template.name(id) || loaded.get(id).shape() != template.get(id).shape() {
            return Err(CoreError::Config(format!("{}: parameter {} does not match", dir.display(), template.name(id))));
        }
    }
    Ok(loaded)
}
