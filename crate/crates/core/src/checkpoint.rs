//! Checkpoints: one NPY file per parameter, a JSON manifest mapping names
//! to `{shape, dtype, file}`, and the model configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::io::npy::{read_npy, write_npy};
use crate::model::Cfmd;
use crate::params::ParamStore;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub file: String,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.npy")
}

pub fn save<T: Element>(dir: &Path, config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new();
    for (name, t) in store.iter() {
        let file = file_name(name);
        write_npy(t, &dir.join(&file))?;
        manifest.insert(
            name.to_string(),
            ManifestEntry {
                shape: t.dims().to_vec(),
                dtype: T::DTYPE,
                file,
            },
        );
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(CONFIG);
    fs::write(&path, config.to_json()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(e.column() as u64, format!("{}: {e}", path.display())))
}

/// Rebuilds the model from the stored configuration and loads every
/// parameter, converting to `T` if the checkpoint used another dtype.
pub fn load<T: Element>(dir: &Path) -> Result<(Cfmd, ParamStore<T>)> {
    let config = ModelConfig::load(&dir.join(CONFIG))?;
    let (model, mut store) = Cfmd::new::<T>(&config)?;
    let manifest = read_manifest(dir)?;
    if manifest.len() != store.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} parameters, the configured model has {}",
            manifest.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let entry = manifest
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name:?}")))?;
        let expect = store.get(id).dims();
        if entry.shape != expect {
            return Err(Error::Shape(format!("parameter {name:?}: manifest shape {:?}, model expects {expect:?}", entry.shape)));
        }
        let t = read_npy::<T>(&dir.join(&entry.file))?;
        store.set(id, t)?;
    }
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dtype: DType::F32,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, store) = Cfmd::new::<f32>(&tiny()).unwrap();
        save(dir.path(), &tiny(), &store).unwrap();
        let (_, loaded) = load::<f32>(dir.path()).unwrap();
        assert!(loaded.bitwise_eq(&store));
        let manifest = read_manifest(dir.path()).unwrap();
        let e = &manifest["head.weight"];
        assert_eq!((e.dtype, e.file.as_str()), (DType::F32, "head.weight.npy"));
    }

    #[test]
    fn inconsistent_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (_, store) = Cfmd::new::<f32>(&tiny()).unwrap();
        save(dir.path(), &tiny(), &store).unwrap();
        let other = ModelConfig {
            unified_channels: 8,
            ..tiny()
        };
        fs::write(dir.path().join(CONFIG), other.to_json()).unwrap();
        assert!(load::<f32>(dir.path()).is_err());
        assert!(matches!(load::<f32>(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
