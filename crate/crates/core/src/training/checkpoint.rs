use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{EmotionSet, Vocabulary};
use crate::encoder::FeatureFile;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

/// JSON stored next to the parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub emotions: EmotionSet,
    pub vocabulary: Vocabulary,
    /// Parameter names and shapes in store order.
    pub parameters: Vec<(String, Vec<usize>)>,
}

/// `model.uft1` → `model.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Stores every parameter as a one-column record keyed by its name, plus a
/// JSON sidecar with the configuration, inventories and shapes.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut file = FeatureFile::new(1);
    let mut parameters = Vec::with_capacity(model.store.len());
    for id in model.store.ids() {
        let name = model.store.name(id);
        let value = model.store.value(id);
        file.push(name, value.data().iter().map(|&v| v as f32).collect())?;
        parameters.push((name.to_string(), value.shape().to_vec()));
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        emotions: model.emotions.clone(),
        vocabulary: model.vocabulary.clone(),
        parameters,
    };
    write_atomic(path, &file.to_bytes())?;
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = FeatureFile::load(path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if file.dim() != 1 {
        return Err(Error::Checkpoint(format!(
            "parameter records must have width 1, found {}",
            file.dim()
        )));
    }
    let emotions = EmotionSet::new(meta.emotions.iter().cloned());
    let mut model = Model::new(meta.config, meta.vocabulary, emotions, 0)?;
    if model.store.len() != meta.parameters.len() || file.len() != meta.parameters.len() {
        return Err(Error::Checkpoint(format!(
            "configuration defines {} parameters, checkpoint holds {}",
            model.store.len(),
            file.len()
        )));
    }
    for (name, shape) in &meta.parameters {
        let id = model
            .store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        let expected = model.store.value(id).shape().to_vec();
        if &expected != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?} does not match configured {expected:?}"
            )));
        }
        let record = file
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let values: Vec<f64> = record.values.iter().map(|&v| v as f64).collect();
        model
            .store
            .set_values(id, &values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Emotion;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;

    fn model() -> Model {
        let config = ModelConfig {
            encoder: EncoderConfig {
                d_text: 8,
                n_heads: 2,
                n_layers: 1,
                d_speaker: 4,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig { d_g: 4, dropout: 0.1 },
        };
        let emotions = EmotionSet::new(["joy", "neutral"].map(Emotion::new));
        Model::new(config, Vocabulary::from_tokens(["hi", "there"]), emotions, 3).unwrap()
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uft1");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocabulary, m.vocabulary);
        for id in m.store.ids() {
            let a = m.store.value(id).data();
            let b = back.store.value(id).data();
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }

    #[test]
    fn width_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uft1");
        save_checkpoint(&model(), &path).unwrap();
        let side = sidecar_path(&path);
        let mut meta: CheckpointMeta = serde_json::from_slice(&fs::read(&side).unwrap()).unwrap();
        meta.config.decoder.d_g = 6;
        fs::write(&side, serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
