//! Versioned safetensors checkpoints carrying a config echo in the header.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::VarMap;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::{validate_config, RunConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "vqfont-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// Stage-one autoencoder.
    Vqgan,
    /// Stage-two generator, frozen stage-one parts included.
    Vqfont,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Vqgan => "vqgan",
            CheckpointKind::Vqfont => "vqfont",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub iteration: usize,
    pub config: RunConfig,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

pub fn varmap_tensors(vars: &VarMap) -> HashMap<String, Tensor> {
    let data = vars.data().lock().expect("varmap lock");
    data.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect()
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableSource {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a half-written checkpoint.
pub fn save_checkpoint(path: &Path, tensors: &HashMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    let header = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("kind".to_string(), meta.kind.as_str().to_string()),
        ("iteration".to_string(), meta.iteration.to_string()),
        ("config".to_string(), meta.config.to_toml()),
    ]);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = temp_path(path);
    let mut sorted: Vec<(&String, &Tensor)> = tensors.iter().collect();
    sorted.sort_by_key(|(n, _)| n.as_str());
    safetensors::serialize_to_file(sorted, Some(header), &tmp).map_err(|e| unreadable(&tmp, e))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, checking its format, version and (when given) kind.
pub fn load_checkpoint(path: &Path, expected: Option<CheckpointKind>, device: &Device) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| unreadable(path, e))?;
    let info = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| info.get(k).cloned().ok_or_else(|| unreadable(path, format!("header has no {k}")));
    if field("format")? != FORMAT {
        return Err(unreadable(path, "not a vqfont checkpoint"));
    }
    let version: u32 = field("version")?.parse().map_err(|e| unreadable(path, e))?;
    if version != VERSION {
        return Err(unreadable(path, format!("checkpoint version {version}, expected {VERSION}")));
    }
    let kind = match field("kind")?.as_str() {
        "vqgan" => CheckpointKind::Vqgan,
        "vqfont" => CheckpointKind::Vqfont,
        other => return Err(unreadable(path, format!("unknown checkpoint kind {other}"))),
    };
    if let Some(want) = expected.filter(|&w| w != kind) {
        return Err(Error::MissingCheckpoint(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            kind.as_str(),
            want.as_str()
        )));
    }
    let meta = CheckpointMeta {
        kind,
        iteration: field("iteration")?.parse().map_err(|e| unreadable(path, e))?,
        config: validate_config(&field("config")?)?,
    };
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok(Checkpoint { meta, tensors })
}

/// Writes the `K x d` codebook as a standalone `.npy` array.
pub fn export_codebook(tensors: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    let cb = tensors
        .get("codebook")
        .ok_or_else(|| Error::MissingCheckpoint("checkpoint has no codebook".into()))?;
    cb.write_npy(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use candle_core::DType;

    fn sample() -> HashMap<String, Tensor> {
        let dev = Device::Cpu;
        HashMap::from([
            ("codebook".to_string(), Tensor::arange(0f32, 12.0, &dev).unwrap().reshape((4, 3)).unwrap()),
            ("decoder.layers.0.conv.bias".to_string(), Tensor::ones(5, DType::F32, &dev).unwrap()),
        ])
    }

    #[test]
    fn round_trip_with_config_echo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage1.safetensors");
        let meta = CheckpointMeta {
            kind: CheckpointKind::Vqgan,
            iteration: 42,
            config: RunConfig::preset(Preset::Tiny),
        };
        save_checkpoint(&path, &sample(), &meta).unwrap();
        assert!(!temp_path(&path).exists());
        let ck = load_checkpoint(&path, Some(CheckpointKind::Vqgan), &Device::Cpu).unwrap();
        assert_eq!(ck.meta, meta);
        let cb: Vec<Vec<f32>> = ck.tensors["codebook"].to_vec2().unwrap();
        assert_eq!(cb[3], vec![9.0, 10.0, 11.0]);
        assert!(matches!(
            load_checkpoint(&path, Some(CheckpointKind::Vqfont), &Device::Cpu),
            Err(Error::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn missing_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope"), None, &Device::Cpu),
            Err(Error::MissingCheckpoint(_))
        ));
        let plain = dir.path().join("plain.safetensors");
        candle_core::safetensors::save(&sample(), &plain).unwrap();
        assert!(matches!(load_checkpoint(&plain, None, &Device::Cpu), Err(Error::UnreadableSource { .. })));
    }

    #[test]
    fn codebook_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.npy");
        export_codebook(&sample(), &path).unwrap();
        let back = Tensor::read_npy(&path).unwrap();
        assert_eq!(back.dims(), [4, 3]);
        assert_eq!(back.to_vec2::<f32>().unwrap()[1], vec![3.0, 4.0, 5.0]);
    }
}
