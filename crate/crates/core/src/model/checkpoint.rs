//! Versioned model container: safetensors payload with a JSON header entry
//! echoing the model configuration and the AU names it was trained on.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, TasModel};
use crate::error::{IoContext, Result, TasError};

pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_KEY: &str = "tas";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub au_names: Vec<String>,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    model: &TasModel,
    au_names: &[String],
    run: serde_json::Value,
) -> Result<()> {
    if au_names.len() != model.config().au_count {
        return Err(TasError::Checkpoint(format!(
            "{} AU names for a model with {} classes",
            au_names.len(),
            model.config().au_count
        )));
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        au_names: au_names.to_vec(),
        run,
    };
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
    let tensors: Vec<(String, Tensor)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(DType::F32)?.contiguous()?)))
        .collect::<Result<_>>()?;
    let views: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let bytes = safetensors::serialize(views, Some(meta))
        .map_err(|e| TasError::Checkpoint(format!("serialize: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).io_context(|| format!("writing {}", path.display()))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
    parse_header(&bytes, path)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<CheckpointHeader> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| TasError::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| TasError::Checkpoint(format!("{}: missing header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_str(raw)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(TasError::Checkpoint(format!(
            "{}: unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            header.version
        )));
    }
    Ok(header)
}

/// Loads a model and its header. When `expected_aus` is given, the
/// checkpoint must have been trained on exactly those AU columns.
pub fn load_checkpoint(path: &Path, expected_aus: Option<&[String]>) -> Result<(TasModel, CheckpointHeader)> {
    let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
    let header = parse_header(&bytes, path)?;
    if let Some(aus) = expected_aus {
        if aus != header.au_names.as_slice() {
            return Err(crate::error::validation(format!(
                "checkpoint was trained on {} AUs {:?}, data has {} AUs {:?}",
                header.au_names.len(),
                header.au_names,
                aus.len(),
                aus
            )));
        }
    }
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let model = TasModel::from_tensors(header.model.clone(), &tensors)?;
    Ok((model, header))
}
