use std::io::{Read, Write};

use danmaku_tensor::checkpoint::{read_checkpoint, write_checkpoint, DType};
use danmaku_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{build_model, ModelBundle, ModelConfig, ModelError, Result};
use crate::corpus::Vocabulary;

const PARAM_PREFIX: &str = "param/";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Option<Vocabulary>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// A loaded checkpoint: the model, its vocabulary, caller metadata and any
/// tensors that are not model parameters.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub bundle: ModelBundle,
    pub vocab: Option<Vocabulary>,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// Writes the model config, vocabulary and `extra` as the checkpoint header,
/// then every parameter, then `extra_tensors`.
pub fn save_bundle<W: Write>(
    w: W,
    bundle: &ModelBundle,
    vocab: Option<&Vocabulary>,
    extra: &serde_json::Value,
    extra_tensors: &[(String, &Tensor)],
) -> Result<()> {
    let header = serde_json::to_string(&serde_json::json!({
        "model": bundle.config(),
        "vocab": vocab,
        "extra": extra,
    }))?;
    let names: Vec<String> = bundle
        .params()
        .iter()
        .map(|(_, name, _)| format!("{PARAM_PREFIX}{name}"))
        .collect();
    let mut records: Vec<(&str, &Tensor)> = names
        .iter()
        .zip(bundle.params().iter())
        .map(|(n, (_, _, t))| (n.as_str(), t))
        .collect();
    records.extend(extra_tensors.iter().map(|(n, t)| (n.as_str(), *t)));
    write_checkpoint(w, &header, &records, DType::F64)?;
    Ok(())
}

pub fn load_bundle<R: Read>(r: R) -> Result<SavedModel> {
    let ck = read_checkpoint(r)?;
    let header: Header = serde_json::from_str(&ck.config)?;
    let mut bundle = build_model(header.model, 0)?;
    let mut rest = Vec::new();
    let mut loaded = 0;
    for (name, tensor) in ck.tensors {
        match name.strip_prefix(PARAM_PREFIX) {
            Some(p) => {
                let slot = bundle
                    .params_mut()
                    .by_name_mut(p)
                    .map_err(|_| ModelError::Checkpoint(format!("unexpected parameter {p}")))?;
                if slot.shape() != tensor.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter {p}: stored shape {:?}, model expects {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor;
                loaded += 1;
            }
            None => rest.push((name, tensor)),
        }
    }
    if loaded != bundle.params().len() {
        return Err(ModelError::Checkpoint(format!(
            "{} of {} parameters present",
            loaded,
            bundle.params().len()
        )));
    }
    Ok(SavedModel {
        bundle,
        vocab: header.vocab,
        extra: header.extra,
        tensors: rest,
    })
}
