use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::autodiff::{ParamSet, Tensor};
use crate::data::GenePanel;
use crate::error::{Error, Result};
use crate::fusion::Network;
use crate::pathway::ClinicalPathwayMask;

pub const PARAMS_JSON: &str = "params.json";
pub const PARAMS_BIN: &str = "params.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    class_names: Vec<String>,
    genes: Vec<String>,
    config: TrainConfig,
    clinical: Option<ClinicalPathwayMask>,
    best_epoch: usize,
    tensors: Vec<TensorEntry>,
}

/// Writes `params.json` (tensor names and shapes in order, config echo) and
/// `params.bin` (little-endian f64 values in the same order).
pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        class_names: model.class_names.clone(),
        genes: model.panel.names().to_vec(),
        config: model.config.clone(),
        clinical: model.net.clinical.clone(),
        best_epoch: model.best_epoch,
        tensors: model
            .params
            .iter()
            .map(|n| TensorEntry {
                name: n.name.clone(),
                shape: n.value.shape().to_vec(),
            })
            .collect(),
    };
    let json_path = dir.join(PARAMS_JSON);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;

    let mut bytes = Vec::with_capacity(model.params.numel() * 8);
    for n in model.params.iter() {
        for v in n.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = dir.join(PARAMS_BIN);
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let json_path = dir.join(PARAMS_JSON);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    let panel = GenePanel::new(manifest.genes)?;
    let mut params = ParamSet::new();
    // values are overwritten below; the generator only fixes shapes
    let mut rng = crate::seed::substream(0, "init");
    let net = Network::new(
        manifest.config.model_config(manifest.class_names.len(), panel.d()),
        manifest.clinical,
        &mut params,
        &mut rng,
    )?;
    let expected: Vec<(&str, &[usize])> = params.iter().map(|n| (n.name.as_str(), n.value.shape())).collect();
    let stored: Vec<(&str, &[usize])> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    if expected != stored {
        return Err(Error::Data(format!(
            "{}: tensor list does not match the configured network",
            json_path.display()
        )));
    }

    let bin_path = dir.join(PARAMS_BIN);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != params.numel() * 8 {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {}",
            bin_path.display(),
            bytes.len(),
            params.numel() * 8
        )));
    }
    let mut floats = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let values = params
        .iter()
        .map(|n| Tensor::new(n.value.shape().to_vec(), floats.by_ref().take(n.value.len()).collect()))
        .collect::<Result<Vec<_>>>()?;
    params.load_values(&values)?;
    Ok(Model {
        net,
        params,
        panel,
        class_names: manifest.class_names,
        config: manifest.config,
        best_epoch: manifest.best_epoch,
    })
}
