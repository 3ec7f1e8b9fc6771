//! Model parameters in the array container, with the config in metadata.

use std::path::Path;

use serde_json::json;

use super::{MCEGNNConfig, MCEGNNModel};
use crate::data::container::{load_container, save_container, Container};
use crate::error::{Error, Result};
use crate::nn::Module;

const KIND: &str = "mcegnn_checkpoint";

pub fn model_to_container(model: &MCEGNNModel) -> Result<Container> {
    let mut c = Container::new();
    for (name, p) in model.named_params() {
        c.push(name, p.value.clone())?;
    }
    c.metadata = json!({ "kind": KIND, "config": model.config });
    Ok(c)
}

/// Rebuilds the model from the stored config, then overwrites every
/// parameter. Missing, extra or reshaped arrays are layout errors.
pub fn model_from_container(c: &Container) -> Result<MCEGNNModel> {
    if c.metadata.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
        return Err(Error::Layout("container is not a model checkpoint".into()));
    }
    let config: MCEGNNConfig = serde_json::from_value(c.metadata["config"].clone())?;
    let mut model = MCEGNNModel::new(config)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != c.arrays.len() {
        return Err(Error::Layout(format!(
            "checkpoint has {} arrays, model has {} parameters",
            c.arrays.len(),
            names.len()
        )));
    }
    for (name, p) in names.iter().zip(model.params_mut()) {
        let t = c.get(name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Layout(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &MCEGNNModel) -> Result<()> {
    save_container(path, &model_to_container(model)?)
}

pub fn load_model(path: &Path) -> Result<MCEGNNModel> {
    model_from_container(&load_container(path)?)
}
