//! Optional initialization from a pretrained single-class-head detector
//! checkpoint (safetensors, PyTorch parameter names).
//!
//! Name map, applied in order:
//!
//! | source                              | target                                   |
//! |-------------------------------------|------------------------------------------|
//! | `backbone.0.body.*`                 | same name (ResNet-50 backbone only)      |
//! | `input_proj.*`                      | same name                                |
//! | `transformer.encoder.layers.*`      | same name                                |
//! | `transformer.decoder.layers.*`      | same name                                |
//! | `transformer.decoder.norm.*`        | same name                                |
//! | `query_embed.weight`                | same name (only if N and d agree)        |
//! | `bbox_embed.layers.{k}.*`           | `h1_bbox_embed.layers.{k}.*` and `h2_bbox_embed.layers.{k}.*` |
//! | `class_embed.*`                     | skipped (different vocabulary)           |
//!
//! Anything else, and any tensor whose shape differs from the target, is
//! reported as skipped.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::Serialize;

use super::Mgtr;
use crate::error::Result;

#[derive(Debug, Clone, Default, Serialize)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

/// Target parameter names for a source name.
pub fn map_name(source: &str) -> Vec<String> {
    const SAME: [&str; 6] = [
        "backbone.0.body.",
        "input_proj.",
        "transformer.encoder.layers.",
        "transformer.decoder.layers.",
        "transformer.decoder.norm.",
        "query_embed.",
    ];
    if SAME.iter().any(|p| source.starts_with(p)) {
        return vec![source.to_string()];
    }
    if let Some(rest) = source.strip_prefix("bbox_embed.") {
        return vec![format!("h1_bbox_embed.{rest}"), format!("h2_bbox_embed.{rest}")];
    }
    Vec::new()
}

pub fn import_tensors(model: &Mgtr, tensors: &BTreeMap<String, Tensor>) -> Result<ImportReport> {
    let mut report = ImportReport::default();
    for (name, value) in tensors {
        let targets = map_name(name);
        if targets.is_empty() {
            report.skipped.push((name.clone(), "no mapping".into()));
            continue;
        }
        for target in targets {
            match model.params().get(&target) {
                None => report.skipped.push((name.clone(), format!("{target} not in model"))),
                Some(p) if p.var.dims() != value.dims() => report.skipped.push((
                    name.clone(),
                    format!("shape {:?} != {:?}", value.dims(), p.var.dims()),
                )),
                Some(_) => {
                    model.params().set(&target, value)?;
                    report.loaded.push(target);
                }
            }
        }
    }
    Ok(report)
}

pub fn import_safetensors(model: &Mgtr, path: &Path) -> Result<ImportReport> {
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?
        .into_iter()
        .collect();
    import_tensors(model, &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_table() {
        assert_eq!(map_name("input_proj.weight"), vec!["input_proj.weight"]);
        assert_eq!(
            map_name("bbox_embed.layers.2.bias"),
            vec!["h1_bbox_embed.layers.2.bias", "h2_bbox_embed.layers.2.bias"]
        );
        assert!(map_name("class_embed.weight").is_empty());
        assert_eq!(
            map_name("transformer.decoder.layers.3.multihead_attn.in_proj_weight"),
            vec!["transformer.decoder.layers.3.multihead_attn.in_proj_weight"]
        );
    }
}
