//! Penultimate-layer features of several models on one dataset, for joint
//! 2-D embedding plots made outside this crate.
//!
//! On disk: `<stem>.bin` holds float32 little-endian blocks, one
//! `num_samples x dim` row-major block per model in `models` order;
//! `<stem>.json` is the index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{packed, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::ModelSnapshot;

pub const FORMAT: &str = "penultimate-embeddings";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub models: Vec<String>,
    /// One `num_samples x dim` block per model.
    pub vectors: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    pub forget_class: usize,
    pub forget_mask: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub format: String,
    pub version: u32,
    pub models: Vec<String>,
    pub num_samples: usize,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub forget_class: usize,
    pub forget_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl EmbeddingExport {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.ncols())
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn block(&self, name: &str) -> Option<&Array2<f64>> {
        self.models.iter().position(|m| m == name).map(|i| &self.vectors[i])
    }

    pub fn save(&self, stem: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        let (bin, json) = packed::paths(stem);
        if let Some(parent) = bin.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut bytes = Vec::with_capacity(self.vectors.iter().map(|v| v.len() * 4).sum());
        for block in &self.vectors {
            for &v in block.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let index = EmbeddingIndex {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            models: self.models.clone(),
            num_samples: self.num_samples(),
            dim: self.dim(),
            labels: self.labels.clone(),
            forget_class: self.forget_class,
            forget_mask: self.forget_mask.clone(),
            metadata: metadata.clone(),
        };
        fs::write(&json, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&json, e))
    }

    /// Reads an export back; vectors carry float32 precision.
    pub fn load(stem: &Path) -> Result<(Self, EmbeddingIndex)> {
        let (bin, json) = packed::paths(stem);
        let raw = fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let index: EmbeddingIndex = serde_json::from_slice(&raw).map_err(|e| Error::Corrupt {
            path: json.clone(),
            reason: e.to_string(),
        })?;
        if index.format != FORMAT || index.version != FORMAT_VERSION {
            return Err(Error::Corrupt {
                path: json,
                reason: format!("unsupported format {} v{}", index.format, index.version),
            });
        }
        let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let block = index.num_samples * index.dim;
        if payload.len() != 4 * block * index.models.len() {
            return Err(Error::Corrupt {
                path: bin,
                reason: format!("{} bytes for {} blocks of {block} values", payload.len(), index.models.len()),
            });
        }
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let vectors = values
            .chunks(block.max(1))
            .take(index.models.len())
            .map(|c| Array2::from_shape_vec((index.num_samples, index.dim), c.to_vec()).expect("length checked"))
            .collect();
        Ok((
            Self {
                models: index.models.clone(),
                vectors,
                labels: index.labels.clone(),
                forget_class: index.forget_class,
                forget_mask: index.forget_mask.clone(),
            },
            index,
        ))
    }
}

/// Penultimate features of every model on `dataset`, in dataset order.
/// All models must share one architecture.
pub fn export(
    models: &[(String, &ModelSnapshot)],
    dataset: &LabeledDataset,
    forget_class: usize,
    batch_size: usize,
) -> Result<EmbeddingExport> {
    let (_, first) = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models to export".into()))?;
    if let Some((name, _)) = models.iter().find(|(_, m)| m.architecture() != first.architecture()) {
        return Err(Error::shape(
            "every model with the first model's architecture",
            format!("a different architecture for `{name}`"),
        ));
    }
    if forget_class >= first.num_classes() {
        return Err(Error::Label {
            label: forget_class,
            num_classes: first.num_classes(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("embedding dataset".into()));
    }
    let mut vectors = Vec::with_capacity(models.len());
    for (_, model) in models {
        let mut rows = Vec::new();
        let mut dim = 0;
        for (x, _) in dataset.chunks(batch_size) {
            let f = model.penultimate(x)?;
            dim = f.ncols();
            rows.extend(f.iter().copied());
        }
        vectors.push(Array2::from_shape_vec((dataset.len(), dim), rows).expect("rows of equal width"));
    }
    Ok(EmbeddingExport {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        vectors,
        labels: dataset.labels.clone(),
        forget_class,
        forget_mask: dataset.labels.iter().map(|&y| y == forget_class).collect(),
    })
}
