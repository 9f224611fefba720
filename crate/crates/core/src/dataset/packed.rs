//! Packed dataset format: `<stem>.bin` holds the raw little-endian image
//! array in `(N, C, H, W)` order, `<stem>.json` is the index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Partition};
use crate::error::{Error, Result};

pub const FORMAT: &str = "packed-images";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedIndex {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub shape: [usize; 4],
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub partition: Partition,
    pub synthetic: bool,
    pub labels: Vec<usize>,
    /// True labels when `labels` holds replacement labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// Optional fields of a packed index beyond the dataset itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct Extras<'a> {
    pub original_labels: Option<&'a [usize]>,
    pub strategy: Option<&'a str>,
    pub metadata: Option<&'a BTreeMap<String, String>>,
}

/// Paths of the `.bin` payload and `.json` index for `stem`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn write(dataset: &LabeledDataset, stem: &Path, dtype: DType) -> Result<()> {
    write_with(dataset, stem, dtype, Extras::default())
}

pub fn write_with(
    dataset: &LabeledDataset,
    stem: &Path,
    dtype: DType,
    extras: Extras<'_>,
) -> Result<()> {
    let (bin, json) = paths(stem);
    if let Some(parent) = bin.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(dataset.images.len() * dtype.width());
    for &v in dataset.images.iter() {
        match dtype {
            DType::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let (n, c, h, w) = dataset.images.dim();
    let index = PackedIndex {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        dtype,
        shape: [n, c, h, w],
        num_classes: dataset.num_classes,
        class_names: dataset.class_names.clone(),
        partition: dataset.partition,
        synthetic: dataset.synthetic,
        labels: dataset.labels.clone(),
        original_labels: extras.original_labels.map(<[usize]>::to_vec),
        strategy: extras.strategy.map(str::to_owned),
        fingerprint: dataset.fingerprint(),
        metadata: extras.metadata.cloned().unwrap_or_default(),
    };
    fs::write(&json, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_index(stem: &Path) -> Result<PackedIndex> {
    let (_, json) = paths(stem);
    let raw = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let index: PackedIndex = serde_json::from_slice(&raw).map_err(|e| Error::Corrupt {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    if index.format != FORMAT || index.version != FORMAT_VERSION {
        return Err(Error::Corrupt {
            path: json,
            reason: format!("unsupported format {} v{}", index.format, index.version),
        });
    }
    Ok(index)
}

pub fn read(stem: &Path) -> Result<(LabeledDataset, PackedIndex)> {
    let index = read_index(stem)?;
    let (bin, _) = paths(stem);
    let raw = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let count: usize = index.shape.iter().product();
    if raw.len() != count * index.dtype.width() || index.labels.len() != index.shape[0] {
        return Err(Error::Corrupt {
            path: bin,
            reason: format!(
                "payload has {} bytes and {} labels for shape {:?}",
                raw.len(),
                index.labels.len(),
                index.shape
            ),
        });
    }
    let values: Vec<f64> = match index.dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    let [n, c, h, w] = index.shape;
    let images = Array4::from_shape_vec((n, c, h, w), values).expect("length checked");
    let mut dataset =
        LabeledDataset::new(index.partition, images, index.labels.clone(), index.num_classes)?
            .with_class_names(index.class_names.clone());
    dataset.synthetic = index.synthetic;
    Ok((dataset, index))
}
