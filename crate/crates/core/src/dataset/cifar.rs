//! CIFAR-10 binary batches (`data_batch_{1..5}.bin`, `test_batch.bin`).
//!
//! Each record is one label byte followed by 3072 bytes of CHW pixels.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::{LabeledDataset, Partition};
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;
pub const CLASS_NAMES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

/// Loads train and test sets, keeping at most `per_class` samples of each
/// class per split (first come, file order).
pub fn load(
    root: &Path,
    train_per_class: Option<usize>,
    test_per_class: Option<usize>,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let train_files: Vec<_> = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_files(&train_files, train_per_class, Partition::Train)?;
    let test = load_files(&[root.join("test_batch.bin")], test_per_class, Partition::Test)?;
    Ok((train, test))
}

fn load_files(
    files: &[std::path::PathBuf],
    per_class: Option<usize>,
    partition: Partition,
) -> Result<LabeledDataset> {
    let mut counts = [0usize; 10];
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let raw = fs::read(file).map_err(|e| Error::io(file, e))?;
        if raw.len() % RECORD != 0 {
            return Err(Error::Corrupt {
                path: file.clone(),
                reason: format!("{} bytes is not a multiple of {RECORD}", raw.len()),
            });
        }
        for rec in raw.chunks_exact(RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Corrupt {
                    path: file.clone(),
                    reason: format!("label byte {label}"),
                });
            }
            if per_class.is_some_and(|cap| counts[label] >= cap) {
                continue;
            }
            counts[label] += 1;
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 127.5 - 1.0));
        }
    }
    let images = Array4::from_shape_vec((labels.len(), 3, 32, 32), pixels).expect("record size");
    Ok(LabeledDataset::new(partition, images, labels, 10)?
        .with_class_names(CLASS_NAMES.iter().map(|s| s.to_string()).collect()))
}
