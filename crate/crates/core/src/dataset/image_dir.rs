//! Datasets laid out as `root/<class_name>/<image files>`.
//!
//! Classes are ordered by directory name. All images must share one size;
//! pixels are converted to RGB and mapped from `[0, 255]` to `[-1, 1]`.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::{LabeledDataset, Partition};
use crate::error::{Error, Result};

pub fn load(root: &Path, partition: Partition) -> Result<LabeledDataset> {
    let mut classes: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} has {} class directories, need at least 2",
            root.display(),
            classes.len()
        )));
    }

    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)?.to_rgb8();
            let dims = img.dimensions();
            match size {
                None => size = Some(dims),
                Some(s) if s != dims => {
                    return Err(Error::shape(format!("{s:?}"), format!("{dims:?} in {}", file.display())))
                }
                _ => {}
            }
            let (w, h) = dims;
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        pixels.push(img.get_pixel(x, y)[c] as f64 / 127.5 - 1.0);
                    }
                }
            }
            labels.push(label);
        }
    }
    let (w, h) = size.ok_or_else(|| Error::EmptyDataset(format!("no images under {}", root.display())))?;
    let images = Array4::from_shape_vec((labels.len(), 3, h as usize, w as usize), pixels)
        .expect("pixel count matches");
    Ok(LabeledDataset::new(partition, images, labels, classes.len())?.with_class_names(classes))
}
