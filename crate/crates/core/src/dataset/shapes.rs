//! Procedural 10-class RGB shape images.
//!
//! Every class is a geometric pattern (disk, square, stripes, ...) drawn
//! with random foreground/background colors, position, scale and additive
//! noise, so that color carries no label information. Generation is fully
//! determined by the seed.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledDataset, Partition};
use crate::error::Result;

pub const NUM_CLASSES: usize = 10;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "disk", "square", "triangle", "ring", "plus", "hbars", "vbars", "diagonal", "checker", "dots",
];

#[derive(Debug, Clone, Copy)]
pub struct ShapesSpec {
    pub image_size: usize,
    pub noise_std: f64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            noise_std: 0.08,
        }
    }
}

/// Balanced train and test sets drawn from independent streams of `seed`.
pub fn train_test(
    spec: ShapesSpec,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = generate(spec, train_per_class, seed.wrapping_mul(2), Partition::Train)?;
    let test = generate(spec, test_per_class, seed.wrapping_mul(2).wrapping_add(1), Partition::Test)?;
    Ok((train, test))
}

pub fn generate(
    spec: ShapesSpec,
    per_class: usize,
    seed: u64,
    partition: Partition,
) -> Result<LabeledDataset> {
    let size = spec.image_size;
    let n = per_class * NUM_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A4E_u64);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let mut images = Array4::zeros((n, 3, size, size));
    // Interleave classes so any prefix stays roughly balanced.
    let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    for (i, &label) in labels.iter().enumerate() {
        let (bg, fg) = colors(&mut rng);
        let mask = draw(label, size, &mut rng);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let base = if mask[y * size + x] { fg[c] } else { bg[c] };
                    let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    images[[i, c, y, x]] = 2.0 * v - 1.0;
                }
            }
        }
    }
    Ok(LabeledDataset::new(partition, images, labels, NUM_CLASSES)?
        .with_class_names(CLASS_NAMES.iter().map(|s| s.to_string()).collect()))
}

fn colors(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let fg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let contrast: f64 = bg.iter().zip(&fg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if contrast >= 0.35 {
            return (bg, fg);
        }
    }
}

fn draw(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as f64;
    let jitter = s * 0.12;
    let cx = (s - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let cy = (s - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let r = s * rng.random_range(0.26..0.40);
    let period = rng.random_range(3..=4usize);
    let phase = rng.random_range(0..period);
    let phase2 = rng.random_range(0..4usize);
    let cell = rng.random_range(2..=3usize);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (da, db) = (angle.cos() * r * 0.55, angle.sin() * r * 0.55);

    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            mask[y * size + x] = match label {
                0 => dist <= r,
                1 => dx.abs().max(dy.abs()) <= r * 0.8,
                2 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                3 => dist <= r && dist >= r * 0.55,
                4 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
                5 => (y + phase) % period < (period + 1) / 2,
                6 => (x + phase) % period < (period + 1) / 2,
                7 => (x + y + phase) % period < (period + 1) / 2,
                8 => ((x + phase) / cell + (y + phase2) / cell) % 2 == 0,
                _ => {
                    let d1 = ((dx - da).powi(2) + (dy - db).powi(2)).sqrt();
                    let d2 = ((dx + da).powi(2) + (dy + db).powi(2)).sqrt();
                    d1.min(d2) <= r * 0.38
                }
            };
        }
    }
    mask
}
