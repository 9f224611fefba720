//! Per-layer input covariances, their approximate null spaces and the
//! projector applied to weight updates.
//!
//! For a projectable layer with input matrix `X` (`d x M`, one column per
//! sample or per convolution patch) the uncentered covariance is
//! `S = X X^T`. With eigenvalues `l_1 >= ... >= l_d` and
//! `rho_k = (l_1 + ... + l_k) / (l_1 + ... + l_d)`, the rank `k` is the
//! smallest one with `rho_k >= p` and the null-space basis `U` holds the
//! trailing `d - k` eigenvectors. An update `dW` (`C_out x d`) is replaced
//! by `dW U U^T`, so that `dW_proj X` stays near zero for the inputs
//! summarized by `S`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{hex_prefix, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::ModelSnapshot;

/// Eigenvalues at or below `rank_tol * l_max` are treated as exact zeros.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Retained-energy threshold in `[0, 1]`.
    pub p: f64,
    pub rank_tol: f64,
    /// Layers to project; `None` selects every projectable layer.
    pub layers: Option<Vec<usize>>,
    /// Batch size used while streaming activations.
    pub batch_size: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            rank_tol: DEFAULT_RANK_TOL,
            layers: None,
            batch_size: 128,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidArgument(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if !(self.rank_tol >= 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidArgument(format!("rank_tol must lie in [0, 1), got {}", self.rank_tol)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Selected layers, checked against the model's projectable layers.
    pub fn selected_layers(&self, model: &ModelSnapshot) -> Result<Vec<usize>> {
        let projectable = model.architecture().projectable_layers();
        match &self.layers {
            None => Ok(projectable),
            Some(chosen) => {
                let mut out = chosen.clone();
                out.sort_unstable();
                out.dedup();
                if let Some(bad) = out.iter().find(|l| !projectable.contains(l)) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {bad} is not projectable (projectable: {projectable:?})"
                    )));
                }
                Ok(out)
            }
        }
    }
}

/// `X X^T` for a `d x M` input matrix.
pub fn uncentered_covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let d = x.nrows();
    let mut s = Array2::zeros((d, d));
    general_mat_mul(1.0, &x, &x.t(), 0.0, &mut s);
    s
}

/// Input matrix of `layer` for a batch: `(C_in k k) x (N OH OW)` for a
/// convolution, `d x N` for a linear layer.
pub fn layer_input_matrix(model: &ModelSnapshot, x: ArrayView4<f64>, layer: usize) -> Result<Array2<f64>> {
    let (_, records) = model.forward_with_activations(x)?;
    records
        .into_iter()
        .find(|r| r.layer == layer)
        .map(|r| r.columns)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} is not projectable")))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order; column `i` of the returned matrix pairs with value `i`.
pub fn sorted_eigen(s: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let d = s.nrows();
    if s.ncols() != d {
        return Err(Error::shape("square matrix", format!("{:?}", s.dim())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("covariance has non-finite entries".into()));
    }
    let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (s[[i, j]] + s[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Array2::from_shape_fn((d, d), |(r, c)| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Eigenvalues with the numerically-zero tail (and any negative round-off)
/// set to exactly zero.
pub fn clean_spectrum(values: &[f64], rank_tol: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    values
        .iter()
        .map(|&v| if v <= rank_tol * max { 0.0 } else { v })
        .collect()
}

/// Smallest `k` with `rho_k >= p` for a cleaned, descending spectrum.
/// A zero spectrum gives `k = 0`.
pub fn select_rank(spectrum: &[f64], p: f64) -> usize {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 || p <= 0.0 {
        return 0;
    }
    let rank = spectrum.iter().take_while(|&&v| v > 0.0).count();
    let mut acc = 0.0;
    for (i, v) in spectrum.iter().enumerate().take(rank) {
        acc += v;
        // rho reaches exactly 1 at the numerical rank, rounding aside.
        let rho = if i + 1 == rank { 1.0 } else { acc / total };
        if rho >= p {
            return i + 1;
        }
    }
    rank
}

/// Cumulative energy `rho_k` for `k = 0..=d`.
pub fn energy_curve(spectrum: &[f64]) -> Vec<f64> {
    let total: f64 = spectrum.iter().sum();
    let rank = spectrum.iter().take_while(|&&v| v > 0.0).count();
    let mut out = Vec::with_capacity(spectrum.len() + 1);
    out.push(if total > 0.0 { 0.0 } else { 1.0 });
    let mut acc = 0.0;
    for (i, v) in spectrum.iter().enumerate() {
        acc += v;
        out.push(if total <= 0.0 || i + 1 >= rank { 1.0 } else { acc / total });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSpaceBasis {
    pub layer: usize,
    pub dim: usize,
    /// Number of leading eigen-directions excluded from the basis.
    pub k: usize,
    pub numerical_rank: usize,
    /// Retained energy `rho_k`.
    pub energy: f64,
    /// Eigenvalues, descending, before cleaning.
    pub eigenvalues: Vec<f64>,
    /// `dim x (dim - k)` with orthonormal columns.
    #[serde(skip)]
    pub basis: Array2<f64>,
}

impl NullSpaceBasis {
    pub fn null_dim(&self) -> usize {
        self.dim - self.k
    }

    pub fn is_identity(&self) -> bool {
        self.k == 0
    }

    pub fn is_empty(&self) -> bool {
        self.k == self.dim
    }

    /// Projector `U U^T`.
    pub fn projector(&self) -> Array2<f64> {
        self.basis.dot(&self.basis.t())
    }
}

/// Null-space basis of a covariance matrix for threshold `p`.
pub fn approximate_null_basis(layer: usize, s: ArrayView2<f64>, p: f64, rank_tol: f64) -> Result<NullSpaceBasis> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p must lie in [0, 1], got {p}")));
    }
    let (values, vectors) = sorted_eigen(s)?;
    let spectrum = clean_spectrum(&values, rank_tol);
    let k = select_rank(&spectrum, p);
    let energy = energy_curve(&spectrum)[k];
    let dim = values.len();
    Ok(NullSpaceBasis {
        layer,
        dim,
        k,
        numerical_rank: spectrum.iter().filter(|&&v| v > 0.0).count(),
        energy,
        eigenvalues: values,
        basis: vectors.slice(ndarray::s![.., k..]).to_owned(),
    })
}

/// `update U U^T`; identity for `k = 0`, zeros for an empty null space.
pub fn project_update(update: ArrayView2<f64>, basis: &NullSpaceBasis) -> Result<Array2<f64>> {
    if update.ncols() != basis.dim {
        return Err(Error::shape(
            format!("update with {} columns for layer {}", basis.dim, basis.layer),
            format!("{:?}", update.dim()),
        ));
    }
    if basis.is_identity() {
        return Ok(update.to_owned());
    }
    if basis.is_empty() {
        return Ok(Array2::zeros(update.raw_dim()));
    }
    Ok(update.dot(&basis.basis).dot(&basis.basis.t()))
}

/// Streaming sum of `X X^T` over batches, one matrix per selected layer.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    layers: BTreeMap<usize, Array2<f64>>,
    samples: usize,
    columns: BTreeMap<usize, usize>,
}

impl CovarianceAccumulator {
    pub fn new(model: &ModelSnapshot, layers: &[usize]) -> Result<Self> {
        let arch = model.architecture();
        let mut map = BTreeMap::new();
        for &l in layers {
            let d = arch
                .layer_input_dim(l)
                .ok_or_else(|| Error::InvalidArgument(format!("layer {l} is not projectable")))?;
            map.insert(l, Array2::zeros((d, d)));
        }
        Ok(Self {
            columns: layers.iter().map(|&l| (l, 0)).collect(),
            layers: map,
            samples: 0,
        })
    }

    pub fn add_batch(&mut self, model: &ModelSnapshot, x: ArrayView4<f64>) -> Result<()> {
        let (_, records) = model.forward_with_activations(x)?;
        for r in records {
            if let Some(s) = self.layers.get_mut(&r.layer) {
                general_mat_mul(1.0, &r.columns, &r.columns.t(), 1.0, s);
                *self.columns.get_mut(&r.layer).expect("same keys") += r.columns.ncols();
            }
        }
        self.samples += x.len_of(Axis(0));
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn covariance(&self, layer: usize) -> Option<&Array2<f64>> {
        self.layers.get(&layer)
    }

    pub fn finish(&self, p: f64, rank_tol: f64) -> Result<ProjectionSet> {
        if self.samples == 0 {
            return Err(Error::EmptyDataset("covariance proxy".into()));
        }
        let bases = self
            .layers
            .iter()
            .map(|(&l, s)| approximate_null_basis(l, s.view(), p, rank_tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProjectionSet {
            p,
            rank_tol,
            samples: self.samples,
            bases,
        })
    }
}

/// Null-space bases for every selected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub p: f64,
    pub rank_tol: f64,
    /// Number of proxy samples the covariances were built from.
    pub samples: usize,
    pub bases: Vec<NullSpaceBasis>,
}

impl ProjectionSet {
    pub fn get(&self, layer: usize) -> Option<&NullSpaceBasis> {
        self.bases.iter().find(|b| b.layer == layer)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.bases.iter().map(|b| b.layer).collect()
    }

    /// True when no selected layer leaves any room to move.
    pub fn all_empty(&self) -> bool {
        self.bases.iter().all(NullSpaceBasis::is_empty)
    }

    pub fn null_dims(&self) -> BTreeMap<usize, usize> {
        self.bases.iter().map(|b| (b.layer, b.null_dim())).collect()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, json) = projection_paths(stem);
        let mut payload = Vec::new();
        for b in &self.bases {
            for v in b.basis.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = ProjectionFile {
            format: PROJECTION_FORMAT.into(),
            sha256: hex_prefix(&Sha256::digest(&payload), 64),
            set: self.clone(),
        };
        if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, json) = projection_paths(stem);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: ProjectionFile = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: json.clone(),
            reason: e.to_string(),
        })?;
        if meta.format != PROJECTION_FORMAT {
            return Err(Error::Corrupt {
                path: json,
                reason: format!("unexpected format {:?}", meta.format),
            });
        }
        let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if hex_prefix(&Sha256::digest(&payload), 64) != meta.sha256 {
            return Err(Error::Integrity {
                path: bin,
                reason: "payload checksum mismatch".into(),
            });
        }
        let mut set = meta.set;
        let expected: usize = set.bases.iter().map(|b| b.dim * (b.dim - b.k)).sum();
        if payload.len() != expected * 8 {
            return Err(Error::Corrupt {
                path: bin,
                reason: format!("expected {} bytes, found {}", expected * 8, payload.len()),
            });
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for b in &mut set.bases {
            let n = b.dim * (b.dim - b.k);
            let data: Vec<f64> = values.by_ref().take(n).collect();
            b.basis = Array2::from_shape_vec((b.dim, b.dim - b.k), data).expect("length checked");
        }
        Ok(set)
    }
}

const PROJECTION_FORMAT: &str = "null-space-bases/1";

#[derive(Serialize, Deserialize)]
struct ProjectionFile {
    format: String,
    sha256: String,
    #[serde(flatten)]
    set: ProjectionSet,
}

fn projection_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Streams `proxy` through `model` and builds the projection set.
pub fn build_projection_set(model: &ModelSnapshot, proxy: &LabeledDataset, config: &ProjectionConfig) -> Result<ProjectionSet> {
    config.validate()?;
    if proxy.is_empty() {
        return Err(Error::EmptyDataset("covariance proxy".into()));
    }
    let layers = config.selected_layers(model)?;
    let mut acc = CovarianceAccumulator::new(model, &layers)?;
    for batch in proxy.images.axis_chunks_iter(Axis(0), config.batch_size) {
        acc.add_batch(model, batch)?;
    }
    acc.finish(config.p, config.rank_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    fn basis_from(layer: usize, s: Array2<f64>, p: f64) -> NullSpaceBasis {
        approximate_null_basis(layer, s.view(), p, DEFAULT_RANK_TOL).unwrap()
    }

    #[test]
    fn rank_selection_on_known_spectrum() {
        let s = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(select_rank(&s, 0.0), 0);
        assert_eq!(select_rank(&s, 0.4), 1);
        assert_eq!(select_rank(&s, 0.5), 2);
        assert_eq!(select_rank(&s, 0.9), 3);
        assert_eq!(select_rank(&s, 1.0), 4);
        assert_eq!(select_rank(&[2.0, 1.0, 0.0, 0.0], 1.0), 2);
        assert_eq!(select_rank(&[0.0, 0.0], 1.0), 0);
    }

    #[test]
    fn diagonal_covariance_basis_is_trailing_axes() {
        let s = Array2::from_diag(&ndarray::arr1(&[1.0, 5.0, 0.0, 3.0]));
        let b = basis_from(2, s, 1.0);
        assert_eq!((b.k, b.numerical_rank, b.null_dim()), (3, 3, 1));
        assert!((b.basis[[2, 0]].abs() - 1.0).abs() < 1e-12);
        assert_eq!(b.eigenvalues, vec![5.0, 3.0, 1.0, 0.0]);
    }

    #[test]
    fn p_zero_and_zero_covariance_give_identity() {
        let s = arr2(&[[2.0, 1.0], [1.0, 2.0]]);
        let b = basis_from(0, s, 0.0);
        assert!(b.is_identity());
        let u = arr2(&[[0.3, -1.2]]);
        assert_eq!(project_update(u.view(), &b).unwrap(), u);
        let z = basis_from(0, Array2::zeros((3, 3)), 1.0);
        assert!(z.is_identity());
    }

    #[test]
    fn full_rank_p_one_gives_zero_update() {
        let s = arr2(&[[2.0, 1.0], [1.0, 2.0]]);
        let b = basis_from(0, s, 1.0);
        assert!(b.is_empty());
        let u = arr2(&[[0.3, -1.2], [4.0, 1.0]]);
        assert_eq!(project_update(u.view(), &b).unwrap(), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn projection_rejects_wrong_width_and_bad_p() {
        let b = basis_from(0, Array2::eye(3), 0.5);
        assert!(project_update(Array2::zeros((2, 4)).view(), &b).is_err());
        assert!(approximate_null_basis(0, Array2::eye(2).view(), 1.5, 0.0).is_err());
        assert!(sorted_eigen(Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn energy_curve_ends_at_one() {
        let c = energy_curve(&[3.0, 1.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.75, 1.0, 1.0]);
    }
}
