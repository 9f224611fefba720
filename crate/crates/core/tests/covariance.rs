use ndarray::{arr2, concatenate, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use unlearn_core::dataset::{LabeledDataset, Partition};
use unlearn_core::nn::{Architecture, LayerSpec, ModelSnapshot};
use unlearn_core::projection::*;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

fn diag(values: &[f64]) -> Array2<f64> {
    Array2::from_diag(&ndarray::arr1(values))
}

#[test]
fn identity_and_single_column() {
    assert_eq!(uncentered_covariance(Array2::<f64>::eye(4).view()), Array2::<f64>::eye(4));
    let v = arr2(&[[1.0], [2.0], [-3.0]]);
    let s = uncentered_covariance(v.view());
    assert_eq!(s, v.dot(&v.t()));
    let b = approximate_null_basis(0, s.view(), 1.0, DEFAULT_RANK_TOL).unwrap();
    assert_eq!((b.k, b.null_dim()), (1, 2));
}

#[test]
fn covariance_matches_naive_accumulation_and_is_bilinear() {
    let x = gaussian(6, 20, 1);
    let s = uncentered_covariance(x.view());
    for i in 0..6 {
        for j in 0..6 {
            let mut acc = 0.0;
            for m in 0..20 {
                acc += x[[i, m]] * x[[j, m]];
            }
            assert!((s[[i, j]] - acc).abs() < 1e-8);
            assert_eq!(s[[i, j]], s[[j, i]]);
        }
    }
    let doubled = concatenate(Axis(1), &[x.view(), x.view()]).unwrap();
    let twice = uncentered_covariance(doubled.view());
    assert!((&twice - &s.mapv(|v| 2.0 * v)).iter().all(|v| v.abs() < 1e-10));
    let (values, _) = sorted_eigen(s.view()).unwrap();
    let trace: f64 = (0..6).map(|i| s[[i, i]]).sum();
    assert!((values.iter().sum::<f64>() - trace).abs() < 1e-6 * trace);
    assert!(values.iter().all(|&l| l >= -1e-8 * values[0]));
}

#[test]
fn rank_rule_on_hand_spectra() {
    let b = approximate_null_basis(0, diag(&[3.0, 1.0, 0.0, 0.0]).view(), 1.0, DEFAULT_RANK_TOL).unwrap();
    assert_eq!((b.k, b.null_dim()), (2, 2));
    let b = approximate_null_basis(0, diag(&[8.0, 1.0, 1.0]).view(), 0.8, DEFAULT_RANK_TOL).unwrap();
    assert_eq!((b.k, b.null_dim()), (1, 2));
    assert!((b.energy - 0.8).abs() < 1e-12);
    let zero = approximate_null_basis(0, Array2::zeros((3, 3)).view(), 1.0, DEFAULT_RANK_TOL).unwrap();
    assert_eq!((zero.k, zero.null_dim()), (0, 3));
}

#[test]
fn rank_two_activations_in_five_dimensions() {
    let acts = gaussian(5, 2, 2);
    let s = uncentered_covariance(acts.view());
    let basis = approximate_null_basis(0, s.view(), 1.0, DEFAULT_RANK_TOL).unwrap();
    assert_eq!(basis.null_dim(), 3);
    let update = gaussian(4, 5, 3);
    let once = project_update(update.view(), &basis).unwrap();
    for col in acts.columns() {
        assert!(once.dot(&col).iter().all(|v| v.abs() <= 1e-8));
    }
    let twice = project_update(once.view(), &basis).unwrap();
    assert!((&twice - &once).iter().all(|v| v.abs() <= 1e-10));
    assert!(project_update(gaussian(4, 6, 4).view(), &basis).is_err());
}

#[test]
fn layer_input_matrix_shapes() {
    let arch = Architecture {
        input_shape: [2, 4, 4],
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 0,
                bias: false,
            },
            LayerSpec::BatchNorm { channels: 8, eps: 1e-5, momentum: 0.1 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_features: 8, out_features: 3, bias: true },
        ],
    };
    let m = ModelSnapshot::init(arch, 0).unwrap();
    let one = Array4::from_elem((1, 2, 4, 4), 0.5);
    assert_eq!(layer_input_matrix(&m, one.view(), 0).unwrap().dim(), (18, 4));
    let five = Array4::from_elem((5, 2, 4, 4), 0.5);
    assert_eq!(layer_input_matrix(&m, five.view(), 4).unwrap().dim(), (8, 5));
}

#[test]
fn building_twice_gives_identical_bases() {
    let m = ModelSnapshot::init(Architecture::desk_cnn([1, 5, 5], &[3, 4], 3).unwrap(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = Array4::from_shape_simple_fn((7, 1, 5, 5), || StandardNormal.sample(&mut rng));
    let proxy = LabeledDataset::new(Partition::Proxy, images, vec![1; 7], 3).unwrap();
    let cfg = ProjectionConfig { batch_size: 3, ..Default::default() };
    let a = build_projection_set(&m, &proxy, &cfg).unwrap();
    let b = build_projection_set(&m, &proxy, &cfg).unwrap();
    assert_eq!(a.null_dims(), b.null_dims());
    for layer in a.layers() {
        assert_eq!(a.get(layer).unwrap().basis, b.get(layer).unwrap().basis);
    }
}
