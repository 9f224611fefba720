use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use unlearn_core::dataset::{packed, LabeledDataset, Partition};
use unlearn_core::forgetting::*;
use unlearn_core::nn::{Architecture, LayerParams, LayerSpec, ModelSnapshot, ParamKey, ParamKind};

fn forget_set(n: usize, cf: usize, k: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array4::from_shape_simple_fn((n, 2, 5, 5), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        (0.5 * z).clamp(-1.0, 1.0)
    });
    LabeledDataset::new(Partition::Forget, x, vec![cf; n], k).unwrap()
}

fn cnn(k: usize, seed: u64) -> ModelSnapshot {
    ModelSnapshot::init(Architecture::desk_cnn([2, 5, 5], &[3, 4], k).unwrap(), seed).unwrap()
}

/// `x -> (a x + b)` as a flatten + linear model over a `1 x 1 x 1` input.
fn linear_1d(weights: [f64; 2], biases: [f64; 2]) -> ModelSnapshot {
    let arch = Architecture {
        input_shape: [1, 1, 1],
        num_classes: 2,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 1,
                out_features: 2,
                bias: true,
            },
        ],
    };
    let layers = vec![
        LayerParams::Stateless,
        LayerParams::Linear {
            weight: Array2::from_shape_vec((2, 1), weights.to_vec()).unwrap(),
            bias: Some(ndarray::arr1(&biases)),
        },
    ];
    ModelSnapshot::from_parts(arch, layers).unwrap()
}

#[test]
fn largest_wrong_logit_matches_masking_loop() {
    let model = cnn(4, 3);
    let forget = forget_set(50, 2, 4, 1);
    let set = mislabel_largest_wrong_logit(&model, &forget).unwrap();
    let logits = model.forward(forget.images.view()).unwrap();
    for (row, &y) in logits.outer_iter().zip(&set.labels) {
        let mut best = None;
        for c in 0..4 {
            if c == 2 {
                continue;
            }
            match best {
                Some((_, v)) if row[c] <= v => {}
                _ => best = Some((c, row[c])),
            }
        }
        assert_eq!(y, best.unwrap().0);
    }
    assert_eq!(set.len(), 50);
    assert_eq!(set.source_fingerprint, forget.fingerprint());
}

#[test]
fn largest_wrong_logit_is_invariant_to_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let z = ndarray::Array1::from_shape_simple_fn(6, || StandardNormal.sample(&mut rng));
        let a = 0.1 + 3.0 * rand::Rng::random::<f64>(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        for cf in 0..6 {
            assert_eq!(
                largest_wrong_logit(z.view(), cf),
                largest_wrong_logit(z.mapv(|v: f64| a * v + b).view(), cf)
            );
        }
    }
}

#[test]
fn random_labels_two_classes_and_determinism() {
    let forget = forget_set(20, 1, 2, 0);
    let set = mislabel_random(&forget, 2, 9).unwrap();
    assert!(set.labels.iter().all(|&y| y == 0));
    let forget = forget_set(30, 3, 10, 0);
    assert_eq!(mislabel_random(&forget, 10, 5).unwrap(), mislabel_random(&forget, 10, 5).unwrap());
    let one_class = LabeledDataset::new(Partition::Forget, Array4::zeros((1, 1, 1, 1)), vec![0], 1);
    assert!(one_class.is_err() || mislabel_random(&one_class.unwrap(), 1, 0).is_err());
}

#[test]
fn random_labels_are_uniform_over_retained_classes() {
    let n = 10_000;
    let forget = LabeledDataset::new(Partition::Forget, Array4::zeros((n, 1, 1, 1)), vec![4; n], 10).unwrap();
    let set = mislabel_random(&forget, 10, 123).unwrap();
    let mut counts = [0usize; 10];
    for &y in &set.labels {
        counts[y] += 1;
    }
    assert_eq!(counts[4], 0);
    let q = 1.0 / 9.0;
    let sigma = (n as f64 * q * (1.0 - q)).sqrt();
    for (c, &count) in counts.iter().enumerate().filter(|(c, _)| *c != 4) {
        assert!((count as f64 - n as f64 * q).abs() < 5.0 * sigma, "class {c}: {count}");
    }
}

#[test]
fn boundary_shrink_zero_epsilon_equals_largest_wrong_logit() {
    let model = cnn(3, 5);
    let forget = forget_set(25, 1, 3, 2);
    let bs = mislabel_boundary_shrink(&model, &forget, 0.0).unwrap();
    let lwl = mislabel_largest_wrong_logit(&model, &forget).unwrap();
    let preds = unlearn_core::nn::loss::predictions(model.forward(forget.images.view()).unwrap().view());
    for ((b, l), p) in bs.labels.iter().zip(&lwl.labels).zip(&preds) {
        if *p == 1 {
            assert_eq!(b, l);
        } else {
            assert_eq!(b, p);
        }
        assert_ne!(*b, 1);
    }
    assert!(mislabel_boundary_shrink(&model, &forget, -1.0).is_err());
}

#[test]
fn fgsm_crosses_linear_boundary_beyond_margin() {
    // Logit gap z0 - z1 = 2x - 0.2: class 0 wins for x > 0.1.
    let model = linear_1d([1.0, -1.0], [0.0, 0.2]);
    let x = 0.3;
    let margin = x - 0.1;
    let forget = LabeledDataset::new(Partition::Forget, Array4::from_elem((1, 1, 1, 1), x), vec![0], 2).unwrap();
    let below = mislabel_boundary_shrink(&model, &forget, margin * 0.9).unwrap();
    let moved = fgsm(&model, forget.images.view(), &[0], margin * 0.9).unwrap();
    assert!((moved[[0, 0, 0, 0]] - (x - margin * 0.9)).abs() < 1e-12);
    let above = mislabel_boundary_shrink(&model, &forget, margin * 1.1).unwrap();
    assert_eq!(above.labels, vec![1]);
    // Below the margin the prediction stays 0 and the fallback picks class 1 too.
    assert_eq!(below.labels, vec![1]);
    let p = unlearn_core::nn::loss::predictions(model.forward(moved.view()).unwrap().view());
    assert_eq!(p, vec![0]);
}

#[test]
fn forgetting_loss_known_values_and_naive_oracle() {
    // Zero weights give uniform logits over K = 10.
    let arch = Architecture::desk_cnn([2, 5, 5], &[3], 10).unwrap();
    let mut model = ModelSnapshot::init(arch.clone(), 0).unwrap();
    let head = arch.head_layer().unwrap();
    let layers: Vec<LayerParams> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            LayerParams::Linear { weight, bias } if i == head => LayerParams::Linear {
                weight: weight.mapv(|_| 0.0),
                bias: bias.as_ref().map(|b| b.mapv(|_| 0.0)),
            },
            other => other.clone(),
        })
        .collect();
    model = ModelSnapshot::from_parts(arch, layers).unwrap();
    let forget = forget_set(8, 0, 10, 7);
    let set = mislabel_largest_wrong_logit(&model, &forget).unwrap();
    assert!(set.labels.iter().all(|&y| y == 1));
    assert!((forgetting_loss(&model, &set).unwrap() - 10f64.ln()).abs() < 1e-12);
    assert!((entropy_maximization_loss(&model, &forget).unwrap() + 10f64.ln()).abs() < 1e-12);

    let model = cnn(4, 8);
    let forget = forget_set(12, 3, 4, 3);
    let set = mislabel_random(&forget, 4, 1).unwrap();
    let logits = model.forward(set.images.view()).unwrap();
    let mut naive = 0.0;
    for (row, &y) in logits.outer_iter().zip(&set.labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        naive += lse - row[y];
    }
    naive /= 12.0;
    assert!((forgetting_loss(&model, &set).unwrap() - naive).abs() < 1e-9);
}

#[test]
fn confident_prediction_gives_near_zero_losses() {
    let model = linear_1d([50.0, -50.0], [0.0, 0.0]);
    let forget = LabeledDataset::new(Partition::Forget, Array4::from_elem((3, 1, 1, 1), 1.0), vec![0; 3], 2).unwrap();
    assert!(entropy_maximization_loss(&model, &forget).unwrap().abs() < 1e-12);
    let relabeled = LabeledDataset::new(Partition::Forget, Array4::from_elem((3, 1, 1, 1), -1.0), vec![0; 3], 2).unwrap();
    let set = mislabel_largest_wrong_logit(&model, &relabeled).unwrap();
    assert_eq!(set.labels, vec![1; 3]);
    assert!(forgetting_loss(&model, &set).unwrap() < 1e-12);
}

#[test]
fn entropy_gradient_is_negated_cross_entropy_gradient() {
    let model = cnn(3, 2);
    // The class with the lowest cross-entropy keeps the clamp inactive.
    let cf = (0..3)
        .min_by(|&a, &b| {
            let ce = |c| {
                let f = forget_set(6, c, 3, 5);
                cross_entropy_gradients(&model, f.images.view(), &f.labels).unwrap().0
            };
            ce(a).total_cmp(&ce(b))
        })
        .unwrap();
    let forget = forget_set(6, cf, 3, 5);
    let (ce, g_ce) = cross_entropy_gradients(&model, forget.images.view(), &forget.labels).unwrap();
    assert!(ce < 3f64.ln(), "clamp must be inactive for this check");
    let (loss, g_ent) = entropy_maximization_gradients(&model, forget.images.view(), &forget.labels).unwrap();
    assert!((loss + ce).abs() < 1e-12);
    for (key, g) in g_ce.iter() {
        let e = g_ent.get(*key).unwrap();
        assert!((g + e).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn entropy_gradient_vanishes_at_chance_level() {
    let model = linear_1d([0.0, 0.0], [0.0, 0.0]);
    let forget = LabeledDataset::new(Partition::Forget, Array4::from_elem((2, 1, 1, 1), 0.5), vec![1; 2], 2).unwrap();
    let (loss, g) = entropy_maximization_gradients(&model, forget.images.view(), &forget.labels).unwrap();
    assert!((loss + 2f64.ln()).abs() < 1e-12);
    assert!(g.iter().all(|(_, t)| t.iter().all(|v| *v == 0.0)));
}

#[test]
fn one_descent_step_lowers_forgetting_loss() {
    let model = cnn(4, 6);
    let forget = forget_set(16, 0, 4, 4);
    let set = mislabel_largest_wrong_logit(&model, &forget).unwrap();
    let before = forgetting_loss(&model, &set).unwrap();
    let (_, g) = cross_entropy_gradients(&model, set.images.view(), &set.labels).unwrap();
    let mut layers = model.layers().to_vec();
    for (key, grad) in g.iter() {
        if key.kind != ParamKind::Weight {
            continue;
        }
        if let LayerParams::Conv { weight, .. } | LayerParams::Linear { weight, .. } = &mut layers[key.layer] {
            let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            weight.scaled_add(-1e-3, &g2);
        }
    }
    let stepped = ModelSnapshot::from_parts(model.architecture().clone(), layers).unwrap();
    assert!(forgetting_loss(&stepped, &set).unwrap() <= before);
    assert!(model.tensor(ParamKey::new(0, ParamKind::Weight)).is_some());
}

#[test]
fn mixed_or_empty_forget_sets_are_rejected() {
    let model = cnn(3, 0);
    let mixed = LabeledDataset::new(Partition::Forget, Array4::zeros((2, 2, 5, 5)), vec![0, 1], 3).unwrap();
    assert!(mislabel_largest_wrong_logit(&model, &mixed).is_err());
    assert!(mislabel(Strategy::Entropy, &model, &forget_set(2, 0, 3, 0), 0).is_err());
}

#[test]
fn saved_set_keeps_both_label_columns() {
    let model = cnn(3, 1);
    let forget = forget_set(5, 2, 3, 1);
    let set = mislabel_largest_wrong_logit(&model, &forget).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("forget");
    set.save(&stem).unwrap();
    let (ds, index) = packed::read(&stem).unwrap();
    assert_eq!(ds.labels, set.labels);
    assert_eq!(index.original_labels, Some(vec![2; 5]));
    assert_eq!(index.strategy.as_deref(), Some("largest-wrong-logit"));
}
