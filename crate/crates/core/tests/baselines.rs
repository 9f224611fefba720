use std::sync::OnceLock;

use unlearn_core::baselines::*;
use unlearn_core::dataset::shapes::{generate, ShapesSpec};
use unlearn_core::dataset::{Partition, Splits};
use unlearn_core::metrics::{accuracy, evaluate, REPORT_FIELDS};
use unlearn_core::navigation::CovarNavConfig;
use unlearn_core::nn::{train_original, Architecture, LayerParams, ModelSnapshot, TrainConfig};
use unlearn_core::Error;

struct Fixture {
    model: ModelSnapshot,
    splits: Splits,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = ShapesSpec { image_size: 8, ..Default::default() };
        let train = generate(spec, 40, 1, Partition::Train).unwrap();
        let test = generate(spec, 5, 2, Partition::Test).unwrap();
        let arch = Architecture::desk_cnn([3, 8, 8], &[6, 12], 10).unwrap();
        let cfg = TrainConfig { epochs: 15, lr: 0.05, batch_size: 32, ..Default::default() };
        let (model, _) = train_original(arch, &train, &cfg).unwrap();
        Fixture {
            model,
            splits: Splits::new(&train, &test, 3).unwrap(),
        }
    })
}

fn quick(method: Method) -> BaselineSpec {
    BaselineSpec {
        epochs: 3,
        batch_size: 32,
        train: TrainConfig { epochs: 3, lr: 0.05, batch_size: 32, ..Default::default() },
        ..BaselineSpec::new(method)
    }
}

#[test]
fn retained_access_policy_is_enforced() {
    let f = fixture();
    for m in Method::ALL {
        let spec = quick(m);
        if m.needs_retained() {
            assert!(matches!(
                run_baseline(&spec, &f.model, &f.splits.forget, None),
                Err(Error::RetainedAccessRequired { .. })
            ));
        } else {
            assert!(run_baseline(&spec, &f.model, &f.splits.forget, Some(&f.splits.retain)).is_err());
        }
    }
}

#[test]
fn every_method_runs_and_reports_the_same_fields() {
    let f = fixture();
    let mut keys = None;
    for m in Method::ALL {
        let retained = m.needs_retained().then_some(&f.splits.retain);
        let out = run_baseline(&quick(m), &f.model, &f.splits.forget, retained).unwrap();
        assert_eq!(out.summary.method, m.id());
        let report = evaluate(&f.model, &out.model, &f.splits, &out.summary, 0, "fp").unwrap();
        let value = serde_json::to_value(&report).unwrap();
        let fields: Vec<String> = value.as_object().unwrap().keys().cloned().collect();
        let mut expected: Vec<String> = REPORT_FIELDS.iter().map(|s| s.to_string()).collect();
        expected.sort();
        assert_eq!(fields, expected);
        if let Some(k) = &keys {
            assert_eq!(k, &fields);
        }
        keys = Some(fields);
    }
}

#[test]
fn retrain_never_sees_the_forget_class() {
    let f = fixture();
    let out = run_baseline(&quick(Method::Retrain), &f.model, &f.splits.forget, Some(&f.splits.retain)).unwrap();
    assert_eq!(accuracy(&out.model, &f.splits.forget).unwrap(), 0.0);
}

#[test]
fn objective_methods_lower_forget_accuracy() {
    let f = fixture();
    let before = accuracy(&f.model, &f.splits.forget).unwrap();
    assert!(before > 0.5);
    for m in [Method::LargestWrongLogit, Method::RandomLabels, Method::BoundaryShrink, Method::LwlL2] {
        let spec = BaselineSpec { lr: 1e-2, epochs: 10, ..quick(m) };
        let out = run_baseline(&spec, &f.model, &f.splits.forget, None).unwrap();
        assert!(accuracy(&out.model, &f.splits.forget).unwrap() < before, "{m}");
    }
}

#[test]
fn lwl_l2_stays_closer_to_the_original() {
    let f = fixture();
    let base = BaselineSpec { lr: 1e-2, epochs: 10, ..quick(Method::LargestWrongLogit) };
    let plain = run_baseline(&base, &f.model, &f.splits.forget, None).unwrap();
    let anchored = run_baseline(
        &BaselineSpec { method: Method::LwlL2, lambda_l2: 10.0, ..base },
        &f.model,
        &f.splits.forget,
        None,
    )
    .unwrap();
    assert!(anchored.model.max_abs_diff(&f.model).unwrap() < plain.model.max_abs_diff(&f.model).unwrap());
}

#[test]
fn negative_gradient_forget_branch_is_inert_at_chance_level() {
    let f = fixture();
    // A zero head makes every prediction uniform, so the clamp is active.
    let head = f.model.architecture().head_layer().unwrap();
    let layers: Vec<LayerParams> = f
        .model
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
    let uniform = ModelSnapshot::from_parts(f.model.architecture().clone(), layers).unwrap();
    let spec = BaselineSpec { lr: 0.0, epochs: 2, ..quick(Method::NegativeGradient) };
    let out = run_baseline(&spec, &uniform, &f.splits.forget, Some(&f.splits.retain)).unwrap();
    assert_eq!(out.model, uniform);
    let retained_batches = f.splits.retain.len().div_ceil(32);
    assert_eq!(out.summary.details["clamped_forget_steps"], 2 * retained_batches);
}

#[test]
fn projected_variants_with_zero_epochs_are_identity() {
    let f = fixture();
    let proxy = f.splits.retain.subsample(30, 0, Partition::Proxy);
    let mut cfg = CovarNavConfig::default();
    cfg.descent.epochs = 0;
    for m in [Method::LargestWrongLogit, Method::RandomLabels, Method::BoundaryShrink, Method::MaxEntropy] {
        let out = run_baseline_with_projection(&quick(m), &f.model, &f.splits.forget, Some(&proxy), &cfg).unwrap();
        assert_eq!(out.model, f.model);
        assert_eq!(out.summary.method, format!("{}+projection", m.id()));
    }
    assert!(run_baseline_with_projection(&quick(Method::Retrain), &f.model, &f.splits.forget, Some(&proxy), &cfg).is_err());
}
