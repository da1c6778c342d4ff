use ftta_core::autograd::{finite_difference_gradients, forward, CachePolicy, ParamScope};
use ftta_core::layers::LayerKind;
use ftta_core::loss::entropy_loss;
use ftta_core::model::{BnMode, Model};
use ftta_core::sparsity::{ActivationRecord, PruningSchedule};
use ftta_core::{Rng, Tensor};

fn small_cnn(seed: u64) -> Model<f64> {
    let kinds = vec![
        LayerKind::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1, bias: true },
        LayerKind::BatchNorm2d { channels: 3, affine: true },
        LayerKind::Relu,
        LayerKind::MaxPool2d { size: 2 },
        LayerKind::Conv2d { in_channels: 3, out_channels: 4, kernel: 3, stride: 1, padding: 1, bias: false },
        LayerKind::BatchNorm2d { channels: 4, affine: true },
        LayerKind::Relu,
        LayerKind::AvgPool2d { size: 2 },
        LayerKind::Flatten,
        LayerKind::Linear { in_features: 4, out_features: 3 },
    ];
    let mut m = Model::new(vec![2, 4, 4], kinds).unwrap();
    m.init_uniform(seed);
    m
}

fn input(seed: u64, batch: usize) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[batch, 2, 4, 4], |_| rng.normal())
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn backward_matches_finite_differences_with_batch_statistics() {
    let model = small_cnn(3).with_bn_mode(BnMode::Batch { blend: 1.0 });
    let x = input(4, 3);
    let (y, tape) = forward(&model, &x, &CachePolicy::full(), None).unwrap();
    let loss = entropy_loss(&y).unwrap();
    let grads = tape.backward(&loss.grad).unwrap();
    let fd = finite_difference_gradients(&model, &x, |y| Ok(entropy_loss(y)?.value), 1e-5).unwrap();
    assert_eq!(grads.len(), fd.len());
    for (layer, g) in grads.iter() {
        let o = fd.get(layer).unwrap();
        let err = max_rel_err(g.weight.data(), o.weight.data());
        assert!(err < 1e-6, "layer {layer} weight rel err {err}");
        if let (Some(a), Some(b)) = (&g.bias, &o.bias) {
            let err = max_rel_err(a.data(), b.data());
            assert!(err < 1e-6, "layer {layer} bias rel err {err}");
        }
    }
}

#[test]
fn eval_mode_and_blended_statistics_match_finite_differences() {
    for mode in [BnMode::Eval, BnMode::Batch { blend: 0.5 }] {
        let model = small_cnn(7).with_bn_mode(mode);
        let x = input(8, 2);
        let (y, tape) = forward(&model, &x, &CachePolicy::full(), None).unwrap();
        let grads = tape.backward(&entropy_loss(&y).unwrap().grad).unwrap();
        let fd = finite_difference_gradients(&model, &x, |y| Ok(entropy_loss(y)?.value), 1e-5).unwrap();
        for (layer, g) in grads.iter() {
            let err = max_rel_err(g.weight.data(), fd.get(layer).unwrap().weight.data());
            assert!(err < 1e-6, "{mode:?} layer {layer} rel err {err}");
        }
    }
}

#[test]
fn zero_ratio_and_checkpoint_reproduce_full_gradients() {
    let model = small_cnn(11).with_bn_mode(BnMode::Batch { blend: 1.0 }).cast::<f32>();
    let x = input(12, 4).cast::<f32>();
    let run = |policy: CachePolicy, schedule: Option<&PruningSchedule>| {
        let (y, tape) = forward(&model, &x, &policy, schedule).unwrap();
        let peak = tape.peak_cached_bytes();
        (tape.backward(&entropy_loss(&y).unwrap().grad).unwrap(), peak)
    };
    let (full, full_peak) = run(CachePolicy::full(), None);
    let (stat, _) = run(CachePolicy::static_ratio(0.0), None);
    let zeros = PruningSchedule::zeros(5);
    let (dynamic, _) = run(CachePolicy::dynamic(), Some(&zeros));
    let (ckpt, ckpt_peak) = run(CachePolicy::checkpoint(), None);
    assert_eq!(full, stat);
    assert_eq!(full, dynamic);
    assert_eq!(full, ckpt);
    assert!(ckpt_peak < full_peak, "{ckpt_peak} vs {full_peak}");
}

#[test]
fn pruning_changes_only_weight_gradients_not_outputs() {
    let model = small_cnn(5).with_bn_mode(BnMode::Batch { blend: 1.0 }).cast::<f32>();
    let x = input(6, 3).cast::<f32>();
    let (y_full, _) = forward(&model, &x, &CachePolicy::full(), None).unwrap();
    let (y_pruned, tape) = forward(&model, &x, &CachePolicy::static_ratio(0.9), None).unwrap();
    assert_eq!(y_full, y_pruned);
    assert!(tape
        .nodes()
        .iter()
        .any(|n| matches!(n.cached, ActivationRecord::Sparse(_))));
}

#[test]
fn schedule_length_must_match_adapted_layers() {
    let model = small_cnn(1).cast::<f32>();
    let x = input(1, 2).cast::<f32>();
    let bad = PruningSchedule::zeros(3);
    assert!(forward(&model, &x, &CachePolicy::dynamic(), Some(&bad)).is_err());
    let bn_only = CachePolicy::dynamic().with_scope(ParamScope::BatchNormOnly);
    let ok = PruningSchedule::zeros(2);
    assert!(forward(&model, &x, &bn_only, Some(&ok)).is_ok());
    assert!(forward(&model, &x, &CachePolicy::full(), Some(&ok)).is_err());
}

#[test]
fn frozen_scope_caches_nothing() {
    let model = small_cnn(2).with_bn_mode(BnMode::Batch { blend: 1.0 }).cast::<f32>();
    let x = input(2, 2).cast::<f32>();
    let (y, tape) = forward(&model, &x, &CachePolicy::freeze_all(), None).unwrap();
    assert_eq!(tape.cached_bytes(), 0);
    let grads = tape.backward(&entropy_loss(&y).unwrap().grad).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn bn_only_scope_updates_only_batch_norm() {
    let model = small_cnn(9).with_bn_mode(BnMode::Batch { blend: 1.0 });
    let x = input(10, 3);
    let policy = CachePolicy::full().with_scope(ParamScope::BatchNormOnly);
    let (y, tape) = forward(&model, &x, &policy, None).unwrap();
    let grads = tape.backward(&entropy_loss(&y).unwrap().grad).unwrap();
    assert_eq!(grads.layers().collect::<Vec<_>>(), vec![1, 5]);
    let fd = finite_difference_gradients(&model, &x, |y| Ok(entropy_loss(y)?.value), 1e-5).unwrap();
    for (layer, g) in grads.iter() {
        assert!(max_rel_err(g.weight.data(), fd.get(layer).unwrap().weight.data()) < 1e-6);
    }
}
