use ftta_core::autograd::{forward, CachePolicy, ParamScope};
use ftta_core::metrics::forward_peak_bytes;
use ftta_core::model::{build_model, Arch, BnMode};
use ftta_core::sparsity::{cached_bytes, keep_count};
use ftta_core::{ActivationRecord, Model, PruningSchedule, Rng, Tensor};
use proptest::prelude::*;

fn setup(seed: u64, batch: usize) -> (Model<f32>, Tensor<f32>) {
    let model = build_model::<f32>(Arch::CnnSmall, [1, 16, 16], 4, seed)
        .unwrap()
        .with_bn_mode(BnMode::Batch { blend: 1.0 });
    let mut rng = Rng::new(seed ^ 0xff);
    let x = Tensor::from_fn(&[batch, 1, 16, 16], |_| rng.next_f64() as f32);
    (model, x)
}

fn record_formula(r: &ActivationRecord<f32>) -> usize {
    match r {
        ActivationRecord::Dense(t) => 4 * t.len(),
        ActivationRecord::Sparse(s) => {
            let n: usize = s.shape().iter().product();
            4 * s.values().len() + n.div_ceil(8)
        }
        ActivationRecord::MaskOnly(m) => m.len().div_ceil(8),
        ActivationRecord::Recompute { .. } | ActivationRecord::Absent => 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tape_bytes_follow_record_formulas(seed in 0u64..1000, batch in 2usize..5, p in 0.0f64..1.0) {
        let (model, x) = setup(seed, batch);
        let (_, tape) = forward(&model, &x, &CachePolicy::static_ratio(p), None).unwrap();
        let mut total = 0;
        for node in tape.nodes() {
            let bytes = cached_bytes(&node.cached);
            prop_assert_eq!(bytes, record_formula(&node.cached));
            let n: usize = node.input_shape.iter().product();
            if let ActivationRecord::Sparse(s) = &node.cached {
                prop_assert_eq!(s.shape(), &node.input_shape[..]);
                prop_assert!(s.values().len() <= keep_count(p, n));
                prop_assert!(bytes < 4 * n);
            }
            total += bytes;
        }
        prop_assert_eq!(total, tape.cached_bytes());
        prop_assert_eq!(tape.per_layer_bytes().iter().sum::<usize>(), total);
    }

    #[test]
    fn higher_static_ratio_never_caches_more(seed in 0u64..1000, p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let (model, x) = setup(seed, 3);
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        let bytes = |r| forward(&model, &x, &CachePolicy::static_ratio(r), None).unwrap().1.cached_bytes();
        prop_assert!(bytes(hi) <= bytes(lo));
    }
}

#[test]
fn full_policy_caches_dense_inputs_of_trainable_layers() {
    let (model, x) = setup(1, 2);
    let (_, tape) = forward(&model, &x, &CachePolicy::full(), None).unwrap();
    for (node, spec) in tape.nodes().iter().zip(model.layers()) {
        let n: usize = node.input_shape.iter().product();
        match &node.cached {
            ActivationRecord::Dense(t) => {
                assert!(spec.kind.has_weight());
                assert_eq!(t.len(), n);
            }
            ActivationRecord::MaskOnly(m) => assert_eq!(m.len(), n),
            ActivationRecord::Absent => assert!(!spec.kind.has_weight()),
            other => panic!("unexpected {} record at layer {}", other.kind_name(), spec.id),
        }
    }
}

#[test]
fn full_pruning_keeps_only_index_bits() {
    let (model, x) = setup(2, 2);
    let (_, tape) = forward(&model, &x, &CachePolicy::static_ratio(1.0), None).unwrap();
    for node in tape.nodes() {
        if let ActivationRecord::Sparse(s) = &node.cached {
            assert!(s.values().is_empty());
            assert_eq!(cached_bytes(&node.cached), s.index().len().div_ceil(8));
        }
    }
}

#[test]
fn dynamic_schedule_applies_per_layer() {
    let (model, x) = setup(3, 2);
    let adapted = ftta_core::autograd::adapted_layers(&model, &ParamScope::All);
    let mut ratios = vec![0.0f32; adapted.len()];
    ratios[1] = 0.75;
    let schedule = PruningSchedule::new(ratios).unwrap();
    let (_, dense) = forward(&model, &x, &CachePolicy::full(), None).unwrap();
    let (_, tape) = forward(&model, &x, &CachePolicy::dynamic(), Some(&schedule)).unwrap();
    for node in tape.nodes() {
        let same = cached_bytes(&node.cached) == cached_bytes(&dense.nodes()[node.layer].cached);
        assert_eq!(same, node.layer != adapted[1], "layer {}", node.layer);
    }
}

#[test]
fn frozen_and_bn_only_scopes_cache_less() {
    let (model, x) = setup(4, 2);
    let bytes = |policy: CachePolicy| forward(&model, &x, &policy, None).unwrap().1.cached_bytes();
    let full = bytes(CachePolicy::full());
    let bn = bytes(CachePolicy::full().with_scope(ParamScope::BatchNormOnly));
    assert!(bn < full);
    assert_eq!(bytes(CachePolicy::freeze_all()), 0);
}

#[test]
fn forward_peak_counts_largest_layer() {
    let (model, _) = setup(5, 1);
    let shapes = model.shapes();
    let want = (0..model.layers().len())
        .map(|i| shapes[i].iter().product::<usize>() + shapes[i + 1].iter().product::<usize>())
        .max()
        .unwrap();
    assert_eq!(forward_peak_bytes(&model, 7), want * 4 * 7);
}
