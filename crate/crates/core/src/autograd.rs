//! Layer-granular reverse-mode differentiation.
//!
//! [`forward`] runs a sequential model and records one [`TapeNode`] per layer. Before a
//! parametric layer's input is stored it passes through the [`CachePolicy`]: kept
//! dense, pruned to a sparse value + bitmask record, or dropped in favour of a
//! recompute marker. Pruning only ever touches these cached copies; the forward
//! signal itself is never modified, so the output is independent of the policy.
//!
//! [`Tape::backward`] walks the nodes in reverse. Input gradients are computed from
//! exact quantities (weights, ReLU/pool masks, BN statistics); weight gradients use
//! the cached activation, reconstructed from its sparse form when pruned. For batch
//! norm the cached tensor is the normalized input, which feeds both the scale
//! gradient and the input gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{self, BnBatchStats, BnNormalization, ConvGeom, LayerKind, LayerSpec};
use crate::model::Model;
use crate::sparsity::{cached_bytes, ActivationRecord, PruningSchedule};
use crate::tensor::{Scalar, Tensor};

/// How cached activations of adapted layers are stored.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheMode {
    /// Dense copies.
    Full,
    /// Every adapted layer pruned at the same ratio.
    Static(f64),
    /// Per-layer ratios from a [`PruningSchedule`].
    Dynamic,
    /// Only block inputs are kept; blocks are re-run during backward.
    Checkpoint,
}

/// Which parametric layers receive weight gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamScope {
    All,
    BatchNormOnly,
    Nothing,
    /// Everything except the listed layer ids.
    Except(Vec<usize>),
}

impl ParamScope {
    pub fn includes(&self, spec: &LayerSpec) -> bool {
        if !spec.kind.has_weight() {
            return false;
        }
        match self {
            ParamScope::All => true,
            ParamScope::BatchNormOnly => spec.kind.is_batchnorm(),
            ParamScope::Nothing => false,
            ParamScope::Except(ids) => !ids.contains(&spec.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachePolicy {
    pub mode: CacheMode,
    pub scope: ParamScope,
}

impl CachePolicy {
    pub fn full() -> Self {
        Self {
            mode: CacheMode::Full,
            scope: ParamScope::All,
        }
    }

    pub fn static_ratio(p: f64) -> Self {
        Self {
            mode: CacheMode::Static(p),
            scope: ParamScope::All,
        }
    }

    pub fn dynamic() -> Self {
        Self {
            mode: CacheMode::Dynamic,
            scope: ParamScope::All,
        }
    }

    pub fn checkpoint() -> Self {
        Self {
            mode: CacheMode::Checkpoint,
            scope: ParamScope::All,
        }
    }

    /// No layer is adapted; nothing is cached.
    pub fn freeze_all() -> Self {
        Self {
            mode: CacheMode::Full,
            scope: ParamScope::Nothing,
        }
    }

    pub fn with_scope(mut self, scope: ParamScope) -> Self {
        self.scope = scope;
        self
    }
}

/// Layer indices whose weights are adapted under `scope`, in execution order.
pub fn adapted_layers<T: Scalar>(model: &Model<T>, scope: &ParamScope) -> Vec<usize> {
    model
        .layers()
        .iter()
        .filter(|l| scope.includes(l))
        .map(|l| l.id)
        .collect()
}

/// Exact per-layer data the backward step needs besides the cached activation.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeAux<T> {
    None,
    BatchNorm(BnNormalization<T>),
}

#[derive(Debug, Clone)]
pub struct TapeNode<T> {
    pub layer: usize,
    pub kind: &'static str,
    /// Batched input shape `[B, ...]`.
    pub input_shape: Vec<usize>,
    pub cached: ActivationRecord<T>,
    pub aux: NodeAux<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Want {
    Nothing,
    /// Input (normalized input for BN) pruned at this ratio; 0 keeps it dense.
    Value(f64),
    Mask,
}

struct LayerOut<T> {
    y: Tensor<T>,
    record: ActivationRecord<T>,
    aux: NodeAux<T>,
    stats: Option<BnBatchStats<T>>,
}

fn run_layer<T: Scalar>(model: &Model<T>, i: usize, x: &Tensor<T>, want: Want) -> Result<LayerOut<T>> {
    let spec = &model.layers()[i];
    let p = &model.params()[i];
    let batch = x.shape()[0];
    let sample = &x.shape()[1..];
    let out_sample = spec.kind.output_shape(sample)?;
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&out_sample);

    let value_record = |t: &Tensor<T>| -> Result<ActivationRecord<T>> {
        match want {
            Want::Value(ratio) => ActivationRecord::pruned(t, ratio),
            _ => Ok(ActivationRecord::Absent),
        }
    };
    let weight = || p.weight.as_ref().map(|w| w.data());
    let bias = || p.bias.as_ref().map(|b| b.data());

    let mut aux = NodeAux::None;
    let mut stats = None;
    let (y, record) = match spec.kind {
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let y = layers::linear_forward(x.data(), batch, weight().unwrap(), bias(), in_features, out_features);
            (y, value_record(x)?)
        }
        LayerKind::Conv2d { .. } => {
            let g = ConvGeom::new(&spec.kind, sample)?;
            let y = layers::conv_forward(&g, x.data(), batch, weight().unwrap(), bias());
            (y, value_record(x)?)
        }
        LayerKind::BatchNorm2d { channels, .. } => {
            let out = layers::bn_forward(
                i,
                x.data(),
                batch,
                channels,
                weight(),
                bias(),
                p.running_mean.as_ref().unwrap().data(),
                p.running_var.as_ref().unwrap().data(),
                model.bn_mode().blend(),
            )?;
            let record = match want {
                Want::Value(_) => value_record(&Tensor::from_parts(x.shape().to_vec(), out.xhat))?,
                _ => ActivationRecord::Absent,
            };
            aux = NodeAux::BatchNorm(out.norm);
            stats = out.stats;
            (out.y, record)
        }
        LayerKind::Relu => {
            let (y, mask) = layers::relu_forward(x.data());
            let rec = if want == Want::Mask {
                ActivationRecord::MaskOnly(mask)
            } else {
                ActivationRecord::Absent
            };
            (y, rec)
        }
        LayerKind::MaxPool2d { size } => {
            let (y, mask) = layers::maxpool_forward(x.data(), batch * sample[0], sample[1], sample[2], size);
            let rec = if want == Want::Mask {
                ActivationRecord::MaskOnly(mask)
            } else {
                ActivationRecord::Absent
            };
            (y, rec)
        }
        LayerKind::AvgPool2d { size } => (
            layers::avgpool_forward(x.data(), batch * sample[0], sample[1], sample[2], size),
            ActivationRecord::Absent,
        ),
        LayerKind::Flatten => (x.data().to_vec(), ActivationRecord::Absent),
    };
    Ok(LayerOut {
        y: Tensor::from_parts(out_shape, y),
        record,
        aux,
        stats,
    })
}

struct Plan {
    trainable: Vec<bool>,
    needs_input_grad: Vec<bool>,
    wants: Vec<Want>,
}

fn plan<T: Scalar>(
    model: &Model<T>,
    policy: &CachePolicy,
    schedule: Option<&PruningSchedule>,
) -> Result<Plan> {
    let specs = model.layers();
    let trainable: Vec<bool> = specs.iter().map(|l| policy.scope.includes(l)).collect();
    let n_adapted = trainable.iter().filter(|&&t| t).count();
    match (&policy.mode, schedule) {
        (CacheMode::Dynamic, Some(s)) if s.len() != n_adapted => {
            return Err(Error::ScheduleLength {
                expected: n_adapted,
                got: s.len(),
            })
        }
        (CacheMode::Dynamic, None) => {
            return Err(Error::InvalidArgument(
                "dynamic caching requires a pruning schedule".into(),
            ))
        }
        (CacheMode::Dynamic, Some(_)) => {}
        (_, Some(_)) => {
            return Err(Error::InvalidArgument(
                "a pruning schedule is only accepted by the dynamic policy".into(),
            ))
        }
        (CacheMode::Static(p), None) if !(0.0..=1.0).contains(p) => {
            return Err(Error::InvalidRatio(*p));
        }
        _ => {}
    }

    let mut needs_input_grad = vec![false; specs.len()];
    let mut seen = false;
    for i in 0..specs.len() {
        needs_input_grad[i] = seen;
        seen |= trainable[i];
    }

    let batch_stats = model.bn_mode().blend() > 0.0;
    let mut adapted_idx = 0;
    let wants = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            if trainable[i] {
                let ratio = match (&policy.mode, schedule) {
                    (CacheMode::Static(p), _) => *p,
                    (CacheMode::Dynamic, Some(s)) => s.ratios()[adapted_idx] as f64,
                    _ => 0.0,
                };
                adapted_idx += 1;
                return Want::Value(ratio);
            }
            match spec.kind {
                // frozen BN with batch statistics still needs x-hat for its input gradient
                LayerKind::BatchNorm2d { .. } if needs_input_grad[i] && batch_stats => Want::Value(0.0),
                LayerKind::Relu | LayerKind::MaxPool2d { .. } if needs_input_grad[i] => Want::Mask,
                _ => Want::Nothing,
            }
        })
        .collect();
    Ok(Plan {
        trainable,
        needs_input_grad,
        wants,
    })
}

/// Checkpoint blocks start at every convolution or linear layer.
fn block_starts(specs: &[LayerSpec]) -> Vec<usize> {
    let mut starts = vec![0];
    for (i, s) in specs.iter().enumerate().skip(1) {
        if matches!(s.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. }) {
            starts.push(i);
        }
    }
    starts
}

pub struct Tape<'m, T: Scalar> {
    model: &'m Model<T>,
    nodes: Vec<TapeNode<T>>,
    plan: Plan,
    output_shape: Vec<usize>,
    bn_stats: Vec<Option<BnBatchStats<T>>>,
}

/// Run `model` on `input`, caching activations according to `policy`.
///
/// `schedule` must be present exactly when the policy is dynamic, with one ratio
/// per adapted prunable layer.
pub fn forward<'m, T: Scalar>(
    model: &'m Model<T>,
    input: &Tensor<T>,
    policy: &CachePolicy,
    schedule: Option<&PruningSchedule>,
) -> Result<(Tensor<T>, Tape<'m, T>)> {
    if input.rank() < 2 || &input.shape()[1..] != model.input_shape() {
        let mut expected = vec![0];
        expected.extend_from_slice(model.input_shape());
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: input.shape().to_vec(),
            right: expected,
        });
    }
    let plan = plan(model, policy, schedule)?;
    let specs = model.layers();
    let checkpoint = policy.mode == CacheMode::Checkpoint;
    let starts = block_starts(specs);
    let block_of = |i: usize| starts.iter().rposition(|&s| s <= i).unwrap();
    let block_end = |b: usize| starts.get(b + 1).map_or(specs.len(), |&e| e);
    let block_needed = |b: usize| (starts[b]..block_end(b)).any(|j| plan.wants[j] != Want::Nothing);

    let mut nodes = Vec::with_capacity(specs.len());
    let mut bn_stats = Vec::with_capacity(specs.len());
    let mut x = input.clone();
    for i in 0..specs.len() {
        let want = if checkpoint { Want::Nothing } else { plan.wants[i] };
        let out = run_layer(model, i, &x, want)?;
        let (cached, aux) = if checkpoint {
            let b = block_of(i);
            let rec = if !block_needed(b) {
                ActivationRecord::Absent
            } else if i == starts[b] {
                ActivationRecord::Dense(x.clone())
            } else if plan.wants[i] != Want::Nothing {
                ActivationRecord::Recompute { block_start: starts[b] }
            } else {
                ActivationRecord::Absent
            };
            (rec, NodeAux::None)
        } else {
            (out.record, out.aux)
        };
        nodes.push(TapeNode {
            layer: specs[i].id,
            kind: specs[i].kind.tag(),
            input_shape: x.shape().to_vec(),
            cached,
            aux,
        });
        bn_stats.push(out.stats);
        x = out.y;
    }
    let output_shape = x.shape().to_vec();
    Ok((
        x,
        Tape {
            model,
            nodes,
            plan,
            output_shape,
            bn_stats,
        },
    ))
}

/// Inference without caching anything.
pub fn infer<T: Scalar>(model: &Model<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    forward(model, input, &CachePolicy::freeze_all(), None).map(|(y, _)| y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Weight (and bias) gradients of the adapted layers, keyed by layer index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T> {
    grads: BTreeMap<usize, LayerGrads<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, grads: LayerGrads<T>) {
        self.grads.insert(layer, grads);
    }

    pub fn get(&self, layer: usize) -> Option<&LayerGrads<T>> {
        self.grads.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerGrads<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .values()
            .all(|g| g.weight.all_finite() && g.bias.as_ref().is_none_or(|b| b.all_finite()))
    }
}

impl<'m, T: Scalar> Tape<'m, T> {
    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn batch_size(&self) -> usize {
        self.output_shape[0]
    }

    /// Batch statistics observed by each BN layer, for running-average updates.
    pub fn bn_batch_stats(&self) -> &[Option<BnBatchStats<T>>] {
        &self.bn_stats
    }

    /// Bytes held by every record at the end of the forward pass.
    pub fn cached_bytes(&self) -> usize {
        self.nodes.iter().map(|n| cached_bytes(&n.cached)).sum()
    }

    pub fn per_layer_bytes(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| cached_bytes(&n.cached)).collect()
    }

    fn full_record_bytes(&self, i: usize) -> usize {
        let n: usize = self.nodes[i].input_shape.iter().product();
        match self.plan.wants[i] {
            Want::Nothing => 0,
            Want::Value(_) => T::BYTES * n,
            Want::Mask => n.div_ceil(8),
        }
    }

    fn first_adapted(&self) -> Option<usize> {
        self.plan.trainable.iter().position(|&t| t)
    }

    /// Largest number of cached bytes alive at any point of the upcoming backward pass.
    ///
    /// Records are released once their layer is processed. A recompute block
    /// re-materializes its full records when the backward pass reaches it.
    pub fn peak_cached_bytes(&self) -> usize {
        let mut cur = self.per_layer_bytes();
        let mut live: usize = cur.iter().sum();
        let mut peak = live;
        let Some(first) = self.first_adapted() else {
            return peak;
        };
        let mut done_blocks = Vec::new();
        for i in (first..self.nodes.len()).rev() {
            if let ActivationRecord::Recompute { block_start } = self.nodes[i].cached {
                if !done_blocks.contains(&block_start) {
                    done_blocks.push(block_start);
                    for j in block_start..=i {
                        live = live - cur[j] + self.full_record_bytes(j);
                        cur[j] = self.full_record_bytes(j);
                    }
                    peak = peak.max(live);
                }
            }
            live -= cur[i];
            cur[i] = 0;
            if !self.plan.needs_input_grad[i] {
                break;
            }
        }
        peak
    }

    fn recompute(&mut self, start: usize, end: usize) -> Result<()> {
        let mut x = match &self.nodes[start].cached {
            ActivationRecord::Dense(t) => t.clone(),
            other => {
                return Err(Error::MissingRecord {
                    layer: start,
                    reason: format!("checkpoint expected, found {} record", other.kind_name()),
                })
            }
        };
        for j in start..=end {
            let out = run_layer(self.model, j, &x, self.plan.wants[j])?;
            self.nodes[j].cached = out.record;
            self.nodes[j].aux = out.aux;
            x = out.y;
        }
        Ok(())
    }

    fn value_record(&self, i: usize) -> Result<Tensor<T>> {
        self.nodes[i].cached.materialize()?.ok_or_else(|| Error::MissingRecord {
            layer: i,
            reason: format!(
                "{} layer needs a cached activation, found {} record",
                self.nodes[i].kind,
                self.nodes[i].cached.kind_name()
            ),
        })
    }

    fn mask_record(&self, i: usize) -> Result<&crate::sparsity::Bitset> {
        match &self.nodes[i].cached {
            ActivationRecord::MaskOnly(m) => Ok(m),
            other => Err(Error::MissingRecord {
                layer: i,
                reason: format!("{} layer needs a mask, found {} record", self.nodes[i].kind, other.kind_name()),
            }),
        }
    }

    /// Reverse pass. Consumes the tape; recompute records trigger a nested forward
    /// over their block first.
    pub fn backward(mut self, loss_grad: &Tensor<T>) -> Result<GradientSet<T>> {
        if loss_grad.shape() != self.output_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: loss_grad.shape().to_vec(),
                right: self.output_shape.clone(),
            });
        }
        let mut grads = GradientSet::new();
        let Some(first) = self.first_adapted() else {
            return Ok(grads);
        };
        let model = self.model;
        let mut g = loss_grad.data().to_vec();
        for i in (first..self.nodes.len()).rev() {
            if let ActivationRecord::Recompute { block_start } = self.nodes[i].cached {
                self.recompute(block_start, i)?;
            }
            let spec = &model.layers()[i];
            let params = &model.params()[i];
            let trainable = self.plan.trainable[i];
            let need_dx = self.plan.needs_input_grad[i];
            let in_shape = self.nodes[i].input_shape.clone();
            let batch = in_shape[0];
            let sample = &in_shape[1..];
            let weight = params.weight.as_ref().map(|w| w.data());

            match spec.kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    if trainable {
                        let a = self.value_record(i)?;
                        let (dw, db) = layers::linear_backward_params(&g, a.data(), batch, in_features, out_features);
                        grads.insert(
                            i,
                            LayerGrads {
                                weight: Tensor::from_parts(vec![out_features, in_features], dw),
                                bias: Some(Tensor::from_parts(vec![out_features], db)),
                            },
                        );
                    }
                    if need_dx {
                        g = layers::linear_backward_input(&g, batch, weight.unwrap(), in_features, out_features);
                    }
                }
                LayerKind::Conv2d { out_channels, bias, .. } => {
                    let geom = ConvGeom::new(&spec.kind, sample)?;
                    if trainable {
                        let a = self.value_record(i)?;
                        let (dw, db) = layers::conv_backward_params(&geom, &g, a.data(), batch, bias);
                        grads.insert(
                            i,
                            LayerGrads {
                                weight: Tensor::from_parts(spec.kind.weight_shape().unwrap(), dw),
                                bias: db.map(|d| Tensor::from_parts(vec![out_channels], d)),
                            },
                        );
                    }
                    if need_dx {
                        g = layers::conv_backward_input(&geom, &g, batch, weight.unwrap());
                    }
                }
                LayerKind::BatchNorm2d { channels, .. } => {
                    let norm = match &self.nodes[i].aux {
                        NodeAux::BatchNorm(n) => n.clone(),
                        NodeAux::None => {
                            return Err(Error::MissingRecord {
                                layer: i,
                                reason: "batch norm node lacks its normalization constants".into(),
                            })
                        }
                    };
                    let xhat = match self.plan.wants[i] {
                        Want::Value(_) => Some(self.value_record(i)?),
                        _ => None,
                    };
                    if trainable {
                        let xh = xhat.as_ref().expect("trainable BN caches x-hat");
                        let (dgamma, dbeta) = layers::bn_backward_params(&g, xh.data(), batch, channels);
                        grads.insert(
                            i,
                            LayerGrads {
                                weight: Tensor::from_parts(vec![channels], dgamma),
                                bias: Some(Tensor::from_parts(vec![channels], dbeta)),
                            },
                        );
                    }
                    if need_dx {
                        g = layers::bn_backward_input(
                            &g,
                            xhat.as_ref().map(|t| t.data()),
                            batch,
                            channels,
                            weight,
                            &norm,
                        );
                    }
                }
                LayerKind::Relu => {
                    if need_dx {
                        g = layers::relu_backward(&g, self.mask_record(i)?);
                    }
                }
                LayerKind::MaxPool2d { size } => {
                    if need_dx {
                        let mask = self.mask_record(i)?;
                        g = layers::maxpool_backward(&g, mask, batch * sample[0], sample[1], sample[2], size);
                    }
                }
                LayerKind::AvgPool2d { size } => {
                    if need_dx {
                        g = layers::avgpool_backward(&g, batch * sample[0], sample[1], sample[2], size);
                    }
                }
                LayerKind::Flatten => {}
            }
            self.nodes[i].cached = ActivationRecord::Absent;
            if !need_dx {
                break;
            }
        }
        Ok(grads)
    }
}

/// Central-difference gradients `(L(w + eps) - L(w - eps)) / (2 eps)` for every weight
/// and bias scalar of every parametric layer.
pub fn finite_difference_gradients(
    model: &Model<f64>,
    input: &Tensor<f64>,
    loss: impl Fn(&Tensor<f64>) -> Result<f64>,
    epsilon: f64,
) -> Result<GradientSet<f64>> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {epsilon} outside (0, 1e-2]"
        )));
    }
    let eval = |m: &Model<f64>| -> Result<f64> {
        let l = loss(&infer(m, input)?)?;
        if !l.is_finite() {
            return Err(Error::NonFinite("finite-difference loss".into()));
        }
        Ok(l)
    };
    let mut work = model.clone();
    let mut grads = GradientSet::new();
    for i in 0..model.layers().len() {
        if !model.layers()[i].kind.has_weight() {
            continue;
        }
        let mut slots: Vec<Option<Tensor<f64>>> = Vec::with_capacity(2);
        for bias in [false, true] {
            let base = if bias {
                model.params()[i].bias.clone()
            } else {
                model.params()[i].weight.clone()
            };
            let Some(base) = base else {
                slots.push(None);
                continue;
            };
            let mut out = Tensor::zeros(base.shape());
            for k in 0..base.len() {
                let w0 = base.data()[k];
                *param_slot(&mut work, i, bias, k) = w0 + epsilon;
                let plus = eval(&work)?;
                *param_slot(&mut work, i, bias, k) = w0 - epsilon;
                let minus = eval(&work)?;
                *param_slot(&mut work, i, bias, k) = w0;
                out.data_mut()[k] = (plus - minus) / (2.0 * epsilon);
            }
            slots.push(Some(out));
        }
        let bias = slots.pop().unwrap();
        let weight = slots.pop().unwrap().unwrap();
        grads.insert(i, LayerGrads { weight, bias });
    }
    Ok(grads)
}

fn param_slot(m: &mut Model<f64>, layer: usize, bias: bool, k: usize) -> &mut f64 {
    let p = &mut m.params_mut()[layer];
    let t = if bias { p.bias.as_mut() } else { p.weight.as_mut() };
    &mut t.expect("parameter present").data_mut()[k]
}
