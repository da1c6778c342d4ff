//! Online adaptation over a test stream: the sparse-activation method and baselines.
//!
//! Every batch is predicted and then (depending on the method) used for one
//! unsupervised update. The model carries over from batch to batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{forward, infer, CacheMode, CachePolicy, GradientSet, ParamScope};
use crate::data::Stream;
use crate::error::{Error, Result};
use crate::importance::{importance_prepass, ImportanceReport, PrePassConfig};
use crate::loss::{argmax_rows, consistency_loss_logits, masked_entropy_loss, entropy_loss, sample_entropies, softmax_rows, LossOutput};
use crate::model::{BnMode, Model};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{derive_seed, Rng};
use crate::sparsity::PruningSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "arg", rename_all = "kebab-case")]
pub enum Method {
    /// No adaptation; eval-mode batch norm.
    Source,
    BnStat,
    Tent,
    Surgeon,
    SurgeonBn,
    FullTuning,
    Static(f64),
    /// Adapt every parametric layer except these.
    Freeze(Vec<usize>),
    GradientCheckpoint,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::BnStat => "bn-stat",
            Method::Tent => "tent",
            Method::Surgeon => "surgeon",
            Method::SurgeonBn => "surgeon-bn",
            Method::FullTuning => "full-tuning",
            Method::Static(_) => "static",
            Method::Freeze(_) => "freeze",
            Method::GradientCheckpoint => "gradient-checkpoint",
        }
    }

    /// Layers receiving updates; `None` for forward-only methods.
    pub fn scope(&self) -> Option<ParamScope> {
        match self {
            Method::Source | Method::BnStat => None,
            Method::Tent | Method::SurgeonBn => Some(ParamScope::BatchNormOnly),
            Method::Freeze(ids) => Some(ParamScope::Except(ids.clone())),
            _ => Some(ParamScope::All),
        }
    }

    pub fn cache_mode(&self) -> CacheMode {
        match self {
            Method::Surgeon | Method::SurgeonBn => CacheMode::Dynamic,
            Method::Static(p) => CacheMode::Static(*p),
            Method::GradientCheckpoint => CacheMode::Checkpoint,
            _ => CacheMode::Full,
        }
    }

    pub fn uses_prepass(&self) -> bool {
        matches!(self, Method::Surgeon | Method::SurgeonBn)
    }

    pub fn requires_batchnorm(&self) -> bool {
        matches!(self, Method::BnStat | Method::Tent | Method::SurgeonBn)
    }

    pub fn uses_batch_statistics(&self) -> bool {
        !matches!(self, Method::Source)
    }

    pub fn policy(&self) -> CachePolicy {
        match self.scope() {
            Some(scope) => CachePolicy {
                mode: self.cache_mode(),
                scope,
            },
            None => CachePolicy::freeze_all(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Static(p) => write!(f, "static({p})"),
            Method::Freeze(ids) => {
                let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                write!(f, "freeze({})", ids.join(","))
            }
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts plain names plus `static(p)` and `freeze(i,j,...)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("unknown method {s:?}"));
        if let Some(arg) = s.strip_prefix("static(").and_then(|r| r.strip_suffix(')')) {
            let p: f64 = arg.trim().parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidRatio(p));
            }
            return Ok(Method::Static(p));
        }
        if let Some(arg) = s.strip_prefix("freeze(").and_then(|r| r.strip_suffix(')')) {
            let ids = arg
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| t.trim().parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            return Ok(Method::Freeze(ids));
        }
        Ok(match s {
            "source" => Method::Source,
            "bn-stat" => Method::BnStat,
            "tent" => Method::Tent,
            "surgeon" => Method::Surgeon,
            "surgeon-bn" => Method::SurgeonBn,
            "full-tuning" => Method::FullTuning,
            "gradient-checkpoint" => Method::GradientCheckpoint,
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub method: Method,
    pub optimizer: OptimizerConfig,
    pub prepass: PrePassConfig,
    /// Entropy threshold for certainty-based sample selection.
    pub css: Option<f64>,
    /// Weight of the consistency term.
    pub cr: Option<f64>,
    /// Share of the batch statistics in BN normalization; 1 uses pure batch statistics.
    pub bn_blend: f64,
    pub seed: u64,
    /// Replace every dynamic ratio with 0 (the pre-pass still runs).
    #[serde(default)]
    pub force_zero_ratios: bool,
}

impl AdaptationConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            optimizer: OptimizerConfig::default(),
            prepass: PrePassConfig::default(),
            css: None,
            cr: None,
            bn_blend: 1.0,
            seed: 0,
            force_zero_ratios: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Default threshold `0.4 ln C`.
    pub fn default_css_threshold(classes: usize) -> f64 {
        0.4 * (classes as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.optimizer.lr() <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if let Some(t) = self.css {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("CSS threshold {t} must be positive")));
            }
        }
        if let Some(l) = self.cr {
            if !(l >= 0.0) {
                return Err(Error::InvalidArgument(format!("CR weight {l} must be nonnegative")));
            }
        }
        if !(self.bn_blend > 0.0 && self.bn_blend <= 1.0) {
            return Err(Error::InvalidArgument(format!("bn blend {} outside (0, 1]", self.bn_blend)));
        }
        if let Method::Static(p) = self.method {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidRatio(p));
            }
        }
        if !(0.0..1.0).contains(&self.prepass.prune_ratio) {
            return Err(Error::InvalidRatio(self.prepass.prune_ratio));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub batch: usize,
    pub segment: usize,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub loss: f64,
    /// Bytes cached by the adaptation tape.
    pub tape_bytes: usize,
    pub per_layer_bytes: Vec<usize>,
    /// Bytes cached by the pre-pass tape.
    pub prepass_bytes: usize,
    /// Largest live cache during the adaptation backward pass.
    pub peak_bytes: usize,
    pub updated_samples: usize,
    pub skipped_samples: usize,
    pub schedule: Vec<f32>,
    pub importance: Option<ImportanceReport>,
}

impl BatchOutcome {
    /// Adaptation cache plus pre-pass cache.
    pub fn cached_bytes(&self) -> usize {
        self.tape_bytes + self.prepass_bytes
    }

    pub fn correct(&self) -> usize {
        self.predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count()
    }
}

/// CSS: indices of samples whose prediction entropy is below `threshold`.
pub fn css_filter(logits: &Tensor<f32>, threshold: f64) -> Result<Vec<usize>> {
    Ok(sample_entropies(logits)?
        .iter()
        .enumerate()
        .filter(|(_, &h)| h < threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Horizontal flip plus Gaussian pixel noise (σ = 0.02), clamped to `[0, 1]`.
pub fn augment(x: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let w = *x.shape().last().unwrap();
    let mut rng = Rng::new(seed);
    let data = x.data();
    let out: Vec<f32> = (0..data.len())
        .map(|i| {
            let col = i % w;
            let src = i - col + (w - 1 - col);
            (data[src] as f64 + 0.02 * rng.normal()).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

const PREPASS_KEY: u64 = 0x9e5a;
const AUGMENT_KEY: u64 = 0xa06;

/// Adapt `model` over `stream`, returning the final model and one outcome per batch.
pub fn adapt_stream(model: Model<f32>, stream: &Stream, cfg: &AdaptationConfig) -> Result<(Model<f32>, Vec<BatchOutcome>)> {
    adapt_stream_observed(model, stream, cfg, |_, _| {})
}

/// [`adapt_stream`] with a callback receiving every gradient set before it is applied.
pub fn adapt_stream_observed(
    mut model: Model<f32>,
    stream: &Stream,
    cfg: &AdaptationConfig,
    mut observe: impl FnMut(usize, &GradientSet<f32>),
) -> Result<(Model<f32>, Vec<BatchOutcome>)> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::InvalidArgument("empty stream".into()));
    }
    let method = &cfg.method;
    if method.requires_batchnorm() && !model.has_batchnorm() {
        return Err(Error::MethodMismatch {
            method: method.to_string(),
            reason: "the model has no batch norm layers".into(),
        });
    }
    if let Some(scope) = method.scope() {
        if !model.layers().iter().any(|l| scope.includes(l)) {
            return Err(Error::MethodMismatch {
                method: method.to_string(),
                reason: "no layer would be adapted".into(),
            });
        }
    }
    model.set_bn_mode(if method.uses_batch_statistics() {
        BnMode::Batch { blend: cfg.bn_blend }
    } else {
        BnMode::Eval
    });
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let policy = method.policy();
    let prepass_seeds = derive_seed(cfg.seed, PREPASS_KEY);
    let augment_seeds = derive_seed(cfg.seed, AUGMENT_KEY);

    let mut outcomes = Vec::with_capacity(stream.len());
    for (t, batch) in stream.batches.iter().enumerate() {
        let x = &batch.images;
        let b = batch.labels.len();

        if matches!(method, Method::Source) {
            let logits = infer(&model, x)?;
            let loss = entropy_loss(&logits)?.value;
            outcomes.push(BatchOutcome {
                batch: t,
                segment: batch.segment,
                predictions: argmax_rows(&logits),
                labels: batch.labels.clone(),
                loss,
                tape_bytes: 0,
                per_layer_bytes: vec![0; model.layers().len()],
                prepass_bytes: 0,
                peak_bytes: 0,
                updated_samples: 0,
                skipped_samples: b,
                schedule: Vec::new(),
                importance: None,
            });
            continue;
        }

        let input = match cfg.cr {
            Some(_) if method.scope().is_some() => {
                let aug = augment(x, derive_seed(augment_seeds, t as u64));
                Tensor::concat_rows(&[x, &aug])?
            }
            _ => x.clone(),
        };

        let mut importance = None;
        let mut schedule = None;
        if method.uses_prepass() {
            let pcfg = PrePassConfig {
                seed: derive_seed(prepass_seeds, t as u64),
                ..cfg.prepass.clone()
            };
            // Importance is always scored over every prunable layer; the BN-only
            // variant then applies the batch-norm entries of that schedule.
            let mut report = importance_prepass(&model, &input, &pcfg, &ParamScope::All, entropy_loss)?;
            report.batch = t;
            let scope = method.scope().expect("pre-pass methods adapt");
            let ratios: Vec<f32> = report
                .layers
                .iter()
                .filter(|l| scope.includes(&model.layers()[l.layer]))
                .map(|l| if cfg.force_zero_ratios { 0.0 } else { l.ratio })
                .collect();
            let s = PruningSchedule::new(ratios)?;
            schedule = Some(s);
            importance = Some(report);
        }

        let (logits, tape) = forward(&model, &input, &policy, schedule.as_ref())?;
        let orig = logits.slice_rows(0, b)?;
        let predictions = argmax_rows(&orig);
        let tape_bytes = tape.cached_bytes();
        let per_layer_bytes = tape.per_layer_bytes();
        let peak_bytes = tape.peak_cached_bytes();
        let stats = tape.bn_batch_stats().to_vec();

        let mut updated = 0;
        let loss_value;
        if method.scope().is_some() {
            let keep: Vec<bool> = match cfg.css {
                Some(th) => sample_entropies(&orig)?.iter().map(|&h| h < th).collect(),
                None => vec![true; b],
            };
            updated = keep.iter().filter(|&&k| k).count();
            let ent = masked_entropy_loss(&orig, &keep)?;
            let loss = match cfg.cr {
                Some(lambda) => {
                    let p_orig = softmax_rows(&orig)?;
                    let aug_logits = logits.slice_rows(b, 2 * b)?;
                    let cons = consistency_loss_logits(&p_orig, &aug_logits)?;
                    let grad = Tensor::concat_rows(&[&ent.grad, &cons.grad.map(|g| g * lambda as f32)])?;
                    LossOutput {
                        value: ent.value + lambda * cons.value,
                        grad,
                    }
                }
                None => ent,
            };
            if !loss.value.is_finite() || !loss.grad.all_finite() {
                return Err(Error::Diverged { batch: t });
            }
            loss_value = loss.value;
            if updated > 0 {
                let grads = tape.backward(&loss.grad)?;
                if !grads.all_finite() {
                    return Err(Error::Diverged { batch: t });
                }
                observe(t, &grads);
                opt.step(&mut model, &grads)?;
            } else {
                drop(tape);
            }
        } else {
            loss_value = entropy_loss(&orig)?.value;
            drop(tape);
        }
        model.absorb_batch_stats(&stats);

        outcomes.push(BatchOutcome {
            batch: t,
            segment: batch.segment,
            predictions,
            labels: batch.labels.clone(),
            loss: loss_value,
            tape_bytes,
            per_layer_bytes,
            prepass_bytes: importance.as_ref().map_or(0, |r| r.prepass_bytes),
            peak_bytes,
            updated_samples: updated,
            skipped_samples: b - updated,
            schedule: schedule.map(|s| s.ratios().to_vec()).unwrap_or_default(),
            importance,
        });
    }
    Ok((model, outcomes))
}
