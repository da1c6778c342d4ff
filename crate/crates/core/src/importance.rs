//! Per-layer importance metrics and the dynamic pruning schedule derived from them.
//!
//! Each adapted layer gets a gradient importance `G` (RMS of its weight gradient), a
//! memory importance `M = -ln(m / Σm)` from the size of its cached activation, and a
//! combined importance `I = (M / max M) · (G / max G)`. The pruning ratio of a layer is
//! `p = 1 - I / max I`, so the most important layer is never pruned.
//!
//! [`importance_prepass`] estimates `G` cheaply from a small random subset of the
//! batch under heavy static pruning, without touching the model.

use serde::{Deserialize, Serialize};

use crate::autograd::{forward, CachePolicy, GradientSet, ParamScope};
use crate::error::{Error, Result};
use crate::loss::LossOutput;
use crate::model::Model;
use crate::rng::Rng;
use crate::sparsity::PruningSchedule;
use crate::tensor::{Scalar, Tensor};

/// `G_i = sqrt(Σ Δw² / N_i)` for each listed layer, over weights only unless
/// `include_bias` is set.
pub fn gradient_importance<T: Scalar>(
    grads: &GradientSet<T>,
    layers: &[usize],
    include_bias: bool,
) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers to score".into()));
    }
    layers
        .iter()
        .map(|&l| {
            let g = grads.get(l).ok_or_else(|| Error::MissingRecord {
                layer: l,
                reason: "no gradient for an adapted layer".into(),
            })?;
            let mut values: Vec<&[T]> = vec![g.weight.data()];
            if include_bias {
                if let Some(b) = &g.bias {
                    values.push(b.data());
                }
            }
            let n: usize = values.iter().map(|v| v.len()).sum();
            if n == 0 {
                return Err(Error::MissingRecord {
                    layer: l,
                    reason: "empty gradient".into(),
                });
            }
            let ss: f64 = values.iter().flat_map(|v| v.iter()).map(|w| w.as_f64() * w.as_f64()).sum();
            let g = (ss / n as f64).sqrt();
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of layer {l}")));
            }
            Ok(g)
        })
        .collect()
}

/// `M_i = -log(m_i / Σ m)` using the supplied logarithm.
pub fn memory_importance_with(sizes: &[u64], log: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no layer sizes".into()));
    }
    if let Some(i) = sizes.iter().position(|&m| m == 0) {
        return Err(Error::InvalidArgument(format!("layer {i} has an empty activation")));
    }
    let total: f64 = sizes.iter().map(|&m| m as f64).sum();
    Ok(sizes.iter().map(|&m| -log(m as f64 / total)).collect())
}

/// `M_i = -ln(m_i / Σ m)` in nats.
pub fn memory_importance(sizes: &[u64]) -> Result<Vec<f64>> {
    memory_importance_with(sizes, f64::ln)
}

fn max_normalize(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter().map(|x| x / max).collect()
    } else {
        vec![1.0; v.len()]
    }
}

/// `I_i = Norm(M)_i · Norm(G)_i` with divide-by-max normalization; an all-zero
/// metric normalizes to all ones.
pub fn combine(g: &[f64], m: &[f64]) -> Result<Vec<f64>> {
    if g.len() != m.len() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            left: vec![g.len()],
            right: vec![m.len()],
        });
    }
    if g.iter().chain(m).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("importance metrics must be finite and nonnegative".into()));
    }
    let ng = max_normalize(g);
    let nm = max_normalize(m);
    Ok(nm.iter().zip(&ng).map(|(a, b)| a * b).collect())
}

/// `p_i = 1 - I_i / max I`.
pub fn pruning_ratios(importance: &[f64]) -> Result<PruningSchedule> {
    let max = importance.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateImportance);
    }
    PruningSchedule::new(importance.iter().map(|i| (1.0 - i / max) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrePassConfig {
    /// Samples drawn from the batch; `None` uses `max(1, batch / 8)`.
    pub subset_size: Option<usize>,
    /// Global static ratio applied during the pre-pass.
    pub prune_ratio: f64,
    pub seed: u64,
    /// Count bias gradients in `G`.
    pub include_bias: bool,
}

impl Default for PrePassConfig {
    fn default() -> Self {
        Self {
            subset_size: None,
            prune_ratio: 0.9,
            seed: 0,
            include_bias: false,
        }
    }
}

impl PrePassConfig {
    pub fn subset_for(&self, batch: usize) -> usize {
        self.subset_size.unwrap_or((batch / 8).max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub layer: usize,
    pub g: f64,
    pub m: u64,
    pub mem: f64,
    pub importance: f64,
    pub ratio: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub batch: usize,
    pub layers: Vec<LayerImportance>,
    pub subset_size: usize,
    pub prune_ratio: f64,
    pub seed: u64,
    /// Cached bytes of the pre-pass tape.
    pub prepass_bytes: usize,
    pub warning: Option<String>,
}

impl ImportanceReport {
    pub fn schedule(&self) -> PruningSchedule {
        PruningSchedule::new(self.layers.iter().map(|l| l.ratio).collect()).expect("ratios validated")
    }

    pub const CSV_HEADER: &'static str = "batch,layer,G,m,M,I,p";

    pub fn csv_rows(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| {
                format!(
                    "{},{},{:e},{},{:e},{:e},{:e}",
                    self.batch, l.layer, l.g, l.m, l.mem, l.importance, l.ratio
                )
            })
            .collect()
    }
}

/// Assemble a report from per-layer gradient importance and activation sizes.
///
/// A fully degenerate importance vector falls back to no pruning with a warning.
pub fn schedule_from_metrics(layers: &[usize], g: &[f64], m: &[u64]) -> Result<(Vec<LayerImportance>, Option<String>)> {
    let mem = memory_importance(m)?;
    let imp = combine(g, &mem)?;
    let (ratios, warning) = match pruning_ratios(&imp) {
        Ok(s) => (s.ratios().to_vec(), None),
        Err(Error::DegenerateImportance) => (
            vec![0.0; layers.len()],
            Some("all layer importances are zero; pruning disabled for this batch".to_string()),
        ),
        Err(e) => return Err(e),
    };
    Ok((
        layers
            .iter()
            .enumerate()
            .map(|(k, &layer)| LayerImportance {
                layer,
                g: g[k],
                m: m[k],
                mem: mem[k],
                importance: imp[k],
                ratio: ratios[k],
            })
            .collect(),
        warning,
    ))
}

/// Estimate the pruning schedule for `batch` with one forward-backward pass over a
/// random subset under static pruning. The model is not modified.
pub fn importance_prepass<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    cfg: &PrePassConfig,
    scope: &ParamScope,
    loss: impl Fn(&Tensor<T>) -> Result<LossOutput<T>>,
) -> Result<ImportanceReport> {
    let b = batch.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let k = cfg.subset_for(b);
    if k == 0 || k > b {
        return Err(Error::InvalidArgument(format!("pre-pass subset of {k} from a batch of {b}")));
    }
    if !(0.0..1.0).contains(&cfg.prune_ratio) {
        return Err(Error::InvalidRatio(cfg.prune_ratio));
    }
    let rows = Rng::new(cfg.seed).sample_indices(b, k);
    let subset = batch.select_rows(&rows)?;
    let policy = CachePolicy::static_ratio(cfg.prune_ratio).with_scope(scope.clone());
    let (y, tape) = forward(model, &subset, &policy, None)?;
    let prepass_bytes = tape.peak_cached_bytes();
    let l = loss(&y)?;
    let grads = tape.backward(&l.grad)?;

    let layers: Vec<usize> = model.layers().iter().filter(|s| scope.includes(s)).map(|s| s.id).collect();
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layer is adapted under this scope".into()));
    }
    let g = gradient_importance(&grads, &layers, cfg.include_bias)?;
    let shapes = model.shapes();
    let m: Vec<u64> = layers
        .iter()
        .map(|&i| (shapes[i].iter().product::<usize>() * b) as u64)
        .collect();
    let (entries, warning) = schedule_from_metrics(&layers, &g, &m)?;
    Ok(ImportanceReport {
        batch: 0,
        layers: entries,
        subset_size: k,
        prune_ratio: cfg.prune_ratio,
        seed: cfg.seed,
        prepass_bytes,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::LayerGrads;

    #[test]
    fn gradient_importance_examples() {
        let mut gs = GradientSet::<f64>::new();
        gs.insert(
            0,
            LayerGrads {
                weight: Tensor::from_vec(vec![3.0, 4.0]),
                bias: Some(Tensor::from_vec(vec![100.0])),
            },
        );
        gs.insert(
            1,
            LayerGrads {
                weight: Tensor::from_vec(vec![0.0, 0.0, 0.0]),
                bias: None,
            },
        );
        gs.insert(
            2,
            LayerGrads {
                weight: Tensor::from_vec(vec![-7.5]),
                bias: None,
            },
        );
        let g = gradient_importance(&gs, &[0, 1, 2], false).unwrap();
        assert!((g[0] - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 7.5);
        let with_bias = gradient_importance(&gs, &[0], true).unwrap();
        assert!((with_bias[0] - (10025.0f64 / 3.0).sqrt()).abs() < 1e-9);
        assert!(gradient_importance(&gs, &[5], false).is_err());
    }

    #[test]
    fn memory_importance_examples() {
        let m = memory_importance(&[100, 300, 600]).unwrap();
        for (got, want) in m.iter().zip([10f64.ln(), (10.0f64 / 3.0).ln(), (10.0f64 / 6.0).ln()]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(memory_importance(&[42]).unwrap(), vec![0.0]);
        assert!(memory_importance(&[1, 0]).is_err());
    }

    #[test]
    fn combine_and_ratio_examples() {
        assert_eq!(combine(&[1.0, 4.0], &[2.0, 1.0]).unwrap(), vec![0.25, 0.5]);
        assert_eq!(combine(&[3.0, 3.0], &[2.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(combine(&[0.0, 2.0], &[1.0, 1.0]).unwrap()[0], 0.0);
        assert_eq!(combine(&[0.0, 0.0], &[2.0, 1.0]).unwrap(), vec![1.0, 0.5]);
        assert_eq!(pruning_ratios(&[0.25, 0.5]).unwrap().ratios(), &[0.5, 0.0]);
        assert_eq!(pruning_ratios(&[0.3, 0.3]).unwrap().ratios(), &[0.0, 0.0]);
        assert_eq!(pruning_ratios(&[0.0, 0.7]).unwrap().ratios(), &[1.0, 0.0]);
        assert!(matches!(pruning_ratios(&[0.0, 0.0]), Err(Error::DegenerateImportance)));
    }
}
