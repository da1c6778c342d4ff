//! Online error, cache and FLOP accounting, and the serialized run report.

use serde::Serialize;

use crate::autograd::CacheMode;
use crate::error::{Error, Result};
use crate::harness::{AdaptationConfig, BatchOutcome, Method};
use crate::layers::LayerKind;
use crate::model::Model;
use crate::tensor::Scalar;

/// Backward cost of a layer whose weights are updated, relative to its forward cost.
pub const BACKWARD_MULTIPLIER: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineError {
    /// Class-balanced error per segment, in percent.
    pub per_segment: Vec<f64>,
    pub mean: f64,
    /// Plain accuracy over all samples, in percent.
    pub accuracy: f64,
    pub warnings: Vec<String>,
}

/// Per segment, the mean over classes of each class's error rate; classes absent
/// from a segment are skipped with a warning.
pub fn online_error(
    predictions: &[usize],
    labels: &[usize],
    segments: &[usize],
    num_segments: usize,
    classes: usize,
) -> Result<OnlineError> {
    if predictions.len() != labels.len() || labels.len() != segments.len() {
        return Err(Error::ShapeMismatch {
            op: "online_error",
            left: vec![predictions.len(), labels.len()],
            right: vec![segments.len()],
        });
    }
    let mut totals = vec![vec![0usize; classes]; num_segments];
    let mut wrong = vec![vec![0usize; classes]; num_segments];
    for ((&p, &l), &s) in predictions.iter().zip(labels).zip(segments) {
        if s >= num_segments || l >= classes {
            return Err(Error::InvalidArgument(format!("segment {s} or label {l} out of range")));
        }
        totals[s][l] += 1;
        if p != l {
            wrong[s][l] += 1;
        }
    }
    let mut warnings = Vec::new();
    let mut per_segment = Vec::with_capacity(num_segments);
    for s in 0..num_segments {
        if totals[s].iter().all(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("segment {s} is empty")));
        }
        let mut rates = Vec::new();
        for c in 0..classes {
            if totals[s][c] == 0 {
                warnings.push(format!("class {c} absent from segment {s}"));
            } else {
                rates.push(wrong[s][c] as f64 / totals[s][c] as f64);
            }
        }
        per_segment.push(100.0 * rates.iter().sum::<f64>() / rates.len() as f64);
    }
    let mean = per_segment.iter().sum::<f64>() / num_segments as f64;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(OnlineError {
        per_segment,
        mean,
        accuracy: 100.0 * correct as f64 / labels.len().max(1) as f64,
        warnings,
    })
}

/// FLOPs per test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsEstimate {
    pub forward: u64,
    pub backward: u64,
    pub prepass: u64,
    /// Extra forward work spent re-running checkpointed blocks.
    pub recompute: u64,
    pub backward_multiplier: u64,
}

impl FlopsEstimate {
    pub fn total(&self) -> u64 {
        self.forward + self.backward + self.prepass + self.recompute
    }
}

/// Analytic FLOP count of one adaptation step, per sample. Layers whose weights are
/// updated cost twice their forward in backward; other layers on the gradient path
/// cost once. Pruning does not change the count.
pub fn flops_estimate<T: Scalar>(model: &Model<T>, batch_size: usize, method: &Method, subset: usize) -> Result<FlopsEstimate> {
    let shapes = model.shapes();
    let fwd: Vec<u64> = model
        .layers()
        .iter()
        .zip(&shapes)
        .map(|(l, s)| l.kind.forward_flops(s))
        .collect::<Result<_>>()?;
    let forward: u64 = fwd.iter().sum();
    let Some(scope) = method.scope() else {
        return Ok(FlopsEstimate {
            forward,
            backward: 0,
            prepass: 0,
            recompute: 0,
            backward_multiplier: BACKWARD_MULTIPLIER,
        });
    };
    let trainable: Vec<bool> = model.layers().iter().map(|l| scope.includes(l)).collect();
    let first = trainable.iter().position(|&t| t).unwrap_or(fwd.len());
    let backward: u64 = (first..fwd.len())
        .map(|i| if trainable[i] { BACKWARD_MULTIPLIER * fwd[i] } else { fwd[i] })
        .sum();
    let prepass = if method.uses_prepass() && batch_size > 0 {
        (forward + backward) * subset as u64 / batch_size as u64
    } else {
        0
    };
    let recompute = if method.cache_mode() == CacheMode::Checkpoint {
        let start = model.layers()[..=first.min(fwd.len().saturating_sub(1))]
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. }))
            .unwrap_or(0);
        fwd[start..].iter().sum()
    } else {
        0
    };
    Ok(FlopsEstimate {
        forward,
        backward,
        prepass,
        recompute,
        backward_multiplier: BACKWARD_MULTIPLIER,
    })
}

/// Bytes of the largest single layer's input plus output during inference on a batch.
pub fn forward_peak_bytes<T: Scalar>(model: &Model<T>, batch_size: usize) -> usize {
    let shapes = model.shapes();
    shapes
        .windows(2)
        .map(|w| T::BYTES * batch_size * (w[0].iter().product::<usize>() + w[1].iter().product::<usize>()))
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub batch: usize,
    pub segment: usize,
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub updated_samples: usize,
    pub tape_bytes: usize,
    pub prepass_bytes: usize,
    pub cached_bytes: usize,
    pub peak_bytes: usize,
    pub schedule: Vec<f32>,
}

impl BatchRow {
    pub const CSV_HEADER: &'static str =
        "batch,segment,loss,correct,count,updated_samples,tape_bytes,prepass_bytes,cached_bytes,peak_bytes,schedule";

    pub fn from_outcome(o: &BatchOutcome) -> Self {
        Self {
            batch: o.batch,
            segment: o.segment,
            loss: o.loss,
            correct: o.correct(),
            count: o.labels.len(),
            updated_samples: o.updated_samples,
            tape_bytes: o.tape_bytes,
            prepass_bytes: o.prepass_bytes,
            cached_bytes: o.cached_bytes(),
            peak_bytes: o.peak_bytes,
            schedule: o.schedule.clone(),
        }
    }

    pub fn csv_line(&self) -> String {
        let schedule: Vec<String> = self.schedule.iter().map(|p| p.to_string()).collect();
        format!(
            "{},{},{:e},{},{},{},{},{},{},{},{}",
            self.batch,
            self.segment,
            self.loss,
            self.correct,
            self.count,
            self.updated_samples,
            self.tape_bytes,
            self.prepass_bytes,
            self.cached_bytes,
            self.peak_bytes,
            schedule.join(";")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub config: AdaptationConfig,
    pub segments: Vec<String>,
    pub segment_errors: Vec<f64>,
    pub mean_error: f64,
    pub accuracy: f64,
    /// Mean over batches of adaptation cache plus pre-pass cache.
    pub avg_cache_bytes: f64,
    pub peak_cache_bytes: usize,
    pub avg_prepass_bytes: f64,
    pub forward_peak_bytes: usize,
    pub parameter_bytes: usize,
    pub flops_per_sample: FlopsEstimate,
    pub warnings: Vec<String>,
    pub batches: Vec<BatchRow>,
}

impl RunReport {
    pub fn build(
        model: &Model<f32>,
        cfg: &AdaptationConfig,
        segment_names: &[String],
        classes: usize,
        outcomes: &[BatchOutcome],
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument("no batches to report".into()));
        }
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut segs = Vec::new();
        for o in outcomes {
            preds.extend_from_slice(&o.predictions);
            labels.extend_from_slice(&o.labels);
            segs.extend(std::iter::repeat_n(o.segment, o.labels.len()));
        }
        let err = online_error(&preds, &labels, &segs, segment_names.len(), classes)?;
        let n = outcomes.len() as f64;
        let batch_size = outcomes[0].labels.len();
        let subset = cfg.prepass.subset_for(batch_size);
        let mut warnings = err.warnings.clone();
        warnings.extend(
            outcomes
                .iter()
                .filter_map(|o| o.importance.as_ref()?.warning.as_ref().map(|w| format!("batch {}: {w}", o.batch))),
        );
        Ok(Self {
            method: cfg.method.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            segments: segment_names.to_vec(),
            segment_errors: err.per_segment,
            mean_error: err.mean,
            accuracy: err.accuracy,
            avg_cache_bytes: outcomes.iter().map(|o| o.cached_bytes() as f64).sum::<f64>() / n,
            peak_cache_bytes: outcomes.iter().map(|o| o.peak_bytes.max(o.prepass_bytes)).max().unwrap_or(0),
            avg_prepass_bytes: outcomes.iter().map(|o| o.prepass_bytes as f64).sum::<f64>() / n,
            forward_peak_bytes: forward_peak_bytes(model, batch_size),
            parameter_bytes: model.parameter_bytes(),
            flops_per_sample: flops_estimate(model, batch_size, &cfg.method, subset)?,
            warnings,
            batches: outcomes.iter().map(BatchRow::from_outcome).collect(),
        })
    }

    pub fn batches_csv(&self) -> String {
        let mut out = String::from(BatchRow::CSV_HEADER);
        out.push('\n');
        for row in &self.batches {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch};

    #[test]
    fn error_examples() {
        let e = online_error(&[0, 1, 2], &[0, 1, 2], &[0, 0, 0], 1, 3).unwrap();
        assert_eq!(e.per_segment, vec![0.0]);
        let e = online_error(&[1, 0, 1, 1], &[0, 0, 1, 1], &[0; 4], 1, 2).unwrap();
        assert_eq!(e.per_segment, vec![25.0]);
        let e = online_error(&[1, 0, 0, 0, 0, 1, 1, 1, 1, 1], &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1], &[0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 1, 2).unwrap();
        assert!((e.per_segment[0] - 10.0).abs() < 1e-12);
        let e = online_error(&[1, 0, 0, 0], &[0, 0, 0, 0], &[0, 0, 1, 1], 2, 2).unwrap();
        assert_eq!(e.per_segment, vec![50.0, 0.0]);
        assert_eq!(e.mean, 25.0);
        assert!(!e.warnings.is_empty());
        assert!(online_error(&[0], &[0], &[0], 2, 2).is_err());
    }

    #[test]
    fn flops_rules() {
        let m: Model<f32> = Model::new(
            vec![10],
            vec![LayerKind::Linear {
                in_features: 10,
                out_features: 5,
            }],
        )
        .unwrap();
        let f = flops_estimate(&m, 1, &Method::Source, 0).unwrap();
        assert_eq!(f.forward, 100);
        let cnn = build_model::<f32>(Arch::CnnSmall, [1, 32, 32], 8, 0).unwrap();
        assert_eq!(flops_estimate(&cnn, 20, &Method::BnStat, 2).unwrap().backward, 0);
        assert_eq!(
            flops_estimate(&cnn, 20, &Method::Static(0.7), 2).unwrap(),
            flops_estimate(&cnn, 20, &Method::FullTuning, 2).unwrap()
        );
        let s = flops_estimate(&cnn, 20, &Method::Surgeon, 2).unwrap();
        assert_eq!(s.prepass, (s.forward + s.backward) / 10);
        assert!(flops_estimate(&cnn, 20, &Method::GradientCheckpoint, 2).unwrap().recompute > 0);
    }
}
