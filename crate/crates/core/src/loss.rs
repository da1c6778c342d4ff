//! Classification losses over `[B, C]` logits, each returning the loss value and its
//! gradient with respect to the logits.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Value and logit gradient of a loss.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

fn rows<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "loss",
            shape: logits.shape().to_vec(),
            reason: "expected [batch, classes] logits".into(),
        });
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// Row-wise softmax computed in f64 with the max subtracted.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (b, c) = rows(logits)?;
    Ok((0..b)
        .map(|r| {
            let z = &logits.data()[r * c..(r + 1) * c];
            let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let e: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let p = softmax_rows(logits)?;
    Ok(Tensor::from_parts(
        logits.shape().to_vec(),
        p.into_iter().flatten().map(T::of).collect(),
    ))
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Shannon entropy (nats) of each row's softmax.
pub fn sample_entropies<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(softmax_rows(logits)?.iter().map(|p| entropy_of(p)).collect())
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean prediction entropy over the rows flagged in `keep`. The mean is taken over
/// kept rows; with none kept the loss is 0.
pub fn masked_entropy_loss<T: Scalar>(logits: &Tensor<T>, keep: &[bool]) -> Result<LossOutput<T>> {
    let (b, c) = rows(logits)?;
    if keep.len() != b {
        return Err(Error::ShapeMismatch {
            op: "masked_entropy_loss",
            left: vec![b],
            right: vec![keep.len()],
        });
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let mut grad = vec![T::zero(); b * c];
    if kept == 0 {
        return Ok(LossOutput {
            value: 0.0,
            grad: Tensor::from_parts(vec![b, c], grad),
        });
    }
    let scale = 1.0 / kept as f64;
    let mut total = 0.0;
    for (r, p) in softmax_rows(logits)?.iter().enumerate() {
        if !keep[r] {
            continue;
        }
        let h = entropy_of(p);
        total += h;
        // dH/dz_c = -p_c (ln p_c + H)
        for (k, &pk) in p.iter().enumerate() {
            let lp = if pk > 0.0 { pk.ln() } else { 0.0 };
            grad[r * c + k] = T::of(-pk * (lp + h) * scale);
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad: Tensor::from_parts(vec![b, c], grad),
    })
}

/// Mean prediction entropy `-Σ p log p`.
pub fn entropy_loss<T: Scalar>(logits: &Tensor<T>) -> Result<LossOutput<T>> {
    let b = rows(logits)?.0;
    masked_entropy_loss(logits, &vec![true; b])
}

/// Mean cross-entropy against integer labels.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let (b, c) = rows(logits)?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss",
            left: vec![b],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    let mut grad = vec![T::zero(); b * c];
    for (r, p) in softmax_rows(logits)?.iter().enumerate() {
        total -= p[labels[r]].max(f64::MIN_POSITIVE).ln();
        for (k, &pk) in p.iter().enumerate() {
            let target = if k == labels[r] { 1.0 } else { 0.0 };
            grad[r * c + k] = T::of((pk - target) * scale);
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad: Tensor::from_parts(vec![b, c], grad),
    })
}

fn check_distribution(p: &[f64], row: usize) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "row {row} of the reference distribution sums to {s}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy `-Σ p_orig log p_aug`. `p_orig` is a fixed soft label.
pub fn consistency_loss(p_orig: &[Vec<f64>], p_aug: &[Vec<f64>]) -> Result<f64> {
    if p_orig.len() != p_aug.len() || p_orig.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "consistency_loss",
            left: vec![p_orig.len()],
            right: vec![p_aug.len()],
        });
    }
    let mut total = 0.0;
    for (r, (po, pa)) in p_orig.iter().zip(p_aug).enumerate() {
        check_distribution(po, r)?;
        check_distribution(pa, r)?;
        if po.len() != pa.len() {
            return Err(Error::ShapeMismatch {
                op: "consistency_loss",
                left: vec![po.len()],
                right: vec![pa.len()],
            });
        }
        for (&o, &a) in po.iter().zip(pa) {
            if o > 0.0 {
                total -= o * a.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    Ok(total / p_orig.len() as f64)
}

/// Consistency loss on augmented-view logits with its gradient `(p_aug - p_orig) / B`.
pub fn consistency_loss_logits<T: Scalar>(p_orig: &[Vec<f64>], aug_logits: &Tensor<T>) -> Result<LossOutput<T>> {
    let (b, c) = rows(aug_logits)?;
    let p_aug = softmax_rows(aug_logits)?;
    let value = consistency_loss(p_orig, &p_aug)?;
    let mut grad = vec![T::zero(); b * c];
    for r in 0..b {
        for k in 0..c {
            grad[r * c + k] = T::of((p_aug[r][k] - p_orig[r][k]) / b as f64);
        }
    }
    Ok(LossOutput {
        value,
        grad: Tensor::from_parts(vec![b, c], grad),
    })
}
