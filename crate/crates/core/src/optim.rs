//! SGD with momentum and Adam over a model's weight and bias tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::GradientSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: 1e-3, momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer with per-tensor state keyed by (layer, is-bias).
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    state: BTreeMap<(usize, bool), Slot<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update; only layers present in `grads` change.
    pub fn step(&mut self, model: &mut Model<T>, grads: &GradientSet<T>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (layer, g) in grads.iter() {
            let params = model.params_mut().get_mut(layer).ok_or_else(|| Error::MissingRecord {
                layer,
                reason: "gradient for a layer the model does not have".into(),
            })?;
            let pairs = [(false, params.weight.as_mut(), Some(&g.weight)), (true, params.bias.as_mut(), g.bias.as_ref())];
            for (is_bias, w, dw) in pairs {
                let (Some(w), Some(dw)) = (w, dw) else { continue };
                check_shape(w, dw)?;
                let slot = self.state.entry((layer, is_bias)).or_insert_with(|| Slot {
                    m: vec![T::zero(); w.len()],
                    v: Vec::new(),
                });
                match self.cfg {
                    OptimizerConfig::Sgd { lr, momentum } => {
                        let (lr, mu) = (T::of(lr), T::of(momentum));
                        for ((w, &g), b) in w.data_mut().iter_mut().zip(dw.data()).zip(slot.m.iter_mut()) {
                            *b = mu * *b + g;
                            *w = *w - lr * *b;
                        }
                    }
                    OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                        if slot.v.is_empty() {
                            slot.v = vec![T::zero(); w.len()];
                        }
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        let (b1, b2) = (T::of(beta1), T::of(beta2));
                        for (((w, &g), m), v) in w
                            .data_mut()
                            .iter_mut()
                            .zip(dw.data())
                            .zip(slot.m.iter_mut())
                            .zip(slot.v.iter_mut())
                        {
                            *m = b1 * *m + (T::one() - b1) * g;
                            *v = b2 * *v + (T::one() - b2) * g * g;
                            let mhat = m.as_f64() / c1;
                            let vhat = v.as_f64() / c2;
                            *w = T::of(w.as_f64() - lr * mhat / (vhat.sqrt() + eps));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_shape<T: Scalar>(w: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "optimizer_step",
            left: w.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::LayerGrads;
    use crate::layers::LayerKind;

    fn one_weight_model(w: f64) -> Model<f64> {
        let mut m = Model::new(
            vec![1],
            vec![LayerKind::Linear {
                in_features: 1,
                out_features: 1,
            }],
        )
        .unwrap();
        m.params_mut()[0].weight.as_mut().unwrap().data_mut()[0] = w;
        m
    }

    fn grads(g: f64) -> GradientSet<f64> {
        let mut gs = GradientSet::new();
        gs.insert(
            0,
            LayerGrads {
                weight: Tensor::new(vec![1, 1], vec![g]).unwrap(),
                bias: None,
            },
        );
        gs
    }

    #[test]
    fn sgd_examples() {
        let mut m = one_weight_model(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.0 }).unwrap();
        opt.step(&mut m, &grads(2.0)).unwrap();
        assert!((m.params()[0].weight.as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);

        let before = one_weight_model(1.0);
        let mut m = before.clone();
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.0, momentum: 0.9 }).unwrap();
        opt.step(&mut m, &grads(5.0)).unwrap();
        assert_eq!(m.params(), before.params());

        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.9 }).unwrap();
        opt.step(&mut m, &grads(0.0)).unwrap();
        assert_eq!(m.params(), before.params());
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = one_weight_model(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 1.0, momentum: 0.5 }).unwrap();
        opt.step(&mut m, &grads(1.0)).unwrap();
        opt.step(&mut m, &grads(1.0)).unwrap();
        // buffers 1 then 1.5
        assert_eq!(m.params()[0].weight.as_ref().unwrap().data()[0], -2.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = one_weight_model(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
        opt.step(&mut m, &grads(3.0)).unwrap();
        let w = m.params()[0].weight.as_ref().unwrap().data()[0];
        assert!((w - 0.99).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_settings_and_shapes() {
        assert!(Optimizer::<f64>::new(OptimizerConfig::Sgd { lr: -1.0, momentum: 0.0 }).is_err());
        let mut m = one_weight_model(1.0);
        let mut gs = GradientSet::new();
        gs.insert(
            0,
            LayerGrads {
                weight: Tensor::from_vec(vec![1.0, 2.0]),
                bias: None,
            },
        );
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert!(opt.step(&mut m, &gs).is_err());
    }
}
