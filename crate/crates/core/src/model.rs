//! Sequential models: layer specs, parameters, running statistics and the reference
//! CNN architectures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BnBatchStats, LayerKind, LayerSpec, BN_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// How batch-norm layers obtain their normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BnMode {
    /// Frozen running statistics (inference with the source model).
    Eval,
    /// `blend * batch + (1 - blend) * running`; `blend == 1` is pure batch statistics.
    Batch { blend: f64 },
}

impl BnMode {
    pub fn blend(self) -> f64 {
        match self {
            BnMode::Eval => 0.0,
            BnMode::Batch { blend } => blend,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
}

impl<T> Default for LayerParams<T> {
    fn default() -> Self {
        Self {
            weight: None,
            bias: None,
            running_mean: None,
            running_var: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: String,
    pub seed: u64,
    pub epochs: u32,
    /// CRC32 of the encoded training set, 0 when untrained.
    pub dataset_fingerprint: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams<T>>,
    bn_mode: BnMode,
    pub meta: ModelMeta,
}

impl<T: Scalar> Model<T> {
    /// Build a model with zero weights, unit BN scale and unit running variance.
    pub fn new(input_shape: Vec<usize>, kinds: Vec<LayerKind>) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(kinds.len());
        let mut params = Vec::with_capacity(kinds.len());
        for (id, kind) in kinds.into_iter().enumerate() {
            shape = kind.output_shape(&shape)?;
            let mut p = LayerParams {
                weight: kind.weight_shape().map(|s| Tensor::zeros(&s)),
                bias: kind.bias_shape().map(|s| Tensor::zeros(&s)),
                ..Default::default()
            };
            if let LayerKind::BatchNorm2d { channels, affine } = kind {
                if affine {
                    p.weight = Some(Tensor::full(&[channels], T::one()));
                }
                p.running_mean = Some(Tensor::zeros(&[channels]));
                p.running_var = Some(Tensor::full(&[channels], T::one()));
            }
            layers.push(LayerSpec { id, kind });
            params.push(p);
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            bn_mode: BnMode::Eval,
            meta: ModelMeta::default(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_mode = mode;
    }

    pub fn with_bn_mode(mut self, mode: BnMode) -> Self {
        self.bn_mode = mode;
        self
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.kind.is_batchnorm())
    }

    /// Per-sample input shape of every layer, plus the final output shape at the end.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l
                .kind
                .output_shape(shapes.last().unwrap())
                .expect("validated at construction");
            shapes.push(next);
        }
        shapes
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().pop().unwrap()
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight.as_ref().map_or(0, |t| t.len()) + p.bias.as_ref().map_or(0, |t| t.len()))
            .sum()
    }

    /// Bytes of all trainable parameter tensors.
    pub fn parameter_bytes(&self) -> usize {
        T::BYTES * self.parameter_count()
    }

    /// Indices of layers whose cached input is prunable.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.prunable())
            .map(|l| l.id)
            .collect()
    }

    /// Fold one forward pass's batch statistics into the running averages.
    pub fn absorb_batch_stats(&mut self, stats: &[Option<BnBatchStats<T>>]) {
        let m = BN_MOMENTUM;
        for (p, s) in self.params.iter_mut().zip(stats) {
            let (Some(s), Some(rm), Some(rv)) = (s, p.running_mean.as_mut(), p.running_var.as_mut()) else {
                continue;
            };
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = T::of((1.0 - m) * r.as_f64() + m * b.as_f64());
            }
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = T::of((1.0 - m) * r.as_f64() + m * b.as_f64());
            }
        }
    }

    /// Convert every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |t: &Option<Tensor<T>>| t.as_ref().map(|t| t.cast::<U>());
        Model {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weight: conv(&p.weight),
                    bias: conv(&p.bias),
                    running_mean: conv(&p.running_mean),
                    running_var: conv(&p.running_var),
                })
                .collect(),
            bn_mode: self.bn_mode,
            meta: self.meta.clone(),
        }
    }

    /// Fan-in scaled uniform initialization: conv weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// linear weights and all biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform(&mut self, seed: u64) {
        let root = Rng::new(seed);
        for (i, (spec, p)) in self.layers.iter().zip(self.params.iter_mut()).enumerate() {
            let fan_in = match spec.kind {
                LayerKind::Linear { in_features, .. } => in_features,
                LayerKind::Conv2d {
                    in_channels, kernel, ..
                } => in_channels * kernel * kernel,
                _ => continue,
            };
            let mut rng = root.split(i as u64);
            let w_bound = match spec.kind {
                LayerKind::Conv2d { .. } => (6.0 / fan_in as f64).sqrt(),
                _ => 1.0 / (fan_in as f64).sqrt(),
            };
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            if let Some(w) = p.weight.as_mut() {
                for v in w.data_mut() {
                    *v = T::of(rng.uniform(-w_bound, w_bound));
                }
            }
            if let Some(b) = p.bias.as_mut() {
                for v in b.data_mut() {
                    *v = T::of(rng.uniform(-b_bound, b_bound));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    CnnSmall,
    CnnWide,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::CnnSmall => "cnn-small",
            Arch::CnnWide => "cnn-wide",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-small" => Ok(Arch::CnnSmall),
            "cnn-wide" => Ok(Arch::CnnWide),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture '{other}' (expected cnn-small or cnn-wide)"
            ))),
        }
    }
}

fn conv3(cin: usize, cout: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 1,
        padding: 1,
        bias: false,
    }
}

fn bn(c: usize) -> LayerKind {
    LayerKind::BatchNorm2d {
        channels: c,
        affine: true,
    }
}

/// Layer list of a reference architecture for `[channels, size, size]` inputs.
pub fn arch_layers(arch: Arch, channels: usize, size: usize, classes: usize) -> Vec<LayerKind> {
    let width = match arch {
        Arch::CnnSmall => 16,
        Arch::CnnWide => 32,
    };
    let pool = LayerKind::MaxPool2d { size: 2 };
    vec![
        conv3(channels, width),
        bn(width),
        LayerKind::Relu,
        conv3(width, width),
        bn(width),
        LayerKind::Relu,
        pool.clone(),
        conv3(width, 2 * width),
        bn(2 * width),
        LayerKind::Relu,
        pool,
        LayerKind::Flatten,
        LayerKind::Linear {
            in_features: 2 * width * (size / 4) * (size / 4),
            out_features: classes,
        },
    ]
}

/// Deterministically initialized reference CNN.
pub fn build_model<T: Scalar>(
    arch: Arch,
    input_shape: [usize; 3],
    classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    let [c, h, w] = input_shape;
    if h != w || h < 4 {
        return Err(Error::InvalidArgument(format!(
            "reference CNNs expect square inputs of at least 4x4, got {h}x{w}"
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("classes must be positive".into()));
    }
    let mut model = Model::new(vec![c, h, w], arch_layers(arch, c, h, classes))?;
    model.init_uniform(seed);
    model.meta = ModelMeta {
        arch: arch.name().into(),
        seed,
        epochs: 0,
        dataset_fingerprint: 0,
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_small_shapes() {
        let m = build_model::<f32>(Arch::CnnSmall, [1, 32, 32], 8, 1).unwrap();
        assert_eq!(m.output_shape(), vec![8]);
        assert_eq!(m.prunable_layers().len(), 7);
        assert!(m.has_batchnorm());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model::<f32>(Arch::CnnSmall, [1, 32, 32], 8, 9).unwrap();
        let b = build_model::<f32>(Arch::CnnSmall, [1, 32, 32], 8, 9).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(Arch::CnnSmall, [1, 32, 32], 8, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wide_doubles_channels() {
        let s = build_model::<f32>(Arch::CnnSmall, [1, 32, 32], 8, 1).unwrap();
        let w = build_model::<f32>(Arch::CnnWide, [1, 32, 32], 8, 1).unwrap();
        assert_eq!(s.shapes()[1], vec![16, 32, 32]);
        assert_eq!(w.shapes()[1], vec![32, 32, 32]);
    }

    #[test]
    fn unknown_arch() {
        assert!("resnet".parse::<Arch>().is_err());
        assert_eq!("cnn-wide".parse::<Arch>().unwrap(), Arch::CnnWide);
    }

    #[test]
    fn running_var_positive() {
        let m = build_model::<f32>(Arch::CnnSmall, [1, 16, 16], 4, 1).unwrap();
        for p in m.params() {
            if let Some(rv) = &p.running_var {
                assert!(rv.data().iter().all(|&v| v > 0.0));
            }
        }
    }
}
