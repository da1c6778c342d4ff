//! Layer kinds and their forward/backward kernels.
//!
//! Batches are row-major with the sample axis first: `[B, C, H, W]` for images and
//! `[B, F]` for features. Linear layers follow the batch-rows-first convention
//! `A_next = A * W^T + b` with `W: [out, in]`, so `dW = dA_next^T * A` and
//! `dA = dA_next * W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::Bitset;
use crate::tensor::{gemm_acc, transpose, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
        affine: bool,
    },
    Relu,
    MaxPool2d {
        size: usize,
    },
    AvgPool2d {
        size: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool",
            LayerKind::AvgPool2d { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Layers whose cached input feeds a weight gradient and may therefore be pruned.
    pub fn is_prunable(&self) -> bool {
        matches!(
            self,
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } | LayerKind::BatchNorm2d { .. }
        )
    }

    pub fn is_batchnorm(&self) -> bool {
        matches!(self, LayerKind::BatchNorm2d { .. })
    }

    pub fn has_weight(&self) -> bool {
        match self {
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => true,
            LayerKind::BatchNorm2d { affine, .. } => *affine,
            _ => false,
        }
    }

    pub fn has_bias(&self) -> bool {
        match self {
            LayerKind::Linear { .. } => true,
            LayerKind::Conv2d { bias, .. } => *bias,
            LayerKind::BatchNorm2d { affine, .. } => *affine,
            _ => false,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerKind::BatchNorm2d {
                channels,
                affine: true,
            } => Some(vec![channels]),
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Linear { out_features, .. } => Some(vec![out_features]),
            LayerKind::Conv2d {
                out_channels,
                bias: true,
                ..
            } => Some(vec![out_channels]),
            LayerKind::BatchNorm2d {
                channels,
                affine: true,
            } => Some(vec![channels]),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |reason: String| Error::InvalidShape {
            op: self.tag(),
            shape: input.to_vec(),
            reason,
        };
        match *self {
            LayerKind::Linear { in_features, out_features } => {
                if input != [in_features] {
                    return Err(bad(format!("expects [{in_features}]")));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad(format!("expects [{in_channels}, H, W]")));
                }
                let span = |d: usize| (d + 2 * padding).checked_sub(kernel).map(|x| x / stride + 1);
                match (span(input[1]), span(input[2])) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => Ok(vec![out_channels, h, w]),
                    _ => Err(bad("spatial size smaller than kernel".into())),
                }
            }
            LayerKind::BatchNorm2d { channels, .. } => {
                if input.is_empty() || input[0] != channels {
                    return Err(bad(format!("expects {channels} channels")));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { size } | LayerKind::AvgPool2d { size } => {
                if input.len() != 3 || input[1] < size || input[2] < size {
                    return Err(bad(format!("expects [C, H >= {size}, W >= {size}]")));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Analytic forward multiply-add count per sample, counting one multiply-add as 2 FLOPs.
    pub fn forward_flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let n_in: u64 = input.iter().product::<usize>() as u64;
        Ok(match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => 2 * (in_features * out_features) as u64,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => 2 * (out_channels * in_channels * kernel * kernel) as u64 * (out[1] * out[2]) as u64,
            // normalize (sub, mul) + affine (mul, add)
            LayerKind::BatchNorm2d { .. } => 4 * n_in,
            LayerKind::Relu => n_in,
            LayerKind::MaxPool2d { .. } | LayerKind::AvgPool2d { .. } => n_in,
            LayerKind::Flatten => 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn prunable(&self) -> bool {
        self.kind.is_prunable()
    }
}

// ---------------------------------------------------------------------------
// Linear

pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    w: &[T],
    b: Option<&[T]>,
    in_f: usize,
    out_f: usize,
) -> Vec<T> {
    let wt = transpose(out_f, in_f, w);
    let mut y = vec![T::zero(); batch * out_f];
    if let Some(b) = b {
        for row in y.chunks_mut(out_f) {
            row.copy_from_slice(b);
        }
    }
    gemm_acc(batch, in_f, out_f, x, &wt, &mut y);
    y
}

pub(crate) fn linear_backward_input<T: Scalar>(
    dy: &[T],
    batch: usize,
    w: &[T],
    in_f: usize,
    out_f: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * in_f];
    gemm_acc(batch, out_f, in_f, dy, w, &mut dx);
    dx
}

/// `(dW, db)` from the cached (possibly pruned) input `a`.
pub(crate) fn linear_backward_params<T: Scalar>(
    dy: &[T],
    a: &[T],
    batch: usize,
    in_f: usize,
    out_f: usize,
) -> (Vec<T>, Vec<T>) {
    let dyt = transpose(batch, out_f, dy);
    let mut dw = vec![T::zero(); out_f * in_f];
    gemm_acc(out_f, batch, in_f, &dyt, a, &mut dw);
    let db = (0..out_f)
        .map(|o| dyt[o * batch..(o + 1) * batch].iter().copied().sum())
        .collect();
    (dw, db)
}

// ---------------------------------------------------------------------------
// Conv2d

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(kind: &LayerKind, input: &[usize]) -> Result<Self> {
        let out = kind.output_shape(input)?;
        match *kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => Ok(Self {
                cin: in_channels,
                cout: out_channels,
                k: kernel,
                stride,
                pad: padding,
                h: input[1],
                w: input[2],
                ho: out[1],
                wo: out[2],
            }),
            _ => unreachable!("ConvGeom for non-conv layer"),
        }
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// `col[ckk, ho*wo]` for one sample.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let plane = self.plane();
        for c in 0..self.cin {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.src(oy, ox, ky, kx) {
                                Some((y, xx)) => xc[y * self.w + xx],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `col[ckk, ho*wo]` back into one sample's input gradient.
    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let plane = self.plane();
        for c in 0..self.cin {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.src(oy, ox, ky, kx) {
                                dxc[y * self.w + xx] = dxc[y * self.w + xx] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    batch: usize,
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let (ckk, plane) = (g.ckk(), g.plane());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let mut y = vec![T::zero(); batch * out_len];
    let mut col = vec![T::zero(); ckk * plane];
    for s in 0..batch {
        g.im2col(&x[s * in_len..(s + 1) * in_len], &mut col);
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        if let Some(b) = b {
            for (o, row) in ys.chunks_mut(plane).enumerate() {
                row.fill(b[o]);
            }
        }
        gemm_acc(g.cout, ckk, plane, w, &col, ys);
    }
    y
}

pub(crate) fn conv_backward_input<T: Scalar>(
    g: &ConvGeom,
    dy: &[T],
    batch: usize,
    w: &[T],
) -> Vec<T> {
    let (ckk, plane) = (g.ckk(), g.plane());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let wt = transpose(g.cout, ckk, w);
    let mut dx = vec![T::zero(); batch * in_len];
    let mut dcol = vec![T::zero(); ckk * plane];
    for s in 0..batch {
        dcol.fill(T::zero());
        gemm_acc(ckk, g.cout, plane, &wt, &dy[s * out_len..(s + 1) * out_len], &mut dcol);
        g.col2im(&dcol, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    dx
}

/// `(dW, db)` from the cached (possibly pruned) input `a`.
pub(crate) fn conv_backward_params<T: Scalar>(
    g: &ConvGeom,
    dy: &[T],
    a: &[T],
    batch: usize,
    with_bias: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (ckk, plane) = (g.ckk(), g.plane());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let mut dw = vec![T::zero(); g.cout * ckk];
    let mut col = vec![T::zero(); ckk * plane];
    for s in 0..batch {
        let xs = &a[s * in_len..(s + 1) * in_len];
        if xs.iter().all(|&v| v == T::zero()) {
            continue;
        }
        g.im2col(xs, &mut col);
        let colt = transpose(ckk, plane, &col);
        gemm_acc(g.cout, plane, ckk, &dy[s * out_len..(s + 1) * out_len], &colt, &mut dw);
    }
    let db = with_bias.then(|| {
        (0..g.cout)
            .map(|o| {
                let mut acc = T::zero();
                for s in 0..batch {
                    let base = s * out_len + o * plane;
                    acc = acc + dy[base..base + plane].iter().copied().sum::<T>();
                }
                acc
            })
            .collect()
    });
    (dw, db)
}

// ---------------------------------------------------------------------------
// BatchNorm

/// Per-channel normalization constants used by one BN forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnNormalization<T> {
    /// `1 / sqrt(var + eps)` of the statistics actually applied.
    pub inv_std: Vec<T>,
    /// `(mu - mu_batch) * inv_std`; zero for pure batch statistics.
    pub shift: Vec<T>,
    /// Weight of the batch statistics in the applied statistics (0 = frozen, 1 = pure batch).
    pub blend: f64,
}

/// Batch statistics of one BN forward, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub norm: BnNormalization<T>,
    pub stats: Option<BnBatchStats<T>>,
}

/// Forward BN over `[B, C, S]`. `blend == 0` normalizes with the running statistics alone.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward<T: Scalar>(
    layer: usize,
    x: &[T],
    batch: usize,
    channels: usize,
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
    running_mean: &[T],
    running_var: &[T],
    blend: f64,
) -> Result<BnForward<T>> {
    let spatial = x.len() / (batch * channels);
    let count = batch * spatial;
    if blend >= 1.0 && count == 1 {
        return Err(Error::DegenerateBatchNorm { layer });
    }
    let mut inv_std = Vec::with_capacity(channels);
    let mut shift = Vec::with_capacity(channels);
    let mut mus = Vec::with_capacity(channels);
    let mut stats = BnBatchStats {
        mean: Vec::with_capacity(channels),
        var: Vec::with_capacity(channels),
    };
    for c in 0..channels {
        let (mean_b, var_b) = if blend > 0.0 {
            let mut sum = 0.0f64;
            for s in 0..batch {
                let base = (s * channels + c) * spatial;
                for &v in &x[base..base + spatial] {
                    sum += v.as_f64();
                }
            }
            let mean = sum / count as f64;
            let mut sq = 0.0f64;
            for s in 0..batch {
                let base = (s * channels + c) * spatial;
                for &v in &x[base..base + spatial] {
                    let d = v.as_f64() - mean;
                    sq += d * d;
                }
            }
            (mean, sq / count as f64)
        } else {
            (0.0, 0.0)
        };
        let rm = running_mean[c].as_f64();
        let rv = running_var[c].as_f64();
        let mu = blend * mean_b + (1.0 - blend) * rm;
        let var = blend * var_b + (1.0 - blend) * rv;
        let s = 1.0 / (var + BN_EPS).sqrt();
        inv_std.push(T::of(s));
        shift.push(T::of((mu - mean_b) * s * if blend > 0.0 { 1.0 } else { 0.0 }));
        mus.push(mu);
        stats.mean.push(T::of(mean_b));
        let unbiased = if count > 1 {
            var_b * count as f64 / (count - 1) as f64
        } else {
            var_b
        };
        stats.var.push(T::of(unbiased));
    }
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            let mu = T::of(mus[c]);
            let is = inv_std[c];
            let g = gamma.map_or(T::one(), |g| g[c]);
            let b = beta.map_or(T::zero(), |b| b[c]);
            for i in base..base + spatial {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                y[i] = g * h + b;
            }
        }
    }
    Ok(BnForward {
        y,
        xhat,
        norm: BnNormalization {
            inv_std,
            shift,
            blend,
        },
        stats: (blend > 0.0).then_some(stats),
    })
}

/// `(dgamma, dbeta)` from the cached (possibly pruned) normalized input.
pub(crate) fn bn_backward_params<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    batch: usize,
    channels: usize,
) -> (Vec<T>, Vec<T>) {
    let spatial = dy.len() / (batch * channels);
    let mut dg = vec![0.0f64; channels];
    let mut db = vec![0.0f64; channels];
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            for i in base..base + spatial {
                dg[c] += (dy[i] * xhat[i]).as_f64();
                db[c] += dy[i].as_f64();
            }
        }
    }
    (
        dg.into_iter().map(T::of).collect(),
        db.into_iter().map(T::of).collect(),
    )
}

/// Input gradient of BN.
///
/// `dx = gamma * s * (dy - (a/n) * sum(dy) - (a/n) * (xhat + shift) * sum(dy * xhat))`
/// where `a` is the batch-statistics blend weight. With `a == 0` the normalized input
/// is not needed and `xhat` may be `None`.
pub(crate) fn bn_backward_input<T: Scalar>(
    dy: &[T],
    xhat: Option<&[T]>,
    batch: usize,
    channels: usize,
    gamma: Option<&[T]>,
    norm: &BnNormalization<T>,
) -> Vec<T> {
    let spatial = dy.len() / (batch * channels);
    let n = (batch * spatial) as f64;
    let a = norm.blend;
    let mut dx = vec![T::zero(); dy.len()];
    for c in 0..channels {
        let g = gamma.map_or(1.0, |g| g[c].as_f64());
        let s = norm.inv_std[c].as_f64();
        let (sum_dy, sum_dy_xhat) = match (a > 0.0, xhat) {
            (true, Some(xh)) => {
                let (mut sd, mut sdx) = (0.0f64, 0.0f64);
                for smp in 0..batch {
                    let base = (smp * channels + c) * spatial;
                    for i in base..base + spatial {
                        sd += dy[i].as_f64();
                        sdx += (dy[i] * xh[i]).as_f64();
                    }
                }
                (sd, sdx)
            }
            _ => (0.0, 0.0),
        };
        let scale = T::of(g * s);
        let mean_term = T::of(a * sum_dy / n);
        let var_term = T::of(a * sum_dy_xhat / n);
        let shift = norm.shift[c];
        for smp in 0..batch {
            let base = (smp * channels + c) * spatial;
            for i in base..base + spatial {
                let corr = match xhat {
                    Some(xh) if a > 0.0 => mean_term + (xh[i] + shift) * var_term,
                    _ => T::zero(),
                };
                dx[i] = scale * (dy[i] - corr);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Nonlinearities and pooling

pub(crate) fn relu_forward<T: Scalar>(x: &[T]) -> (Vec<T>, Bitset) {
    let mask = Bitset::from_fn(x.len(), |i| x[i] > T::zero());
    let y = x
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    (y, mask)
}

pub(crate) fn relu_backward<T: Scalar>(dy: &[T], mask: &Bitset) -> Vec<T> {
    dy.iter()
        .enumerate()
        .map(|(i, &g)| if mask.get(i) { g } else { T::zero() })
        .collect()
}

/// Non-overlapping `size x size` max pooling over `[N, H, W]` planes. The mask marks
/// the first maximal input position of every window.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<T>, Bitset) {
    let (ho, wo) = (h / size, w / size);
    let mut y = vec![T::zero(); planes * ho * wo];
    let mut mask = Bitset::new(x.len());
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = (oy * size + dy) * w + ox * size + dx;
                        if xp[i] > xp[best] {
                            best = i;
                        }
                    }
                }
                y[(p * ho + oy) * wo + ox] = xp[best];
                mask.set(p * h * w + best);
            }
        }
    }
    (y, mask)
}

pub(crate) fn maxpool_backward<T: Scalar>(
    dy: &[T],
    mask: &Bitset,
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<T> {
    let (ho, wo) = (h / size, w / size);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(p * ho + oy) * wo + ox];
                for dyy in 0..size {
                    for dxx in 0..size {
                        let i = p * h * w + (oy * size + dyy) * w + ox * size + dxx;
                        if mask.get(i) {
                            dx[i] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn avgpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<T> {
    let (ho, wo) = (h / size, w / size);
    let inv = T::of(1.0 / (size * size) as f64);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..size {
                    for dx in 0..size {
                        acc = acc + x[p * h * w + (oy * size + dy) * w + ox * size + dx];
                    }
                }
                y[(p * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    y
}

pub(crate) fn avgpool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<T> {
    let (ho, wo) = (h / size, w / size);
    let inv = T::of(1.0 / (size * size) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(p * ho + oy) * wo + ox] * inv;
                for dyy in 0..size {
                    for dxx in 0..size {
                        dx[p * h * w + (oy * size + dyy) * w + ox * size + dxx] = g;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let (y, mask) = relu_forward(&[-1.0f32, 2.0]);
        assert_eq!(y, vec![0.0, 2.0]);
        assert!(!mask.get(0) && mask.get(1));
    }

    #[test]
    fn batchnorm_batch_stats_example() {
        // single channel, two samples, values 0 and 2: mean 1, var 1
        let out = bn_forward(0, &[0.0f64, 2.0], 2, 1, Some(&[1.0]), Some(&[0.0]), &[0.0], &[1.0], 1.0)
            .unwrap();
        let expected = [-1.0 / (1.0 + BN_EPS).sqrt(), 1.0 / (1.0 + BN_EPS).sqrt()];
        assert!((out.y[0] - expected[0]).abs() < 1e-15);
        assert!((out.y[1] - expected[1]).abs() < 1e-15);
        assert!((out.y[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_single_value_is_degenerate() {
        let r = bn_forward(3, &[1.0f64], 1, 1, None, None, &[0.0], &[1.0], 1.0);
        assert!(matches!(r, Err(Error::DegenerateBatchNorm { layer: 3 })));
        assert!(bn_forward(3, &[1.0f64], 1, 1, None, None, &[0.0], &[1.0], 0.5).is_ok());
    }

    #[test]
    fn conv_identity_kernel() {
        let kind = LayerKind::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        };
        let g = ConvGeom::new(&kind, &[1, 5, 4]).unwrap();
        let x: Vec<f32> = (0..20).map(|i| i as f32 * 0.5 - 3.0).collect();
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        assert_eq!(conv_forward(&g, &x, 1, &w, None), x);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = [1.0f32, 3.0, 3.0, 0.0];
        let (y, mask) = maxpool_forward(&x, 1, 2, 2, 2);
        assert_eq!(y, vec![3.0]);
        assert_eq!(mask.iter_ones().collect::<Vec<_>>(), vec![1]);
        assert_eq!(maxpool_backward(&[5.0f32], &mask, 1, 2, 2, 2), vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn flops_formulas() {
        let lin = LayerKind::Linear {
            in_features: 10,
            out_features: 5,
        };
        assert_eq!(lin.forward_flops(&[10]).unwrap(), 100);
        let conv = LayerKind::Conv2d {
            in_channels: 2,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        };
        assert_eq!(conv.forward_flops(&[2, 8, 8]).unwrap(), 2 * 4 * 2 * 9 * 64);
    }
}
