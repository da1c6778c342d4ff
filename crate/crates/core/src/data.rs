//! Procedural glyph dataset, image corruptions, test streams and the SRGD file format.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 16;
pub const MIN_SIZE: usize = 16;

/// Labelled images `[N, C, H, W]` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: images.shape().to_vec(),
                reason: format!("expected [N, C, H, W] with N = {}", labels.len()),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
        }
        if !images.all_finite() {
            return Err(Error::NonFinite("dataset pixels".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.image_shape().iter().product();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        })
    }

    /// CRC32 over the SRGD encoding; identifies the data a model was trained on.
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(&encode_dataset(self).unwrap_or_default())
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Class glyph intensity (0 background, 1 foreground) at pixel `(x, y)`.
struct Glyph {
    class: usize,
    cx: f64,
    cy: f64,
    scale: f64,
    period: f64,
    phase: f64,
    size: f64,
    thickness: f64,
}

impl Glyph {
    fn sample(class: usize, n: usize, rng: &mut Rng) -> Self {
        let s = n as f64;
        let scale = s / 32.0;
        let jitter = s / 10.0;
        Glyph {
            class,
            cx: s / 2.0 + rng.uniform(-jitter, jitter),
            cy: s / 2.0 + rng.uniform(-jitter, jitter),
            scale,
            period: rng.uniform(5.0, 7.5) * scale,
            phase: rng.uniform(0.0, 8.0) * scale,
            size: rng.uniform(6.0, 9.5) * scale,
            thickness: rng.uniform(1.5, 2.5) * scale,
        }
    }

    fn at(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (p, ph, h, t) = (self.period, self.phase, self.size, self.thickness);
        let r = dx.hypot(dy);
        let band = |v: f64, p: f64| (v + ph).rem_euclid(p) < p / 2.0;
        let inside = dx.abs() < h + t && dy.abs() < h + t;
        match self.class {
            0 => inside && (dx.abs() < t || dy.abs() < t),
            1 => (r - h).abs() < t,
            2 => r < h * 0.8,
            3 => {
                let m = dx.abs().max(dy.abs());
                m <= h && m > h - 2.0 * t
            }
            4 => inside && ((dx - dy).abs() < 1.4 * t || (dx + dy).abs() < 1.4 * t),
            5 => dy.abs() < 1.5 * t && dx.abs() < h + t,
            6 => dx.abs() < 1.5 * t && dy.abs() < h + t,
            7 => band(y, p),
            8 => band(x, p),
            9 => {
                let c = 5.0 * self.scale;
                ((((x + ph) / c).floor() + ((y + ph) / c).floor()) as i64).rem_euclid(2) == 0
            }
            10 => band(x + y, p * 1.2),
            11 => band(x - y, p * 1.2),
            12 => dx.abs().max(dy.abs()) < h * 0.7,
            13 => dy.abs() <= h && dx.abs() < (dy + h) / 2.0,
            14 => (x + ph).rem_euclid(p) < 2.0 * self.scale && (y + ph).rem_euclid(p) < 2.0 * self.scale,
            _ => r.rem_euclid(p) < p / 2.0,
        }
    }
}

/// Render `n` class-balanced glyph images of `classes` classes at `size × size`
/// (one channel). Deterministic in `seed`; pixels are multiples of 1/255.
pub fn generate_clean(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!("classes must be in 1..={MAX_CLASSES}, got {classes}")));
    }
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("image size must be at least {MIN_SIZE}, got {size}")));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    Rng::new(derive_seed(seed, 0x1abe1)).shuffle(&mut labels);
    let mut pixels = Vec::with_capacity(n * size * size);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = Rng::new(derive_seed(seed, i as u64));
        let glyph = Glyph::sample(label, size, &mut rng);
        let fg = rng.uniform(0.75, 1.0);
        let bg = rng.uniform(0.0, 0.2);
        for y in 0..size {
            for x in 0..size {
                let on = glyph.at(x as f64 + 0.5, y as f64 + 0.5);
                let v = if on { fg } else { bg } + 0.03 * rng.normal();
                pixels.push(quantize(v as f32));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, size, size], pixels)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussNoise,
    Contrast,
    BoxBlur,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussNoise,
        CorruptionKind::Contrast,
        CorruptionKind::BoxBlur,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussNoise => "gauss-noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::BoxBlur => "box-blur",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind {s:?}")))
    }
}

/// A corruption at an integer severity. Severity 0 is the identity; the benchmark
/// uses 1 to 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u32, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 0..=5")));
        }
        Ok(Self { kind, severity, seed })
    }
}

/// Corrupt one `[C, H, W]` image. `index` identifies the sample so that noise is
/// deterministic per (sample, spec).
pub fn corrupt(image: &[f32], shape: &[usize], spec: &CorruptionSpec, index: u64) -> Vec<f32> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let s = spec.severity as usize;
    if s == 0 {
        return image.to_vec();
    }
    match spec.kind {
        CorruptionKind::GaussNoise => {
            let sigma = 0.04 * s as f64;
            let mut rng = Rng::new(derive_seed(spec.seed, index));
            image
                .iter()
                .map(|&v| (v as f64 + sigma * rng.normal()).clamp(0.0, 1.0) as f32)
                .collect()
        }
        CorruptionKind::Contrast => {
            let k = 1.0 - 0.15 * s as f32;
            image.iter().map(|&v| 0.5 + k * (v - 0.5)).collect()
        }
        CorruptionKind::BoxBlur => {
            let k = (2 * s).saturating_sub(1).min(h).min(w);
            if k <= 1 {
                return image.to_vec();
            }
            let r = k / 2;
            let mut out = vec![0.0f32; image.len()];
            for ch in 0..c {
                let plane = &image[ch * h * w..(ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (y0, y1) = (y.saturating_sub(r), (y + k - r).min(h));
                        let (x0, x1) = (x.saturating_sub(r), (x + k - r).min(w));
                        let mut sum = 0.0f64;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                sum += plane[yy * w + xx] as f64;
                            }
                        }
                        out[ch * h * w + y * w + x] = (sum / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                    }
                }
            }
            out
        }
        CorruptionKind::Pixelate => {
            if s <= 1 {
                return image.to_vec();
            }
            let mut out = vec![0.0f32; image.len()];
            for ch in 0..c {
                let plane = &image[ch * h * w..(ch + 1) * h * w];
                for by in (0..h).step_by(s) {
                    for bx in (0..w).step_by(s) {
                        let (y1, x1) = ((by + s).min(h), (bx + s).min(w));
                        let mut sum = 0.0f64;
                        for y in by..y1 {
                            for x in bx..x1 {
                                sum += plane[y * w + x] as f64;
                            }
                        }
                        let mean = (sum / ((y1 - by) * (x1 - bx)) as f64) as f32;
                        for y in by..y1 {
                            for x in bx..x1 {
                                out[ch * h * w + y * w + x] = mean;
                            }
                        }
                    }
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub corruption: CorruptionSpec,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub segments: Vec<Segment>,
    pub batch_size: usize,
}

impl StreamSpec {
    /// One segment per corruption kind, `count` samples each at `severity`.
    pub fn benchmark(count: usize, severity: u32, batch_size: usize, seed: u64) -> Result<Self> {
        let segments = CorruptionKind::ALL
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                Ok(Segment {
                    corruption: CorruptionSpec::new(kind, severity, derive_seed(seed, i as u64))?,
                    count,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { segments, batch_size })
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() || self.batch_size == 0 {
            return Err(Error::InvalidArgument("stream needs segments and a positive batch size".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.count == 0 || s.count % self.batch_size != 0 {
                return Err(Error::InvalidArgument(format!(
                    "segment {i} has {} samples, not a positive multiple of batch size {}",
                    s.count, self.batch_size
                )));
            }
        }
        Ok(())
    }

    /// Text manifest, one `kind severity count seed` line per segment.
    pub fn to_manifest(&self) -> String {
        self.segments
            .iter()
            .map(|s| {
                format!(
                    "{} {} {} {}\n",
                    s.corruption.kind, s.corruption.severity, s.count, s.corruption.seed
                )
            })
            .collect()
    }

    pub fn from_manifest(text: &str, batch_size: usize) -> Result<Self> {
        let mut segments = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| Error::InvalidArgument(format!("manifest line {}: {what}", n + 1));
            if fields.len() != 4 {
                return Err(bad("expected `kind severity count seed`"));
            }
            let kind = fields[0].parse()?;
            let severity = fields[1].parse().map_err(|_| bad("bad severity"))?;
            let count = fields[2].parse().map_err(|_| bad("bad count"))?;
            let seed = fields[3].parse().map_err(|_| bad("bad seed"))?;
            segments.push(Segment {
                corruption: CorruptionSpec::new(kind, severity, seed)?,
                count,
            });
        }
        let spec = Self { segments, batch_size };
        spec.validate()?;
        Ok(spec)
    }
}

/// Sizes of the default synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub size: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Samples per corruption segment.
    pub segment_count: usize,
    pub severity: u32,
    pub batch_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            size: 32,
            train_count: 1600,
            test_count: 800,
            segment_count: 400,
            severity: 5,
            batch_size: 20,
        }
    }
}

impl BenchmarkConfig {
    pub fn train_set(&self, seed: u64) -> Result<Dataset> {
        generate_clean(self.train_count, self.classes, self.size, derive_seed(seed, 1))
    }

    pub fn test_set(&self, seed: u64) -> Result<Dataset> {
        generate_clean(self.test_count, self.classes, self.size, derive_seed(seed, 2))
    }

    pub fn stream_spec(&self, seed: u64) -> Result<StreamSpec> {
        StreamSpec::benchmark(self.segment_count, self.severity, self.batch_size, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub batches: Vec<Batch>,
    /// Batch index at which each segment after the first begins.
    pub boundaries: Vec<usize>,
    pub segment_names: Vec<String>,
    pub classes: usize,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.batches.iter().map(|b| b.labels.len()).sum()
    }
}

/// Corrupted test stream: each segment draws its samples without replacement from
/// `clean` (kept in clean order), corrupts and quantizes them, then cuts batches.
pub fn build_stream(clean: &Dataset, spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let shape = clean.image_shape().to_vec();
    let mut batches = Vec::new();
    let mut boundaries = Vec::new();
    for (si, seg) in spec.segments.iter().enumerate() {
        if seg.count > clean.len() {
            return Err(Error::InvalidArgument(format!(
                "segment {si} needs {} samples but the clean set has {}",
                seg.count,
                clean.len()
            )));
        }
        if si > 0 {
            boundaries.push(batches.len());
        }
        let mut rows = Rng::new(derive_seed(seg.corruption.seed, 0x5eed)).sample_indices(clean.len(), seg.count);
        rows.sort_unstable();
        for chunk in rows.chunks(spec.batch_size) {
            let mut pixels = Vec::with_capacity(chunk.len() * clean.image(0).len());
            for &r in chunk {
                let img = corrupt(clean.image(r), &shape, &seg.corruption, r as u64);
                pixels.extend(img.into_iter().map(quantize));
            }
            let mut bshape = vec![chunk.len()];
            bshape.extend_from_slice(&shape);
            batches.push(Batch {
                images: Tensor::new(bshape, pixels)?,
                labels: chunk.iter().map(|&r| clean.labels()[r]).collect(),
                segment: si,
            });
        }
    }
    Ok(Stream {
        batches,
        boundaries,
        segment_names: spec
            .segments
            .iter()
            .map(|s| format!("{}-{}", s.corruption.kind, s.corruption.severity))
            .collect(),
        classes: clean.classes(),
    })
}

impl Stream {
    /// All stream samples in order as one dataset.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let parts: Vec<&Tensor<f32>> = self.batches.iter().map(|b| &b.images).collect();
        let images = Tensor::concat_rows(&parts)?;
        let labels = self.batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
        Dataset::new(images, labels, self.classes)
    }
}

/// Cut an already corrupted dataset into batches following the segment counts of `spec`.
pub fn stream_from_dataset(ds: &Dataset, spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let total: usize = spec.segments.iter().map(|s| s.count).sum();
    if total != ds.len() {
        return Err(Error::InvalidArgument(format!(
            "manifest describes {total} samples but the stream file holds {}",
            ds.len()
        )));
    }
    let mut batches = Vec::new();
    let mut boundaries = Vec::new();
    let mut start = 0;
    for (si, seg) in spec.segments.iter().enumerate() {
        if si > 0 {
            boundaries.push(batches.len());
        }
        for b in (start..start + seg.count).step_by(spec.batch_size) {
            let rows: Vec<usize> = (b..b + spec.batch_size).collect();
            batches.push(Batch {
                images: ds.images().select_rows(&rows)?,
                labels: rows.iter().map(|&r| ds.labels()[r]).collect(),
                segment: si,
            });
        }
        start += seg.count;
    }
    Ok(Stream {
        batches,
        boundaries,
        segment_names: spec
            .segments
            .iter()
            .map(|s| format!("{}-{}", s.corruption.kind, s.corruption.severity))
            .collect(),
        classes: ds.classes(),
    })
}

const SRGD_MAGIC: &[u8; 4] = b"SRGD";
const SRGD_VERSION: u16 = 1;

/// SRGD encoding: magic, version, count, H, W, C, K, then per sample a label byte
/// and the pixels as bytes in channel-major order.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let [c, h, w] = [ds.image_shape()[0], ds.image_shape()[1], ds.image_shape()[2]];
    let fits = |v: usize| u16::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u16")));
    let count = u32::try_from(ds.len()).map_err(|_| Error::Format("too many samples".into()))?;
    if ds.classes() > 256 {
        return Err(Error::Format("labels must fit in a byte".into()));
    }
    let mut out = Vec::with_capacity(18 + ds.len() * (1 + c * h * w));
    out.extend_from_slice(SRGD_MAGIC);
    out.extend_from_slice(&SRGD_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for v in [h, w, c, ds.classes()] {
        out.extend_from_slice(&fits(v)?.to_le_bytes());
    }
    for i in 0..ds.len() {
        out.push(ds.labels()[i] as u8);
        out.extend(ds.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 18 {
        return Err(Error::Format(format!("dataset truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != SRGD_MAGIC {
        return Err(Error::Format("bad magic: not an SRGD dataset".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let version = u16_at(4) as u16;
    if version != SRGD_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let (h, w, c, k) = (u16_at(10), u16_at(12), u16_at(14), u16_at(16));
    let per = c * h * w;
    let expected = 18 + count * (1 + per);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset length {} does not match header ({expected} expected)",
            bytes.len()
        )));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * per);
    for rec in bytes[18..].chunks(1 + per) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![count, c, h, w], pixels).map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(images, labels, k).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dataset(mut w: impl Write, ds: &Dataset) -> Result<()> {
    w.write_all(&encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(mut r: impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}
