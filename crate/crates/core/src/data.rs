//! Moving-sprite clips and the on-disk dataset format.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const DATASET_MAGIC: &[u8; 8] = b"VMAPDS1\0";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sprite {
    Square,
    Circle,
}

/// Everything needed to render one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSpec {
    pub sprite: Sprite,
    pub size: usize,
    /// Top-left corner `(x, y)` at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame `(dx, dy)`; positive `dy` moves down.
    pub velocity: (f64, f64),
    pub texture_seed: u64,
    pub label: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipDims {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipDims {
    pub fn numel(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }
}

/// Folds `p` into `[0, span]` by mirroring at both walls.
fn reflect(p: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let m = p.rem_euclid(2.0 * span);
    if m > span {
        2.0 * span - m
    } else {
        m
    }
}

/// Renders `spec` into `[T, C, H, W]` with values in `[0, 1]`.
///
/// The background is a static noise image and the sprite keeps a fixed texture,
/// so a still sprite gives identical frames.
pub fn gen_clip(spec: &ClipSpec, dims: ClipDims) -> Result<Tensor> {
    let ClipDims { frames, channels, height, width } = dims;
    if spec.size == 0 || spec.size > height || spec.size > width {
        return Err(Error::Spec(format!("sprite size {} does not fit a {height}x{width} frame", spec.size)));
    }
    let mut rng = Rng::new(spec.texture_seed);
    let plane = height * width;
    let background: Vec<f64> = (0..channels * plane).map(|_| rng.uniform(0.0, 0.15)).collect();
    let s = spec.size;
    let texture: Vec<f64> = (0..channels * s * s).map(|_| rng.uniform(0.6, 1.0)).collect();
    let inside = |i: usize, j: usize| match spec.sprite {
        Sprite::Square => true,
        Sprite::Circle => {
            let c = (s as f64 - 1.0) / 2.0;
            let (di, dj) = (i as f64 - c, j as f64 - c);
            di * di + dj * dj <= (s as f64 / 2.0).powi(2)
        }
    };
    let (span_x, span_y) = ((width - s) as f64, (height - s) as f64);
    let mut data = Vec::with_capacity(dims.numel());
    for t in 0..frames {
        let x = reflect(spec.start.0 + t as f64 * spec.velocity.0, span_x).round() as usize;
        let y = reflect(spec.start.1 + t as f64 * spec.velocity.1, span_y).round() as usize;
        let mut frame = background.clone();
        for c in 0..channels {
            for i in 0..s {
                for j in 0..s {
                    if inside(i, j) {
                        frame[c * plane + (y + i) * width + x + j] = texture[(c * s + i) * s + j];
                    }
                }
            }
        }
        data.extend(frame);
    }
    Tensor::new(&[frames, channels, height, width], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Pretrain,
    Labeled,
}

/// Draws the spec of clip `index`. Labeled clips get class `index mod classes`,
/// a heading within the middle half of that class's angular sector and a start
/// that keeps the sprite in frame without bouncing; pretraining clips move in
/// any direction and bounce.
pub fn clip_spec(kind: DatasetKind, index: usize, classes: usize, base_seed: u64, dims: ClipDims) -> ClipSpec {
    let mut rng = Rng::new(base_seed.wrapping_add(index as u64));
    let side = dims.height.min(dims.width);
    let lo = (side / 5).max(1);
    let hi = (side / 3).max(lo);
    let size = lo + rng.below(hi - lo + 1);
    let sprite = if rng.below(2) == 0 { Sprite::Square } else { Sprite::Circle };
    let (span_x, span_y) = ((dims.width - size) as f64, (dims.height - size) as f64);
    let mut speed = rng.uniform(1.5, 3.0);
    let texture_seed = rng.next_u64();
    match kind {
        DatasetKind::Pretrain => {
            let angle = rng.uniform(0.0, 2.0 * PI);
            let start = (rng.uniform(0.0, span_x), rng.uniform(0.0, span_y));
            ClipSpec {
                sprite,
                size,
                start,
                velocity: (speed * angle.cos(), speed * angle.sin()),
                texture_seed,
                label: None,
            }
        }
        DatasetKind::Labeled => {
            let class = index % classes;
            let width = 2.0 * PI / classes as f64;
            let angle = class as f64 * width + rng.uniform(-0.25 * width, 0.25 * width);
            let travel = dims.frames.saturating_sub(1).max(1) as f64;
            speed = speed.min(span_x.min(span_y) / travel).max(0.5);
            let velocity = (speed * angle.cos(), -speed * angle.sin());
            let axis = |v: f64, span: f64, rng: &mut Rng| {
                let reach = v * travel;
                let (a, b) = if reach >= 0.0 { (0.0, span - reach) } else { (-reach, span) };
                if a < b {
                    rng.uniform(a, b)
                } else {
                    a
                }
            };
            let start = (axis(velocity.0, span_x, &mut rng), axis(velocity.1, span_y, &mut rng));
            ClipSpec { sprite, size, start, velocity, texture_seed, label: Some(class as u16) }
        }
    }
}

/// Clips stored as 8-bit pixels, exactly as on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub dims: ClipDims,
    pub classes: u16,
    pixels: Vec<Vec<u8>>,
    labels: Option<Vec<u16>>,
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Generates `clips` clips; clip `i` is seeded by `base_seed + i`.
pub fn make_dataset(kind: DatasetKind, clips: usize, classes: u16, base_seed: u64, dims: ClipDims) -> Result<Dataset> {
    if clips == 0 {
        return Err(Error::Data("dataset needs at least one clip".into()));
    }
    if kind == DatasetKind::Labeled && classes == 0 {
        return Err(Error::Data("labeled dataset needs at least one class".into()));
    }
    let mut pixels = Vec::with_capacity(clips);
    let mut labels = Vec::with_capacity(clips);
    for i in 0..clips {
        let spec = clip_spec(kind, i, classes.max(1) as usize, base_seed, dims);
        pixels.push(gen_clip(&spec, dims)?.data().iter().map(|&x| quantize(x)).collect());
        labels.extend(spec.label);
    }
    let labels = (kind == DatasetKind::Labeled).then_some(labels);
    Ok(Dataset { dims, classes: if labels.is_some() { classes } else { 0 }, pixels, labels })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Clip `i` dequantised to `[0, 1]`.
    pub fn clip(&self, i: usize) -> Tensor {
        let d = self.dims;
        let data = self.pixels[i].iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(&[d.frames, d.channels, d.height, d.width], data).expect("clip dims")
    }

    pub fn label(&self, i: usize) -> Option<u16> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn raw_pixels(&self, i: usize) -> &[u8] {
        &self.pixels[i]
    }

    /// All clips with their optional labels, in stored order.
    pub fn iter(&self) -> impl Iterator<Item = (Tensor, Option<u16>)> + '_ {
        (0..self.len()).map(|i| (self.clip(i), self.label(i)))
    }

    pub fn clips(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.clip(i)).collect()
    }

    /// `(clip, label)` pairs; errors if the dataset is unlabeled.
    pub fn labeled(&self) -> Result<Vec<(Tensor, usize)>> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        Ok((0..self.len()).map(|i| (self.clip(i), labels[i] as usize)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (d.numel() + 2) + 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in [d.frames, d.channels, d.height, d.width] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.push(u8::from(self.is_labeled()));
        out.extend_from_slice(&self.classes.to_le_bytes());
        for (i, px) in self.pixels.iter().enumerate() {
            out.extend_from_slice(px);
            if let Some(label) = self.label(i) {
                out.extend_from_slice(&label.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format { offset, message };
        if bytes.len() < HEADER_LEN {
            return Err(fail(0, format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != DATASET_VERSION {
            return Err(fail(8, format!("unsupported version {version}")));
        }
        let clips = u32_at(12) as usize;
        let dims = ClipDims {
            frames: u16_at(16) as usize,
            channels: u16_at(18) as usize,
            height: u16_at(20) as usize,
            width: u16_at(22) as usize,
        };
        let labeled = match bytes[24] {
            0 => false,
            1 => true,
            flag => return Err(fail(24, format!("label flag {flag} is not 0 or 1"))),
        };
        let classes = u16_at(25);
        let per_clip = dims.numel() + if labeled { 2 } else { 0 };
        let payload = clips * per_clip;
        let expected = HEADER_LEN + payload + 4;
        if bytes.len() != expected {
            return Err(fail(
                HEADER_LEN,
                format!(
                    "expected {} payload bytes plus 4 CRC bytes, found {}",
                    payload,
                    bytes.len() - HEADER_LEN
                ),
            ));
        }
        let crc_offset = HEADER_LEN + payload;
        let stored = u32_at(crc_offset);
        let actual = crc32fast::hash(&bytes[..crc_offset]);
        if stored != actual {
            return Err(fail(crc_offset, format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut pixels = Vec::with_capacity(clips);
        let mut labels = Vec::with_capacity(if labeled { clips } else { 0 });
        for i in 0..clips {
            let o = HEADER_LEN + i * per_clip;
            pixels.push(bytes[o..o + dims.numel()].to_vec());
            if labeled {
                let label = u16_at(o + dims.numel());
                if label >= classes {
                    return Err(fail(o + dims.numel(), format!("label {label} outside {classes} classes")));
                }
                labels.push(label);
            }
        }
        Ok(Self { dims, classes, pixels, labels: labeled.then_some(labels) })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
