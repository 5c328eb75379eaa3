//! Procedural shape images: a small labeled dataset that can be regenerated
//! bit-for-bit from its spec.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB image, channel-major (`[3, h, w]`), pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(
                "image",
                format!("{} values for {height}x{width}x3", data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Image {
            height,
            width,
            data: vec![v; CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Shape categories, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::Bar,
    ];

    /// Whether local point `(u, v)` (in units of the shape radius, already
    /// rotated into the shape frame) is covered.
    fn covers(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeClass::Disk => r2 <= 1.0,
            ShapeClass::Ring => (0.55 * 0.55..=1.0).contains(&r2),
            ShapeClass::Square => u.abs() <= 0.78 && v.abs() <= 0.78,
            ShapeClass::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeClass::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeClass::Triangle => {
                // Equilateral, unit circumradius, apex on +v.
                let s3 = 3f64.sqrt();
                v >= -0.5 && v <= 1.0 - s3 * u && v <= 1.0 + s3 * u
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_images: 2000,
            n_classes: 6,
            image_size: 16,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > ShapeClass::ALL.len() {
            return Err(Error::Config(format!(
                "n_classes must be in 1..={}, got {}",
                ShapeClass::ALL.len(),
                self.n_classes
            )));
        }
        if self.n_images < self.n_classes {
            return Err(Error::Config(format!(
                "n_images ({}) must be at least n_classes ({})",
                self.n_images, self.n_classes
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size {} is too small to render shapes (minimum 8)",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

const SUPERSAMPLE: usize = 4;

fn render(class: ShapeClass, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let radius = rng.gen_range(0.22..0.38) * s;
    let margin = radius * 0.8;
    let cy = rng.gen_range(margin..s - margin);
    let cx = rng.gen_range(margin..s - margin);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let bg: [f64; 3] = [
        rng.gen_range(0.0..0.3),
        rng.gen_range(0.0..0.3),
        rng.gen_range(0.0..0.3),
    ];
    let fg: [f64; 3] = [
        rng.gen_range(0.3..1.0),
        rng.gen_range(0.3..1.0),
        rng.gen_range(0.3..1.0),
    ];
    let (sin, cos) = angle.sin_cos();
    let mut img = Image::filled(size, size, 0.0);
    let sub = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) * sub - cy;
                    let px = x as f64 + (sx as f64 + 0.5) * sub - cx;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    if class.covers(u, v) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..CHANNELS {
                let noise = rng.gen_range(-0.03..0.03);
                let v = bg[c] * (1.0 - cov) + fg[c] * cov + noise;
                *img.at_mut(c, y, x) = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Renders `n_images` shapes; image `i` has label `i mod n_classes`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.n_images);
    let mut labels = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let label = i % spec.n_classes;
        let mut rng = crate::data::keyed_rng(spec.seed, 0xD47A, i as u64, 0);
        images.push(render(ShapeClass::ALL[label], spec.image_size, &mut rng));
        labels.push(label as u8);
    }
    Ok(Dataset { images, labels })
}

const DATASET_MAGIC: &[u8; 8] = b"STARDS1\0";

/// Writes the binary dataset export: magic, `u32` count, `u16` height,
/// width and channels, `u8` labels, then `f32` pixels, all little-endian.
pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let first = ds.images.first().ok_or_else(|| Error::Format("empty dataset".into()))?;
    let (h, wd) = (first.height, first.width);
    if ds.images.iter().any(|im| im.height != h || im.width != wd) {
        return Err(Error::Format("images differ in size".into()));
    }
    let dim16 = |v: usize| u16::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u16")));
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&dim16(h)?.to_le_bytes())?;
    w.write_all(&dim16(wd)?.to_le_bytes())?;
    w.write_all(&dim16(CHANNELS)?.to_le_bytes())?;
    w.write_all(&ds.labels)?;
    let mut buf = Vec::with_capacity(first.data.len() * 4);
    for im in &ds.images {
        buf.clear();
        for v in &im.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset export (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut b2)?;
        *d = u16::from_le_bytes(b2) as usize;
    }
    let [h, w, c] = dims;
    if c != CHANNELS {
        return Err(Error::Format(format!("expected 3 channels, got {c}")));
    }
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)?;
    let mut images = Vec::with_capacity(count);
    let mut raw = vec![0u8; c * h * w * 4];
    for _ in 0..count {
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        images.push(Image::new(h, w, data)?);
    }
    Ok(Dataset { images, labels })
}
