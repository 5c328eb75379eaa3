//! `T(x; a)`: crop → flip → color jitter → grayscale → blur, with every
//! random choice recorded in a 12-scalar parameter vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Image, CHANNELS};
use crate::error::{Error, Result};

/// Length of the flattened parameter vector.
pub const AUG_DIM: usize = 12;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Sampling distributions for each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub image_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            image_size: 16,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugConfig {
    pub fn with_image_size(image_size: usize) -> Self {
        AugConfig {
            image_size,
            ..AugConfig::default()
        }
    }
}

/// Recorded augmentation parameters. Crop boxes are in pixels of the source
/// image, stored as center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    /// `(h_center, w_center, h_size, w_size)`.
    pub crop: [f32; 4],
    pub flip: bool,
    /// `(brightness, contrast, saturation, hue)`.
    pub jitter: [f32; 4],
    pub grayscale: bool,
    pub blur_sigma: f32,
    pub blur_applied: bool,
}

const NEUTRAL_JITTER: [f32; 4] = [1.0, 1.0, 1.0, 0.0];

impl AugParams {
    /// Parameters under which `apply_aug` returns its input unchanged.
    pub fn identity(height: usize, width: usize) -> Self {
        AugParams {
            crop: [height as f32 / 2.0, width as f32 / 2.0, height as f32, width as f32],
            flip: false,
            jitter: NEUTRAL_JITTER,
            grayscale: false,
            blur_sigma: 0.1,
            blur_applied: false,
        }
    }

    /// Field order: crop(4), flip, jitter(4), grayscale, blur sigma, blur applied.
    pub fn to_array(&self) -> [f32; AUG_DIM] {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        let [ch, cw, sh, sw] = self.crop;
        let [jb, jc, js, jh] = self.jitter;
        [
            ch,
            cw,
            sh,
            sw,
            b(self.flip),
            jb,
            jc,
            js,
            jh,
            b(self.grayscale),
            self.blur_sigma,
            b(self.blur_applied),
        ]
    }

    pub fn from_array(v: &[f32; AUG_DIM]) -> Result<Self> {
        let flag = |x: f32, name: &str| match x {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::Param(format!("{name} must be 0 or 1, got {x}"))),
        };
        Ok(AugParams {
            crop: [v[0], v[1], v[2], v[3]],
            flip: flag(v[4], "flip")?,
            jitter: [v[5], v[6], v[7], v[8]],
            grayscale: flag(v[9], "grayscale")?,
            blur_sigma: v[10],
            blur_applied: flag(v[11], "blur.applied")?,
        })
    }

    /// Integer crop box `(top, left, height, width)`, checked to lie inside
    /// an `h × w` image.
    pub fn crop_box(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let [ch, cw, sh, sw] = self.crop;
        let top = ch - sh / 2.0;
        let left = cw - sw / 2.0;
        let integral = |v: f32| v.is_finite() && v.fract() == 0.0;
        if ![top, left, sh, sw].into_iter().all(integral) || sh < 1.0 || sw < 1.0 {
            return Err(Error::Param(format!(
                "crop {:?} is not an integral pixel box",
                self.crop
            )));
        }
        if top < 0.0 || left < 0.0 || top + sh > h as f32 || left + sw > w as f32 {
            return Err(Error::Param(format!("crop {:?} leaves the {h}x{w} image", self.crop)));
        }
        Ok((top as usize, left as usize, sh as usize, sw as usize))
    }

    /// Checks every type invariant against an `h × w` source image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        self.crop_box(h, w)?;
        let [b, c, s, hue] = self.jitter;
        let in_range = |v: f32, lo: f32, hi: f32| v.is_finite() && (lo..=hi).contains(&v);
        if !(in_range(b, 0.6, 1.4) && in_range(c, 0.6, 1.4) && in_range(s, 0.6, 1.4) && in_range(hue, -0.1, 0.1)) {
            return Err(Error::Param(format!("jitter {:?} out of range", self.jitter)));
        }
        if !in_range(self.blur_sigma, 0.1, 2.0) {
            return Err(Error::Param(format!(
                "blur sigma {} out of [0.1, 2.0]",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

fn sample_crop<R: Rng>(rng: &mut R, cfg: &AugConfig) -> [f32; 4] {
    let (h, w) = (cfg.image_size, cfg.image_size);
    let area = (h * w) as f64;
    let (lr_lo, lr_hi) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.gen_range(lr_lo..=lr_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return [
                top as f32 + ch as f32 / 2.0,
                left as f32 + cw as f32 / 2.0,
                ch as f32,
                cw as f32,
            ];
        }
    }
    AugParams::identity(h, w).crop
}

/// Draws one parameter set. The number and order of draws is fixed per
/// stage, so changing one stage's outcome never shifts another's.
pub fn sample_aug_params<R: Rng>(rng: &mut R, cfg: &AugConfig) -> AugParams {
    let crop = sample_crop(rng, cfg);
    let flip = rng.gen_bool(cfg.flip_p);
    let jitter_on = rng.gen_bool(cfg.jitter_p);
    let draw = |rng: &mut R, s: f64| rng.gen_range(1.0 - s..=1.0 + s) as f32;
    let jb = draw(rng, cfg.brightness);
    let jc = draw(rng, cfg.contrast);
    let js = draw(rng, cfg.saturation);
    let jh = rng.gen_range(-cfg.hue..=cfg.hue) as f32;
    let jitter = if jitter_on { [jb, jc, js, jh] } else { NEUTRAL_JITTER };
    let grayscale = rng.gen_bool(cfg.grayscale_p);
    let blur_applied = rng.gen_bool(cfg.blur_p);
    let blur_sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) as f32;
    AugParams {
        crop,
        flip,
        jitter,
        grayscale,
        blur_sigma,
        blur_applied,
    }
}

fn crop_resize(x: &Image, (top, left, ch, cw): (usize, usize, usize, usize)) -> Image {
    let (h, w) = (x.height, x.width);
    if (top, left, ch, cw) == (0, 0, h, w) {
        return x.clone();
    }
    // Half-pixel-centered bilinear sampling.
    let axis = |out: usize, size: usize, start: usize| -> Vec<(usize, usize, f32)> {
        let scale = size as f32 / out as f32;
        (0..out)
            .map(|i| {
                let src = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(size - 1);
                (start + i0, start + i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = axis(h, ch, top);
    let xs = axis(w, cw, left);
    let mut out = Image::filled(h, w, 0.0);
    for c in 0..CHANNELS {
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let top_row = x.at(c, y0, x0) * (1.0 - wx) + x.at(c, y0, x1) * wx;
                let bot_row = x.at(c, y1, x0) * (1.0 - wx) + x.at(c, y1, x1) * wx;
                *out.at_mut(c, oy, ox) = top_row * (1.0 - wy) + bot_row * wy;
            }
        }
    }
    out
}

fn hflip(x: &mut Image) {
    let w = x.width;
    for row in x.data.chunks_exact_mut(w) {
        row.reverse();
    }
}

fn luma(x: &Image, i: usize) -> f32 {
    let n = x.height * x.width;
    LUMA[0] * x.data[i] + LUMA[1] * x.data[n + i] + LUMA[2] * x.data[2 * n + i]
}

/// Mean luma, summed over mirrored column pairs so the result is bitwise
/// unchanged by a horizontal flip.
fn mirror_mean_luma(x: &Image) -> f32 {
    let w = x.width;
    let mut total = 0f64;
    for y in 0..x.height {
        let base = y * w;
        for c in 0..w / 2 {
            total += (luma(x, base + c) + luma(x, base + w - 1 - c)) as f64;
        }
        if w % 2 == 1 {
            total += luma(x, base + w / 2) as f64;
        }
    }
    (total / (x.height * w) as f64) as f32
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn clamp01(x: &mut Image) {
    x.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Each factor is skipped when neutral so identity jitter is exact.
fn color_jitter(x: &mut Image, [b, c, s, hue]: [f32; 4]) {
    let n = x.height * x.width;
    if b != 1.0 {
        x.data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if c != 1.0 {
        let m = mirror_mean_luma(x);
        x.data
            .iter_mut()
            .for_each(|v| *v = (c * *v + (1.0 - c) * m).clamp(0.0, 1.0));
    }
    if s != 1.0 {
        for i in 0..n {
            let g = luma(x, i);
            for ch in 0..CHANNELS {
                let v = &mut x.data[ch * n + i];
                *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
            }
        }
    }
    if hue != 0.0 {
        for i in 0..n {
            let (h, sat, val) = rgb_to_hsv(x.data[i], x.data[n + i], x.data[2 * n + i]);
            let (r, g, bl) = hsv_to_rgb(h + hue, sat, val);
            x.data[i] = r.clamp(0.0, 1.0);
            x.data[n + i] = g.clamp(0.0, 1.0);
            x.data[2 * n + i] = bl.clamp(0.0, 1.0);
        }
    }
}

fn to_grayscale(x: &mut Image) {
    let n = x.height * x.width;
    for i in 0..n {
        let g = luma(x, i);
        for ch in 0..CHANNELS {
            x.data[ch * n + i] = g;
        }
    }
}

fn gaussian_blur(x: &mut Image, sigma: f32) {
    let radius = (2.0 * sigma).ceil() as isize;
    let denom = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / denom).exp()).collect();
    let total: f64 = raw.iter().sum();
    let kernel: Vec<f32> = raw.iter().map(|v| (v / total) as f32).collect();
    let (h, w) = (x.height as isize, x.width as isize);
    let mut tmp = vec![0f32; x.data.len()];
    for c in 0..CHANNELS {
        let plane = c * (h * w) as usize;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0f32;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let sx = (xx + d).clamp(0, w - 1);
                    acc += k * x.data[plane + (y * w + sx) as usize];
                }
                tmp[plane + (y * w + xx) as usize] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0f32;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let sy = (y + d).clamp(0, h - 1);
                    acc += k * tmp[plane + (sy * w + xx) as usize];
                }
                x.data[plane + (y * w + xx) as usize] = acc;
            }
        }
    }
}

/// Applies the augmentation. Output has the input's size and lies in `[0, 1]`.
pub fn apply_aug(x: &Image, a: &AugParams) -> Result<Image> {
    a.validate(x.height, x.width)?;
    let mut out = crop_resize(x, a.crop_box(x.height, x.width)?);
    if a.flip {
        hflip(&mut out);
    }
    color_jitter(&mut out, a.jitter);
    if a.grayscale {
        to_grayscale(&mut out);
    }
    if a.blur_applied {
        gaussian_blur(&mut out, a.blur_sigma);
    }
    clamp01(&mut out);
    Ok(out)
}

/// Per-dimension mean and standard deviation of sampled parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub mean: [f64; AUG_DIM],
    pub std: [f64; AUG_DIM],
}

pub const STD_FLOOR: f64 = 1e-6;

impl ParamStats {
    pub fn from_samples(samples: &[[f32; AUG_DIM]]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no parameter samples".into()));
        }
        let n = samples.len() as f64;
        let mut mean = [0f64; AUG_DIM];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0f64; AUG_DIM];
        for s in samples {
            for ((sd, &v), m) in std.iter_mut().zip(s).zip(&mean) {
                *sd += (v as f64 - m).powi(2);
            }
        }
        std.iter_mut().for_each(|sd| *sd = (*sd / n).sqrt().max(STD_FLOOR));
        Ok(ParamStats { mean, std })
    }

    /// `(a − mean) / std` in the flattened field order.
    pub fn normalize(&self, a: &AugParams) -> [f32; AUG_DIM] {
        self.normalize_array(&a.to_array())
    }

    pub fn normalize_array(&self, v: &[f32; AUG_DIM]) -> [f32; AUG_DIM] {
        std::array::from_fn(|i| ((v[i] as f64 - self.mean[i]) / self.std[i]) as f32)
    }

    pub fn denormalize(&self, z: &[f32; AUG_DIM]) -> [f32; AUG_DIM] {
        std::array::from_fn(|i| (z[i] as f64 * self.std[i] + self.mean[i]) as f32)
    }
}

pub fn normalize_params(a: &AugParams, stats: &ParamStats) -> [f32; AUG_DIM] {
    stats.normalize(a)
}

/// Monte Carlo statistics over `n_mc` draws, sample `i` keyed as
/// `(seed, 0, i, 0)`.
pub fn param_stats(cfg: &AugConfig, n_mc: usize, seed: u64) -> Result<ParamStats> {
    if n_mc < 1000 {
        return Err(Error::InsufficientData(format!(
            "param_stats needs n_mc >= 1000, got {n_mc}"
        )));
    }
    let samples: Vec<[f32; AUG_DIM]> = (0..n_mc)
        .map(|i| sample_aug_params(&mut super::keyed_rng(seed, 0, i as u64, 0), cfg).to_array())
        .collect();
    ParamStats::from_samples(&samples)
}
