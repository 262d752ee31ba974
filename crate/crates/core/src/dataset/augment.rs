//! Resize, random-resized crop, flips, eval center crop and input
//! normalization. Images are channel-major (`bands x height x width`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geo::ChannelStats;
use crate::{Error, Result};

/// A borrowed or owned channel-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands * height * width {
            return Err(Error::Shape(format!(
                "{bands}x{height}x{width} image needs {} samples, got {}",
                bands * height * width,
                data.len()
            )));
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
        })
    }

    pub fn get(&self, b: usize, r: usize, c: usize) -> f32 {
        self.data[(b * self.height + r) * self.width + c]
    }

    /// Copies out a rectangular window.
    pub fn crop(&self, w: &Window) -> Image {
        let mut data = Vec::with_capacity(self.bands * w.height * w.width);
        for b in 0..self.bands {
            for r in w.top..w.top + w.height {
                let start = (b * self.height + r) * self.width + w.left;
                data.extend_from_slice(&self.data[start..start + w.width]);
            }
        }
        Image {
            bands: self.bands,
            height: w.height,
            width: w.width,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormProfile {
    /// Standardize with statistics computed on the training chips.
    DatasetStats,
    /// Standardize with ImageNet RGB statistics.
    Imagenet,
    /// Dataset statistics, then ImageNet statistics.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub target_size: usize,
    pub flip_prob: f64,
    /// Area fraction range of the random crop.
    pub crop_scale_range: (f64, f64),
    /// Width / height range of the random crop.
    pub crop_aspect_range: (f64, f64),
    /// Edge fraction kept by the eval center crop.
    pub center_crop_fraction: f64,
    pub norm_profile: NormProfile,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            flip_prob: 0.5,
            crop_scale_range: (0.6, 1.0),
            crop_aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            center_crop_fraction: 0.875,
            norm_profile: NormProfile::DatasetStats,
        }
    }
}

impl AugmentationConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.target_size < 2 {
            out.push(format!("target_size must be at least 2, got {}", self.target_size));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            out.push(format!("flip_prob must be in [0, 1], got {}", self.flip_prob));
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            out.push(format!("crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"));
        }
        let (lo, hi) = self.crop_aspect_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            out.push(format!("crop_aspect_range must satisfy 0 < min <= max, got ({lo}, {hi})"));
        }
        if !(self.center_crop_fraction > 0.0 && self.center_crop_fraction <= 1.0) {
            out.push(format!(
                "center_crop_fraction must be in (0, 1], got {}",
                self.center_crop_fraction
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Bilinear resize with half-pixel centers: output pixel `i` samples the
/// source at `(i + 0.5) * in / out - 0.5`, clamped to the image.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    }
    let ys = taps(img.height, out_h);
    let xs = taps(img.width, out_w);
    let mut data = Vec::with_capacity(img.bands * out_h * out_w);
    for b in 0..img.bands {
        let plane = &img.data[b * img.height * img.width..(b + 1) * img.height * img.width];
        for &(y0, y1, fy) in &ys {
            let (r0, r1) = (&plane[y0 * img.width..], &plane[y1 * img.width..]);
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    Image {
        bands: img.bands,
        height: out_h,
        width: out_w,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

const CROP_ATTEMPTS: usize = 10;

/// Draws a crop window for an `h x w` image.
///
/// The area fraction is uniform over `scale`. The aspect ratio is
/// log-uniform over `aspect` intersected with the ratios for which a window
/// of that area fits, so on square images every draw succeeds. After
/// [`CROP_ATTEMPTS`] infeasible draws the largest centered square is used.
///
/// Returns the window and the drawn (pre-rounding) area fraction; integer
/// rounding moves the realized area by less than one row or column.
pub fn sample_window(h: usize, w: usize, scale: (f64, f64), aspect: (f64, f64), rng: &mut impl Rng) -> (Window, f64) {
    let total = (h * w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let frac = if scale.0 < scale.1 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
        let area = frac * total;
        let lo = aspect.0.max(area / (h * h) as f64);
        let hi = aspect.1.min((w * w) as f64 / area);
        if lo > hi {
            continue;
        }
        let ratio = if lo < hi { rng.random_range(lo.ln()..=hi.ln()).exp() } else { lo };
        let (ch, cw) = integer_window(area, ratio, h, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        let win = Window {
            top,
            left,
            height: ch,
            width: cw,
        };
        return (win, frac);
    }
    let side = h.min(w);
    let win = Window {
        top: (h - side) / 2,
        left: (w - side) / 2,
        height: side,
        width: side,
    };
    (win, (side * side) as f64 / total)
}

/// Integer `(height, width)` near the real window of `area` and `ratio`,
/// picking among the neighbouring integer sizes the one whose area is
/// closest to `area`, so realized areas track the sampled ones.
fn integer_window(area: f64, ratio: f64, h: usize, w: usize) -> (usize, usize) {
    let wf = (area * ratio).sqrt();
    let mut best = (0, 0, f64::INFINITY);
    for cw in [wf.floor() as usize, wf.ceil() as usize] {
        let cw = cw.clamp(1, w);
        let hf = area / cw as f64;
        for ch in [hf.floor() as usize, hf.ceil() as usize] {
            let ch = ch.clamp(1, h);
            let err = ((ch * cw) as f64 - area).abs();
            if err < best.2 {
                best = (ch, cw, err);
            }
        }
    }
    (best.0, best.1)
}

/// Random window (see [`sample_window`]) resized to `target_size`.
pub fn random_resized_crop(img: &Image, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Image {
    let (win, _) = sample_window(img.height, img.width, cfg.crop_scale_range, cfg.crop_aspect_range, rng);
    resize_bilinear(&img.crop(&win), cfg.target_size, cfg.target_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

/// Flips in place with probability `p`; returns whether it flipped. One
/// Bernoulli draw is consumed either way.
pub fn random_flip(img: &mut Image, axis: Axis, p: f64, rng: &mut impl Rng) -> bool {
    if !rng.random_bool(p.clamp(0.0, 1.0)) {
        return false;
    }
    let (h, w) = (img.height, img.width);
    for plane in img.data.chunks_mut(h * w) {
        match axis {
            Axis::Horizontal => plane.chunks_mut(w).for_each(<[f32]>::reverse),
            Axis::Vertical => {
                for r in 0..h / 2 {
                    let (a, b) = plane.split_at_mut((h - 1 - r) * w);
                    a[r * w..(r + 1) * w].swap_with_slice(&mut b[..w]);
                }
            }
        }
    }
    true
}

/// Eval transform: resize to target, keep the central
/// `center_crop_fraction` of the edge, resize back to target.
pub fn center_crop_eval(img: &Image, cfg: &AugmentationConfig) -> Image {
    let t = cfg.target_size;
    let resized = resize_bilinear(img, t, t);
    let side = ((t as f64 * cfg.center_crop_fraction).round() as usize).clamp(1, t);
    let off = (t - side) / 2;
    let win = Window {
        top: off,
        left: off,
        height: side,
        width: side,
    };
    resize_bilinear(&resized.crop(&win), t, t)
}

/// Training transform: resize to target, random-resized crop, horizontal
/// then vertical flip.
pub fn augment_train(img: &Image, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Image {
    let resized = resize_bilinear(img, cfg.target_size, cfg.target_size);
    let mut out = random_resized_crop(&resized, cfg, rng);
    random_flip(&mut out, Axis::Horizontal, cfg.flip_prob, rng);
    random_flip(&mut out, Axis::Vertical, cfg.flip_prob, rng);
    out
}

/// Input normalization applied at batch time.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    stages: Vec<ChannelStats>,
}

impl Normalizer {
    pub fn new(profile: NormProfile, dataset: Option<&ChannelStats>) -> Result<Self> {
        let need = || {
            dataset
                .cloned()
                .ok_or_else(|| Error::invalid("normalization profile needs dataset statistics"))
        };
        let stages = match profile {
            NormProfile::DatasetStats => vec![need()?],
            NormProfile::Imagenet => vec![ChannelStats::imagenet()],
            NormProfile::Both => vec![need()?, ChannelStats::imagenet()],
        };
        Ok(Self { stages })
    }

    /// No-op normalizer.
    pub fn identity() -> Self {
        Self { stages: Vec::new() }
    }

    pub fn check_bands(&self, bands: usize) -> Result<()> {
        match self.stages.iter().find(|s| s.bands() != bands) {
            Some(s) => Err(Error::Shape(format!(
                "normalization statistics for {} bands applied to a {bands}-band image",
                s.bands()
            ))),
            None => Ok(()),
        }
    }

    pub fn apply(&self, img: &mut Image) -> Result<()> {
        self.check_bands(img.bands)?;
        for s in &self.stages {
            s.apply(&mut img.data);
        }
        Ok(())
    }
}
