//! Photometric noise pipeline applied independently to each image of a pair.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::bilinear_taps;
use crate::grid::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    AdditiveGaussian,
    RandomBrightness,
    AdditiveShade,
    SaltPepper,
    MotionBlur,
    ContrastScale,
}

impl FilterKind {
    /// Application order of the pipeline.
    pub const ORDER: [FilterKind; 6] = [
        FilterKind::AdditiveGaussian,
        FilterKind::RandomBrightness,
        FilterKind::AdditiveShade,
        FilterKind::SaltPepper,
        FilterKind::MotionBlur,
        FilterKind::ContrastScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::AdditiveGaussian => "additive_gaussian",
            FilterKind::RandomBrightness => "random_brightness",
            FilterKind::AdditiveShade => "additive_shade",
            FilterKind::SaltPepper => "salt_pepper",
            FilterKind::MotionBlur => "motion_blur",
            FilterKind::ContrastScale => "contrast_scale",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ORDER
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownFilter(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisePipelineConfig {
    /// Noise standard deviation range, in units of the full intensity range.
    pub gaussian_sigma: [f64; 2],
    /// Brightness offset is drawn from `[-brightness_delta, brightness_delta]`.
    pub brightness_delta: f64,
    /// Peak darkening of the elliptical shade.
    pub shade_strength: [f64; 2],
    pub salt_pepper_fraction: [f64; 2],
    /// Candidate motion-blur kernel lengths (odd).
    pub motion_blur_kernel: Vec<usize>,
    pub contrast_range: [f64; 2],
    pub skip_probability: f64,
    pub variance_guard_ratio: f64,
}

impl Default for NoisePipelineConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: [0.0, 0.04],
            brightness_delta: 0.15,
            shade_strength: [0.0, 0.4],
            salt_pepper_fraction: [0.0, 0.02],
            motion_blur_kernel: vec![3, 5, 7],
            contrast_range: [0.5, 1.5],
            skip_probability: 0.5,
            variance_guard_ratio: 0.10,
        }
    }
}

impl NoisePipelineConfig {
    /// Every filter is a no-op.
    pub fn neutral() -> Self {
        Self {
            gaussian_sigma: [0.0, 0.0],
            brightness_delta: 0.0,
            shade_strength: [0.0, 0.0],
            salt_pepper_fraction: [0.0, 0.0],
            motion_blur_kernel: vec![1],
            contrast_range: [1.0, 1.0],
            skip_probability: 0.5,
            variance_guard_ratio: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config { key: format!("noise.{key}"), reason })
        };
        let ranges = [
            ("gaussian_sigma", self.gaussian_sigma),
            ("shade_strength", self.shade_strength),
            ("salt_pepper_fraction", self.salt_pepper_fraction),
            ("contrast_range", self.contrast_range),
        ];
        for (key, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return bad(key, format!("expected 0 <= min <= max, got [{lo}, {hi}]"));
            }
        }
        if self.salt_pepper_fraction[1] > 1.0 {
            return bad("salt_pepper_fraction", "fraction above 1".into());
        }
        if !(self.brightness_delta.is_finite() && self.brightness_delta >= 0.0) {
            return bad("brightness_delta", format!("must be nonnegative, got {}", self.brightness_delta));
        }
        if self.motion_blur_kernel.is_empty() || self.motion_blur_kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad("motion_blur_kernel", "needs at least one odd positive length".into());
        }
        if !(0.0..=1.0).contains(&self.skip_probability) {
            return bad("skip_probability", format!("must be in [0, 1], got {}", self.skip_probability));
        }
        if !(self.variance_guard_ratio > 0.0 && self.variance_guard_ratio < 1.0) {
            return bad(
                "variance_guard_ratio",
                format!("must be in (0, 1), got {}", self.variance_guard_ratio),
            );
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Applies one filter with parameters drawn from `cfg`; output is clamped to `[0, 1]`.
pub fn apply_filter(kind: FilterKind, img: &Image, rng: &mut impl Rng, cfg: &NoisePipelineConfig) -> Image {
    let mut out = match kind {
        FilterKind::AdditiveGaussian => {
            let sigma = draw(rng, cfg.gaussian_sigma);
            let mut out = img.clone();
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                for v in out.data_mut() {
                    *v += normal.sample(rng);
                }
            }
            out
        }
        FilterKind::RandomBrightness => {
            let delta = draw(rng, [-cfg.brightness_delta, cfg.brightness_delta]);
            let mut out = img.clone();
            for v in out.data_mut() {
                *v += delta;
            }
            out
        }
        FilterKind::AdditiveShade => {
            let strength = draw(rng, cfg.shade_strength);
            shade(img, rng, strength)
        }
        FilterKind::SaltPepper => {
            let fraction = draw(rng, cfg.salt_pepper_fraction);
            let mut out = img.clone();
            if fraction > 0.0 {
                for v in out.data_mut() {
                    if rng.random::<f64>() < fraction {
                        *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    }
                }
            }
            out
        }
        FilterKind::MotionBlur => {
            let len = cfg.motion_blur_kernel[rng.random_range(0..cfg.motion_blur_kernel.len())];
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            motion_blur(img, len, angle)
        }
        FilterKind::ContrastScale => {
            let scale = draw(rng, cfg.contrast_range);
            let mut out = img.clone();
            if scale != 1.0 {
                let mean = img.mean();
                for v in out.data_mut() {
                    *v = (*v - mean) * scale + mean;
                }
            }
            out
        }
    };
    out.clamp_unit();
    out
}

/// String-keyed variant of [`apply_filter`].
pub fn apply_filter_named(name: &str, img: &Image, rng: &mut impl Rng, cfg: &NoisePipelineConfig) -> Result<Image> {
    Ok(apply_filter(name.parse()?, img, rng, cfg))
}

fn shade(img: &Image, rng: &mut impl Rng, strength: f64) -> Image {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let cx = rng.random_range(0.0..w);
    let cy = rng.random_range(0.0..h);
    let ax = rng.random_range(0.15..0.6) * w;
    let ay = rng.random_range(0.15..0.6) * h;
    let phi = rng.random_range(0.0..std::f64::consts::PI);
    if strength <= 0.0 {
        return img.clone();
    }
    let (s, c) = phi.sin_cos();
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (c * dx + s * dy) / ax;
            let v = (-s * dx + c * dy) / ay;
            let r = (u * u + v * v).sqrt();
            let t = (1.0 - r).clamp(0.0, 1.0);
            let falloff = t * t * (3.0 - 2.0 * t);
            let i = y * img.width() + x;
            out.data_mut()[i] *= 1.0 - strength * falloff;
        }
    }
    out
}

fn motion_blur(img: &Image, len: usize, angle: f64) -> Image {
    if len <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (dy, dx) = angle.sin_cos();
    let half = (len - 1) as f64 / 2.0;
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in 0..len {
                let t = k as f64 - half;
                let sx = (x as f64 + t * dx).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + t * dy).clamp(0.0, (h - 1) as f64);
                let taps = bilinear_taps(sx, sy, w, h).expect("clamped");
                acc += taps.iter().map(|&(i, wt)| wt * img.data()[i]).sum::<f64>();
            }
            out.set(x, y, acc / len as f64);
        }
    }
    out
}

/// Outcome of one filter slot in [`apply_pipeline_traced`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterOutcome {
    Skipped,
    Applied,
    /// Applied, then reverted by the variance guard.
    Reverted,
}

/// Runs every filter in [`FilterKind::ORDER`], each skipped with
/// `skip_probability`; a filter whose output variance falls below
/// `variance_guard_ratio` times the input variance is undone.
pub fn apply_pipeline(img: &Image, rng: &mut impl Rng, cfg: &NoisePipelineConfig) -> Image {
    apply_pipeline_traced(img, rng, cfg).0
}

pub fn apply_pipeline_traced(
    img: &Image,
    rng: &mut impl Rng,
    cfg: &NoisePipelineConfig,
) -> (Image, [FilterOutcome; 6]) {
    let floor = cfg.variance_guard_ratio * img.variance();
    let mut current = img.clone();
    let mut trace = [FilterOutcome::Skipped; 6];
    for (slot, kind) in FilterKind::ORDER.into_iter().enumerate() {
        if rng.random::<f64>() < cfg.skip_probability {
            continue;
        }
        let candidate = apply_filter(kind, &current, rng, cfg);
        if candidate.variance() < floor {
            trace[slot] = FilterOutcome::Reverted;
        } else {
            current = candidate;
            trace[slot] = FilterOutcome::Applied;
        }
    }
    (current, trace)
}
