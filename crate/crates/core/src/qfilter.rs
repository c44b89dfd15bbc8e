//! Blur and saturation/brightness gates for crawled images.

use serde::{Deserialize, Serialize};

use crate::color::rgb_to_hsv;
use crate::error::{Error, Result};
use crate::raster::{LumaPlane, RasterImage};

pub const DEFAULT_BLUR_THRESHOLD: f64 = 50.0;
pub const DEFAULT_SV_THRESHOLD: f64 = 20.0;

/// Which HSV channel means the brightness gate inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateChannels {
    /// Saturation and value.
    #[default]
    SaturationValue,
    /// Hue and value, the literal channel pair.
    HueValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub blur_threshold: f64,
    pub sv_threshold: f64,
    pub channels: GateChannels,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            blur_threshold: DEFAULT_BLUR_THRESHOLD,
            sv_threshold: DEFAULT_SV_THRESHOLD,
            channels: GateChannels::SaturationValue,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_threshold.is_finite() && self.blur_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "blur threshold must be a nonnegative number, got {}",
                self.blur_threshold
            )));
        }
        if !(0.0..=255.0).contains(&self.sv_threshold) {
            return Err(Error::Config(format!(
                "saturation/value threshold must lie in [0, 255], got {}",
                self.sv_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Blurry,
    DarkOrDesaturated,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Blurry => "blurry",
            RejectReason::DarkOrDesaturated => "dark_or_desaturated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub blur_score: f64,
    /// Mean of the gated chroma channel (saturation unless configured otherwise).
    pub mean_sat: f64,
    pub mean_val: f64,
    pub accepted: bool,
    pub reason: Option<RejectReason>,
}

/// Variance of the 4-neighbour Laplacian response with replicated borders.
pub fn laplacian_variance_plane(plane: &LumaPlane) -> f64 {
    let (w, h) = (plane.width as isize, plane.height as isize);
    let n = (w * h) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 0..h {
        for x in 0..w {
            let r = plane.at_clamped(x, y - 1)
                + plane.at_clamped(x, y + 1)
                + plane.at_clamped(x - 1, y)
                + plane.at_clamped(x + 1, y)
                - 4.0 * plane.at_clamped(x, y);
            sum += r;
            sum_sq += r * r;
        }
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

/// Blur score of an image, computed on its BT.601 luma in [0, 255].
pub fn laplacian_variance(image: &RasterImage) -> Result<f64> {
    if image.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(laplacian_variance_plane(&image.luma()))
}

fn reflect(i: isize, n: isize) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with half-sample symmetric borders, matching the
/// replicated border of the Laplacian. `sigma = 0` is the identity.
pub fn gaussian_blur_plane(plane: &LumaPlane, sigma: f64) -> LumaPlane {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (w, h) = (plane.width, plane.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane.data[y * w + reflect(x as isize + j as isize - radius, w as isize)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - radius, h as isize) * w + x])
                .sum();
        }
    }
    LumaPlane {
        width: w,
        height: h,
        data: out,
    }
}

/// Per-channel Gaussian blur of an 8-bit image.
pub fn gaussian_blur(image: &RasterImage, sigma: f64) -> RasterImage {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut data = vec![0u8; w * h * c];
    for ch in 0..c {
        let plane = LumaPlane {
            width: w,
            height: h,
            data: (0..w * h).map(|i| f64::from(image.data()[i * c + ch])).collect(),
        };
        let blurred = gaussian_blur_plane(&plane, sigma);
        for (i, v) in blurred.data.iter().enumerate() {
            data[i * c + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RasterImage::new(w, h, c, data).expect("shape preserved")
}

pub fn quality_gate(image: &RasterImage, config: &QualityConfig) -> Result<QualityVerdict> {
    if image.channels() != 3 {
        return Err(Error::InvalidInput(
            "quality gate needs a 3-channel image; saturation is undefined for grayscale".into(),
        ));
    }
    let blur_score = laplacian_variance(image)?;
    let hsv = rgb_to_hsv(image)?;
    let n = image.len() as f64;
    let chroma_channel = match config.channels {
        GateChannels::SaturationValue => 1,
        GateChannels::HueValue => 0,
    };
    let channel_mean =
        |c: usize| hsv.data().chunks_exact(3).map(|p| f64::from(p[c])).sum::<f64>() / n;
    let mean_sat = channel_mean(chroma_channel);
    let mean_val = channel_mean(2);

    let sharp = blur_score > config.blur_threshold;
    let bright = mean_sat >= config.sv_threshold && mean_val >= config.sv_threshold;
    let reason = if !sharp {
        Some(RejectReason::Blurry)
    } else if !bright {
        Some(RejectReason::DarkOrDesaturated)
    } else {
        None
    };
    Ok(QualityVerdict {
        blur_score,
        mean_sat,
        mean_val,
        accepted: sharp && bright,
        reason,
    })
}
