//! HSV conversion and joint RGB color histograms.

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Default number of bins per RGB channel.
pub const DEFAULT_BINS: usize = 8;

/// Hue in degrees [0, 360), saturation and value in [0, 1].
pub fn rgb_to_hsv_f64(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| f64::from(c) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let hue = if chroma == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / chroma + 2.0)
    } else {
        60.0 * ((r - g) / chroma + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { chroma / max };
    [hue.rem_euclid(360.0), sat, max]
}

pub fn hsv_f64_to_rgb(hsv: [f64; 3]) -> [u8; 3] {
    let [h, s, v] = hsv;
    let chroma = v * s;
    let sector = h.rem_euclid(360.0) / 60.0;
    let x = chroma * (1.0 - (sector.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match sector as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    [r, g, b].map(|c| ((c + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Converts RGB to HSV with all three channels scaled to [0, 255]
/// (hue is mapped from degrees by 255/360).
pub fn rgb_to_hsv(image: &RasterImage) -> Result<RasterImage> {
    if image.channels() != 3 {
        return Err(Error::InvalidInput(
            "HSV conversion needs a 3-channel image".into(),
        ));
    }
    let mut out = Vec::with_capacity(image.data().len());
    for i in 0..image.len() {
        let [h, s, v] = rgb_to_hsv_f64(image.rgb(i));
        out.extend_from_slice(&[to_byte(h * 255.0 / 360.0), to_byte(s * 255.0), to_byte(v * 255.0)]);
    }
    RasterImage::new(image.width(), image.height(), 3, out)
}

/// Inverse of [`rgb_to_hsv`]. Hue quantization to 256 levels limits the
/// round trip on strongly saturated colors.
pub fn hsv_to_rgb(image: &RasterImage) -> Result<RasterImage> {
    if image.channels() != 3 {
        return Err(Error::InvalidInput(
            "RGB conversion needs a 3-channel HSV image".into(),
        ));
    }
    let mut out = Vec::with_capacity(image.data().len());
    for i in 0..image.len() {
        let [h, s, v] = image.rgb(i);
        let hsv = [
            f64::from(h) * 360.0 / 255.0,
            f64::from(s) / 255.0,
            f64::from(v) / 255.0,
        ];
        out.extend_from_slice(&hsv_f64_to_rgb(hsv));
    }
    RasterImage::new(image.width(), image.height(), 3, out)
}

/// Normalized joint RGB histogram with `bins_per_channel`³ cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram {
    bins_per_channel: usize,
    freq: Vec<f64>,
}

impl ColorHistogram {
    pub fn bins_per_channel(&self) -> usize {
        self.bins_per_channel
    }

    pub fn freq(&self) -> &[f64] {
        &self.freq
    }

    pub fn into_freq(self) -> Vec<f64> {
        self.freq
    }

    /// Chi-squared distance Σ (a−b)²/(a+b); 2 for disjoint normalized histograms.
    pub fn chi_squared(&self, other: &ColorHistogram) -> f64 {
        debug_assert_eq!(self.freq.len(), other.freq.len());
        self.freq
            .iter()
            .zip(&other.freq)
            .filter(|(a, b)| **a + **b > 0.0)
            .map(|(a, b)| (a - b) * (a - b) / (a + b))
            .sum()
    }
}

/// Bin index of an RGB triple under joint binning.
pub fn color_bin(rgb: [u8; 3], bins_per_channel: usize) -> usize {
    let q = |c: u8| usize::from(c) * bins_per_channel / 256;
    (q(rgb[0]) * bins_per_channel + q(rgb[1])) * bins_per_channel + q(rgb[2])
}

pub fn color_histogram(
    image: &RasterImage,
    mask: &[usize],
    bins_per_channel: usize,
) -> Result<ColorHistogram> {
    if bins_per_channel < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 bins per channel, got {bins_per_channel}"
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut counts = vec![0u64; bins_per_channel.pow(3)];
    for &i in mask {
        if i >= image.len() {
            return Err(Error::InvalidInput(format!(
                "mask index {i} outside a {}-pixel image",
                image.len()
            )));
        }
        counts[color_bin(image.rgb(i), bins_per_channel)] += 1;
    }
    let total = mask.len() as f64;
    Ok(ColorHistogram {
        bins_per_channel,
        freq: counts.into_iter().map(|c| c as f64 / total).collect(),
    })
}
