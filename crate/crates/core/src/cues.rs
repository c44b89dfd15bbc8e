//! Cue fusion and region snapping: the proxy ground truth H.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_parent, load_raster, ProbabilityMap, RasterImage};
use crate::regions::{sidecar_path, RegionMap};

/// Continuous foreground probability for one keyword category, plus the mask
/// of pixels carrying the ignore label.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicMap {
    width: usize,
    height: usize,
    fg_prob: Vec<f64>,
    category: u8,
    ignore: Vec<bool>,
}

impl HeuristicMap {
    pub fn new(width: usize, height: usize, fg_prob: Vec<f64>, category: u8) -> Result<Self> {
        if width * height != fg_prob.len() || fg_prob.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} heuristic map with {} values",
                fg_prob.len()
            )));
        }
        if fg_prob.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("foreground probability outside [0, 1]".into()));
        }
        let n = fg_prob.len();
        Ok(Self {
            width,
            height,
            fg_prob,
            category,
            ignore: vec![false; n],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.fg_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg_prob.is_empty()
    }

    pub fn fg_prob(&self) -> &[f64] {
        &self.fg_prob
    }

    pub fn category(&self) -> u8 {
        self.category
    }

    pub fn ignore(&self) -> &[bool] {
        &self.ignore
    }

    pub fn is_ignored(&self, index: usize) -> bool {
        self.ignore[index]
    }

    /// Marks pixels with the ignore label. The set only grows.
    pub fn mark_ignored(&mut self, pixels: impl IntoIterator<Item = usize>) {
        for p in pixels {
            self.ignore[p] = true;
        }
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    fn sidecar(&self) -> HeuristicSidecar {
        HeuristicSidecar {
            width: self.width,
            height: self.height,
            category: self.category,
            ignore_runs: encode_runs(&self.ignore),
        }
    }

    /// Writes `fg_prob × 255` as an 8-bit PNG plus a `.json` sidecar holding
    /// the category and the run-length encoded ignore mask.
    pub fn save(&self, png_path: &Path) -> Result<()> {
        ensure_parent(png_path)?;
        let bytes = self
            .fg_prob
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RasterImage::new(self.width, self.height, 1, bytes)?.save(png_path)?;
        let side = sidecar_path(png_path);
        let json = serde_json::to_string(&self.sidecar()).expect("plain data");
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load(png_path: &Path) -> Result<Self> {
        let raster = load_raster(png_path)?;
        if raster.channels() != 1 {
            return Err(Error::corrupt(png_path, "heuristic map must be single-channel"));
        }
        let side = sidecar_path(png_path);
        let text = std::fs::read_to_string(&side).map_err(|source| Error::Unreadable {
            path: side.clone(),
            source,
        })?;
        let meta: HeuristicSidecar =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(&side, e))?;
        if meta.width != raster.width() || meta.height != raster.height() {
            return Err(Error::corrupt(&side, "sidecar dimensions disagree with the image"));
        }
        let ignore = decode_runs(&meta.ignore_runs, raster.len())
            .ok_or_else(|| Error::corrupt(&side, "ignore runs do not cover the image"))?;
        let fg_prob = raster.data().iter().map(|&v| f64::from(v) / 255.0).collect();
        let mut map = Self::new(raster.width(), raster.height(), fg_prob, meta.category)?;
        map.ignore = ignore;
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct HeuristicSidecar {
    width: usize,
    height: usize,
    category: u8,
    /// Alternating run lengths, starting with a (possibly empty) not-ignored run.
    ignore_runs: Vec<usize>,
}

fn encode_runs(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode_runs(runs: &[usize], n: usize) -> Option<Vec<bool>> {
    let mut out = Vec::with_capacity(n);
    for (i, &len) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, len));
    }
    (out.len() == n).then_some(out)
}

/// Pixel-wise maximum of two cue maps.
pub fn fuse_max(a: &ProbabilityMap, b: &ProbabilityMap) -> Result<ProbabilityMap> {
    if !a.same_shape(b.width(), b.height()) {
        return Err(Error::DimensionMismatch(format!(
            "cannot fuse {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x.max(*y)).collect();
    ProbabilityMap::new(a.width(), a.height(), data)
}

/// Broadcasts the mean cue value of every region to all of its pixels.
/// A cue map of a different resolution is first resampled bilinearly.
pub fn snap(saliency: &ProbabilityMap, regions: &RegionMap, category: u8) -> Result<HeuristicMap> {
    let (w, h) = (regions.width(), regions.height());
    let resized;
    let cue = if saliency.same_shape(w, h) {
        saliency
    } else {
        resized = saliency.resize_bilinear(w, h);
        &resized
    };
    let means = region_means(cue.data(), regions);
    let fg_prob = regions
        .labels()
        .iter()
        .map(|&l| means[l as usize].clamp(0.0, 1.0))
        .collect();
    HeuristicMap::new(w, h, fg_prob, category)
}

/// Per-region arithmetic mean, accumulated in raster order.
pub fn region_means(values: &[f64], regions: &RegionMap) -> Vec<f64> {
    let mut sums = vec![0.0; regions.count()];
    for (v, &l) in values.iter().zip(regions.labels()) {
        sums[l as usize] += v;
    }
    sums.iter()
        .zip(regions.sizes())
        .map(|(s, &n)| s / n as f64)
        .collect()
}
