//! A minimal stand-in for the segmentation network: a per-color-bin
//! categorical model fitted to proxy targets.
//!
//! For a free categorical per bin, the minimizer of the summed cross-entropy
//! against soft targets is the normalized target mass of that bin. A
//! Dirichlet prior proportional to the global label frequencies keeps
//! unseen bins finite.

use crate::color::color_bin;
use crate::cues::HeuristicMap;
use crate::error::{Error, Result};
use crate::labels::IGNORE;
use crate::maps::{ScoreMap, SegmentationMask};
use crate::raster::RasterImage;

#[derive(Debug, Clone, PartialEq)]
pub struct ColorLookupModel {
    bins_per_channel: usize,
    channels: usize,
    prior_strength: f64,
    mass: Vec<f64>,
}

impl ColorLookupModel {
    /// A model over background plus `categories` labels.
    pub fn new(bins_per_channel: usize, categories: usize, prior_strength: f64) -> Result<Self> {
        if bins_per_channel < 2 || categories == 0 || !(prior_strength > 0.0) {
            return Err(Error::InvalidInput("bad surrogate model dimensions".into()));
        }
        let channels = categories + 1;
        Ok(Self {
            bins_per_channel,
            channels,
            prior_strength,
            mass: vec![0.0; bins_per_channel.pow(3) * channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, image: &RasterImage, w: usize, h: usize) -> Result<()> {
        if image.width() != w || image.height() != h {
            return Err(Error::DimensionMismatch("image and targets differ in shape".into()));
        }
        Ok(())
    }

    /// Adds soft targets: 1 − H on background and H on the map's category,
    /// skipping ignored pixels.
    pub fn add_heuristic(&mut self, image: &RasterImage, heuristic: &HeuristicMap) -> Result<()> {
        self.check(image, heuristic.width(), heuristic.height())?;
        let c = usize::from(heuristic.category());
        if c == 0 || c >= self.channels {
            return Err(Error::InvalidInput(format!("category {c} outside the model")));
        }
        for p in 0..heuristic.len() {
            if heuristic.is_ignored(p) {
                continue;
            }
            let base = color_bin(image.rgb(p), self.bins_per_channel) * self.channels;
            let hp = heuristic.fg_prob()[p];
            self.mass[base] += 1.0 - hp;
            self.mass[base + c] += hp;
        }
        Ok(())
    }

    /// Adds one-hot targets from a mask, skipping ignore pixels.
    pub fn add_mask(&mut self, image: &RasterImage, mask: &SegmentationMask) -> Result<()> {
        self.check(image, mask.width(), mask.height())?;
        for (p, &l) in mask.labels().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            if usize::from(l) >= self.channels {
                return Err(Error::InvalidInput(format!("mask label {l} outside the model")));
            }
            self.mass[color_bin(image.rgb(p), self.bins_per_channel) * self.channels + usize::from(l)] += 1.0;
        }
        Ok(())
    }

    fn prior(&self) -> Vec<f64> {
        let mut totals = vec![1.0; self.channels];
        for bin in self.mass.chunks_exact(self.channels) {
            totals.iter_mut().zip(bin).for_each(|(t, m)| *t += m);
        }
        let sum: f64 = totals.iter().sum();
        totals.into_iter().map(|t| t / sum).collect()
    }

    /// Log-probability scores for every pixel of `image`.
    pub fn scores(&self, image: &RasterImage) -> Result<ScoreMap> {
        let prior = self.prior();
        let a = self.prior_strength;
        let table: Vec<f64> = self
            .mass
            .chunks_exact(self.channels)
            .flat_map(|bin| {
                let n: f64 = bin.iter().sum();
                bin.iter()
                    .zip(&prior)
                    .map(move |(m, pi)| ((m + a * pi) / (n + a)).ln())
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut data = Vec::with_capacity(image.len() * self.channels);
        for p in 0..image.len() {
            let b = color_bin(image.rgb(p), self.bins_per_channel) * self.channels;
            data.extend_from_slice(&table[b..b + self.channels]);
        }
        ScoreMap::new(image.width(), image.height(), self.channels, data)
    }
}
