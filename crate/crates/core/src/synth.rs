//! Synthetic keyword images with known masks, saliency and edge maps.
//!
//! Each image shows one blob of its keyword category on a low-saturation
//! textured background. A fraction of images additionally carries a
//! distractor blob of a different category; the keyword alone still forms the
//! image label, so the distractor is label noise.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{CategoryTable, BACKGROUND};
use crate::maps::SegmentationMask;
use crate::raster::{ProbabilityMap, RasterImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Category names and their base colors.
    pub categories: Vec<(String, [u8; 3])>,
    pub distractor_fraction: f64,
    /// Saliency falls linearly to 0 at this city-block distance from a blob.
    pub saliency_radius: f64,
    pub color_jitter: i32,
    pub edge_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            width: 64,
            height: 64,
            categories: vec![
                ("red".into(), [210, 40, 40]),
                ("green".into(), [40, 190, 60]),
                ("blue".into(), [40, 60, 210]),
                ("yellow".into(), [220, 200, 30]),
            ],
            distractor_fraction: 0.1,
            saliency_radius: 2.0,
            color_jitter: 18,
            edge_noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn table(&self) -> Result<CategoryTable> {
        CategoryTable::new(self.categories.iter().map(|c| c.0.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.width < 24 || self.height < 24 {
            return Err(Error::Config("synthetic set needs images of at least 24x24".into()));
        }
        if self.categories.len() < 2 {
            return Err(Error::Config("synthetic set needs at least 2 categories".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) || !(self.saliency_radius > 0.0) {
            return Err(Error::Config("bad distractor fraction or saliency radius".into()));
        }
        self.table().map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub index: usize,
    pub category: u8,
    pub distractor: Option<u8>,
    pub image: RasterImage,
    pub gt: SegmentationMask,
    pub saliency: ProbabilityMap,
    pub edges: ProbabilityMap,
}

/// Which images get a distractor: an exact, seeded subset.
pub fn distractor_indices(config: &SynthConfig, seed: u64) -> Vec<bool> {
    let n = config.count;
    let k = (config.distractor_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xd15_7ac7));
    let mut flags = vec![false; n];
    for &i in &idx[..k] {
        flags[i] = true;
    }
    flags
}

fn blob(rng: &mut ChaCha8Rng, w: usize, h: usize, radius: (f64, f64), taken: &[u8]) -> Option<Vec<usize>> {
    for _ in 0..200 {
        let r0 = rng.gen_range(radius.0..radius.1);
        let margin = r0 * 1.25 + 2.0;
        if 2.0 * margin >= w.min(h) as f64 {
            return None;
        }
        let cx = rng.gen_range(margin..w as f64 - margin);
        let cy = rng.gen_range(margin..h as f64 - margin);
        let (k, phase, wobble) = (rng.gen_range(2..5) as f64, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..0.2));
        let inside = |x: f64, y: f64, pad: f64| {
            let (dx, dy) = (x - cx, y - cy);
            let r = r0 * (1.0 + wobble * (k * dy.atan2(dx) + phase).sin()) + pad;
            dx * dx + dy * dy <= r * r
        };
        let px: Vec<usize> = (0..w * h)
            .filter(|&p| inside((p % w) as f64 + 0.5, (p / w) as f64 + 0.5, 0.0))
            .collect();
        let clear = (0..w * h).all(|p| taken[p] == BACKGROUND || !inside((p % w) as f64 + 0.5, (p / w) as f64 + 0.5, 4.0));
        if clear && !px.is_empty() {
            return Some(px);
        }
    }
    None
}

/// City-block distance to the nearest nonzero label.
fn distance_to_blobs(labels: &[u8], w: usize, h: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; w * h];
    let mut queue = VecDeque::new();
    for (p, &l) in labels.iter().enumerate() {
        if l != BACKGROUND {
            dist[p] = 0;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        for q in crate::regions::neighbors4(p, w, h) {
            if dist[q] == usize::MAX {
                dist[q] = dist[p] + 1;
                queue.push_back(q);
            }
        }
    }
    dist
}

pub fn generate_sample(config: &SynthConfig, seed: u64, index: usize, with_distractor: bool) -> Result<SynthSample> {
    let (w, h) = (config.width, config.height);
    let l = config.categories.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let category = (index % l) as u8 + 1;

    let mut data = Vec::with_capacity(w * h * 3);
    let base = rng.gen_range(70.0..170.0);
    let tint: [f64; 3] = [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)];
    let (fx, fy, amp) = (rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(8.0..25.0));
    for p in 0..w * h {
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let g = base + amp * (fx * x).sin() * (fy * y).cos() + rng.gen_range(-10.0..10.0);
        for t in tint {
            data.push((g + t).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut image = RasterImage::new(w, h, 3, data)?;
    let side = w.min(h) as f64;
    let too_small = || Error::Config("synthetic image too small to place blobs".into());
    let distractor_cat = with_distractor.then(|| {
        let d = rng.gen_range(1..l as u8);
        if d >= category {
            d + 1
        } else {
            d
        }
    });
    let mut layout = None;
    for _ in 0..50 {
        let empty = vec![BACKGROUND; w * h];
        let object = blob(&mut rng, w, h, (side * 0.16, side * 0.26), &empty).ok_or_else(too_small)?;
        let Some(d) = distractor_cat else {
            layout = Some((object, Vec::new()));
            break;
        };
        let mut taken = empty;
        object.iter().for_each(|&p| taken[p] = category);
        if let Some(extra) = blob(&mut rng, w, h, (side * 0.12, side * 0.2), &taken) {
            debug_assert_ne!(d, category);
            layout = Some((object, extra));
            break;
        }
    }
    let (object, extra) = layout.ok_or_else(too_small)?;
    let mut gt = vec![BACKGROUND; w * h];
    let j = config.color_jitter;
    for (px, cat) in [(object, Some(category)), (extra, distractor_cat)] {
        let Some(cat) = cat else { continue };
        let color = config.categories[usize::from(cat) - 1].1;
        for p in px {
            gt[p] = cat;
            let c = color.map(|v| (i32::from(v) + rng.gen_range(-j..=j)).clamp(0, 255) as u8);
            image.set_rgb(p, c);
        }
    }
    let distractor = distractor_cat;

    let dist = distance_to_blobs(&gt, w, h);
    let saliency = dist
        .iter()
        .map(|&d| (1.0 - d as f64 / config.saliency_radius).max(0.0))
        .collect();
    let edges = (0..w * h)
        .map(|p| {
            let boundary = crate::regions::neighbors4(p, w, h).any(|q| gt[q] != gt[p]);
            let noise = rng.gen_range(0.0..=config.edge_noise);
            if boundary {
                (0.9 + noise).min(1.0)
            } else {
                noise
            }
        })
        .collect();
    Ok(SynthSample {
        index,
        category,
        distractor,
        image,
        gt: SegmentationMask::new(w, h, gt)?,
        saliency: ProbabilityMap::new(w, h, saliency)?,
        edges: ProbabilityMap::new(w, h, edges)?,
    })
}

pub fn generate(config: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>> {
    config.validate()?;
    let flags = distractor_indices(config, seed);
    (0..config.count)
        .map(|i| generate_sample(config, seed, i, flags[i]))
        .collect()
}
