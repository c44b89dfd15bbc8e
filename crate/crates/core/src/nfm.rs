//! Region-level noise filtering.
//!
//! A small classifier predicts a category for every foreground region of a
//! heuristic map. Regions whose prediction falls outside the image labels are
//! marked with the ignore label so they no longer supervise segmentation.
//!
//! Regions are described by pooled hand-crafted statistics (color histogram,
//! geometry, cue means) and classified by a two-layer perceptron with a
//! rectifier after the hidden layer only.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::color_bin;
use crate::cues::HeuristicMap;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::raster::{ensure_parent, ProbabilityMap, RasterImage};
use crate::regions::RegionMap;

/// Foreground threshold on the per-region sum of foreground probability.
pub const DEFAULT_FG_EPSILON: f64 = 1e-6;
pub const DEFAULT_HIDDEN: usize = 1024;

/// Number of non-histogram features appended after the color histogram.
pub const EXTRA_FEATURES: usize = 5;

pub fn feature_dim(bins_per_channel: usize) -> usize {
    bins_per_channel.pow(3) + EXTRA_FEATURES
}

/// Pooled description of one region: normalized color histogram, centroid
/// (x, y), area fraction, mean foreground probability and mean edge strength
/// over the region's boundary pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures(Vec<f64>);

impl RegionFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite region feature".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn tail(&self) -> &[f64] {
        &self.0[self.0.len() - EXTRA_FEATURES..]
    }

    pub fn histogram(&self) -> &[f64] {
        &self.0[..self.0.len() - EXTRA_FEATURES]
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.tail()[0], self.tail()[1])
    }

    pub fn area(&self) -> f64 {
        self.tail()[2]
    }

    pub fn mean_fg(&self) -> f64 {
        self.tail()[3]
    }

    pub fn boundary_edge(&self) -> f64 {
        self.tail()[4]
    }
}

pub fn extract_region_features(
    image: &RasterImage,
    regions: &RegionMap,
    heuristic: &HeuristicMap,
    edges: &ProbabilityMap,
    bins_per_channel: usize,
) -> Result<Vec<RegionFeatures>> {
    let (w, h) = (regions.width(), regions.height());
    if image.width() != w
        || image.height() != h
        || !heuristic.same_shape(w, h)
        || !edges.same_shape(w, h)
    {
        return Err(Error::DimensionMismatch(
            "image, regions, heuristic and edges must share dimensions".into(),
        ));
    }
    if bins_per_channel < 2 {
        return Err(Error::InvalidInput("need at least 2 histogram bins".into()));
    }
    let m = regions.count();
    let hist_len = bins_per_channel.pow(3);
    let mut hist = vec![vec![0.0; hist_len]; m];
    let mut sx = vec![0.0; m];
    let mut sy = vec![0.0; m];
    let mut sfg = vec![0.0; m];
    for (p, &l) in regions.labels().iter().enumerate() {
        let l = l as usize;
        hist[l][color_bin(image.rgb(p), bins_per_channel)] += 1.0;
        sx[l] += (p % w) as f64 + 0.5;
        sy[l] += (p / w) as f64 + 0.5;
        sfg[l] += heuristic.fg_prob()[p];
    }
    let boundary = regions.boundary_pixels();
    let total = (w * h) as f64;
    (0..m)
        .map(|r| {
            let n = regions.sizes()[r] as f64;
            let mut v: Vec<f64> = hist[r].iter().map(|c| c / n).collect();
            let edge = if boundary[r].is_empty() {
                0.0
            } else {
                boundary[r].iter().map(|&p| edges.data()[p]).sum::<f64>() / boundary[r].len() as f64
            };
            v.extend_from_slice(&[sx[r] / n / w as f64, sy[r] / n / h as f64, n / total, sfg[r] / n, edge]);
            RegionFeatures::new(v)
        })
        .collect()
}

/// Weights of the input → hidden → L classifier.
///
/// `w1` is stored input-major (`w1[j * hidden + k]`) so sparse inputs touch
/// contiguous rows; `w2` is output-major (`w2[c * hidden + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    pub scores: Vec<f64>,
    /// Predicted category id in `1..=L`.
    pub label: u8,
}

struct Activations {
    hidden: Vec<f64>,
    scores: Vec<f64>,
}

impl MlpParameters {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; output_dim * hidden_dim],
            b2: vec![0.0; output_dim],
        }
    }

    /// He-normal initialization, deterministic in `seed`.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self::init_with_fan_in(input_dim, hidden_dim, output_dim, input_dim as f64, seed)
    }

    /// He-normal initialization for the region features: the histogram
    /// carries unit total mass, so it counts as a single input.
    pub fn init_for_regions(bins_per_channel: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        let fan_in = (EXTRA_FEATURES + 1) as f64;
        Self::init_with_fan_in(feature_dim(bins_per_channel), hidden_dim, output_dim, fan_in, seed)
    }

    fn init_with_fan_in(input_dim: usize, hidden_dim: usize, output_dim: usize, fan_in: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim, hidden_dim, output_dim);
        let n1 = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        p.w1.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        let n2 = Normal::new(0.0, (1.0 / hidden_dim as f64).sqrt()).expect("positive std");
        p.w2.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Flat view of every parameter in (w1, b1, w2, b2) order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn scale_output(&mut self, factor: f64) {
        self.w2.iter_mut().for_each(|w| *w *= factor);
        self.b2.iter_mut().for_each(|b| *b *= factor);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature length {} vs classifier input {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let hd = self.hidden_dim;
        let mut hidden = self.b1.clone();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let row = &self.w1[j * hd..(j + 1) * hd];
                hidden.iter_mut().zip(row).for_each(|(h, w)| *h += xj * w);
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let scores = (0..self.output_dim)
            .map(|c| {
                let row = &self.w2[c * hd..(c + 1) * hd];
                self.b2[c] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        Activations { hidden, scores }
    }

    /// Mean softmax cross-entropy over `batch` and its analytic gradient,
    /// laid out like the parameters.
    pub fn loss_and_gradient(&self, batch: &[(RegionFeatures, u8)]) -> Result<(f64, MlpParameters)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let hd = self.hidden_dim;
        let mut grad = MlpParameters::zeros(self.input_dim, hd, self.output_dim);
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (features, label) in batch {
            let x = features.values();
            self.check_input(x)?;
            let target = usize::from(*label)
                .checked_sub(1)
                .filter(|&t| t < self.output_dim)
                .ok_or_else(|| Error::InvalidInput(format!("training label {label} out of range")))?;
            let act = self.activations(x);
            let max = act.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + act.scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            loss += (log_z - act.scores[target]) * scale;

            let mut d_hidden = vec![0.0; hd];
            for c in 0..self.output_dim {
                let mut d = (act.scores[c] - log_z).exp();
                if c == target {
                    d -= 1.0;
                }
                d *= scale;
                grad.b2[c] += d;
                let row = &self.w2[c * hd..(c + 1) * hd];
                let grow = &mut grad.w2[c * hd..(c + 1) * hd];
                for k in 0..hd {
                    grow[k] += d * act.hidden[k];
                    d_hidden[k] += d * row[k];
                }
            }
            for ((dh, &h), b) in d_hidden.iter_mut().zip(&act.hidden).zip(grad.b1.iter_mut()) {
                if h <= 0.0 {
                    *dh = 0.0;
                }
                *b += *dh;
            }
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    let grow = &mut grad.w1[j * hd..(j + 1) * hd];
                    grow.iter_mut().zip(&d_hidden).for_each(|(g, d)| *g += xj * d);
                }
            }
        }
        Ok((loss, grad))
    }

    pub fn save(&self, path: &Path, meta: &ParamsMeta) -> Result<()> {
        ensure_parent(path)?;
        let header = ParamsHeader {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            seed: meta.seed,
            steps: meta.steps,
        };
        let json = serde_json::to_vec(&header).expect("plain data");
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.flat().len());
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ParamsMeta)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Unreadable {
                path: path.to_path_buf(),
                source,
            })?;
        if bytes.len() < 12 || &bytes[..8] != PARAMS_MAGIC {
            return Err(Error::corrupt(path, "missing classifier parameter header"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body_start = 12 + hlen;
        let header: ParamsHeader = bytes
            .get(12..body_start)
            .ok_or_else(|| Error::corrupt(path, "truncated header"))
            .and_then(|h| serde_json::from_slice(h).map_err(|e| Error::corrupt(path, e)))?;
        let mut p = Self::zeros(header.input_dim, header.hidden_dim, header.output_dim);
        let expected = p.flat().len() * 8;
        let body = &bytes[body_start..];
        if body.len() != expected {
            return Err(Error::corrupt(
                path,
                format!("expected {expected} parameter bytes, found {}", body.len()),
            ));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok((
            p,
            ParamsMeta {
                seed: header.seed,
                steps: header.steps,
            },
        ))
    }
}

const PARAMS_MAGIC: &[u8; 8] = b"PFNFM001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamsMeta {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    seed: u64,
    steps: u64,
}

pub fn mlp_forward(params: &MlpParameters, features: &RegionFeatures) -> Result<RegionPrediction> {
    params.check_input(features.values())?;
    let scores = params.activations(features.values()).scores;
    let mut best = 0;
    for (c, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = c;
        }
    }
    Ok(RegionPrediction {
        scores,
        label: (best + 1) as u8,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdOptions {
    pub base_lr: f64,
    /// Multiplier on the hidden layer's learning rate.
    pub hidden_lr_mult: f64,
    /// Multiplier on the output layer's learning rate.
    pub output_lr_mult: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdOptions {
    fn default() -> Self {
        Self {
            base_lr: 0.3,
            hidden_lr_mult: 0.1,
            output_lr_mult: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum buffers, owned by the caller across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState(MlpParameters);

impl MomentumState {
    pub fn new(params: &MlpParameters) -> Self {
        Self(MlpParameters::zeros(
            params.input_dim,
            params.hidden_dim,
            params.output_dim,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub params: MlpParameters,
    /// Batch loss before the update.
    pub loss: f64,
}

/// One momentum SGD step on the mean cross-entropy of `batch`.
/// Weight decay applies to weights only, not biases.
pub fn nfm_train_step(
    params: &MlpParameters,
    momentum: &mut MomentumState,
    batch: &[(RegionFeatures, u8)],
    options: &SgdOptions,
) -> Result<StepOutcome> {
    let (loss, grad) = params.loss_and_gradient(batch)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut next = params.clone();
    let rates = [
        (options.base_lr * options.hidden_lr_mult, options.weight_decay),
        (options.base_lr * options.hidden_lr_mult, 0.0),
        (options.base_lr * options.output_lr_mult, options.weight_decay),
        (options.base_lr * options.output_lr_mult, 0.0),
    ];
    let grads = grad.tensors();
    for (((w, v), g), (lr, decay)) in next
        .tensors_mut()
        .into_iter()
        .zip(momentum.0.tensors_mut())
        .zip(grads)
        .zip(rates)
    {
        for i in 0..w.len() {
            v[i] = options.momentum * v[i] + lr * (g[i] + decay * w[i]);
            w[i] -= v[i];
        }
    }
    Ok(StepOutcome { params: next, loss })
}

/// Training target of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Category(u8),
    /// Background region: excluded from classifier training.
    Ignore,
}

/// Per-region foreground probability sums, accumulated in raster order.
pub fn region_fg_sums(heuristic: &HeuristicMap, regions: &RegionMap) -> Vec<f64> {
    let mut sums = vec![0.0; regions.count()];
    for (v, &l) in heuristic.fg_prob().iter().zip(regions.labels()) {
        sums[l as usize] += v;
    }
    sums
}

/// Foreground regions (foreground mass above `epsilon`) take the heuristic's
/// category; every other region takes the ignore label.
pub fn label_regions_for_training(
    heuristic: &HeuristicMap,
    regions: &RegionMap,
    labels: &LabelSet,
    epsilon: f64,
) -> Result<Vec<(u32, RegionLabel)>> {
    if !heuristic.same_shape(regions.width(), regions.height()) {
        return Err(Error::DimensionMismatch("heuristic and regions differ in shape".into()));
    }
    if !labels.contains(heuristic.category()) {
        return Err(Error::InvalidInput(format!(
            "heuristic category {} is not among the image labels",
            heuristic.category()
        )));
    }
    Ok(region_fg_sums(heuristic, regions)
        .into_iter()
        .enumerate()
        .map(|(r, s)| {
            let label = if s > epsilon {
                RegionLabel::Category(heuristic.category())
            } else {
                RegionLabel::Ignore
            };
            (r as u32, label)
        })
        .collect())
}

/// Marks every foreground region whose predicted category is not an image
/// label with the ignore label. Background regions are never edited.
pub fn filter_noise(
    heuristic: &HeuristicMap,
    regions: &RegionMap,
    predictions: &BTreeMap<u32, RegionPrediction>,
    labels: &LabelSet,
    epsilon: f64,
) -> Result<HeuristicMap> {
    if !heuristic.same_shape(regions.width(), regions.height()) {
        return Err(Error::DimensionMismatch("heuristic and regions differ in shape".into()));
    }
    let sums = region_fg_sums(heuristic, regions);
    let mut drop = vec![false; regions.count()];
    for (r, &s) in sums.iter().enumerate() {
        if s > epsilon {
            let pred = predictions
                .get(&(r as u32))
                .ok_or(Error::MissingPrediction(r as u32))?;
            drop[r] = !labels.contains(pred.label);
        }
    }
    let mut out = heuristic.clone();
    out.mark_ignored(
        regions
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| drop[l as usize])
            .map(|(p, _)| p),
    );
    Ok(out)
}

/// Features and training labels of one image's regions.
#[derive(Debug, Clone)]
pub struct ImageRegions {
    pub features: Vec<RegionFeatures>,
    pub labels: Vec<(u32, RegionLabel)>,
}

impl ImageRegions {
    /// Foreground regions as a mini-batch.
    pub fn batch(&self) -> Vec<(RegionFeatures, u8)> {
        self.labels
            .iter()
            .filter_map(|&(r, l)| match l {
                RegionLabel::Category(c) => Some((self.features[r as usize].clone(), c)),
                RegionLabel::Ignore => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NfmConfig {
    pub hidden: usize,
    pub bins_per_channel: usize,
    pub fg_epsilon: f64,
    /// Passes over the training images; kept small on purpose so the
    /// classifier stays under-fitted.
    pub max_epochs: usize,
    pub sgd: SgdOptions,
}

impl Default for NfmConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            bins_per_channel: crate::color::DEFAULT_BINS,
            fg_epsilon: DEFAULT_FG_EPSILON,
            max_epochs: 1,
            sgd: SgdOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: u64,
    pub batch_losses: Vec<f64>,
}

/// Trains a fresh classifier, one step per image (its foreground regions
/// form the mini-batch), visiting images in a seeded shuffled order.
pub fn train_nfm(
    images: &[ImageRegions],
    num_categories: usize,
    config: &NfmConfig,
    seed: u64,
) -> Result<(MlpParameters, TrainReport)> {
    use rand::seq::SliceRandom;

    let mut params = MlpParameters::init_for_regions(config.bins_per_channel, config.hidden, num_categories, seed);
    let mut momentum = MomentumState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        batch_losses: Vec::new(),
    };
    for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let batch = images[i].batch();
            if batch.is_empty() {
                continue;
            }
            let outcome = nfm_train_step(&params, &mut momentum, &batch, &config.sgd)?;
            params = outcome.params;
            report.steps += 1;
            report.batch_losses.push(outcome.loss);
        }
    }
    Ok((params, report))
}

/// Predictions for every foreground region of one image.
pub fn predict_foreground(
    params: &MlpParameters,
    image: &ImageRegions,
) -> Result<BTreeMap<u32, RegionPrediction>> {
    image
        .labels
        .iter()
        .filter(|(_, l)| matches!(l, RegionLabel::Category(_)))
        .map(|&(r, _)| Ok((r, mlp_forward(params, &image.features[r as usize])?)))
        .collect()
}
