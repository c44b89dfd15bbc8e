//! Region-level CRF with Potts pairwise terms weighted by color-histogram
//! similarity, solved by sequential mean-field.

use serde::{Deserialize, Serialize};

use crate::color::color_histogram;
use crate::error::{Error, Result};
use crate::maps::{ClassProbMap, SegmentationMask};
use crate::raster::RasterImage;
use crate::regions::RegionMap;

pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    /// Coupling strength λ; 0 decouples all regions.
    pub lambda: f64,
    /// Bandwidth of the χ² kernel; `None` uses the mean χ² over edges.
    pub beta: Option<f64>,
    pub iterations: usize,
    /// Temperature of the Gibbs distribution approximated by mean-field.
    pub temperature: f64,
    pub bins_per_channel: usize,
    /// Also start from one consensus labeling per label and keep the run
    /// with the lowest free energy.
    pub multi_start: bool,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            beta: None,
            iterations: 10,
            temperature: 1.0,
            bins_per_channel: crate::color::DEFAULT_BINS,
            multi_start: true,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("crf lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("crf beta must be > 0, got {b}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "crf temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.bins_per_channel < 2 {
            return Err(Error::Config("crf histogram needs at least 2 bins".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraph {
    labels: Vec<u8>,
    unaries: Vec<Vec<f64>>,
    edges: Vec<Edge>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl RegionGraph {
    /// `labels` are the allowed label ids in ascending order; `unaries[u][k]`
    /// is the cost of giving node `u` label `labels[k]`.
    pub fn new(labels: Vec<u8>, unaries: Vec<Vec<f64>>, edges: Vec<Edge>) -> Result<Self> {
        if labels.is_empty() || labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("graph labels must be nonempty and ascending".into()));
        }
        let n = unaries.len();
        if unaries.iter().any(|u| u.len() != labels.len() || u.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("every unary needs one finite cost per label".into()));
        }
        let mut neighbors = vec![Vec::new(); n];
        for e in &edges {
            if e.u >= n || e.v >= n || e.u == e.v || !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(Error::InvalidInput(format!("bad edge {e:?}")));
            }
            neighbors[e.u].push((e.v, e.weight));
            neighbors[e.v].push((e.u, e.weight));
        }
        Ok(Self {
            labels,
            unaries,
            edges,
            neighbors,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn unaries(&self) -> &[Vec<f64>] {
        &self.unaries
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.unaries.len()
    }

    /// Σ_v w_uv q_v(l) for every label of node `u`.
    pub fn message(&self, u: usize, q: &[Vec<f64>]) -> Vec<f64> {
        let mut m = vec![0.0; self.labels.len()];
        for &(v, w) in &self.neighbors[u] {
            for (mk, qv) in m.iter_mut().zip(&q[v]) {
                *mk += w * qv;
            }
        }
        m
    }

    /// Potts energy of a complete labeling given as label indices.
    pub fn energy(&self, assignment: &[usize]) -> f64 {
        let unary: f64 = assignment
            .iter()
            .enumerate()
            .map(|(u, &k)| self.unaries[u][k])
            .sum();
        let pair: f64 = self
            .edges
            .iter()
            .filter(|e| assignment[e.u] != assignment[e.v])
            .map(|e| e.weight)
            .sum();
        unary + pair
    }

    /// Mean-field free energy Σ qθ + Σ w(1 − q_u·q_v) + T Σ q ln q.
    pub fn free_energy(&self, q: &[Vec<f64>], temperature: f64) -> f64 {
        let mut f = 0.0;
        for (qu, th) in q.iter().zip(&self.unaries) {
            for (p, t) in qu.iter().zip(th) {
                f += p * t;
                if *p > 0.0 {
                    f += temperature * p * p.ln();
                }
            }
        }
        for e in &self.edges {
            let agree: f64 = q[e.u].iter().zip(&q[e.v]).map(|(a, b)| a * b).sum();
            f += e.weight * (1.0 - agree);
        }
        f
    }
}

pub fn build_region_graph(
    probs: &ClassProbMap,
    regions: &RegionMap,
    image: &RasterImage,
    allowed: &[u8],
    config: &CrfConfig,
) -> Result<RegionGraph> {
    let (w, h) = (regions.width(), regions.height());
    if !probs.same_shape(w, h) || image.width() != w || image.height() != h {
        return Err(Error::DimensionMismatch(
            "probabilities, regions and image must share dimensions".into(),
        ));
    }
    let mut labels = allowed.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.iter().any(|&l| usize::from(l) >= probs.channels()) {
        return Err(Error::InvalidInput("allowed label beyond probability channels".into()));
    }
    let m = regions.count();
    let mut sums = vec![vec![0.0; labels.len()]; m];
    for (p, &r) in regions.labels().iter().enumerate() {
        let px = probs.pixel(p);
        for (s, &l) in sums[r as usize].iter_mut().zip(&labels) {
            *s += px[usize::from(l)];
        }
    }
    let unaries = sums
        .into_iter()
        .zip(regions.sizes())
        .map(|(s, &n)| {
            s.into_iter()
                .map(|v| -(v / n as f64).max(PROB_FLOOR).ln())
                .collect()
        })
        .collect();

    let members = regions.members();
    let hists = members
        .iter()
        .map(|px| color_histogram(image, px, config.bins_per_channel))
        .collect::<Result<Vec<_>>>()?;
    let chi: Vec<((u32, u32), f64)> = regions
        .adjacency()
        .iter()
        .map(|&(a, b)| ((a, b), hists[a as usize].chi_squared(&hists[b as usize])))
        .collect();
    let beta = match config.beta {
        Some(b) => b,
        None => {
            let mean = chi.iter().map(|c| c.1).sum::<f64>() / chi.len().max(1) as f64;
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        }
    };
    let edges = chi
        .into_iter()
        .map(|((a, b), c)| Edge {
            u: a as usize,
            v: b as usize,
            weight: config.lambda * (-c / beta).exp(),
        })
        .collect();
    RegionGraph::new(labels, unaries, edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    /// Per-node distribution over the graph's labels.
    pub marginals: Vec<Vec<f64>>,
    pub free_energy: f64,
    /// Free energy before the first sweep and after each sweep.
    pub trace: Vec<f64>,
}

fn softmax_neg(costs: &[f64], temperature: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = costs.iter().map(|c| (-(c - min) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn run_sweeps(graph: &RegionGraph, mut q: Vec<Vec<f64>>, iterations: usize, temperature: f64) -> MeanFieldState {
    let mut trace = vec![graph.free_energy(&q, temperature)];
    for _ in 0..iterations {
        for u in 0..graph.node_count() {
            let msg = graph.message(u, &q);
            let costs: Vec<f64> = graph.unaries[u].iter().zip(&msg).map(|(t, m)| t - m).collect();
            q[u] = softmax_neg(&costs, temperature);
        }
        trace.push(graph.free_energy(&q, temperature));
    }
    MeanFieldState {
        free_energy: *trace.last().expect("nonempty"),
        marginals: q,
        trace,
    }
}

/// Sequential mean-field in fixed node order. Zero iterations return the
/// softmax of the negated unaries.
pub fn mean_field(graph: &RegionGraph, iterations: usize, config: &CrfConfig) -> MeanFieldState {
    let t = config.temperature;
    let init: Vec<Vec<f64>> = graph.unaries.iter().map(|u| softmax_neg(u, t)).collect();
    let mut best = run_sweeps(graph, init, iterations, t);
    if iterations == 0 || !config.multi_start || graph.edges.is_empty() {
        return best;
    }
    let k = graph.labels.len();
    for l in 0..k {
        let one_hot: Vec<Vec<f64>> = (0..graph.node_count())
            .map(|_| (0..k).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let run = run_sweeps(graph, one_hot, iterations, t);
        if run.free_energy < best.free_energy {
            best = run;
        }
    }
    best
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Broadcasts the argmax label of every region's marginal to its pixels.
pub fn decode(state: &MeanFieldState, graph: &RegionGraph, regions: &RegionMap) -> Result<SegmentationMask> {
    if state.marginals.len() != graph.node_count() || graph.node_count() != regions.count() {
        return Err(Error::DimensionMismatch("state, graph and regions disagree on node count".into()));
    }
    let per_region: Vec<u8> = state.marginals.iter().map(|q| graph.labels[argmax(q)]).collect();
    SegmentationMask::new(
        regions.width(),
        regions.height(),
        regions.labels().iter().map(|&r| per_region[r as usize]).collect(),
    )
}
