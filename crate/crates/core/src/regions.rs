//! Region partitions from edge-strength maps.
//!
//! The finest partition is the set of watershed basins of the quantized edge
//! surface. Basins are then merged greedily along their weakest shared
//! boundary, which yields an ultrametric hierarchy: cutting it at a threshold
//! applies every merge whose strength does not exceed that threshold.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_parent, ProbabilityMap};

/// A partition of the image grid into 4-connected regions with ids
/// `0..M`, numbered in raster order of their first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    sizes: Vec<usize>,
    adjacency: BTreeSet<(u32, u32)>,
}

impl RegionMap {
    /// Builds a region map from arbitrary per-pixel ids. Each 4-connected
    /// component of equal ids becomes its own region.
    pub fn from_labels(width: usize, height: usize, raw: &[u32]) -> Result<Self> {
        if width == 0 || height == 0 || raw.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} region map with {} labels",
                raw.len()
            )));
        }
        let n = width * height;
        let mut labels = vec![u32::MAX; n];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..n {
            if labels[start] != u32::MAX {
                continue;
            }
            let id = sizes.len() as u32;
            let value = raw[start];
            labels[start] = id;
            queue.push_back(start);
            let mut size = 0;
            while let Some(p) = queue.pop_front() {
                size += 1;
                for q in neighbors4(p, width, height) {
                    if labels[q] == u32::MAX && raw[q] == value {
                        labels[q] = id;
                        queue.push_back(q);
                    }
                }
            }
            sizes.push(size);
        }
        let mut adjacency = BTreeSet::new();
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                let a = labels[p];
                if x + 1 < width && labels[p + 1] != a {
                    adjacency.insert(ordered(a, labels[p + 1]));
                }
                if y + 1 < height && labels[p + width] != a {
                    adjacency.insert(ordered(a, labels[p + width]));
                }
            }
        }
        Ok(Self {
            width,
            height,
            labels,
            sizes,
            adjacency,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Region count M.
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Adjacent pairs, each stored once as `(smaller, larger)`.
    pub fn adjacency(&self) -> &BTreeSet<(u32, u32)> {
        &self.adjacency
    }

    pub fn are_adjacent(&self, a: u32, b: u32) -> bool {
        a != b && self.adjacency.contains(&ordered(a, b))
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    /// Pixel indices of every region, in raster order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// Pixels of each region that have a 4-neighbour in another region.
    pub fn boundary_pixels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count()];
        for (p, &l) in self.labels.iter().enumerate() {
            if neighbors4(p, self.width, self.height).any(|q| self.labels[q] != l) {
                out[l as usize].push(p);
            }
        }
        out
    }

    fn sidecar(&self) -> RegionSidecar {
        RegionSidecar {
            width: self.width,
            height: self.height,
            m: self.count(),
            sizes: self.sizes.clone(),
            adjacency: self.adjacency.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }

    /// Writes a 16-bit PNG of region ids and a `.json` sidecar next to it.
    pub fn save(&self, png_path: &Path) -> Result<()> {
        if self.count() > usize::from(u16::MAX) + 1 {
            return Err(Error::InvalidInput(format!(
                "{} regions do not fit a 16-bit id image",
                self.count()
            )));
        }
        ensure_parent(png_path)?;
        let ids: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            ids,
        )
        .expect("length matches");
        buf.save_with_format(png_path, image::ImageFormat::Png)
            .map_err(|e| Error::corrupt(png_path, e))?;
        let json = serde_json::to_string(&self.sidecar()).expect("plain data");
        let side = sidecar_path(png_path);
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    /// Reads an id image (8- or 16-bit gray PNG). When a sidecar is present it
    /// must agree with the decoded partition; without one, the image is
    /// treated as an externally produced partition and renumbered.
    pub fn load(png_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(png_path).map_err(|source| Error::Unreadable {
            path: png_path.to_path_buf(),
            source,
        })?;
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::corrupt(png_path, e))?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let raw: Vec<u32> = match decoded {
            image::DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            _ => return Err(Error::corrupt(png_path, "region ids must be a gray image")),
        };
        let map = Self::from_labels(w, h, &raw)?;
        let side = sidecar_path(png_path);
        if side.exists() {
            let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let meta: RegionSidecar =
                serde_json::from_str(&text).map_err(|e| Error::corrupt(&side, e))?;
            if meta != map.sidecar() || map.labels.iter().zip(&raw).any(|(a, b)| a != b) {
                return Err(Error::corrupt(&side, "sidecar disagrees with the id image"));
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RegionSidecar {
    width: usize,
    height: usize,
    m: usize,
    sizes: Vec<usize>,
    adjacency: Vec<[u32; 2]>,
}

pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub(crate) fn neighbors4(p: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % width, p / width);
    let up = (y > 0).then(|| p - width);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < width).then(|| p + 1);
    let down = (y + 1 < height).then(|| p + width);
    [up, left, right, down].into_iter().flatten()
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Watershed basins of the edge surface, quantized to 1/255 steps. Every
/// regional minimum plateau seeds one basin; ridge pixels join the basin that
/// floods them first.
pub fn watershed_oversegment(edges: &ProbabilityMap) -> RegionMap {
    let (w, h) = (edges.width(), edges.height());
    let n = w * h;
    let level: Vec<u8> = edges.data().iter().map(|&v| quantize(v)).collect();

    // Label plateaus and keep those with no lower neighbour.
    let mut plateau = vec![u32::MAX; n];
    let mut is_min = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if plateau[start] != u32::MAX {
            continue;
        }
        let id = is_min.len() as u32;
        plateau[start] = id;
        queue.push_back(start);
        let mut minimum = true;
        while let Some(p) = queue.pop_front() {
            for q in neighbors4(p, w, h) {
                if level[q] == level[p] {
                    if plateau[q] == u32::MAX {
                        plateau[q] = id;
                        queue.push_back(q);
                    }
                } else if level[q] < level[p] {
                    minimum = false;
                }
            }
        }
        is_min.push(minimum);
    }

    let mut basin = vec![u32::MAX; n];
    let mut seed_ids = BTreeMap::new();
    for p in 0..n {
        if is_min[plateau[p] as usize] {
            let next = seed_ids.len() as u32;
            basin[p] = *seed_ids.entry(plateau[p]).or_insert(next);
        }
    }

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut queued = vec![false; n];
    for p in 0..n {
        if basin[p] != u32::MAX {
            for q in neighbors4(p, w, h) {
                if basin[q] == u32::MAX && !queued[q] {
                    queued[q] = true;
                    heap.push(Reverse((level[q], seq, q, basin[p])));
                    seq += 1;
                }
            }
        }
    }
    while let Some(Reverse((_, _, p, label))) = heap.pop() {
        basin[p] = label;
        for q in neighbors4(p, w, h) {
            if basin[q] == u32::MAX && !queued[q] {
                queued[q] = true;
                heap.push(Reverse((level[q], seq, q, label)));
                seq += 1;
            }
        }
    }
    RegionMap::from_labels(w, h, &basin).expect("shape matches edges")
}

/// How the edge values along a shared boundary are summarized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BoundaryStat {
    #[default]
    Mean,
    Max,
    /// Percentile in [0, 100] with nearest-rank selection.
    Percentile(f64),
}

impl BoundaryStat {
    fn summarize(&self, values: &[f64]) -> f64 {
        match *self {
            BoundaryStat::Mean => values.iter().sum::<f64>() / values.len() as f64,
            BoundaryStat::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            BoundaryStat::Percentile(p) => {
                let mut sorted = values.to_vec();
                sorted.sort_by(f64::total_cmp);
                let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
                sorted[rank.clamp(1, sorted.len()) - 1]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Representative base-region ids of the two merged clusters.
    pub region_a: u32,
    pub region_b: u32,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UcmHierarchy {
    base: RegionMap,
    merges: Vec<Merge>,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// Links the larger root under the smaller one and returns the survivor.
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (keep, drop) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[drop as usize] = keep;
        keep
    }
}

#[derive(PartialEq)]
struct Candidate {
    strength: f64,
    a: u32,
    b: u32,
    version_a: u64,
    version_b: u64,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.strength
            .total_cmp(&other.strength)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy agglomeration of `base` by ascending boundary strength.
pub fn build_ucm(base: &RegionMap, edges: &ProbabilityMap, stat: BoundaryStat) -> Result<UcmHierarchy> {
    if !edges.same_shape(base.width, base.height) {
        return Err(Error::DimensionMismatch(format!(
            "edges {}x{} vs regions {}x{}",
            edges.width(),
            edges.height(),
            base.width,
            base.height
        )));
    }
    let (w, h) = (base.width, base.height);
    let m = base.count();
    let mut boundary: Vec<BTreeMap<u32, Vec<f64>>> = vec![BTreeMap::new(); m];
    let e = edges.data();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut visit = |q: usize| {
                let (a, b) = (base.labels[p], base.labels[q]);
                if a != b {
                    let v = e[p].max(e[q]);
                    boundary[a as usize].entry(b).or_default().push(v);
                    boundary[b as usize].entry(a).or_default().push(v);
                }
            };
            if x + 1 < w {
                visit(p + 1);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }

    let mut version = vec![0u64; m];
    let mut sets = DisjointSet::new(m);
    let mut heap = BinaryHeap::new();
    for (a, nbrs) in boundary.iter().enumerate() {
        for (&b, values) in nbrs.range(a as u32 + 1..) {
            heap.push(Reverse(Candidate {
                strength: stat.summarize(values),
                a: a as u32,
                b,
                version_a: 0,
                version_b: 0,
            }));
        }
    }

    let mut merges = Vec::with_capacity(m.saturating_sub(1));
    let mut level = 0.0f64;
    while let Some(Reverse(c)) = heap.pop() {
        if sets.find(c.a) != c.a
            || sets.find(c.b) != c.b
            || version[c.a as usize] != c.version_a
            || version[c.b as usize] != c.version_b
        {
            continue;
        }
        let keep = sets.union(c.a, c.b);
        let gone = if keep == c.a { c.b } else { c.a };
        level = level.max(c.strength);
        merges.push(Merge {
            region_a: c.a,
            region_b: c.b,
            strength: level,
        });

        let moved = std::mem::take(&mut boundary[gone as usize]);
        boundary[keep as usize].remove(&gone);
        for (nbr, values) in moved {
            if nbr == keep {
                continue;
            }
            boundary[nbr as usize].remove(&gone);
            let merged = boundary[keep as usize].entry(nbr).or_default();
            merged.extend_from_slice(&values);
            let merged = merged.clone();
            boundary[nbr as usize].insert(keep, merged);
        }
        version[keep as usize] += 1;
        version[gone as usize] += 1;
        for (&nbr, values) in &boundary[keep as usize] {
            let (a, b) = ordered(keep, nbr);
            heap.push(Reverse(Candidate {
                strength: stat.summarize(values),
                a,
                b,
                version_a: version[a as usize],
                version_b: version[b as usize],
            }));
        }
    }

    Ok(UcmHierarchy {
        base: base.clone(),
        merges,
    })
}

impl UcmHierarchy {
    pub fn base(&self) -> &RegionMap {
        &self.base
    }

    /// Merges in application order; strengths are non-decreasing.
    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Applies every merge with strength ≤ `threshold`.
    pub fn cut(&self, threshold: f64) -> Result<RegionMap> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidInput(format!(
                "hierarchy threshold {threshold} outside [0, 1]"
            )));
        }
        let mut sets = DisjointSet::new(self.base.count());
        for merge in self.merges.iter().take_while(|m| m.strength <= threshold) {
            sets.union(merge.region_a, merge.region_b);
        }
        let raw: Vec<u32> = self.base.labels.iter().map(|&l| sets.find(l)).collect();
        RegionMap::from_labels(self.base.width, self.base.height, &raw)
    }
}

pub fn cut_hierarchy(hierarchy: &UcmHierarchy, threshold: f64) -> Result<RegionMap> {
    hierarchy.cut(threshold)
}

/// True when every region of `fine` lies inside exactly one region of `coarse`.
pub fn is_refinement(fine: &RegionMap, coarse: &RegionMap) -> bool {
    if fine.width != coarse.width || fine.height != coarse.height {
        return false;
    }
    let mut parent = vec![u32::MAX; fine.count()];
    for (f, c) in fine.labels.iter().zip(&coarse.labels) {
        let slot = &mut parent[*f as usize];
        if *slot == u32::MAX {
            *slot = *c;
        } else if *slot != *c {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn map(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> ProbabilityMap {
        let data = (0..w * h).map(|i| f(i % w, i / w)).collect();
        ProbabilityMap::new(w, h, data).unwrap()
    }

    fn assert_valid(r: &RegionMap) {
        assert_eq!(r.sizes().iter().sum::<usize>(), r.width() * r.height());
        let mut seen = BTreeSet::new();
        for &l in r.labels() {
            seen.insert(l);
        }
        assert_eq!(seen.len(), r.count());
        assert_eq!(seen.iter().last().copied(), Some(r.count() as u32 - 1));
        // Renumbering must be a no-op: regions are connected and canonically ordered.
        assert_eq!(&RegionMap::from_labels(r.width(), r.height(), r.labels()).unwrap(), r);
        for &(a, b) in r.adjacency() {
            assert!(a < b);
            assert!(r.are_adjacent(b, a));
        }
    }

    #[test]
    fn from_labels_splits_disconnected_ids() {
        let r = RegionMap::from_labels(3, 1, &[5, 7, 5]).unwrap();
        assert_eq!(r.labels(), &[0, 1, 2]);
        assert_eq!(r.count(), 3);
        assert!(r.are_adjacent(0, 1) && r.are_adjacent(1, 2) && !r.are_adjacent(0, 2));
    }

    #[test]
    fn flat_edges_give_one_region() {
        let r = watershed_oversegment(&ProbabilityMap::zeros(9, 6));
        assert_eq!(r.count(), 1);
        assert_valid(&r);
    }

    #[test]
    fn vertical_ridge_gives_two_regions() {
        let r = watershed_oversegment(&map(10, 7, |x, _| if x == 4 { 1.0 } else { 0.0 }));
        assert_eq!(r.count(), 2);
        assert_valid(&r);
        for y in 0..7 {
            assert_ne!(r.label(y * 10), r.label(y * 10 + 9));
        }
    }

    /// Flood-fill the zero-level pixels: every such component must seed exactly
    /// one basin and distinct components must land in distinct basins.
    #[test]
    fn two_blob_basins_match_flood_fill() {
        let (w, h) = (24, 16);
        let ring = |x: usize, y: usize, cx: f64, cy: f64, r: f64| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            (d - r).abs() < 0.8
        };
        let edges = map(w, h, |x, y| {
            if ring(x, y, 6.0, 8.0, 4.0) || ring(x, y, 17.0, 8.0, 4.0) {
                0.9
            } else {
                0.0
            }
        });
        let r = watershed_oversegment(&edges);
        assert_valid(&r);

        let low: Vec<u32> = edges
            .data()
            .iter()
            .map(|&v| u32::from(quantize(v) == 0))
            .collect();
        let mut comp = vec![usize::MAX; w * h];
        let mut ncomp = 0;
        for s in 0..w * h {
            if low[s] == 0 || comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = ncomp;
            while let Some(p) = stack.pop() {
                for q in neighbors4(p, w, h) {
                    if low[q] == 1 && comp[q] == usize::MAX {
                        comp[q] = ncomp;
                        stack.push(q);
                    }
                }
            }
            ncomp += 1;
        }
        assert_eq!(ncomp, 3, "outside plus two blob interiors");
        assert_eq!(r.count(), ncomp);
        let mut region_of = vec![u32::MAX; ncomp];
        for p in 0..w * h {
            if comp[p] != usize::MAX {
                let slot = &mut region_of[comp[p]];
                if *slot == u32::MAX {
                    *slot = r.label(p);
                }
                assert_eq!(*slot, r.label(p));
            }
        }
        let distinct: BTreeSet<_> = region_of.iter().collect();
        assert_eq!(distinct.len(), ncomp);
    }

    #[test]
    fn two_regions_merge_at_boundary_mean() {
        let base = RegionMap::from_labels(4, 2, &[0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        let edges = map(4, 2, |x, _| if x == 1 || x == 2 { 0.3 } else { 0.0 });
        let ucm = build_ucm(&base, &edges, BoundaryStat::Mean).unwrap();
        assert_eq!(ucm.merges().len(), 1);
        assert_eq!(ucm.merges()[0].strength, 0.3);
    }

    #[test]
    fn chain_cut_merges_only_weak_boundary() {
        // Three columns of regions; boundary A|B at 0.2, B|C at 0.6.
        let raw: Vec<u32> = (0..6 * 3).map(|i| (i % 6 / 2) as u32).collect();
        let base = RegionMap::from_labels(6, 3, &raw).unwrap();
        let edges = map(6, 3, |x, _| match x {
            1 | 2 => 0.2,
            3 | 4 => 0.6,
            _ => 0.0,
        });
        let ucm = build_ucm(&base, &edges, BoundaryStat::Mean).unwrap();
        let strengths: Vec<f64> = ucm.merges().iter().map(|m| m.strength).collect();
        assert_eq!(strengths.len(), 2);
        assert!((strengths[0] - 0.2).abs() < 1e-12 && (strengths[1] - 0.6).abs() < 1e-12);
        let cut = ucm.cut(0.4).unwrap();
        assert_eq!(cut.count(), 2);
        assert_eq!(cut.label(0), cut.label(2));
        assert_ne!(cut.label(2), cut.label(4));
        assert_eq!(ucm.cut(0.0).unwrap(), base);
        assert_eq!(ucm.cut(1.0).unwrap().count(), 1);
    }

    #[test]
    fn boundary_stats() {
        let v = [0.1, 0.5, 0.9, 0.3];
        assert!((BoundaryStat::Mean.summarize(&v) - 0.45).abs() < 1e-12);
        assert_eq!(BoundaryStat::Max.summarize(&v), 0.9);
        assert_eq!(BoundaryStat::Percentile(50.0).summarize(&v), 0.3);
        assert_eq!(BoundaryStat::Percentile(100.0).summarize(&v), 0.9);
    }

    #[test]
    fn cut_rejects_out_of_range_threshold() {
        let base = RegionMap::from_labels(1, 1, &[0]).unwrap();
        let ucm = build_ucm(&base, &ProbabilityMap::zeros(1, 1), BoundaryStat::Mean).unwrap();
        assert!(ucm.cut(1.5).is_err());
        assert!(ucm.cut(-0.1).is_err());
    }

    #[test]
    fn random_hierarchies_nest_and_are_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (w, h) = (rng.gen_range(4..20), rng.gen_range(4..20));
            let edges = map(w, h, |_, _| rng.gen::<f64>());
            let base = watershed_oversegment(&edges);
            assert_valid(&base);
            let ucm = build_ucm(&base, &edges, BoundaryStat::Mean).unwrap();
            assert!(ucm.merges().windows(2).all(|p| p[0].strength <= p[1].strength));
            let cuts: Vec<RegionMap> = [0.0, 0.25, 0.75].iter().map(|&t| ucm.cut(t).unwrap()).collect();
            assert_eq!(cuts[0], base);
            for pair in cuts.windows(2) {
                assert_valid(&pair[1]);
                assert!(is_refinement(&pair[0], &pair[1]));
                assert!(pair[0].count() >= pair[1].count());
            }
            assert_eq!(watershed_oversegment(&edges), base);
            assert_eq!(build_ucm(&base, &edges, BoundaryStat::Mean).unwrap(), ucm);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let edges = map(12, 9, |x, y| ((x * 7 + y * 3) % 5) as f64 / 4.0);
        let r = watershed_oversegment(&edges);
        let path = dir.path().join("r.png");
        r.save(&path).unwrap();
        assert_eq!(RegionMap::load(&path).unwrap(), r);
        std::fs::write(
            sidecar_path(&path),
            r#"{"width":12,"height":9,"m":1,"sizes":[108],"adjacency":[]}"#,
        )
        .unwrap();
        assert!(matches!(RegionMap::load(&path), Err(Error::Corrupt { .. })));
    }
}
