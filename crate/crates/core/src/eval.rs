//! Confusion-matrix IoU evaluation with VOC conventions.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labels::{CategoryTable, IGNORE};
use crate::maps::SegmentationMask;

/// Rows are ground truth, columns prediction, over background plus L
/// categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// A matrix over background plus `categories` labels.
    pub fn new(categories: usize) -> Self {
        let classes = categories + 1;
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch("confusion matrices differ in size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Adds one image pair; ground-truth ignore pixels are skipped. A prediction
/// of ignore or an out-of-range id is an error.
pub fn accumulate(cm: &mut ConfusionMatrix, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
    if !pred.same_shape(gt.width(), gt.height()) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let c = cm.classes;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == IGNORE {
            continue;
        }
        let (p, g) = (usize::from(p), usize::from(g));
        if p >= c || g >= c {
            return Err(Error::InvalidInput(format!(
                "label {} outside the {c} evaluated classes",
                p.max(g)
            )));
        }
        cm.counts[g * c + p] += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    pub names: Vec<String>,
    /// `None` when the class never appears in prediction or ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn iou_report(cm: &ConfusionMatrix, table: &CategoryTable) -> Result<IouReport> {
    if table.len() + 1 != cm.classes {
        return Err(Error::DimensionMismatch(format!(
            "{} categories for a {}-class matrix",
            table.len(),
            cm.classes
        )));
    }
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let names = (0..c)
        .map(|k| table.name(k as u8).expect("id within table").to_string())
        .collect();
    Ok(IouReport {
        names,
        per_class,
        mean,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", x * 100.0))
}

impl IouReport {
    pub fn header(&self) -> Vec<String> {
        let mut h = self.names.clone();
        h.push("mean".into());
        h
    }

    pub fn values(&self) -> Vec<String> {
        self.per_class
            .iter()
            .copied()
            .chain(std::iter::once(self.mean))
            .map(cell)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.header().join(","), self.values().join(","))
    }

    /// Right-aligned columns, one header row and one value row.
    pub fn to_table(&self) -> String {
        let header = self.header();
        let values = self.values();
        let mut top = String::new();
        let mut bottom = String::new();
        for (i, (h, v)) in header.iter().zip(&values).enumerate() {
            let width = h.len().max(v.len());
            let sep = if i == 0 { "" } else { " " };
            let _ = write!(top, "{sep}{h:>width$}");
            let _ = write!(bottom, "{sep}{v:>width$}");
        }
        format!("{top}\n{bottom}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(w: usize, h: usize, l: Vec<u8>) -> SegmentationMask {
        SegmentationMask::new(w, h, l).unwrap()
    }

    #[test]
    fn identical_masks_fill_diagonal() {
        let m = mask(3, 1, vec![0, 1, 2]);
        let mut cm = ConfusionMatrix::new(2);
        accumulate(&mut cm, &m, &m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.get(i, j), u64::from(i == j));
            }
        }
    }

    #[test]
    fn ignore_ground_truth_is_skipped() {
        let mut cm = ConfusionMatrix::new(2);
        accumulate(&mut cm, &mask(2, 1, vec![1, 2]), &mask(2, 1, vec![IGNORE, IGNORE])).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(accumulate(&mut cm, &mask(1, 1, vec![1]), &mask(2, 1, vec![1, 1])).is_err());
    }

    #[test]
    fn random_pair_matches_loop_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 50;
        let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let g: Vec<u8> = (0..n).map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..4) }).collect();
        let mut cm = ConfusionMatrix::new(3);
        accumulate(&mut cm, &mask(n, 1, p.clone()), &mask(n, 1, g.clone())).unwrap();
        for i in 0..4u8 {
            for j in 0..4u8 {
                let count = (0..n).filter(|&k| g[k] == i && p[k] == j).count() as u64;
                assert_eq!(cm.get(i.into(), j.into()), count);
            }
        }
        assert_eq!(cm.total(), g.iter().filter(|&&x| x != IGNORE).count() as u64);
    }

    #[test]
    fn half_overlap_is_one_third() {
        let table = CategoryTable::new(["a"]).unwrap();
        let mut cm = ConfusionMatrix::new(1);
        accumulate(&mut cm, &mask(4, 1, vec![1, 1, 0, 0]), &mask(4, 1, vec![0, 1, 1, 0])).unwrap();
        let r = iou_report(&cm, &table).unwrap();
        // |∩| = 1, |∪| = 3 for both classes.
        assert_eq!(r.per_class, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
    }

    #[test]
    fn undefined_classes_excluded() {
        let table = CategoryTable::new(["a", "b"]).unwrap();
        let m = mask(2, 1, vec![0, 1]);
        let mut cm = ConfusionMatrix::new(2);
        accumulate(&mut cm, &m, &m).unwrap();
        let r = iou_report(&cm, &table).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.mean, Some(1.0));
        assert_eq!(r.values(), vec!["100.0", "100.0", "-", "100.0"]);
        let mut dis = ConfusionMatrix::new(2);
        accumulate(&mut dis, &mask(1, 1, vec![2]), &mask(1, 1, vec![1])).unwrap();
        assert_eq!(iou_report(&dis, &table).unwrap().per_class[1], Some(0.0));
    }

    #[test]
    fn accumulation_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<(SegmentationMask, SegmentationMask)> = (0..5)
            .map(|_| {
                let a = (0..9).map(|_| rng.gen_range(0..3)).collect();
                let b = (0..9).map(|_| rng.gen_range(0..3)).collect();
                (mask(3, 3, a), mask(3, 3, b))
            })
            .collect();
        let mut fwd = ConfusionMatrix::new(2);
        let mut rev = ConfusionMatrix::new(2);
        for (p, g) in &pairs {
            accumulate(&mut fwd, p, g).unwrap();
        }
        for (p, g) in pairs.iter().rev() {
            accumulate(&mut rev, p, g).unwrap();
        }
        assert_eq!(fwd, rev);
    }

    #[test]
    fn voc_layout() {
        let table = CategoryTable::voc();
        let r = iou_report(&ConfusionMatrix::new(20), &table).unwrap();
        let header = r.header();
        assert_eq!(header.len(), 22);
        assert_eq!(header[0], "bkg");
        assert_eq!(header[1], "plane");
        assert_eq!(header[20], "tv");
        assert_eq!(header[21], "mean");
        assert_eq!(r.to_csv().lines().next().unwrap().split(',').count(), 22);
        assert_eq!(r.to_table().lines().count(), 2);
    }
}
