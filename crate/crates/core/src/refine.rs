//! Masked cross-entropy on continuous proxy maps, and label-restricted
//! refinement of segmentation scores into training masks.
//!
//! Refinement keeps only the image labels plus background, runs the region
//! CRF on the restricted distribution, and labels each pixel with
//! `argmax_l [log T̂_j(l) + Σ_v w_uv q_v(l)]`, where `u` is the pixel's region.
//! The second term is the mean-field message the region receives from its
//! neighbours, so with λ = 0 the result is the restricted per-pixel argmax.

use crate::crf::{argmax, build_region_graph, mean_field, CrfConfig};
use crate::cues::HeuristicMap;
use crate::error::{Error, Result};
use crate::labels::{LabelSet, BACKGROUND};
use crate::maps::{ClassProbMap, ScoreMap, SegmentationMask};
use crate::raster::RasterImage;
use crate::regions::RegionMap;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy between per-pixel softmax of `scores` and the soft target
/// (1 − H on background, H on the heuristic's category), summed over pixels
/// that are not ignored. Returns the loss and its gradient w.r.t. the scores.
pub fn heuristic_loss(scores: &ScoreMap, heuristic: &HeuristicMap) -> Result<(f64, ScoreMap)> {
    if !scores.same_shape(heuristic.width(), heuristic.height()) {
        return Err(Error::DimensionMismatch("scores and heuristic differ in shape".into()));
    }
    let c = usize::from(heuristic.category());
    let k = scores.channels();
    if c == 0 || c >= k {
        return Err(Error::InvalidInput(format!(
            "heuristic category {c} outside the {k} score channels"
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.data().len()];
    for p in 0..scores.pixels() {
        if heuristic.is_ignored(p) {
            continue;
        }
        let s = scores.pixel(p);
        let lz = log_sum_exp(s.iter().copied());
        let h = heuristic.fg_prob()[p];
        loss -= (1.0 - h) * (s[0] - lz) + h * (s[c] - lz);
        let g = &mut grad[p * k..(p + 1) * k];
        for (gl, sl) in g.iter_mut().zip(s) {
            *gl = (sl - lz).exp();
        }
        g[0] -= 1.0 - h;
        g[c] -= h;
    }
    Ok((loss, ScoreMap::new(scores.width(), scores.height(), k, grad)?))
}

fn check_allowed(scores: &ScoreMap, labels: &LabelSet) -> Result<Vec<u8>> {
    let allowed = labels.with_background();
    if allowed.iter().any(|&l| usize::from(l) >= scores.channels()) {
        return Err(Error::InvalidInput(format!(
            "label set exceeds the {} score channels",
            scores.channels()
        )));
    }
    Ok(allowed)
}

/// Softmax over the allowed channels (image labels plus background); every
/// other channel is exactly 0.
pub fn restricted_probs(scores: &ScoreMap, labels: &LabelSet) -> Result<ClassProbMap> {
    let allowed = check_allowed(scores, labels)?;
    let k = scores.channels();
    let mut data = vec![0.0; scores.data().len()];
    for p in 0..scores.pixels() {
        let s = scores.pixel(p);
        let lz = log_sum_exp(allowed.iter().map(|&l| s[usize::from(l)]));
        assert!(lz.is_finite(), "restricted partition function vanished");
        for &l in &allowed {
            data[p * k + usize::from(l)] = (s[usize::from(l)] - lz).exp();
        }
    }
    ClassProbMap::new(scores.width(), scores.height(), k, data)
}

/// Full softmax followed by masking to the allowed labels and
/// renormalization; numerically equal to [`restricted_probs`].
pub fn masked_renormalized_probs(scores: &ScoreMap, labels: &LabelSet) -> Result<ClassProbMap> {
    let allowed = check_allowed(scores, labels)?;
    let k = scores.channels();
    let mut data = vec![0.0; scores.data().len()];
    for p in 0..scores.pixels() {
        let s = scores.pixel(p);
        let lz = log_sum_exp(s.iter().copied());
        let full: Vec<f64> = s.iter().map(|v| (v - lz).exp()).collect();
        let z: f64 = allowed.iter().map(|&l| full[usize::from(l)]).sum();
        assert!(z > 0.0, "restricted partition function vanished");
        for &l in &allowed {
            data[p * k + usize::from(l)] = full[usize::from(l)] / z;
        }
    }
    ClassProbMap::new(scores.width(), scores.height(), k, data)
}

pub fn refine_labels(
    scores: &ScoreMap,
    labels: &LabelSet,
    image: &RasterImage,
    regions: &RegionMap,
    crf: &CrfConfig,
) -> Result<SegmentationMask> {
    let (w, h) = (regions.width(), regions.height());
    if !scores.same_shape(w, h) || image.width() != w || image.height() != h {
        return Err(Error::DimensionMismatch(
            "scores, image and regions must share dimensions".into(),
        ));
    }
    let probs = restricted_probs(scores, labels)?;
    let graph = build_region_graph(&probs, regions, image, &labels.with_background(), crf)?;
    let state = mean_field(&graph, crf.iterations, crf);
    let messages: Vec<Vec<f64>> = if crf.lambda == 0.0 {
        vec![vec![0.0; graph.labels().len()]; regions.count()]
    } else {
        (0..regions.count())
            .map(|u| graph.message(u, &state.marginals))
            .collect()
    };
    let allowed = graph.labels();
    debug_assert_eq!(allowed[0], BACKGROUND);
    let mut out = Vec::with_capacity(w * h);
    let mut key = vec![0.0; allowed.len()];
    for (p, &r) in regions.labels().iter().enumerate() {
        let s = scores.pixel(p);
        for (i, &l) in allowed.iter().enumerate() {
            key[i] = s[usize::from(l)] + messages[r as usize][i];
        }
        out.push(allowed[argmax(&key)]);
    }
    SegmentationMask::new(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::CategoryTable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize) -> CategoryTable {
        CategoryTable::new((1..=n).map(|i| format!("c{i}"))).unwrap()
    }

    fn random_scores(rng: &mut ChaCha8Rng, w: usize, h: usize, k: usize) -> ScoreMap {
        ScoreMap::new(w, h, k, (0..w * h * k).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let scores = ScoreMap::new(2, 1, 3, vec![-1e3, -1e3, 0.0, -1e3, -1e3, 0.0]).unwrap();
        let h = HeuristicMap::new(2, 1, vec![1.0, 1.0], 2).unwrap();
        let (loss, _) = heuristic_loss(&scores, &h).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn all_ignored_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = random_scores(&mut rng, 3, 3, 4);
        let mut h = HeuristicMap::new(3, 3, vec![0.4; 9], 1).unwrap();
        h.mark_ignored(0..9);
        let (loss, grad) = heuristic_loss(&scores, &h).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = random_scores(&mut rng, 3, 2, 4);
        let mut h = HeuristicMap::new(3, 2, (0..6).map(|_| rng.gen()).collect(), 3).unwrap();
        h.mark_ignored([4]);
        let (_, grad) = heuristic_loss(&scores, &h).unwrap();
        let eps = 1e-5;
        for i in 0..scores.data().len() {
            let mut up = scores.data().to_vec();
            let mut dn = scores.data().to_vec();
            up[i] += eps;
            dn[i] -= eps;
            let f = |d: Vec<f64>| heuristic_loss(&ScoreMap::new(3, 2, 4, d).unwrap(), &h).unwrap().0;
            let num = (f(up) - f(dn)) / (2.0 * eps);
            let g = grad.data()[i];
            assert!((num - g).abs() <= 1e-5 * num.abs().max(g.abs()).max(1e-3), "{i}: {num} vs {g}");
        }
        assert!(grad.pixel(4).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_rejects_bad_category() {
        let scores = ScoreMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(heuristic_loss(&scores, &HeuristicMap::new(1, 1, vec![0.5], 2).unwrap()).is_err());
        assert!(heuristic_loss(&scores, &HeuristicMap::new(1, 1, vec![0.5], 0).unwrap()).is_err());
    }

    #[test]
    fn restricted_softmax_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = table(5);
        for _ in 0..20 {
            let scores = random_scores(&mut rng, 4, 3, 6);
            let y = LabelSet::new([rng.gen_range(1..=5), rng.gen_range(1..=5)], &t).unwrap();
            let a = restricted_probs(&scores, &y).unwrap();
            let b = masked_renormalized_probs(&scores, &y).unwrap();
            for (x, z) in a.data().iter().zip(b.data()) {
                assert!((x - z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn off_label_scores_never_win() {
        let t = table(3);
        let regions = RegionMap::from_labels(2, 1, &[0, 1]).unwrap();
        let image = RasterImage::filled(2, 1, [9, 9, 9]).unwrap();
        let scores = ScoreMap::new(2, 1, 4, vec![0.0, 1.0, 1e6, 0.0, 0.0, 0.0, 1e6, 0.0]).unwrap();
        let y = LabelSet::single(1, &t).unwrap();
        let m = refine_labels(&scores, &y, &image, &regions, &CrfConfig::default()).unwrap();
        assert!(m.labels().iter().all(|&l| l == 0 || l == 1));
    }

    #[test]
    fn unrestricted_uncoupled_is_plain_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = table(4);
        let y = LabelSet::new(1..=4, &t).unwrap();
        let (w, h) = (6, 5);
        let image = RasterImage::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let regions = RegionMap::from_labels(w, h, &(0..w * h).map(|_| rng.gen_range(0..3)).collect::<Vec<u32>>()).unwrap();
        let scores = random_scores(&mut rng, w, h, 5);
        let cfg = CrfConfig { lambda: 0.0, ..Default::default() };
        let m = refine_labels(&scores, &y, &image, &regions, &cfg).unwrap();
        for p in 0..w * h {
            assert_eq!(usize::from(m.labels()[p]), argmax(scores.pixel(p)));
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = table(3);
        let y = LabelSet::single(2, &t).unwrap();
        let (w, h) = (5, 4);
        let image = RasterImage::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let regions = RegionMap::from_labels(w, h, &(0..w * h).map(|_| rng.gen_range(0..4)).collect::<Vec<u32>>()).unwrap();
        let scores: Vec<f64> = (0..w * h * 4).map(|_| f64::from(rng.gen_range(-16..16)) / 8.0).collect();
        let shifted: Vec<f64> = scores
            .chunks(4)
            .enumerate()
            .flat_map(|(p, px)| px.iter().map(move |v| v + (p % 3) as f64 * 4.0).collect::<Vec<_>>())
            .collect();
        let a = ScoreMap::new(w, h, 4, scores).unwrap();
        let b = ScoreMap::new(w, h, 4, shifted).unwrap();
        let pa = restricted_probs(&a, &y).unwrap();
        let pb = restricted_probs(&b, &y).unwrap();
        for (x, z) in pa.data().iter().zip(pb.data()) {
            assert!((x - z).abs() < 1e-12);
        }
        let cfg = CrfConfig::default();
        assert_eq!(
            refine_labels(&a, &y, &image, &regions, &cfg).unwrap(),
            refine_labels(&b, &y, &image, &regions, &cfg).unwrap()
        );
    }

    #[test]
    fn six_region_scene_matches_enumeration() {
        // A 6x1 strip of regions, alternating two colors; per-region constant
        // scores so the pixel decision coincides with the region marginal.
        let t = table(1);
        let y = LabelSet::single(1, &t).unwrap();
        let regions = RegionMap::from_labels(12, 1, &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]).unwrap();
        let colors = [[200, 30, 30], [200, 30, 30], [200, 30, 30], [20, 20, 200], [20, 20, 200], [20, 20, 200]];
        let mut img = RasterImage::filled(12, 1, [0, 0, 0]).unwrap();
        for p in 0..12 {
            img.set_rgb(p, colors[p / 2]);
        }
        // Clean labels would be 1,1,1,0,0,0; region 1 and region 4 are noisy.
        let fg_logit = [2.0, -0.4, 1.5, -1.8, 0.3, -2.2];
        let scores = ScoreMap::new(12, 1, 2, (0..12).flat_map(|p| [0.0, fg_logit[p / 2]]).collect()).unwrap();
        let cfg = CrfConfig { temperature: 0.2, beta: Some(1.0), ..Default::default() };
        let mask = refine_labels(&scores, &y, &img, &regions, &cfg).unwrap();

        let probs = restricted_probs(&scores, &y).unwrap();
        let graph = build_region_graph(&probs, &regions, &img, &[0, 1], &cfg).unwrap();
        let mut best = (f64::INFINITY, vec![]);
        for bits in 0..64u32 {
            let a: Vec<usize> = (0..6).map(|r| ((bits >> r) & 1) as usize).collect();
            let e = graph.energy(&a);
            if e < best.0 {
                best = (e, a);
            }
        }
        assert_eq!(best.1, vec![1, 1, 1, 0, 0, 0]);
        let expect: Vec<u8> = (0..12).map(|p| best.1[p / 2] as u8).collect();
        assert_eq!(mask.labels(), &expect[..]);
    }
}
