//! Overlay rendering for inspecting masks and heuristic maps.

use crate::cues::HeuristicMap;
use crate::error::{Error, Result};
use crate::labels::{BACKGROUND, IGNORE};
use crate::maps::{voc_palette, SegmentationMask};
use crate::raster::RasterImage;

pub const OVERLAY_ALPHA: f64 = 0.5;
/// Ignored pixels are painted this color.
pub const IGNORE_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, Copy)]
pub enum Overlay<'a> {
    Mask(&'a SegmentationMask),
    Heuristic(&'a HeuristicMap),
}

fn blend(base: [u8; 3], color: [u8; 3], alpha: f64) -> [u8; 3] {
    let mut out = [0; 3];
    for k in 0..3 {
        let (b, c) = (f64::from(base[k]), f64::from(color[k]));
        out[k] = (b + alpha * (c - b)).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Blends category colors over `image` at half opacity. Background is left
/// untouched and ignored pixels become solid red. Heuristic maps blend their
/// category color in proportion to the foreground probability.
pub fn render_overlay(image: &RasterImage, overlay: Overlay<'_>) -> Result<RasterImage> {
    let (w, h) = match overlay {
        Overlay::Mask(m) => (m.width(), m.height()),
        Overlay::Heuristic(hm) => (hm.width(), hm.height()),
    };
    if image.width() != w || image.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, overlay is {w}x{h}",
            image.width(),
            image.height()
        )));
    }
    let palette = voc_palette();
    let mut data = Vec::with_capacity(image.len() * 3);
    for p in 0..image.len() {
        let base = image.rgb(p);
        let rgb = match overlay {
            Overlay::Mask(m) => match m.labels()[p] {
                BACKGROUND => base,
                IGNORE => IGNORE_COLOR,
                l => blend(base, palette[usize::from(l)], OVERLAY_ALPHA),
            },
            Overlay::Heuristic(hm) if hm.is_ignored(p) => IGNORE_COLOR,
            Overlay::Heuristic(hm) => blend(
                base,
                palette[usize::from(hm.category())],
                OVERLAY_ALPHA * hm.fg_prob()[p],
            ),
        };
        data.extend_from_slice(&rgb);
    }
    RasterImage::new(w, h, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> RasterImage {
        let data = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        RasterImage::new(4, 3, 3, data).unwrap()
    }

    #[test]
    fn background_mask_leaves_the_image() {
        let img = image();
        let out = render_overlay(&img, Overlay::Mask(&SegmentationMask::filled(4, 3, 0).unwrap())).unwrap();
        assert_eq!(out, img);
        let zero = HeuristicMap::new(4, 3, vec![0.0; 12], 3).unwrap();
        assert_eq!(render_overlay(&img, Overlay::Heuristic(&zero)).unwrap(), img);
    }

    #[test]
    fn all_ignored_heuristic_is_red() {
        let mut hm = HeuristicMap::new(4, 3, vec![0.6; 12], 2).unwrap();
        hm.mark_ignored(0..12);
        let out = render_overlay(&image(), Overlay::Heuristic(&hm)).unwrap();
        assert!((0..12).all(|p| out.rgb(p) == IGNORE_COLOR));
    }

    #[test]
    fn full_heuristic_matches_mask_blend() {
        let img = image();
        let hm = HeuristicMap::new(4, 3, vec![1.0; 12], 5).unwrap();
        let mask = SegmentationMask::filled(4, 3, 5).unwrap();
        assert_eq!(
            render_overlay(&img, Overlay::Heuristic(&hm)).unwrap(),
            render_overlay(&img, Overlay::Mask(&mask)).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mask = SegmentationMask::filled(3, 3, 0).unwrap();
        assert!(render_overlay(&image(), Overlay::Mask(&mask)).is_err());
    }
}
