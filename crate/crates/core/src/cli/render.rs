//! PNG rendering: scar-size bar charts and axial slice overlays.

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::metrics::ScarSizeHistogram;

pub const REFERENCE_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
pub const PREDICTION_COLOR: Rgb<u8> = Rgb([230, 30, 30]);
/// Pixels on both contours.
pub const SHARED_COLOR: Rgb<u8> = Rgb([255, 230, 0]);

const COUNT_COLOR: Rgb<u8> = Rgb([50, 90, 200]);
const VOLUME_COLOR: Rgb<u8> = Rgb([240, 140, 40]);

/// Grouped bars per size bin: count percentage (blue) and volume percentage
/// (orange); full height is 100 %.
pub fn render_histogram(h: &ScarSizeHistogram) -> RgbImage {
    const BAR: u32 = 10;
    const GAP: u32 = 8;
    const HEIGHT: u32 = 200;
    const MARGIN: u32 = 10;
    let bins = h.counts.len() as u32;
    let width = 2 * MARGIN + bins * (2 * BAR + GAP);
    let mut img = RgbImage::from_pixel(width, HEIGHT + 2 * MARGIN, Rgb([255, 255, 255]));
    let base = MARGIN + HEIGHT;
    let bar = |img: &mut RgbImage, x0: u32, pct: f64, color: Rgb<u8>| {
        let top = base - ((pct / 100.0).clamp(0.0, 1.0) * HEIGHT as f64).round() as u32;
        for x in x0..x0 + BAR {
            for y in top..base {
                img.put_pixel(x, y, color);
            }
        }
    };
    for (i, (c, v)) in h.count_percentages().into_iter().zip(h.volume_percentages()).enumerate() {
        let x0 = MARGIN + i as u32 * (2 * BAR + GAP);
        bar(&mut img, x0, c, COUNT_COLOR);
        bar(&mut img, x0 + BAR, v, VOLUME_COLOR);
    }
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    img
}

/// One-pixel-wide inner contour of `mask` (`[y, x]`) after nearest-neighbour
/// magnification by `zoom`.
pub fn contour(mask: &Array2<bool>, zoom: u32) -> Array2<bool> {
    let z = zoom as usize;
    let (h, w) = mask.dim();
    let (zh, zw) = (h * z, w * z);
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < zh && (x as usize) < zw && mask[[y as usize / z, x as usize / z]];
    Array2::from_shape_fn((zh, zw), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !at(y + dy, x + dx))
    })
}

/// Grayscale slice (min/max windowed) with reference and prediction
/// contours. Output is `width = nx · zoom`, `height = ny · zoom`.
pub fn render_overlay(slice: &Array2<f32>, reference: &Array2<bool>, prediction: &Array2<bool>, zoom: u32) -> Result<RgbImage> {
    if zoom == 0 {
        return Err(Error::InvalidArgument("zoom must be >= 1".into()));
    }
    if slice.dim() != reference.dim() || slice.dim() != prediction.dim() {
        return Err(Error::ShapeMismatch(format!(
            "slice {:?}, reference {:?}, prediction {:?}",
            slice.dim(),
            reference.dim(),
            prediction.dim()
        )));
    }
    let lo = slice.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = slice.dim();
    let z = zoom as usize;
    let rc = contour(reference, zoom);
    let pc = contour(prediction, zoom);
    let mut img = RgbImage::new((w * z) as u32, (h * z) as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (yy, xx) = (y as usize, x as usize);
        *px = match (rc[[yy, xx]], pc[[yy, xx]]) {
            (true, true) => SHARED_COLOR,
            (true, false) => REFERENCE_COLOR,
            (false, true) => PREDICTION_COLOR,
            (false, false) => {
                let g = (((slice[[yy / z, xx / z]] - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8;
                Rgb([g, g, g])
            }
        };
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Array2<bool> {
        Array2::from_shape_fn((8, 10), |(y, x)| (2..6).contains(&y) && (3..8).contains(&x))
    }

    #[test]
    fn contour_of_square() {
        let c = contour(&square(), 1);
        // perimeter of a 4x5 block
        assert_eq!(c.iter().filter(|&&v| v).count(), 2 * 4 + 2 * 5 - 4);
        assert!(!c[[3, 5]]);
        let c2 = contour(&square(), 3);
        assert_eq!(c2.dim(), (24, 30));
    }

    #[test]
    fn identical_masks_share_every_contour_pixel() {
        let slice = Array2::from_shape_fn((8, 10), |(y, x)| (y * 10 + x) as f32);
        let img = render_overlay(&slice, &square(), &square(), 2).unwrap();
        assert_eq!(img.dimensions(), (20, 16));
        assert!(img.pixels().all(|p| *p != REFERENCE_COLOR && *p != PREDICTION_COLOR));
        assert!(img.pixels().any(|p| *p == SHARED_COLOR));
    }

    #[test]
    fn empty_prediction_draws_reference_only() {
        let slice = Array2::zeros((8, 10));
        let img = render_overlay(&slice, &square(), &Array2::from_elem((8, 10), false), 1).unwrap();
        assert!(img.pixels().any(|p| *p == REFERENCE_COLOR));
        assert!(img.pixels().all(|p| *p != PREDICTION_COLOR && *p != SHARED_COLOR));
    }

    #[test]
    fn mismatched_shapes() {
        let slice = Array2::zeros((8, 9));
        assert!(render_overlay(&slice, &square(), &square(), 1).is_err());
    }

    #[test]
    fn histogram_chart_size() {
        let h = ScarSizeHistogram::from_volumes([10.0, 60.0, 700.0]);
        let img = render_histogram(&h);
        assert_eq!(img.dimensions(), (20 + 11 * 28, 220));
    }
}
