//! Aspect-preserving resize to a square working resolution.

use crate::grid::{BinaryMask, Grid};
use crate::scalar::Scalar;

use super::{DataError, Sample};

/// Dimensions after scaling so the shorter side equals `target`; the longer
/// side is rounded to the nearest pixel.
pub fn scaled_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let short = height.min(width) as f64;
    let scale = target as f64 / short;
    let long = |n: usize| ((n as f64 * scale).round() as usize).max(target);
    if height <= width {
        (target, long(width))
    } else {
        (long(height), target)
    }
}

fn source_coord(o: usize, input: usize, output: usize) -> f64 {
    ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64)
}

/// Half-pixel-centred bilinear resampling.
pub fn resize_bilinear<T: Scalar>(src: &Grid<T>, out_h: usize, out_w: usize) -> Grid<T> {
    let (h, w) = src.shape();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|j| {
            let x = source_coord(j, w, out_w);
            let x0 = x.floor() as usize;
            (x0, (x0 + 1).min(w - 1), x - x0 as f64)
        })
        .collect();
    Grid::from_fn(out_h, out_w, |i, j| {
        let y = source_coord(i, h, out_h);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        let (x0, x1, fx) = cols[j];
        let v = |a: usize, b: usize| src.get(a, b).as_f64();
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        T::lit(top * (1.0 - fy) + bottom * fy)
    })
}

/// Nearest-neighbour resampling with the same pixel-centre convention.
pub fn resize_nearest(src: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (h, w) = src.shape();
    let pick = |o: usize, input: usize, output: usize| (((o as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1);
    BinaryMask::from_fn(out_h, out_w, |i, j| src.get(pick(i, h, out_h), pick(j, w, out_w)))
}

/// Scales so the shorter side equals `target` (image bilinear, mask
/// nearest), then centre-crops the longer side to `target`.
pub fn resize_and_crop<T: Scalar>(sample: &Sample<T>, target: usize) -> Result<Sample<T>, DataError> {
    let (h, w) = sample.shape();
    if h < 2 || w < 2 || target == 0 {
        return Err(DataError::Degenerate {
            id: sample.id.clone(),
            height: h,
            width: w,
        });
    }
    let (sh, sw) = scaled_dims(h, w, target);
    let image = resize_bilinear(&sample.image, sh, sw);
    let mask = resize_nearest(&sample.mask, sh, sw);
    let (top, left) = ((sh - target) / 2, (sw - target) / 2);
    Ok(Sample {
        id: sample.id.clone(),
        dataset: sample.dataset.clone(),
        image: Grid::from_fn(target, target, |i, j| image.get(top + i, left + j)),
        mask: BinaryMask::from_fn(target, target, |i, j| mask.get(top + i, left + j)),
    })
}
