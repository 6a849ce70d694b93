//! Contrast-limited adaptive histogram equalization on `[0, 1]` images.

use crate::grid::Grid;
use crate::scalar::Scalar;

const BINS: usize = 256;

fn bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f64).round() as usize).min(BINS - 1)
}

/// Equalizes each tile of a `tiles x tiles` grid with its histogram clipped
/// at `clip_limit` times the uniform bin height, then blends the four
/// nearest tile mappings bilinearly. Output stays in `[0, 1]`.
pub fn clahe<T: Scalar>(image: &Grid<T>, clip_limit: f64, tiles: usize) -> Grid<T> {
    let (h, w) = image.shape();
    let tile_h = h.div_ceil(tiles.clamp(1, h));
    let tile_w = w.div_ceil(tiles.clamp(1, w));
    // Rounding the tile size up can leave fewer, non-empty tiles.
    let ty = h.div_ceil(tile_h);
    let tx = w.div_ceil(tile_w);
    let bins: Vec<usize> = image.as_slice().iter().map(|v| bin(v.as_f64())).collect();

    let mut luts = vec![[0.0f64; BINS]; ty * tx];
    for a in 0..ty {
        for b in 0..tx {
            let (r0, r1) = (a * tile_h, ((a + 1) * tile_h).min(h));
            let (c0, c1) = (b * tile_w, ((b + 1) * tile_w).min(w));
            let mut hist = [0usize; BINS];
            for i in r0..r1 {
                for &k in &bins[i * w + c0..i * w + c1] {
                    hist[k] += 1;
                }
            }
            let area = (r1 - r0) * (c1 - c0);
            if clip_limit > 0.0 {
                let limit = ((clip_limit * area as f64 / BINS as f64) as usize).max(1);
                let mut excess = 0;
                for c in hist.iter_mut() {
                    if *c > limit {
                        excess += *c - limit;
                        *c = limit;
                    }
                }
                let (each, rest) = (excess / BINS, excess % BINS);
                hist.iter_mut().for_each(|c| *c += each);
                // Spread the remainder evenly over the range.
                if rest > 0 {
                    let stride = BINS / rest;
                    for k in (0..BINS).step_by(stride).take(rest) {
                        hist[k] += 1;
                    }
                }
            }
            let lut = &mut luts[a * tx + b];
            let mut acc = 0;
            for (k, c) in hist.iter().enumerate() {
                acc += c;
                lut[k] = acc as f64 / area as f64;
            }
        }
    }

    // Position of a pixel centre in tile-centre coordinates.
    let locate = |p: usize, size: usize, n: usize| {
        let f = ((p as f64 + 0.5) / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(n - 1), f - i0 as f64)
    };
    Grid::from_fn(h, w, |i, j| {
        let k = bins[i * w + j];
        let (a0, a1, fy) = locate(i, tile_h, ty);
        let (b0, b1, fx) = locate(j, tile_w, tx);
        let l = |a: usize, b: usize| luts[a * tx + b][k];
        let v = (l(a0, b0) * (1.0 - fx) + l(a0, b1) * fx) * (1.0 - fy) + (l(a1, b0) * (1.0 - fx) + l(a1, b1) * fx) * fy;
        T::lit(v.clamp(0.0, 1.0))
    })
}
