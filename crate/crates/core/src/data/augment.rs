//! Random geometric and photometric augmentation.
//!
//! Geometric transforms are folded into one sampling map (a [`Warp`]) that
//! is applied to the image bilinearly and to the mask by nearest neighbour,
//! so both move in lockstep. Out-of-frame samples reflect at the border.
//! CLAHE touches the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{BinaryMask, Grid};
use crate::scalar::Scalar;

use super::{clahe, DataError, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Rotation angle drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Translation per axis drawn from `[-shift_frac, shift_frac]` of the side.
    pub shift_frac: f64,
    /// Zoom factor drawn from `[1 - scale_frac, 1 + scale_frac]`.
    pub scale_frac: f64,
    pub shear_deg: f64,
    pub clahe_prob: f64,
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    pub elastic_prob: f64,
    /// Largest displacement of the elastic field, in pixels.
    pub elastic_magnitude: f64,
    /// Gaussian smoothing of the elastic noise, in pixels.
    pub elastic_sigma: f64,
    /// Master seed of the per-sample, per-epoch draws.
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_deg: 30.0,
            shift_frac: 0.1,
            scale_frac: 0.1,
            shear_deg: 10.0,
            clahe_prob: 0.5,
            clahe_clip: 2.0,
            clahe_tiles: 8,
            elastic_prob: 0.5,
            elastic_magnitude: 8.0,
            elastic_sigma: 16.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform switched off.
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_deg: 0.0,
            shift_frac: 0.0,
            scale_frac: 0.0,
            shear_deg: 0.0,
            clahe_prob: 0.0,
            elastic_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidConfig(format!("augmentation: {m}")));
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
            ("clahe_prob", self.clahe_prob),
            ("elastic_prob", self.elastic_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, v, hi) in [
            ("rotation_deg", self.rotation_deg, 180.0),
            ("shift_frac", self.shift_frac, 1.0),
            ("shear_deg", self.shear_deg, 60.0),
            ("clahe_clip", self.clahe_clip, f64::MAX),
            ("elastic_magnitude", self.elastic_magnitude, f64::MAX),
        ] {
            if !v.is_finite() || !(0.0..=hi).contains(&v) {
                return fail(format!("{name} = {v} outside [0, {hi}]"));
            }
        }
        if !self.scale_frac.is_finite() || !(0.0..1.0).contains(&self.scale_frac) {
            return fail(format!("scale_frac = {} outside [0, 1)", self.scale_frac));
        }
        if self.clahe_tiles == 0 {
            return fail("clahe_tiles must be positive".into());
        }
        if !(self.elastic_sigma.is_finite() && self.elastic_sigma > 0.0) {
            return fail("elastic_sigma must be positive".into());
        }
        Ok(())
    }
}

/// A per-pixel sampling map: output pixel `(i, j)` reads the source at
/// [`Warp::source`].
#[derive(Debug, Clone, PartialEq)]
pub struct Warp {
    pub height: usize,
    pub width: usize,
    /// Inverse affine map `[a, b, c, d]` applied around the centre:
    /// `src = M (q - centre - shift) + centre`, with `M = [[a, b], [c, d]]`
    /// acting on `(x, y)`.
    pub inverse: [f64; 4],
    pub shift: (f64, f64),
    /// Elastic displacements `(dy, dx)` added to output coordinates before
    /// the affine part.
    pub elastic: Option<(Grid<f64>, Grid<f64>)>,
}

fn reflect(c: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = c.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < 1e-9 {
        r
    } else {
        c
    }
}

impl Warp {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            inverse: [1.0, 0.0, 0.0, 1.0],
            shift: (0.0, 0.0),
            elastic: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.inverse == [1.0, 0.0, 0.0, 1.0] && self.shift == (0.0, 0.0) && self.elastic.is_none()
    }

    /// Source `(row, col)` for an output pixel, reflected into the frame.
    pub fn source(&self, i: usize, j: usize) -> (f64, f64) {
        let (mut y, mut x) = (i as f64, j as f64);
        if let Some((dy, dx)) = &self.elastic {
            y += dy.get(i, j);
            x += dx.get(i, j);
        }
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let qx = x - cx - self.shift.1;
        let qy = y - cy - self.shift.0;
        let [a, b, c, d] = self.inverse;
        let sx = a * qx + b * qy + cx;
        let sy = c * qx + d * qy + cy;
        (snap(reflect(sy, self.height)), snap(reflect(sx, self.width)))
    }

    pub fn warp_image<T: Scalar>(&self, img: &Grid<T>) -> Grid<T> {
        assert_eq!(img.shape(), (self.height, self.width), "warp size mismatch");
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = img.shape();
        Grid::from_fn(h, w, |i, j| {
            let (y, x) = self.source(i, j);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            if fy == 0.0 && fx == 0.0 {
                return img.get(y0, x0);
            }
            let v = |a: usize, b: usize| img.get(a, b).as_f64();
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            T::lit(top * (1.0 - fy) + bottom * fy)
        })
    }

    pub fn warp_mask(&self, mask: &BinaryMask) -> BinaryMask {
        assert_eq!(mask.shape(), (self.height, self.width), "warp size mismatch");
        if self.is_identity() {
            return mask.clone();
        }
        let (h, w) = mask.shape();
        BinaryMask::from_fn(h, w, |i, j| {
            let (y, x) = self.source(i, j);
            mask.get((y.round() as usize).min(h - 1), (x.round() as usize).min(w - 1))
        })
    }
}

/// What one [`augment`] call did, enough to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRecord {
    pub warp: Warp,
    pub clahe: bool,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_axis(src: &Grid<f64>, kernel: &[f64], along_rows: bool) -> Grid<f64> {
    let (h, w) = src.shape();
    let r = (kernel.len() / 2) as i64;
    Grid::from_fn(h, w, |i, j| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, &kv)| {
                let off = t as i64 - r;
                if along_rows {
                    src.get(reflect((i as i64 + off) as f64, h) as usize, j) * kv
                } else {
                    src.get(i, reflect((j as i64 + off) as f64, w) as usize) * kv
                }
            })
            .sum()
    })
}

/// Smooth random displacement field `(dy, dx)`: uniform `[-1, 1]` noise
/// (all of `dy` row-major, then all of `dx`), Gaussian-blurred with
/// reflecting borders, rescaled so the largest absolute component equals
/// `magnitude`.
pub fn elastic_field<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    magnitude: f64,
    sigma: f64,
    rng: &mut R,
) -> (Grid<f64>, Grid<f64>) {
    let kernel = gaussian_kernel(sigma);
    let mut field = || {
        let noise = Grid::from_fn(height, width, |_, _| rng.gen_range(-1.0..=1.0));
        blur_axis(&blur_axis(&noise, &kernel, true), &kernel, false)
    };
    let dy = field();
    let dx = field();
    let peak = dy.as_slice().iter().chain(dx.as_slice()).fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { magnitude / peak } else { 0.0 };
    (dy.map(|v| v * k), dx.map(|v| v * k))
}

/// Applies a random draw of `cfg` to `sample`. The draw is a pure function
/// of `(cfg, draw_seed)`.
pub fn augment<T: Scalar>(
    sample: &Sample<T>,
    cfg: &AugmentationConfig,
    draw_seed: u64,
) -> Result<(Sample<T>, AugmentRecord), DataError> {
    cfg.validate()?;
    let (h, w) = sample.shape();
    let mut warp = Warp::identity(h, w);
    if !cfg.enabled {
        return Ok((sample.clone(), AugmentRecord { warp, clahe: false }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    // Every draw happens unconditionally so a disabled transform never
    // shifts the stream seen by the others.
    let mut sym = |r: f64| r * (2.0 * rng.gen::<f64>() - 1.0);
    let hflip = sym(1.0) * 0.5 + 0.5 < cfg.hflip_prob;
    let vflip = sym(1.0) * 0.5 + 0.5 < cfg.vflip_prob;
    let angle = sym(cfg.rotation_deg).to_radians();
    let shift = (sym(cfg.shift_frac) * h as f64, sym(cfg.shift_frac) * w as f64);
    let scale = 1.0 + sym(cfg.scale_frac);
    let shear = sym(cfg.shear_deg).to_radians();
    let elastic = sym(1.0) * 0.5 + 0.5 < cfg.elastic_prob && cfg.elastic_magnitude > 0.0;
    let use_clahe = sym(1.0) * 0.5 + 0.5 < cfg.clahe_prob;

    // Forward map on (x, y): flip, then shear, rotation and zoom.
    let fx = if hflip { -1.0 } else { 1.0 };
    let fy = if vflip { -1.0 } else { 1.0 };
    let (s, c) = angle.sin_cos();
    let t = shear.tan();
    // A = scale * R * Sh * F, with Sh = [[1, t], [0, 1]] and F = diag(fx, fy).
    let a = [scale * c * fx, scale * (c * t - s) * fy, scale * s * fx, scale * (s * t + c) * fy];
    let det = a[0] * a[3] - a[1] * a[2];
    warp.inverse = [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det];
    for v in &mut warp.inverse {
        *v = snap(*v);
        if *v == 0.0 {
            *v = 0.0;
        }
    }
    warp.shift = shift;
    if elastic {
        warp.elastic = Some(elastic_field(h, w, cfg.elastic_magnitude, cfg.elastic_sigma, &mut rng));
    }

    let mut image = warp.warp_image(&sample.image);
    if use_clahe {
        image = clahe(&image, cfg.clahe_clip, cfg.clahe_tiles);
    }
    let out = Sample {
        id: sample.id.clone(),
        dataset: sample.dataset.clone(),
        image,
        mask: warp.warp_mask(&sample.mask),
    };
    Ok((out, AugmentRecord { warp, clahe: use_clahe }))
}
