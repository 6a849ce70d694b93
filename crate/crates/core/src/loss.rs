//! Composite segmentation loss: an active-contour term (contour length plus
//! weighted region area mismatch) mixed with pixel-wise binary cross-entropy
//! and soft Dice.
//!
//! Every term has a value-only form and a `*_grad` form returning the gradient
//! with respect to each predicted probability. Both share one implementation
//! that optionally accumulates `weight * d(term)/d(pred)` into a buffer, which
//! is how [`combined_loss_grad`] assembles its gradient in a single pass per term.
//!
//! Conventions:
//! - finite differences are forward, `dx(i,j) = p(i+1,j) - p(i,j)` and
//!   `dy(i,j) = p(i,j+1) - p(i,j)`, summed over the `(H-1) x (W-1)` overlap;
//! - the length and area terms are sums, BCE is a per-pixel mean, Dice is a ratio;
//! - ground truth may be soft (any value in `[0, 1]`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, GridError, ProbabilityMap};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("length term needs at least 2x2 pixels, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// Loss hyperparameters.
///
/// `total = gamma * (length + lambda * area) + beta * (alpha * bce + (1 - alpha) * dice)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the area term inside the active-contour loss.
    pub lambda: f64,
    /// BCE share of the pixel-wise block; Dice gets `1 - alpha`.
    pub alpha: f64,
    /// Weight of the pixel-wise block.
    pub beta: f64,
    /// Weight of the active-contour block.
    pub gamma: f64,
    /// Added under the square root of the length term.
    pub epsilon: f64,
    /// Probabilities are clamped to `[prob_clamp, 1 - prob_clamp]` before the BCE logs.
    pub prob_clamp: f64,
    /// Additive smoothing in the Dice numerator and denominator.
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            alpha: 0.5,
            beta: 0.75,
            gamma: 0.25,
            epsilon: 1e-6,
            prob_clamp: 1e-7,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    /// Pixel-wise block only (`gamma = 0`, `beta = 1`), other fields unchanged.
    pub fn pixelwise_only(self) -> Self {
        Self {
            gamma: 0.0,
            beta: 1.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |msg: String| Err(LossError::InvalidConfig(msg));
        let fields = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
            ("prob_clamp", self.prob_clamp),
            ("dice_smooth", self.dice_smooth),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.beta < 0.0 {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.gamma < 0.0 {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.epsilon <= 0.0 {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return bad(format!("prob_clamp must lie in (0, 0.5), got {}", self.prob_clamp));
        }
        if self.dice_smooth < 0.0 {
            return bad(format!("dice_smooth must be >= 0, got {}", self.dice_smooth));
        }
        Ok(())
    }
}

/// Individual terms of one [`combined_loss`] evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub length: T,
    pub area: T,
    pub ac: T,
    pub bce: T,
    pub dice: T,
    pub total: T,
}

type Accum<'a, T> = Option<(&'a mut [T], T)>;

fn check_pair<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>) -> Result<(), LossError> {
    pred.check_same_shape(gt).map_err(LossError::from)
}

fn length_impl<T: Scalar>(pred: &ProbabilityMap<T>, epsilon: T, grad: Accum<'_, T>) -> Result<T, LossError> {
    let (h, w) = pred.shape();
    if h < 2 || w < 2 {
        return Err(LossError::TooSmall { height: h, width: w });
    }
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(LossError::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    let p = pred.as_slice();
    let mut total = T::zero();
    match grad {
        None => {
            for (row, next) in p.chunks_exact(w).zip(p.chunks_exact(w).skip(1)) {
                for j in 0..w - 1 {
                    let dx = next[j] - row[j];
                    let dy = row[j + 1] - row[j];
                    total += ((dx * dx + dy * dy).abs() + epsilon).sqrt();
                }
            }
        }
        Some((g, weight)) => {
            for i in 0..h - 1 {
                for j in 0..w - 1 {
                    let at = i * w + j;
                    let dx = p[at + w] - p[at];
                    let dy = p[at + 1] - p[at];
                    let s = ((dx * dx + dy * dy).abs() + epsilon).sqrt();
                    total += s;
                    let gx = weight * dx / s;
                    let gy = weight * dy / s;
                    g[at + w] += gx;
                    g[at + 1] += gy;
                    g[at] -= gx + gy;
                }
            }
        }
    }
    Ok(total)
}

fn area_impl<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, grad: Accum<'_, T>) -> Result<T, LossError> {
    check_pair(pred, gt)?;
    let one = T::one();
    let (mut outside, mut inside) = (T::zero(), T::zero());
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        outside += p * (one - g) * (one - g);
        inside += (one - p) * g * g;
    }
    if let Some((buf, weight)) = grad {
        // d|s|/ds taken as +1 at s = 0; both sums are nonnegative on [0, 1] inputs.
        let so = if outside < T::zero() { -weight } else { weight };
        let si = if inside < T::zero() { -weight } else { weight };
        for (d, &g) in buf.iter_mut().zip(gt.as_slice()) {
            *d += so * (one - g) * (one - g) - si * g * g;
        }
    }
    Ok(outside.abs() + inside.abs())
}

fn bce_impl<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, clamp: T, grad: Accum<'_, T>) -> Result<T, LossError> {
    check_pair(pred, gt)?;
    if !(clamp > T::zero() && clamp < T::lit(0.5)) {
        return Err(LossError::InvalidConfig(format!("BCE clamp must lie in (0, 0.5), got {clamp}")));
    }
    let one = T::one();
    let hi = one - clamp;
    let n = T::from_usize(pred.as_slice().len()).unwrap();
    let mut sum = T::zero();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let q = p.max(clamp).min(hi);
        sum -= g * q.ln() + (one - g) * (one - q).ln();
    }
    if let Some((buf, weight)) = grad {
        let scale = weight / n;
        for ((d, &p), &g) in buf.iter_mut().zip(pred.as_slice()).zip(gt.as_slice()) {
            // Clamped pixels sit on a flat piece of the loss.
            if p > clamp && p < hi {
                *d += scale * ((one - g) / (one - p) - g / p);
            }
        }
    }
    Ok(sum / n)
}

fn dice_impl<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, smooth: T, grad: Accum<'_, T>) -> Result<T, LossError> {
    check_pair(pred, gt)?;
    if smooth < T::zero() || !smooth.is_finite() {
        return Err(LossError::InvalidConfig(format!("Dice smoothing must be >= 0, got {smooth}")));
    }
    let two = T::lit(2.0);
    let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = two * inter + smooth;
    let den = sp + sg + smooth;
    if den == T::zero() {
        // Empty prediction against empty truth: perfect match, flat gradient.
        return Ok(T::zero());
    }
    if let Some((buf, weight)) = grad {
        let den2 = den * den;
        for (d, &g) in buf.iter_mut().zip(gt.as_slice()) {
            *d -= weight * (two * g * den - num) / den2;
        }
    }
    Ok(T::one() - num / den)
}

/// Contour length: `sum sqrt(|dx^2 + dy^2| + epsilon)` over the forward-difference overlap.
pub fn length_term<T: Scalar>(pred: &ProbabilityMap<T>, epsilon: T) -> Result<T, LossError> {
    length_impl(pred, epsilon, None)
}

pub fn length_term_grad<T: Scalar>(pred: &ProbabilityMap<T>, epsilon: T) -> Result<(T, Grid<T>), LossError> {
    let mut g = zeros_like(pred);
    let v = length_impl(pred, epsilon, Some((g.as_mut_slice(), T::one())))?;
    Ok((v, g))
}

/// Region mismatch: `|sum p (1-g)^2| + |sum (1-p) g^2|`.
pub fn area_term<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>) -> Result<T, LossError> {
    area_impl(pred, gt, None)
}

pub fn area_term_grad<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>) -> Result<(T, Grid<T>), LossError> {
    let mut g = zeros_like(pred);
    let v = area_impl(pred, gt, Some((g.as_mut_slice(), T::one())))?;
    Ok((v, g))
}

/// Active-contour loss `length + lambda * area`.
pub fn ac_loss<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, cfg: &LossConfig) -> Result<T, LossError> {
    cfg.validate()?;
    check_pair(pred, gt)?;
    let length = length_impl(pred, T::lit(cfg.epsilon), None)?;
    let area = area_impl(pred, gt, None)?;
    Ok(length + T::lit(cfg.lambda) * area)
}

pub fn ac_loss_grad<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, cfg: &LossConfig) -> Result<(T, Grid<T>), LossError> {
    cfg.validate()?;
    check_pair(pred, gt)?;
    let lambda = T::lit(cfg.lambda);
    let mut g = zeros_like(pred);
    let length = length_impl(pred, T::lit(cfg.epsilon), Some((g.as_mut_slice(), T::one())))?;
    let area = area_impl(pred, gt, Some((g.as_mut_slice(), lambda)))?;
    Ok((length + lambda * area, g))
}

/// Mean pixel-wise binary cross-entropy with clamped log arguments.
pub fn bce_loss<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, clamp: T) -> Result<T, LossError> {
    bce_impl(pred, gt, clamp, None)
}

pub fn bce_loss_grad<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, clamp: T) -> Result<(T, Grid<T>), LossError> {
    let mut g = zeros_like(pred);
    let v = bce_impl(pred, gt, clamp, Some((g.as_mut_slice(), T::one())))?;
    Ok((v, g))
}

/// Soft Dice loss `1 - (2 sum pg + s) / (sum p + sum g + s)`. Two all-zero maps
/// with `s = 0` count as a perfect match (loss 0).
pub fn dice_loss<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, smooth: T) -> Result<T, LossError> {
    dice_impl(pred, gt, smooth, None)
}

pub fn dice_loss_grad<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, smooth: T) -> Result<(T, Grid<T>), LossError> {
    let mut g = zeros_like(pred);
    let v = dice_impl(pred, gt, smooth, Some((g.as_mut_slice(), T::one())))?;
    Ok((v, g))
}

fn compose<T: Scalar>(cfg: &LossConfig, ac: T, bce: T, dice: T) -> T {
    let alpha = T::lit(cfg.alpha);
    T::lit(cfg.gamma) * ac + T::lit(cfg.beta) * (alpha * bce + (T::one() - alpha) * dice)
}

/// Full training objective.
pub fn combined_loss<T: Scalar>(pred: &ProbabilityMap<T>, gt: &ProbabilityMap<T>, cfg: &LossConfig) -> Result<T, LossError> {
    Ok(combined_loss_breakdown(pred, gt, cfg)?.total)
}

pub fn combined_loss_breakdown<T: Scalar>(
    pred: &ProbabilityMap<T>,
    gt: &ProbabilityMap<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>, LossError> {
    cfg.validate()?;
    check_pair(pred, gt)?;
    let length = length_impl(pred, T::lit(cfg.epsilon), None)?;
    let area = area_impl(pred, gt, None)?;
    let ac = length + T::lit(cfg.lambda) * area;
    let bce = bce_impl(pred, gt, T::lit(cfg.prob_clamp), None)?;
    let dice = dice_impl(pred, gt, T::lit(cfg.dice_smooth), None)?;
    Ok(LossBreakdown {
        length,
        area,
        ac,
        bce,
        dice,
        total: compose(cfg, ac, bce, dice),
    })
}

pub fn combined_loss_grad<T: Scalar>(
    pred: &ProbabilityMap<T>,
    gt: &ProbabilityMap<T>,
    cfg: &LossConfig,
) -> Result<(T, Grid<T>), LossError> {
    cfg.validate()?;
    check_pair(pred, gt)?;
    let gamma = T::lit(cfg.gamma);
    let beta = T::lit(cfg.beta);
    let alpha = T::lit(cfg.alpha);
    let lambda = T::lit(cfg.lambda);
    let mut g = zeros_like(pred);
    let buf = g.as_mut_slice();
    let length = length_impl(pred, T::lit(cfg.epsilon), Some((&mut *buf, gamma)))?;
    let area = area_impl(pred, gt, Some((&mut *buf, gamma * lambda)))?;
    let bce = bce_impl(pred, gt, T::lit(cfg.prob_clamp), Some((&mut *buf, beta * alpha)))?;
    let dice = dice_impl(pred, gt, T::lit(cfg.dice_smooth), Some((&mut *buf, beta * (T::one() - alpha))))?;
    let ac = length + lambda * area;
    Ok((compose(cfg, ac, bce, dice), g))
}

fn zeros_like<T: Scalar>(p: &ProbabilityMap<T>) -> Grid<T> {
    Grid::filled(p.height(), p.width(), T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BinaryMask;

    fn pm(h: usize, w: usize, v: Vec<f64>) -> ProbabilityMap<f64> {
        ProbabilityMap::from_vec(h, w, v).unwrap()
    }

    #[test]
    fn length_of_constant_map_is_interior_count_times_sqrt_eps() {
        let p = ProbabilityMap::filled(4, 4, 0.5f64).unwrap();
        let v = length_term(&p, 1e-6).unwrap();
        assert!((v - 9e-3).abs() < 1e-15);
    }

    #[test]
    fn length_of_vertical_edge() {
        let p = pm(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let v = length_term(&p, 1e-6).unwrap();
        assert!((v - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!((v - 1.0000005).abs() < 1e-9);
    }

    #[test]
    fn length_rejects_thin_maps_and_bad_epsilon() {
        let row = pm(1, 5, vec![0.1; 5]);
        assert_eq!(length_term(&row, 1e-6), Err(LossError::TooSmall { height: 1, width: 5 }));
        let sq = pm(2, 2, vec![0.1; 4]);
        assert!(matches!(length_term(&sq, 0.0), Err(LossError::InvalidConfig(_))));
    }

    #[test]
    fn area_examples() {
        let ones = pm(3, 3, vec![1.0; 9]);
        let zeros = pm(3, 3, vec![0.0; 9]);
        assert_eq!(area_term(&ones, &zeros).unwrap(), 9.0);
        assert_eq!(area_term(&pm(1, 1, vec![0.5]), &pm(1, 1, vec![1.0])).unwrap(), 0.5);
        let m = BinaryMask::from_fn(5, 4, |i, j| (i * 3 + j) % 4 == 1).to_probability::<f64>();
        assert_eq!(area_term(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn area_rejects_shape_mismatch() {
        let a = pm(2, 2, vec![0.0; 4]);
        let b = pm(2, 3, vec![0.0; 6]);
        assert!(matches!(area_term(&a, &b), Err(LossError::Grid(GridError::ShapeMismatch { .. }))));
        assert!(bce_loss(&a, &b, 1e-7).is_err());
        assert!(dice_loss(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ac_loss_examples() {
        let z = ProbabilityMap::filled(4, 4, 0.0f64).unwrap();
        let cfg = LossConfig::default();
        assert!((ac_loss(&z, &z, &cfg).unwrap() - 9e-3).abs() < 1e-15);

        let p = pm(3, 3, vec![0.1, 0.9, 0.3, 0.4, 0.2, 0.8, 0.7, 0.6, 0.5]);
        let g = pm(3, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let no_area = LossConfig { lambda: 0.0, ..cfg };
        assert_eq!(ac_loss(&p, &g, &no_area).unwrap(), length_term(&p, 1e-6).unwrap());
    }

    #[test]
    fn bce_examples() {
        let ones = ProbabilityMap::filled(2, 2, 1.0f64).unwrap();
        let v = bce_loss(&ones, &ones, 1e-7).unwrap();
        assert!((v - (-(1.0f64 - 1e-7).ln())).abs() < 1e-18);
        assert!((v - 1e-7).abs() < 1e-13);

        let half = ProbabilityMap::filled(2, 3, 0.5f64).unwrap();
        let g = pm(2, 3, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert!((bce_loss(&half, &g, 1e-7).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&half, &g, 0.5).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = BinaryMask::from_fn(4, 4, |i, j| i < 2 && j < 3).to_probability::<f64>();
        let b = BinaryMask::from_fn(4, 4, |i, j| i >= 2 && j < 3).to_probability::<f64>();
        assert_eq!(dice_loss(&a, &a, 0.0).unwrap(), 0.0);
        assert_eq!(dice_loss(&a, &b, 0.0).unwrap(), 1.0);
        let empty = ProbabilityMap::filled(4, 4, 0.0f64).unwrap();
        assert_eq!(dice_loss(&empty, &empty, 0.0).unwrap(), 0.0);
        let (v, g) = dice_loss_grad(&empty, &empty, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn combined_reduces_to_bce_and_to_pixelwise_mix() {
        let p = pm(2, 3, vec![0.2, 0.7, 0.9, 0.1, 0.5, 0.6]);
        let g = pm(2, 3, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let bce_only = LossConfig {
            gamma: 0.0,
            beta: 1.0,
            alpha: 1.0,
            ..LossConfig::default()
        };
        assert_eq!(combined_loss(&p, &g, &bce_only).unwrap(), bce_loss(&p, &g, 1e-7).unwrap());

        let cfg = LossConfig::default().pixelwise_only();
        let want = 0.5 * bce_loss(&p, &g, 1e-7).unwrap() + 0.5 * dice_loss(&p, &g, 1.0).unwrap();
        assert_eq!(combined_loss(&p, &g, &cfg).unwrap(), want);
    }

    #[test]
    fn combined_on_perfect_zero_prediction_keeps_length_residual() {
        let z = ProbabilityMap::filled(4, 4, 0.0f64).unwrap();
        let v = combined_loss(&z, &z, &LossConfig::default()).unwrap();
        let want = 0.25 * 9e-3 + 0.75 * (0.5 * -(1.0f64 - 1e-7).ln() + 0.0);
        assert!((v - want).abs() < 1e-15);
        assert!((v - 2.25e-3).abs() < 1e-7);
    }

    #[test]
    fn combined_grad_value_matches_value_path() {
        let p = pm(3, 3, vec![0.1, 0.9, 0.3, 0.4, 0.2, 0.8, 0.7, 0.6, 0.5]);
        let g = pm(3, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let cfg = LossConfig::default();
        let (v, _) = combined_loss_grad(&p, &g, &cfg).unwrap();
        assert_eq!(v, combined_loss(&p, &g, &cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let cases = [
            LossConfig { lambda: -1.0, ..LossConfig::default() },
            LossConfig { alpha: 1.5, ..LossConfig::default() },
            LossConfig { beta: -0.1, ..LossConfig::default() },
            LossConfig { gamma: f64::NAN, ..LossConfig::default() },
            LossConfig { epsilon: 0.0, ..LossConfig::default() },
            LossConfig { prob_clamp: 0.5, ..LossConfig::default() },
            LossConfig { dice_smooth: -1.0, ..LossConfig::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = toml::from_str::<LossConfig>("lamda = 3.0").unwrap_err();
        assert!(err.to_string().contains("lamda"));
        let partial: LossConfig = toml::from_str("lambda = 2.0").unwrap();
        assert_eq!(partial.lambda, 2.0);
        assert_eq!(partial.gamma, 0.25);
    }
}
