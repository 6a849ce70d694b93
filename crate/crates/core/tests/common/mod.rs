//! Shared fixtures for the integration tests: independent reference
//! implementations, the criterion suites, and synthetic data.
#![allow(dead_code)]

pub mod oracles;
pub mod suites;

use auranet::data::Sample;
use auranet::model::{Model, ModelConfig};
use auranet::{BinaryMask, Grid, ProbabilityMap, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probability map with entries drawn from `[lo, hi]`.
pub fn random_prob<T: Scalar>(h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ProbabilityMap<T> {
    let data = (0..h * w).map(|_| T::lit(rng.gen_range(lo..=hi))).collect();
    ProbabilityMap::from_vec(h, w, data).unwrap()
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

/// Converts precision through `f64`.
pub fn cast<A: Scalar, B: Scalar>(p: &ProbabilityMap<A>) -> ProbabilityMap<B> {
    let (h, w) = p.shape();
    ProbabilityMap::from_vec(h, w, p.as_slice().iter().map(|v| B::lit(v.as_f64())).collect()).unwrap()
}

/// A phase-contrast-like frame: one elliptical cell, darker inside, with a
/// bright halo at its rim, over a textured background. The mask is the
/// ellipse interior.
pub fn synthetic_cell<T: Scalar>(id: &str, h: usize, w: usize, seed: u64) -> Sample<T> {
    let mut r = rng(seed);
    let cy = r.gen_range(0.35..0.65) * h as f64;
    let cx = r.gen_range(0.35..0.65) * w as f64;
    let ry = r.gen_range(0.15..0.3) * h as f64;
    let rx = r.gen_range(0.15..0.3) * w as f64;
    let theta: f64 = r.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let radius = |i: usize, j: usize| {
        let (y, x) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
        let u = (c * x + s * y) / rx;
        let v = (-s * x + c * y) / ry;
        (u * u + v * v).sqrt()
    };
    let mask = BinaryMask::from_fn(h, w, |i, j| radius(i, j) <= 1.0);
    let image = Grid::from_fn(h, w, |i, j| {
        let d = radius(i, j);
        let halo = (-((d - 1.05) * 12.0).powi(2)).exp();
        let body = if d <= 1.0 { 0.3 } else { 0.5 };
        let texture = 0.03 * (((i * 13 + j * 7) % 11) as f64 / 11.0 - 0.5) + r.gen_range(-0.02..0.02);
        T::lit((body + 0.4 * halo + texture).clamp(0.0, 1.0))
    });
    Sample::new(id, "synthetic", image, mask).unwrap()
}

pub fn synthetic_set<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Vec<Sample<T>> {
    (0..n).map(|k| synthetic_cell(&format!("cell{k:03}"), h, w, seed * 1000 + k as u64)).collect()
}

/// Writes samples in the on-disk dataset layout (8-bit images, 0/255 masks).
pub fn write_dataset<T: Scalar>(root: &std::path::Path, samples: &[Sample<T>]) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    for s in samples {
        let (h, w) = s.shape();
        let px: Vec<u8> = s.image.as_slice().iter().map(|v| (v.as_f64() * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(w as u32, h as u32, px)
            .unwrap()
            .save(root.join("images").join(format!("{}.png", s.id)))
            .unwrap();
        auranet::data::save_mask(&root.join("masks").join(format!("{}.png", s.id)), &s.mask).unwrap();
    }
}

/// Stand-in for the ImageNet encoder archive: a ResNet-18 trunk from a
/// fixed seed, exported in the pretrained layout. Real weights need a
/// network fetch that the test environment does not have.
pub fn stand_in_pretrained<T: Scalar>() -> auranet::archive::TensorArchive<T> {
    let cfg = ModelConfig {
        pretrained: false,
        attention: false,
        input_size: [32, 32],
        ..ModelConfig::default()
    };
    Model::<T>::build(&cfg, 0x5eed_1a6e, None).unwrap().export_encoder().unwrap()
}
