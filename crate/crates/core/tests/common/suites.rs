//! Checks shared by the topic tests and the acceptance report. Each returns
//! a one-line summary on success and a description of the first failure
//! otherwise.

use auranet::loss::{self, LossConfig};
use auranet::metrics;
use auranet::{BinaryMask, Grid, ProbabilityMap, Scalar};
use rand::Rng;

use super::{cast, oracles, random_mask, random_prob, rng};

pub type Outcome = Result<String, String>;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL_F64: f64 = 1e-5;
pub const GRAD_TOL_F32: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-6;
pub const HAUSDORFF_TOL: f64 = 1e-9;

type GradFn<T> = fn(&ProbabilityMap<T>, &ProbabilityMap<T>, &LossConfig) -> (T, Grid<T>);
type ValueFn = fn(&ProbabilityMap<f64>, &ProbabilityMap<f64>, &LossConfig) -> f64;

fn terms<T: Scalar>() -> Vec<(&'static str, GradFn<T>, ValueFn)> {
    vec![
        (
            "length",
            |p, _, c| loss::length_term_grad(p, T::lit(c.epsilon)).unwrap(),
            |p, _, c| loss::length_term(p, c.epsilon).unwrap(),
        ),
        ("area", |p, g, _| loss::area_term_grad(p, g).unwrap(), |p, g, _| loss::area_term(p, g).unwrap()),
        ("ac", |p, g, c| loss::ac_loss_grad(p, g, c).unwrap(), |p, g, c| loss::ac_loss(p, g, c).unwrap()),
        (
            "bce",
            |p, g, c| loss::bce_loss_grad(p, g, T::lit(c.prob_clamp)).unwrap(),
            |p, g, c| loss::bce_loss(p, g, c.prob_clamp).unwrap(),
        ),
        (
            "dice",
            |p, g, c| loss::dice_loss_grad(p, g, T::lit(c.dice_smooth)).unwrap(),
            |p, g, c| loss::dice_loss(p, g, c.dice_smooth).unwrap(),
        ),
        (
            "combined",
            |p, g, c| loss::combined_loss_grad(p, g, c).unwrap(),
            |p, g, c| loss::combined_loss(p, g, c).unwrap(),
        ),
    ]
}

/// Central differences in double precision.
pub fn central_difference(f: impl Fn(&ProbabilityMap<f64>) -> f64, p: &ProbabilityMap<f64>, h: f64) -> Vec<f64> {
    let (rows, cols) = p.shape();
    (0..rows * cols)
        .map(|k| {
            let shifted = |d: f64| {
                let mut v = p.as_slice().to_vec();
                v[k] += d;
                ProbabilityMap::from_vec(rows, cols, v).unwrap()
            };
            (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
        })
        .collect()
}

/// Normwise relative error `max|a - n| / max|n|` of one gradient vector.
/// Entrywise ratios are not used: central differences carry an `O(h^2)`
/// truncation error that is large next to tiny components.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

fn gradient_instance(k: u64) -> (ProbabilityMap<f64>, ProbabilityMap<f64>) {
    let mut r = rng(0x6ead_0000 + k);
    let pred = random_prob::<f64>(8, 8, 0.05, 0.95, &mut r);
    let gt = if k % 2 == 0 {
        random_mask(8, 8, 0.4, &mut r).to_probability()
    } else {
        random_prob::<f64>(8, 8, 0.0, 1.0, &mut r)
    };
    (pred, gt)
}

/// Analytic gradients of every loss term against central differences on 20
/// random 8x8 inputs in `[0.05, 0.95]`, in both precisions.
pub fn loss_gradients() -> Outcome {
    let cfg = LossConfig::default();
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for k in 0..20 {
        let (pred, gt) = gradient_instance(k);
        // The f32 run sees exactly the values the f64 reference differentiates.
        let (pred32, gt32) = (cast::<f64, f32>(&pred), cast::<f64, f32>(&gt));
        let (pred_r, gt_r) = (cast::<f32, f64>(&pred32), cast::<f32, f64>(&gt32));
        for ((name, grad64, value), (_, grad32, _)) in terms::<f64>().into_iter().zip(terms::<f32>()) {
            let numeric = central_difference(|p| value(p, &gt, &cfg), &pred, FD_STEP);
            let (_, g) = grad64(&pred, &gt, &cfg);
            let e64 = relative_error(g.as_slice(), &numeric);
            if !(e64 < GRAD_TOL_F64) {
                return Err(format!("f64 {name} gradient, instance {k}: relative error {e64:.3e}"));
            }
            worst64 = worst64.max(e64);

            let numeric = central_difference(|p| value(p, &gt_r, &cfg), &pred_r, FD_STEP);
            let (_, g) = grad32(&pred32, &gt32, &cfg);
            let g: Vec<f64> = g.as_slice().iter().map(|v| *v as f64).collect();
            let e32 = relative_error(&g, &numeric);
            if !(e32 < GRAD_TOL_F32) {
                return Err(format!("f32 {name} gradient, instance {k}: relative error {e32:.3e}"));
            }
            worst32 = worst32.max(e32);
        }
    }
    Ok(format!(
        "6 terms x 20 inputs, max rel err f64 {worst64:.2e} (< {GRAD_TOL_F64:e}), f32 {worst32:.2e} (< {GRAD_TOL_F32:e})"
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn random_config(r: &mut impl Rng) -> LossConfig {
    LossConfig {
        lambda: r.gen_range(0.0..10.0),
        alpha: r.gen_range(0.0..=1.0),
        beta: r.gen_range(0.0..2.0),
        gamma: r.gen_range(0.0..2.0),
        ..LossConfig::default()
    }
}

/// Library values against the pixel-loop references on 100 random
/// instances, exact zero area for a perfect binary prediction, and the
/// pixel-wise-only degeneration.
pub fn loss_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let mut r = rng(0x0_c1e5 + k);
        let (h, w) = (r.gen_range(2..=24), r.gen_range(2..=24));
        let pred = random_prob::<f64>(h, w, 0.0, 1.0, &mut r);
        let gt = if r.gen_bool(0.5) {
            random_mask(h, w, r.gen_range(0.0..1.0), &mut r).to_probability()
        } else {
            random_prob::<f64>(h, w, 0.0, 1.0, &mut r)
        };
        let cfg = if k == 0 { LossConfig::default() } else { random_config(&mut r) };
        let pairs = [
            ("length", loss::length_term(&pred, cfg.epsilon).unwrap(), oracles::length(&pred, cfg.epsilon)),
            ("area", loss::area_term(&pred, &gt).unwrap(), oracles::area(&pred, &gt)),
            ("bce", loss::bce_loss(&pred, &gt, cfg.prob_clamp).unwrap(), oracles::bce(&pred, &gt, cfg.prob_clamp)),
            ("dice", loss::dice_loss(&pred, &gt, cfg.dice_smooth).unwrap(), oracles::dice(&pred, &gt, cfg.dice_smooth)),
            ("combined", loss::combined_loss(&pred, &gt, &cfg).unwrap(), oracles::combined(&pred, &gt, &cfg)),
        ];
        for (name, got, want) in pairs {
            let e = rel(got, want);
            if !(e < ORACLE_TOL) {
                return Err(format!("{name} on instance {k} ({h}x{w}): {got} vs reference {want}"));
            }
            worst = worst.max(e);
        }

        let mask = random_mask(h, w, r.gen_range(0.0..1.0), &mut r).to_probability::<f64>();
        let a = loss::area_term(&mask, &mask).unwrap();
        if a != 0.0 {
            return Err(format!("area of a perfect binary prediction is {a}, instance {k}"));
        }

        let pix = cfg.pixelwise_only();
        let total = loss::combined_loss(&pred, &gt, &pix).unwrap();
        let parts = pix.alpha * loss::bce_loss(&pred, &gt, pix.prob_clamp).unwrap()
            + (1.0 - pix.alpha) * loss::dice_loss(&pred, &gt, pix.dice_smooth).unwrap();
        if (total - parts).abs() > 4.0 * f64::EPSILON * parts.abs().max(1.0) {
            return Err(format!("gamma=0, beta=1 gives {total}, pixel-wise mix is {parts}"));
        }
    }
    Ok(format!(
        "100 instances, max rel err {worst:.2e} (< {ORACLE_TOL:e}); area(gt, gt) = 0; gamma=0, beta=1 reduces to BCE/Dice mix"
    ))
}

/// Confusion counts, rates and Hausdorff distance against brute force on 100
/// random 16x16 pairs.
pub fn metric_oracles() -> Outcome {
    let mut worst_hd = 0.0f64;
    let mut defined = 0;
    for k in 0..100u64 {
        let mut r = rng(0x3e7_0000 + k);
        // Sparse draws now and then, so empty masks are exercised.
        let dp = if k % 10 == 0 { 0.01 } else { r.gen_range(0.02..0.7) };
        let dg = r.gen_range(0.02..0.7);
        let pred = random_mask(16, 16, dp, &mut r);
        let gt = random_mask(16, 16, dg, &mut r);
        let report = metrics::evaluate_masks(&pred, &gt).unwrap();
        let (tp, fp, fn_, tn) = oracles::counts(&pred, &gt);
        let c = report.counts;
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
            return Err(format!("pair {k}: counts {c:?}, brute force {:?}", (tp, fp, fn_, tn)));
        }
        let f = |n: u64, d: u64| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        let want = [f(tp, tp + fp + fn_), f(2 * tp, 2 * tp + fp + fn_), f(tp, tp + fp), f(tp, tp + fn_)];
        let got = [report.iou, report.dice, report.precision, report.recall];
        if got != want {
            return Err(format!("pair {k}: rates {got:?}, expected {want:?}"));
        }
        if (report.dice - 2.0 * report.iou / (1.0 + report.iou)).abs() > 1e-12 {
            return Err(format!("pair {k}: dice {} and iou {} disagree", report.dice, report.iou));
        }
        match (report.hausdorff, oracles::hausdorff_all_pairs(&pred, &gt)) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                let e = (a - b).abs();
                if e > HAUSDORFF_TOL {
                    return Err(format!("pair {k}: Hausdorff {a}, all-pairs {b}"));
                }
                worst_hd = worst_hd.max(e);
                defined += 1;
            }
            (a, b) => return Err(format!("pair {k}: Hausdorff {a:?}, all-pairs {b:?}")),
        }
    }
    let empty = BinaryMask::zeros(4, 4);
    let r = metrics::evaluate_masks(&empty, &empty).unwrap();
    if !(r.iou == 1.0 && r.dice == 1.0 && r.undefined.any() && r.hausdorff.is_none()) {
        return Err(format!("empty/empty pair reported {r:?}"));
    }
    Ok(format!(
        "100 pairs exact counts and rates, Hausdorff on {defined} defined pairs within {worst_hd:.1e} (<= {HAUSDORFF_TOL:e})"
    ))
}

use auranet::archive::TensorArchive;
use auranet::model::{batch_from_images, Model, ModelConfig};
use auranet::nn::{Mode, Module};
use auranet::optim::{Adam, AdamConfig};
use auranet::tensor::Tensor;
use auranet::training::{self, RunDir, TrainConfig, Variant};

/// A variant's model config at a square input side.
pub fn variant_model(v: &Variant, side: usize) -> (ModelConfig, LossConfig) {
    let mut cfg = v.apply(&TrainConfig::default());
    cfg.model.input_size = [side, side];
    (cfg.model, cfg.loss)
}

fn build(cfg: &ModelConfig, seed: u64, archive: &TensorArchive<f32>) -> Model<f32> {
    Model::build(cfg, seed, cfg.pretrained.then_some(archive)).unwrap()
}

/// Output shape and range for every ablation variant at each side, and the
/// attention gates adding parameters without touching the encoder.
pub fn forward_contracts(sides: &[usize]) -> Outcome {
    let archive = super::stand_in_pretrained::<f32>();
    let mut checked = 0;
    for &side in sides {
        let image = super::synthetic_cell::<f32>("x", side, side, 7).image;
        let x = batch_from_images(&[&image], 3);
        for v in Variant::all() {
            let (cfg, _) = variant_model(&v, side);
            let mut model = build(&cfg, 1, &archive);
            let p = model.forward(&x, Mode::Eval).map_err(|e| format!("{} at {side}: {e}", v.label()))?;
            if p.shape() != [1, 1, side, side] {
                return Err(format!("{} at {side}: output shape {:?}", v.label(), p.shape()));
            }
            if let Some(bad) = p.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return Err(format!("{} at {side}: output value {bad} outside (0, 1)", v.label()));
            }
            checked += 1;
        }
    }
    for resnet in [false, true] {
        let side = 64;
        let (plain_cfg, _) = variant_model(&Variant { resnet, attention: false, ac_loss: true }, side);
        let (att_cfg, _) = variant_model(&Variant { resnet, attention: true, ac_loss: true }, side);
        let mut plain = build(&plain_cfg, 1, &archive);
        let mut gated = build(&att_cfg, 1, &archive);
        let encoder = |m: &mut Model<f32>| {
            m.parameter_shapes().into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect::<Vec<_>>()
        };
        if encoder(&mut plain) != encoder(&mut gated) {
            return Err(format!("attention changes encoder shapes (resnet={resnet})"));
        }
        let extra = gated.parameter_count() - plain.parameter_count();
        if extra == 0 || extra != gated.attention_parameter_count() {
            return Err(format!("attention adds {extra} parameters (resnet={resnet})"));
        }
    }
    Ok(format!("{checked} forward passes (8 variants x sides {sides:?}) give 1xHxW in (0, 1); gates add parameters only"))
}

/// One training step per variant; every trainable tensor must receive a
/// gradient that is nonzero somewhere.
pub fn gradient_flow(side: usize) -> Outcome {
    let archive = super::stand_in_pretrained::<f32>();
    let samples = super::synthetic_set::<f32>(2, side, side, 3);
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = batch_from_images(&images, 3);
    let mut tensors = 0;
    for v in Variant::all() {
        let (cfg, loss_cfg) = variant_model(&v, side);
        let mut model = build(&cfg, 1, &archive);
        let p = model.forward(&x, Mode::Train).unwrap();
        let mut d = Tensor::zeros(p.shape());
        for (k, s) in samples.iter().enumerate() {
            let pm = ProbabilityMap::from_vec(side, side, p.item(k).to_vec()).unwrap();
            let (_, g) = loss::combined_loss_grad(&pm, &s.mask.to_probability(), &loss_cfg).unwrap();
            d.item_mut(k).copy_from_slice(g.as_slice());
        }
        model.backward(&d);
        let mut dead = None;
        model.visit("", &mut |name, p| {
            if p.trainable {
                tensors += 1;
                if !p.grad.iter().any(|g| *g != 0.0 && g.is_finite()) || p.grad.iter().any(|g| !g.is_finite()) {
                    dead.get_or_insert_with(|| name.to_string());
                }
            }
        });
        if let Some(name) = dead {
            return Err(format!("{}: {name} has no usable gradient", v.label()));
        }
    }
    Ok(format!("{tensors} trainable tensors over 8 variants at {side}x{side} all receive finite nonzero gradients"))
}

/// AURA-net with a loaded encoder, trained on two images until the training
/// Dice passes 0.95, within `max_steps`.
pub fn overfit(side: usize, max_steps: usize) -> Outcome {
    // Cached ImageNet weights when present, else the seeded stand-in.
    let (archive, source) = match auranet::archive::WeightSource::default().resolve() {
        Ok(path) => (TensorArchive::<f32>::load(&path).map_err(|e| e.to_string())?, "cached ImageNet encoder"),
        Err(_) => (super::stand_in_pretrained::<f32>(), "stand-in encoder, ImageNet weights not cached"),
    };
    let cfg = ModelConfig { input_size: [side, side], ..ModelConfig::default() };
    let mut model = Model::build(&cfg, 0, Some(&archive)).unwrap();
    let samples = super::synthetic_set::<f32>(2, side, side, 9);
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = batch_from_images(&images, 3);
    let loss_cfg = LossConfig::default();
    let mut opt = Adam::<f32>::new(3e-4, AdamConfig::default());
    let refs: Vec<_> = samples.iter().collect();
    let mut dice = 0.0;
    for step in 1..=max_steps {
        auranet::nn::zero_grads(&mut model);
        let p = model.forward(&x, Mode::Train).unwrap();
        let mut d = Tensor::zeros(p.shape());
        for (k, s) in samples.iter().enumerate() {
            let pm = ProbabilityMap::from_vec(side, side, p.item(k).to_vec()).unwrap();
            let (_, g) = loss::combined_loss_grad(&pm, &s.mask.to_probability(), &loss_cfg).unwrap();
            d.item_mut(k).iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a = b / 2.0);
        }
        model.backward(&d);
        opt.step(&mut model);
        if step % 10 == 0 {
            let report = training::evaluate(&mut model, &refs, metrics::DEFAULT_THRESHOLD, 2).unwrap();
            dice = report.aggregate.dice;
            if dice > 0.95 {
                return Ok(format!(
                    "training Dice {dice:.4} (> 0.95) after {step} steps on 2 images at {side}x{side} ({source})"
                ));
            }
        }
    }
    Err(format!("training Dice {dice:.4} after {max_steps} steps"))
}

/// A small on-disk dataset and a stand-in weights file under `dir`, plus a
/// one-epoch AURA-net config reading them.
pub fn tiny_run_config(dir: &std::path::Path) -> TrainConfig {
    let samples = super::synthetic_set::<f32>(12, 72, 90, 4);
    super::write_dataset(&dir.join("data"), &samples);
    let weights = dir.join("encoder.aura");
    if !weights.exists() {
        super::stand_in_pretrained::<f32>().save(&weights).unwrap();
    }
    let mut cfg = TrainConfig::default();
    cfg.dataset.root = dir.join("data");
    cfg.dataset.target_size = 64;
    cfg.dataset.train_count = 8;
    cfg.dataset.test_count = 4;
    cfg.model.input_size = [64, 64];
    cfg.weights.path = Some(weights);
    cfg.epochs = 1;
    cfg
}

/// Two full one-epoch runs from one config: manifests, epoch-0 losses and
/// checkpoint bytes must all agree.
pub fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(tmp.path());
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = RunDir::create(tmp.path().join(format!("run{k}"))).unwrap();
        let out = training::train::<f32>(&cfg, Some(&dir)).map_err(|e| e.to_string())?;
        runs.push((dir, out));
    }
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    let (a, b) = (&runs[0], &runs[1]);
    if read(a.0.manifest()) != read(b.0.manifest()) {
        return Err("split manifests differ".into());
    }
    let (la, lb) = (&a.1.history.records[0], &b.1.history.records[0]);
    if la.train_loss.to_bits() != lb.train_loss.to_bits() || la.val_loss.to_bits() != lb.val_loss.to_bits() {
        return Err(format!("epoch-0 losses differ: {la:?} vs {lb:?}"));
    }
    for ckpt in [RunDir::best_checkpoint, RunDir::last_checkpoint] {
        if read(ckpt(&a.0)) != read(ckpt(&b.0)) {
            return Err(format!("{} differs between runs", ckpt(&a.0).display()));
        }
    }
    Ok(format!(
        "identical manifests, epoch-0 train loss {:.6} on both runs, byte-identical best/last checkpoints",
        la.train_loss
    ))
}
