//! Straightforward reference implementations, written pixel by pixel with
//! 2D indexing and f64 accumulation. They share no code with the library.

use auranet::{BinaryMask, ProbabilityMap, Scalar};

fn at<T: Scalar>(p: &ProbabilityMap<T>, i: usize, j: usize) -> f64 {
    p.get(i, j).as_f64()
}

pub fn length(p: &ProbabilityMap<impl Scalar>, eps: f64) -> f64 {
    let (h, w) = p.shape();
    let mut total = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let dx = at(p, i + 1, j) - at(p, i, j);
            let dy = at(p, i, j + 1) - at(p, i, j);
            total += ((dx * dx + dy * dy).abs() + eps).sqrt();
        }
    }
    total
}

pub fn area<T: Scalar>(p: &ProbabilityMap<T>, g: &ProbabilityMap<T>) -> f64 {
    let (h, w) = p.shape();
    let (mut outside, mut inside) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let (pv, gv) = (at(p, i, j), at(g, i, j));
            outside += pv * (1.0 - gv).powi(2);
            inside += (1.0 - pv) * gv.powi(2);
        }
    }
    outside.abs() + inside.abs()
}

pub fn bce<T: Scalar>(p: &ProbabilityMap<T>, g: &ProbabilityMap<T>, clamp: f64) -> f64 {
    let (h, w) = p.shape();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let q = at(p, i, j).clamp(clamp, 1.0 - clamp);
            let gv = at(g, i, j);
            total += -(gv * q.ln() + (1.0 - gv) * (1.0 - q).ln());
        }
    }
    total / (h * w) as f64
}

pub fn dice<T: Scalar>(p: &ProbabilityMap<T>, g: &ProbabilityMap<T>, smooth: f64) -> f64 {
    let (h, w) = p.shape();
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            inter += at(p, i, j) * at(g, i, j);
            sp += at(p, i, j);
            sg += at(g, i, j);
        }
    }
    1.0 - (2.0 * inter + smooth) / (sp + sg + smooth)
}

pub fn combined<T: Scalar>(p: &ProbabilityMap<T>, g: &ProbabilityMap<T>, c: &auranet::LossConfig) -> f64 {
    let ac = length(p, c.epsilon) + c.lambda * area(p, g);
    let px = c.alpha * bce(p, g, c.prob_clamp) + (1.0 - c.alpha) * dice(p, g, c.dice_smooth);
    c.gamma * ac + c.beta * px
}

/// (tp, fp, fn, tn) by direct count.
pub fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64, u64, u64) {
    let (h, w) = pred.shape();
    let mut c = (0, 0, 0, 0);
    for i in 0..h {
        for j in 0..w {
            match (pred.get(i, j), gt.get(i, j)) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => c.3 += 1,
            }
        }
    }
    c
}

fn points(m: &BinaryMask) -> Vec<(f64, f64)> {
    let (h, w) = m.shape();
    (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| m.get(i, j))
        .map(|(i, j)| (i as f64, j as f64))
        .collect()
}

/// Symmetric Hausdorff distance by comparing every pair of foreground pixels.
pub fn hausdorff_all_pairs(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let (pa, pb) = (points(a), points(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|&(y, x)| to.iter().map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}
