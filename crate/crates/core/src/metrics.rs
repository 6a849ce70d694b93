//! Segmentation quality metrics: IoU, Dice, precision, recall and the
//! symmetric Hausdorff distance between foreground pixel sets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BinaryMask, GridError, ProbabilityMap};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("Hausdorff distance is undefined: {which} mask has no foreground")]
    UndefinedHausdorff { which: &'static str },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
}

/// `pixel = 1` iff `p >= threshold`.
pub fn binarize<T: Scalar>(pred: &ProbabilityMap<T>, threshold: f64) -> Result<BinaryMask, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let t = T::lit(threshold);
    let data = pred.as_slice().iter().map(|&p| u8::from(p >= t)).collect();
    Ok(BinaryMask::from_vec(pred.height(), pred.width(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    pred.check_same_shape(gt)?;
    // Index 2 * pred + gt into a tiny histogram.
    let mut hist = [0u64; 4];
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        hist[usize::from(2 * p + g)] += 1;
    }
    Ok(ConfusionCounts {
        tn: hist[0],
        fn_: hist[1],
        fp: hist[2],
        tp: hist[3],
    })
}

/// Which ratios hit `0 / 0` and were defined as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UndefinedRates {
    pub iou: bool,
    pub dice: bool,
    pub precision: bool,
    pub recall: bool,
}

impl UndefinedRates {
    pub fn any(&self) -> bool {
        self.iou || self.dice || self.precision || self.recall
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub undefined: UndefinedRates,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    let (iou, u_iou) = ratio(c.tp, c.tp + c.fp + c.fn_);
    let (dice, u_dice) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let (precision, u_prec) = ratio(c.tp, c.tp + c.fp);
    let (recall, u_rec) = ratio(c.tp, c.tp + c.fn_);
    Rates {
        iou,
        dice,
        precision,
        recall,
        undefined: UndefinedRates {
            iou: u_iou,
            dice: u_dice,
            precision: u_prec,
            recall: u_rec,
        },
    }
}

/// Squared Euclidean distance from every pixel to the nearest foreground pixel
/// of `mask` (separable lower-envelope transform). Exact for integer grids.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    const FAR: f64 = 1e15;
    let (h, w) = mask.shape();
    let mut d: Vec<f64> = mask.as_slice().iter().map(|&v| if v == 1 { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for j in 0..w {
        for i in 0..h {
            f[i] = d[i * w + j];
        }
        envelope_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for i in 0..h {
            d[i * w + j] = out[i];
        }
    }
    for i in 0..h {
        f[..w].copy_from_slice(&d[i * w..(i + 1) * w]);
        envelope_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        d[i * w..(i + 1) * w].copy_from_slice(&out[..w]);
    }
    d
}

fn envelope_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let sq = |q: usize| (q * q) as f64;
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let intersect = |p: usize| ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
        let mut s = intersect(v[k]);
        // z[0] is -inf, so k never underflows.
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

fn directed_hausdorff_sq(from: &BinaryMask, to_dt: &[f64]) -> f64 {
    from.as_slice()
        .iter()
        .zip(to_dt)
        .filter(|(&m, _)| m == 1)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between the foreground sets, in pixels.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    pred.check_same_shape(gt)?;
    if pred.foreground_count() == 0 {
        return Err(MetricsError::UndefinedHausdorff { which: "predicted" });
    }
    if gt.foreground_count() == 0 {
        return Err(MetricsError::UndefinedHausdorff { which: "ground-truth" });
    }
    let dt_gt = squared_distance_transform(gt);
    let dt_pred = squared_distance_transform(pred);
    let sq = directed_hausdorff_sq(pred, &dt_gt).max(directed_hausdorff_sq(gt, &dt_pred));
    Ok(sq.sqrt())
}

/// Metrics for one prediction / ground-truth pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    /// `None` when either foreground set is empty.
    pub hausdorff: Option<f64>,
    pub counts: ConfusionCounts,
    pub undefined: UndefinedRates,
}

pub fn evaluate_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricsReport, MetricsError> {
    let counts = confusion(pred, gt)?;
    let r = rates(&counts);
    let hausdorff = match hausdorff(pred, gt) {
        Ok(d) => Some(d),
        Err(MetricsError::UndefinedHausdorff { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        iou: r.iou,
        dice: r.dice,
        precision: r.precision,
        recall: r.recall,
        hausdorff,
        counts,
        undefined: r.undefined,
    })
}

pub fn evaluate_pair<T: Scalar>(
    pred: &ProbabilityMap<T>,
    gt: &BinaryMask,
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    evaluate_masks(&binarize(pred, threshold)?, gt)
}

/// Unweighted per-image means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub images: usize,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean over images with a defined distance; `None` if there are none.
    pub hausdorff: Option<f64>,
    pub hausdorff_undefined: usize,
    pub rates_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub threshold: f64,
    pub per_image: Vec<ImageRecord>,
    pub aggregate: AggregateReport,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let hds: Vec<f64> = reports.iter().filter_map(|r| r.hausdorff).collect();
    Ok(AggregateReport {
        images: reports.len(),
        iou: mean(|r| r.iou),
        dice: mean(|r| r.dice),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        hausdorff: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
        hausdorff_undefined: reports.len() - hds.len(),
        rates_undefined: reports.iter().filter(|r| r.undefined.any()).count(),
    })
}

/// Evaluates `(id, prediction, ground truth)` triples and averages them.
pub fn evaluate_dataset<T: Scalar>(
    pairs: &[(String, ProbabilityMap<T>, BinaryMask)],
    threshold: f64,
) -> Result<DatasetReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let per_image = pairs
        .iter()
        .map(|(id, p, g)| {
            Ok(ImageRecord {
                id: id.clone(),
                metrics: evaluate_pair(p, g, threshold)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let reports: Vec<MetricsReport> = per_image.iter().map(|r| r.metrics.clone()).collect();
    Ok(DatasetReport {
        threshold,
        aggregate: aggregate(&reports)?,
        per_image,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn hd(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |d| format!("{d:.2}"))
}

impl DatasetReport {
    /// Plain-text table, one row per image plus the mean row.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let width = self.per_image.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let _ = writeln!(
            s,
            "{:<width$} | {:>8} | {:>8} | {:>9} | {:>8} | {:>7}",
            "image", "IoU", "Dice", "Precision", "Recall", "HD"
        );
        for r in &self.per_image {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<width$} | {:>8} | {:>8} | {:>9} | {:>8} | {:>7}",
                r.id,
                pct(m.iou),
                pct(m.dice),
                pct(m.precision),
                pct(m.recall),
                hd(m.hausdorff)
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "{:<width$} | {:>8} | {:>8} | {:>9} | {:>8} | {:>7}",
            "mean",
            pct(a.iou),
            pct(a.dice),
            pct(a.precision),
            pct(a.recall),
            hd(a.hausdorff)
        );
        s
    }
}

/// One labelled row of a comparison table (ablations, sweeps).
pub fn render_row(label: &str, a: &AggregateReport, label_width: usize) -> String {
    format!(
        "{:<label_width$} | {:>8} | {:>8} | {:>9} | {:>8} | {:>7}",
        label,
        pct(a.iou),
        pct(a.dice),
        pct(a.precision),
        pct(a.recall),
        hd(a.hausdorff)
    )
}
