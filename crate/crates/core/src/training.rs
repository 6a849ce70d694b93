//! Training loop, evaluation helpers, hyperparameter line search and the
//! component ablation driver.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightSource;
use crate::data::{self, augment, resize_and_crop, AugmentationConfig, DataError, DatasetSpec, Sample, Split};
use crate::grid::{GridError, ProbabilityMap};
use crate::loss::{combined_loss, combined_loss_grad, LossConfig, LossError};
use crate::metrics::{self, AggregateReport, DatasetReport, MetricsError};
use crate::model::{batch_from_images, EncoderKind, Model, ModelConfig, ModelError};
use crate::nn::{zero_grads, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss in epoch {epoch} on batch [{}]", batch.join(", "))]
    NonFiniteLoss { epoch: usize, batch: Vec<String> },
    #[error("test sample {0} reached a training batch")]
    SplitLeak(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<GridError> for TrainError {
    fn from(e: GridError) -> Self {
        TrainError::Data(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    /// Seeds model initialization, batch order and the validation holdout.
    pub seed: u64,
    /// Fraction of the training split held out for validation (rounded down).
    pub validation_fraction: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub augmentation: AugmentationConfig,
    pub weights: WeightSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        Self {
            batch_size: 4,
            learning_rate: 3e-4,
            epochs: 100,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            seed: 0,
            validation_fraction: 0.1,
            loss: LossConfig::default(),
            model: ModelConfig {
                input_size: [dataset.target_size; 2],
                ..ModelConfig::default()
            },
            dataset,
            augmentation: AugmentationConfig::default(),
            weights: WeightSource::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.dataset.validate()?;
        self.augmentation.validate()?;
        let s = self.dataset.target_size;
        if self.model.input_size != [s, s] {
            return bad(format!(
                "model.input_size {:?} differs from dataset.target_size {s}",
                self.model.input_size
            ));
        }
        Ok(())
    }
}

/// `ceil(n / batch)`: the final short batch is kept.
pub fn steps_per_epoch(train_images: usize, batch_size: usize) -> usize {
    train_images.div_ceil(batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were selected (lowest validation loss).
    pub best_epoch: usize,
    pub steps: u64,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.seconds);
        }
        s
    }
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights of the epoch with the lowest validation loss.
    pub best: Model<T>,
    /// Weights after the final epoch.
    pub last: Model<T>,
    pub history: TrainHistory,
    pub split: Split,
}

/// Files of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let root = root.into();
        let dir = root.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|source| TrainError::Io { path: dir, source })?;
        Ok(Self { root })
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("split.manifest")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn write(&self, path: &Path, contents: &str) -> Result<(), TrainError> {
        std::fs::write(path, contents).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Brings every sample to the square working resolution.
pub fn prepare<T: Scalar>(samples: &[Sample<T>], target: usize) -> Result<Vec<Sample<T>>, TrainError> {
    Ok(samples.iter().map(|s| resize_and_crop(s, target)).collect::<Result<_, _>>()?)
}

fn probability_maps<T: Scalar>(p: &Tensor<T>) -> Result<Vec<ProbabilityMap<T>>, GridError> {
    (0..p.batch())
        .map(|n| ProbabilityMap::from_vec(p.height(), p.width(), p.item(n).to_vec()))
        .collect()
}

/// Per-image mean of the combined loss in inference mode.
pub fn mean_loss<T: Scalar>(
    model: &mut Model<T>,
    samples: &[&Sample<T>],
    loss: &LossConfig,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = batch_from_images(&images, model.config().in_channels);
        let p = model.forward(&x, Mode::Eval)?;
        // NaN outputs fail the range check; report them as a NaN loss.
        let Ok(maps) = probability_maps(&p) else {
            return Ok(f64::NAN);
        };
        for (pm, s) in maps.iter().zip(chunk) {
            total += combined_loss(pm, &s.mask.to_probability::<T>(), loss)?.as_f64();
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Probability maps for `samples` in inference mode.
pub fn predict<T: Scalar>(
    model: &mut Model<T>,
    samples: &[&Sample<T>],
    batch_size: usize,
) -> Result<Vec<ProbabilityMap<T>>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = batch_from_images(&images, model.config().in_channels);
        out.extend(probability_maps(&model.forward(&x, Mode::Eval)?)?);
    }
    Ok(out)
}

/// Thresholds predictions and scores them against the masks.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    samples: &[&Sample<T>],
    threshold: f64,
    batch_size: usize,
) -> Result<DatasetReport, TrainError> {
    let preds = predict(model, samples, batch_size)?;
    let records: Vec<_> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.id.clone(), p, s.mask.clone()))
        .collect();
    Ok(metrics::evaluate_dataset(&records, threshold)?)
}

fn lookup<'a, T>(by_id: &'a HashMap<&str, &'a Sample<T>>, ids: &[String]) -> Vec<&'a Sample<T>> {
    ids.iter().map(|id| by_id[id.as_str()]).collect()
}

/// Ingests `cfg.dataset`, then trains as in [`train_on`].
pub fn train<T: Scalar>(cfg: &TrainConfig, run: Option<&RunDir>) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let samples = data::ingest::<T>(&cfg.dataset)?;
    train_on(cfg, &samples, run)
}

/// Splits `samples` (any size; they are resized to the working resolution),
/// holds out validation images, and trains with per-epoch reshuffling and
/// fresh augmentation draws. Writes the run directory when given.
pub fn train_on<T: Scalar>(cfg: &TrainConfig, samples: &[Sample<T>], run: Option<&RunDir>) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let samples = prepare(samples, cfg.dataset.target_size)?;
    let mut split = data::split(&samples, &cfg.dataset)?;
    split.hold_out_validation(cfg.validation_fraction, cfg.seed);
    let model = Model::build_from_source(&cfg.model, cfg.seed, &cfg.weights)?;
    train_split(cfg, &samples, split, model, run)
}

/// The loop itself, on already prepared samples and a fixed split.
pub fn train_split<T: Scalar>(
    cfg: &TrainConfig,
    samples: &[Sample<T>],
    split: Split,
    mut model: Model<T>,
    run: Option<&RunDir>,
) -> Result<TrainOutcome<T>, TrainError> {
    if !split.is_disjoint() {
        return Err(TrainError::Config("split partitions overlap".into()));
    }
    if split.train.is_empty() {
        return Err(TrainError::Config("no training images".into()));
    }
    let by_id: HashMap<&str, &Sample<T>> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for id in split.train.iter().chain(&split.validation).chain(&split.test) {
        if !by_id.contains_key(id.as_str()) {
            return Err(TrainError::Config(format!("split names unknown sample {id}")));
        }
    }
    let test_ids: std::collections::HashSet<&str> = split.test.iter().map(String::as_str).collect();
    let val_ids = if split.validation.is_empty() {
        log::warn!("validation split is empty; monitoring the training images instead");
        &split.train
    } else {
        &split.validation
    };
    let val_samples = lookup(&by_id, val_ids);

    if let Some(r) = run {
        if !r.snapshot().exists() {
            let text = toml::to_string(cfg).map_err(|e| TrainError::Config(e.to_string()))?;
            r.write(&r.snapshot(), &text)?;
        }
        r.write(&r.manifest(), &split.to_manifest())?;
    }

    let mut opt = Adam::<T>::new(cfg.learning_rate, cfg.adam);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<T>)> = None;
    let channels = cfg.model.in_channels;
    log::info!(
        "training on {} images ({} validation, {} test), {} steps per epoch",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        steps_per_epoch(split.train.len(), cfg.batch_size)
    );

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(data::stream_seed(cfg.seed, "batch-order", epoch as u64)));
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            if let Some(id) = batch_ids.iter().find(|id| test_ids.contains(id.as_str())) {
                return Err(TrainError::SplitLeak(id.clone()));
            }
            let batch = batch_ids
                .iter()
                .map(|id| {
                    let seed = data::stream_seed(cfg.augmentation.seed, id, epoch as u64);
                    augment(by_id[id.as_str()], &cfg.augmentation, seed).map(|(s, _)| s)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let x = batch_from_images(&images, channels);

            zero_grads(&mut model);
            let p = model.forward(&x, Mode::Train)?;
            let n = T::from_usize(batch.len()).unwrap();
            let non_finite = || TrainError::NonFiniteLoss {
                epoch,
                batch: batch_ids.to_vec(),
            };
            let maps = probability_maps(&p).map_err(|_| non_finite())?;
            let mut d_prob = Tensor::zeros(p.shape());
            let mut batch_loss = 0.0;
            for (k, (pm, s)) in maps.iter().zip(&batch).enumerate() {
                let (l, g) = combined_loss_grad(pm, &s.mask.to_probability::<T>(), &cfg.loss)?;
                if !l.is_finite() {
                    return Err(non_finite());
                }
                batch_loss += l.as_f64();
                for (d, &v) in d_prob.item_mut(k).iter_mut().zip(g.as_slice()) {
                    *d = v / n;
                }
            }
            model.backward(&d_prob);
            opt.step(&mut model);
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / split.train.len() as f64;
        let val_loss = mean_loss(&mut model, &val_samples, &cfg.loss, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: val_ids.clone(),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} ({:.1}s)",
            rec.train_loss,
            rec.val_loss,
            rec.seconds
        );
        history.records.push(rec);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            history.best_epoch = epoch;
            if let Some(r) = run {
                model.save_checkpoint(&r.best_checkpoint(), opt.steps())?;
                history.best_checkpoint = Some(r.best_checkpoint());
            }
            best = Some((val_loss, model.clone()));
        }
        if let Some(r) = run {
            r.write(&r.history(), &history.to_csv())?;
        }
    }
    history.steps = opt.steps();
    if let Some(r) = run {
        model.save_checkpoint(&r.last_checkpoint(), opt.steps())?;
        history.last_checkpoint = Some(r.last_checkpoint());
    }
    let (_, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        last: model,
        history,
        split,
    })
}

/// Trains, then scores the selected weights on the test split and writes
/// `metrics.json` when a run directory is given.
pub fn train_and_evaluate<T: Scalar>(
    cfg: &TrainConfig,
    samples: &[Sample<T>],
    threshold: f64,
    run: Option<&RunDir>,
) -> Result<(TrainOutcome<T>, DatasetReport), TrainError> {
    let mut outcome = train_on(cfg, samples, run)?;
    let prepared = prepare(samples, cfg.dataset.target_size)?;
    let by_id: HashMap<&str, &Sample<T>> = prepared.iter().map(|s| (s.id.as_str(), s)).collect();
    let test = lookup(&by_id, &outcome.split.test);
    let report = evaluate(&mut outcome.best, &test, threshold, cfg.batch_size)?;
    if let Some(r) = run {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        r.write(&r.metrics(), &json)?;
    }
    Ok((outcome, report))
}

/// One row of the component ablation: which of the three parts are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub resnet: bool,
    pub attention: bool,
    pub ac_loss: bool,
}

impl Variant {
    /// All eight combinations in the conventional table order.
    pub fn all() -> Vec<Variant> {
        [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, false, true),
            (false, true, true),
            (true, true, false),
            (true, true, true),
        ]
        .into_iter()
        .map(|(resnet, attention, ac_loss)| Variant {
            resnet,
            attention,
            ac_loss,
        })
        .collect()
    }

    pub fn label(&self) -> String {
        if self.resnet && self.attention && self.ac_loss {
            return "AURA-net".into();
        }
        let mut s = String::from("U-net");
        for (on, part) in [(self.resnet, "ResNet"), (self.attention, "Attention"), (self.ac_loss, "AC loss")] {
            if on {
                s.push('+');
                s.push_str(part);
            }
        }
        s
    }

    /// Parses a label such as `U-net+ResNet` or `AURA-net`.
    pub fn from_label(label: &str) -> Option<Variant> {
        Variant::all().into_iter().find(|v| v.label().eq_ignore_ascii_case(label.trim()))
    }

    /// The base config with this variant's toggles. The ResNet encoder keeps
    /// the base `pretrained` flag; switching the contour term off leaves the
    /// pixel-wise block as the whole loss (`gamma = 0`, `beta = 1`).
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.attention = self.attention;
        if self.resnet {
            cfg.model.encoder = EncoderKind::Resnet18;
            cfg.model.depth = 4;
        } else {
            cfg.model.encoder = EncoderKind::PlainUnet;
            cfg.model.pretrained = false;
        }
        if !self.ac_loss {
            cfg.loss = LossConfig {
                gamma: 0.0,
                beta: 1.0,
                ..base.loss
            };
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub report: AggregateReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub manifest: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        let mut s = format!(
            "{:<width$} | {:>8} | {:>8} | {:>9} | {:>8} | {:>7}\n",
            "", "IoU", "Dice", "Precision", "Recall", "HD"
        );
        for r in &self.rows {
            s.push_str(&metrics::render_row(&r.label, &r.report, width));
            s.push('\n');
        }
        s
    }
}

/// Trains and tests every variant on one shared split.
pub fn ablate<T: Scalar>(
    base: &TrainConfig,
    variants: &[Variant],
    samples: &[Sample<T>],
    threshold: f64,
    run: Option<&RunDir>,
) -> Result<AblationTable, TrainError> {
    if variants.is_empty() {
        return Err(TrainError::Config("no ablation variants".into()));
    }
    base.validate()?;
    let prepared = prepare(samples, base.dataset.target_size)?;
    let mut split = data::split(&prepared, &base.dataset)?;
    split.hold_out_validation(base.validation_fraction, base.seed);
    let by_id: HashMap<&str, &Sample<T>> = prepared.iter().map(|s| (s.id.as_str(), s)).collect();
    let test = lookup(&by_id, &split.test);
    if let Some(r) = run {
        r.write(&r.manifest(), &split.to_manifest())?;
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        cfg.validate()?;
        log::info!("ablation variant {}", v.label());
        let sub = match run {
            Some(r) => Some(RunDir::create(r.root.join(slug(&v.label())))?),
            None => None,
        };
        let model = Model::build_from_source(&cfg.model, cfg.seed, &cfg.weights)?;
        let mut outcome = train_split(&cfg, &prepared, split.clone(), model, sub.as_ref())?;
        let report = evaluate(&mut outcome.best, &test, threshold, cfg.batch_size)?;
        if let Some(r) = &sub {
            r.write(&r.metrics(), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
        }
        rows.push(AblationRow {
            label: v.label(),
            variant: *v,
            report: report.aggregate,
        });
    }
    Ok(AblationTable {
        manifest: split.to_manifest(),
        rows,
    })
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Hyperparameter searched by [`line_search`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    BetaGamma,
}

/// One grid point: `lambda` alone, or a `(beta, gamma)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SweepValue {
    Lambda(f64),
    BetaGamma(f64, f64),
}

impl SweepValue {
    pub fn apply(&self, base: &LossConfig) -> LossConfig {
        match *self {
            SweepValue::Lambda(l) => LossConfig { lambda: l, ..*base },
            SweepValue::BetaGamma(b, g) => LossConfig {
                beta: b,
                gamma: g,
                ..*base
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            SweepValue::Lambda(l) => format!("lambda={l}"),
            SweepValue::BetaGamma(b, g) => format!("beta={b},gamma={g}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: SweepValue,
    pub val_loss: f64,
    pub validation: AggregateReport,
}

/// Rows ranked by validation Dice, best first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.value.label().len()).max().unwrap_or(0).max(8);
        let mut s = format!(
            "{:<width$} | {:>8} | {:>8} | {:>9} | {:>8} | {:>7}\n",
            "", "IoU", "Dice", "Precision", "Recall", "HD"
        );
        for r in &self.rows {
            s.push_str(&metrics::render_row(&r.value.label(), &r.validation, width));
            s.push('\n');
        }
        s
    }
}

/// One training run per grid point with identical seeds and split, scored
/// on the validation images.
pub fn line_search<T: Scalar>(
    param: SweepParam,
    grid: &[SweepValue],
    base: &TrainConfig,
    samples: &[Sample<T>],
    threshold: f64,
    run: Option<&RunDir>,
) -> Result<SweepTable, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty sweep grid".into()));
    }
    for v in grid {
        let ok = matches!((param, v), (SweepParam::Lambda, SweepValue::Lambda(_)) | (SweepParam::BetaGamma, SweepValue::BetaGamma(..)));
        if !ok {
            return Err(TrainError::Config(format!("grid value {} does not match the swept parameter", v.label())));
        }
    }
    base.validate()?;
    let prepared = prepare(samples, base.dataset.target_size)?;
    let mut split = data::split(&prepared, &base.dataset)?;
    split.hold_out_validation(base.validation_fraction, base.seed);
    let by_id: HashMap<&str, &Sample<T>> = prepared.iter().map(|s| (s.id.as_str(), s)).collect();
    let val_ids = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };
    let val = lookup(&by_id, val_ids);
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        let mut cfg = base.clone();
        cfg.loss = v.apply(&base.loss);
        cfg.validate()?;
        log::info!("sweep point {}", v.label());
        let sub = match run {
            Some(r) => Some(RunDir::create(r.root.join(slug(&v.label())))?),
            None => None,
        };
        let model = Model::build_from_source(&cfg.model, cfg.seed, &cfg.weights)?;
        let mut outcome = train_split(&cfg, &prepared, split.clone(), model, sub.as_ref())?;
        let report = evaluate(&mut outcome.best, &val, threshold, cfg.batch_size)?;
        let val_loss = outcome.history.records[outcome.history.best_epoch].val_loss;
        rows.push(SweepRow {
            value: *v,
            val_loss,
            validation: report.aggregate,
        });
    }
    rows.sort_by(|a, b| b.validation.dice.total_cmp(&a.validation.dice));
    Ok(SweepTable { param, rows })
}
