//! `auranet` command-line tool: train, evaluate, predict, ablate, sweep.
//!
//! Exit status: 0 on success, 2 for configuration or usage errors, 1 for
//! any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use auranet::config::{Precision, RunConfig};
use auranet::data::{self, DatasetSpec, Sample, Split};
use auranet::metrics::{binarize, DEFAULT_THRESHOLD};
use auranet::model::{Model, ModelError};
use auranet::training::{self, RunDir, SweepParam, SweepValue, TrainError, Variant};
use auranet::{BinaryMask, Scalar};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "auranet", version, about = "Attention U-net segmentation for microscopy images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set loss.lambda=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set training.epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--set run.output_dir=DIR`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Lambda,
    BetaGamma,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train(ConfigArgs),
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `images/` and `masks/`.
        #[arg(long)]
        dataset: PathBuf,
        /// Restrict to one partition of a split manifest.
        #[arg(long, requires = "partition")]
        manifest: Option<PathBuf>,
        #[arg(long, value_parser = ["train", "validation", "test"])]
        partition: Option<String>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Where to write the JSON report.
        #[arg(long, default_value = "metrics.json")]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Write binary masks (0/255) for every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Also write `<stem>_overlay.png` with the predicted outline.
        #[arg(long)]
        overlay: bool,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Train and test the component ablation variants on one split.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variant labels; all eight when omitted.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Line search over a loss hyperparameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        param: ParamArg,
        /// `0,5,10` for lambda; `1:0,0.75:0.25` for beta:gamma pairs.
        #[arg(long)]
        grid: String,
    },
}

/// A failure tagged with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: e.into() }
}

fn classify(e: TrainError) -> Failure {
    let is_config = matches!(
        &e,
        TrainError::Config(_)
            | TrainError::Loss(auranet::loss::LossError::InvalidConfig(_))
            | TrainError::Data(data::DataError::InvalidConfig(_))
            | TrainError::Model(ModelError::InvalidConfig(_))
    );
    Failure {
        code: if is_config { 2 } else { 1 },
        error: e.into(),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(config_error)?;
    for o in &args.overrides {
        cfg.set(o).map_err(config_error)?;
    }
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(o) = &args.output {
        cfg.run.output_dir = o.clone();
    }
    cfg.train_config().validate().map_err(classify)?;
    init_logging(&cfg.run.log_level);
    Ok(cfg)
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn prepare_run(cfg: &RunConfig) -> Result<RunDir, Failure> {
    let run = RunDir::create(&cfg.run.output_dir).map_err(runtime)?;
    run.write(&run.snapshot(), &cfg.to_toml()).map_err(runtime)?;
    Ok(run)
}

fn cmd_train<T: Scalar>(cfg: &RunConfig) -> Result<(), Failure> {
    let run = prepare_run(cfg)?;
    let tc = cfg.train_config();
    let samples = data::ingest::<T>(&tc.dataset).map_err(runtime)?;
    let (outcome, report) =
        training::train_and_evaluate(&tc, &samples, cfg.run.threshold, Some(&run)).map_err(classify)?;
    println!(
        "trained {} epochs ({} steps); best epoch {}",
        outcome.history.records.len(),
        outcome.history.steps,
        outcome.history.best_epoch
    );
    print!("{}", report.render_table());
    println!("run directory: {}", run.root.display());
    Ok(())
}

fn load_model<T: Scalar>(checkpoint: &Path) -> Result<Model<T>, Failure> {
    let (model, _) = Model::<T>::load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))
        .map_err(runtime)?;
    Ok(model)
}

fn cmd_eval<T: Scalar>(
    checkpoint: &Path,
    dataset: &Path,
    manifest: Option<&Path>,
    partition: Option<&str>,
    threshold: f64,
    output: &Path,
) -> Result<(), Failure> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config_error(anyhow!("threshold must be in (0, 1), got {threshold}")));
    }
    let mut model = load_model::<T>(checkpoint)?;
    let size = model.config().input_size;
    if size[0] != size[1] {
        return Err(runtime(anyhow!("checkpoint expects non-square input {size:?}")));
    }
    let spec = DatasetSpec {
        root: dataset.to_path_buf(),
        target_size: size[0],
        ..DatasetSpec::default()
    };
    let mut samples = data::ingest::<T>(&spec).map_err(runtime)?;
    if let (Some(m), Some(part)) = (manifest, partition) {
        let text = std::fs::read_to_string(m)
            .with_context(|| format!("reading {}", m.display()))
            .map_err(runtime)?;
        let split = Split::from_manifest(&text).map_err(runtime)?;
        let keep = match part {
            "train" => split.train,
            "validation" => split.validation,
            _ => split.test,
        };
        // Report in manifest order, as training does.
        samples.retain(|s| keep.contains(&s.id));
        samples.sort_by_key(|s| keep.iter().position(|id| *id == s.id));
    }
    if samples.is_empty() {
        return Err(runtime(anyhow!("no images to evaluate")));
    }
    let prepared = training::prepare(&samples, size[0]).map_err(classify)?;
    let refs: Vec<_> = prepared.iter().collect();
    let report = training::evaluate(&mut model, &refs, threshold, 4).map_err(classify)?;
    std::fs::write(output, serde_json::to_string_pretty(&report).map_err(runtime)?)
        .with_context(|| format!("writing {}", output.display()))
        .map_err(runtime)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_predict<T: Scalar>(checkpoint: &Path, input: &Path, output: &Path, threshold: f64, overlay: bool) -> Result<(), Failure> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config_error(anyhow!("threshold must be in (0, 1), got {threshold}")));
    }
    let mut model = load_model::<T>(checkpoint)?;
    let size = model.config().input_size[0];
    let images = data::list_images(input).map_err(runtime)?;
    if images.is_empty() {
        return Err(runtime(anyhow!("no images found in {}", input.display())));
    }
    std::fs::create_dir_all(output)
        .with_context(|| format!("creating {}", output.display()))
        .map_err(runtime)?;
    for (stem, path) in images {
        let image = data::load_image::<T>(&path).map_err(runtime)?;
        let (h, w) = image.shape();
        let sample = Sample::new(stem.clone(), "predict", image, BinaryMask::zeros(h, w)).map_err(runtime)?;
        let sample = data::resize_and_crop(&sample, size).map_err(runtime)?;
        let prob = training::predict(&mut model, &[&sample], 1).map_err(classify)?.remove(0);
        let mask = binarize(&prob, threshold).map_err(runtime)?;
        data::save_mask(&output.join(format!("{stem}.png")), &mask).map_err(runtime)?;
        if overlay {
            data::save_overlay(&output.join(format!("{stem}_overlay.png")), &sample.image, &mask).map_err(runtime)?;
        }
        println!("{stem}: {} foreground pixels", mask.foreground_count());
    }
    Ok(())
}

fn cmd_ablate<T: Scalar>(cfg: &RunConfig, variants: Option<&str>) -> Result<(), Failure> {
    let variants = match variants {
        None => Variant::all(),
        Some(list) => list
            .split(',')
            .map(|l| Variant::from_label(l).ok_or_else(|| config_error(anyhow!("unknown variant label {l:?}"))))
            .collect::<Result<_, _>>()?,
    };
    let run = prepare_run(cfg)?;
    let tc = cfg.train_config();
    let samples = data::ingest::<T>(&tc.dataset).map_err(runtime)?;
    let table = training::ablate(&tc, &variants, &samples, cfg.run.threshold, Some(&run)).map_err(classify)?;
    let json = serde_json::to_string_pretty(&table).map_err(runtime)?;
    run.write(&run.root.join("ablation.json"), &json).map_err(runtime)?;
    print!("{}", table.render());
    Ok(())
}

fn parse_grid(param: ParamArg, grid: &str) -> Result<Vec<SweepValue>, Failure> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| config_error(anyhow!("grid value {s:?} is not a number")))
    };
    grid.split(',')
        .map(|item| match param {
            ParamArg::Lambda => Ok(SweepValue::Lambda(num(item)?)),
            ParamArg::BetaGamma => {
                let (b, g) = item
                    .split_once(':')
                    .ok_or_else(|| config_error(anyhow!("beta_gamma grid items look like 0.75:0.25, got {item:?}")))?;
                Ok(SweepValue::BetaGamma(num(b)?, num(g)?))
            }
        })
        .collect()
}

fn cmd_sweep<T: Scalar>(cfg: &RunConfig, param: ParamArg, grid: &str) -> Result<(), Failure> {
    let values = parse_grid(param, grid)?;
    let p = match param {
        ParamArg::Lambda => SweepParam::Lambda,
        ParamArg::BetaGamma => SweepParam::BetaGamma,
    };
    let run = prepare_run(cfg)?;
    let tc = cfg.train_config();
    let samples = data::ingest::<T>(&tc.dataset).map_err(runtime)?;
    let table = training::line_search(p, &values, &tc, &samples, cfg.run.threshold, Some(&run)).map_err(classify)?;
    let json = serde_json::to_string_pretty(&table).map_err(runtime)?;
    run.write(&run.root.join("sweep.json"), &json).map_err(runtime)?;
    print!("{}", table.render());
    Ok(())
}

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn precision(p: PrecisionArg) -> Precision {
    match p {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            with_precision!(cfg.run.precision, cmd_train(&cfg))
        }
        Command::Eval {
            checkpoint,
            dataset,
            manifest,
            partition,
            threshold,
            output,
            precision: p,
        } => {
            init_logging("info");
            with_precision!(
                precision(p),
                cmd_eval(&checkpoint, &dataset, manifest.as_deref(), partition.as_deref(), threshold, &output)
            )
        }
        Command::Predict {
            checkpoint,
            input,
            output,
            threshold,
            overlay,
            precision: p,
        } => {
            init_logging("info");
            with_precision!(precision(p), cmd_predict(&checkpoint, &input, &output, threshold, overlay))
        }
        Command::Ablate { cfg, variants } => {
            let cfg = load_config(&cfg).map(|c| (c, variants))?;
            with_precision!(cfg.0.run.precision, cmd_ablate(&cfg.0, cfg.1.as_deref()))
        }
        Command::Sweep { cfg, param, grid } => {
            let cfg = load_config(&cfg)?;
            with_precision!(cfg.run.precision, cmd_sweep(&cfg, param, &grid))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
