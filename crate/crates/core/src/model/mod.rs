//! Encoder-decoder segmentation networks: plain U-net, ResNet-18 U-net and
//! their attention-gated variants, all ending in a 1x1 convolution and a
//! sigmoid.

pub mod attention;
pub mod blocks;
pub mod encoder;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{ArchiveError, TensorArchive, WeightSource};
use crate::grid::Grid;
use crate::nn::{join, Conv2d, Mode, Module, Param, Sigmoid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use attention::AttentionGate;
use blocks::UpBlock;
use encoder::{EncoderOutput, PlainEncoder, ResNet18, RESNET18_WIDTHS};

/// ImageNet channel statistics used to normalize replicated grayscale input.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Width of the extra full-resolution decoder level of the ResNet variant.
const RESNET_FINAL_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    PlainUnet,
    Resnet18,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub pretrained: bool,
    pub attention: bool,
    pub in_channels: usize,
    /// Width of the first plain U-net level; the ResNet widths are fixed.
    pub base_channels: usize,
    /// Number of resolution drops of the plain encoder. The ResNet trunk
    /// always has four stages after its stem.
    pub depth: usize,
    /// `[height, width]` of the network input.
    pub input_size: [usize; 2],
    /// Keep encoder batch-norm layers on their running statistics.
    pub freeze_encoder_bn: bool,
}

impl Default for ModelConfig {
    /// The full model: pretrained ResNet-18 encoder with attention gates.
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Resnet18,
            pretrained: true,
            attention: true,
            in_channels: 3,
            base_channels: 64,
            depth: 4,
            input_size: [256, 256],
            freeze_encoder_bn: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not fit the model (expected {in_channels} channels, sides divisible by {factor})")]
    Shape {
        got: [usize; 4],
        in_channels: usize,
        factor: usize,
    },
    #[error("pretrained encoder requested but no weights were supplied")]
    MissingWeights,
    #[error("weight layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

impl ModelConfig {
    pub fn plain_unet() -> Self {
        Self {
            encoder: EncoderKind::PlainUnet,
            pretrained: false,
            attention: false,
            ..Self::default()
        }
    }

    /// Total downsampling factor; input sides must be multiples of it.
    pub fn downsampling_factor(&self) -> usize {
        match self.encoder {
            EncoderKind::Resnet18 => 32,
            EncoderKind::PlainUnet => 1 << self.depth.min(31),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.pretrained && self.encoder != EncoderKind::Resnet18 {
            return bad("pretrained weights exist only for the resnet18 encoder");
        }
        if self.pretrained && self.in_channels != 3 {
            return bad("the pretrained stem expects in_channels = 3");
        }
        match self.encoder {
            EncoderKind::PlainUnet => {
                if self.base_channels == 0 {
                    return bad("base_channels must be positive");
                }
                if self.depth == 0 || self.depth > 8 {
                    return bad("depth must be in 1..=8");
                }
            }
            EncoderKind::Resnet18 => {
                if self.depth != 4 {
                    return bad("the resnet18 encoder has a fixed depth of 4");
                }
            }
        }
        let f = self.downsampling_factor();
        if self.input_size.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(ModelError::InvalidConfig(format!(
                "input_size {:?} must be positive multiples of {f}",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Encoder<T> {
    Plain(PlainEncoder<T>),
    Resnet(Box<ResNet18<T>>),
}

impl<T: Scalar> Encoder<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> EncoderOutput<T> {
        match self {
            Encoder::Plain(e) => e.forward(x, mode),
            Encoder::Resnet(e) => e.forward(x, mode),
        }
    }

    fn backward(&mut self, d_skips: Vec<Option<Tensor<T>>>, d_bridge: Tensor<T>) -> Tensor<T> {
        match self {
            Encoder::Plain(e) => e.backward(d_skips, d_bridge),
            Encoder::Resnet(e) => e.backward(d_skips, d_bridge),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Encoder::Plain(e) => e.visit(prefix, f),
            Encoder::Resnet(e) => e.visit(prefix, f),
        }
    }
}

/// A segmentation network mapping `N x C x H x W` images to `N x 1 x H x W`
/// foreground probabilities.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    encoder: Encoder<T>,
    decoder: Vec<UpBlock<T>>,
    head: Conv2d<T>,
    sigmoid: Sigmoid<T>,
    /// Number of skip taps, for routing decoder gradients.
    taps: usize,
}

const ENCODER_PREFIX: &str = "encoder";

impl<T: Scalar> Model<T> {
    /// Builds a model. Random parts are initialized from `seed`; when the
    /// config asks for a pretrained encoder, `weights` must hold it.
    pub fn build(config: &ModelConfig, seed: u64, weights: Option<&TensorArchive<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self::random(config, seed);
        if config.pretrained {
            let w = weights.ok_or(ModelError::MissingWeights)?;
            model.load_pretrained_encoder(w)?;
        }
        Ok(model)
    }

    /// Resolves the pretrained archive through `source` when needed, then
    /// builds.
    pub fn build_from_source(config: &ModelConfig, seed: u64, source: &WeightSource) -> Result<Self, ModelError> {
        config.validate()?;
        if !config.pretrained {
            return Self::build(config, seed, None);
        }
        let path = source.resolve()?;
        let archive = TensorArchive::load(&path)?;
        Self::build(config, seed, Some(&archive))
    }

    fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = config.attention;
        let (encoder, decoder, head_in, taps) = match config.encoder {
            EncoderKind::PlainUnet => {
                let enc = PlainEncoder::new(config.in_channels, config.base_channels, config.depth, &mut rng);
                let w = enc.widths().to_vec();
                // Each level receives the next coarser width; the bridge has the
                // width of the deepest level.
                let decoder = (0..config.depth)
                    .rev()
                    .map(|i| UpBlock::new(w[i + 1], w[i], w[i], att, &mut rng))
                    .collect();
                (Encoder::Plain(enc), decoder, w[0], config.depth)
            }
            EncoderKind::Resnet18 => {
                let enc = ResNet18::new(config.in_channels, &mut rng);
                let w = RESNET18_WIDTHS;
                let mut decoder: Vec<UpBlock<T>> =
                    (0..4).rev().map(|i| UpBlock::new(w[i + 1], w[i], w[i], att, &mut rng)).collect();
                decoder.push(UpBlock::new(w[0], 0, RESNET_FINAL_WIDTH, att, &mut rng));
                (Encoder::Resnet(Box::new(enc)), decoder, RESNET_FINAL_WIDTH, 4)
            }
        };
        let mut model = Self {
            config: config.clone(),
            encoder,
            decoder,
            head: Conv2d::new(head_in, 1, 1, 1, 0, true, &mut rng),
            sigmoid: Sigmoid::new(),
            taps,
        };
        model.set_encoder_bn_frozen(config.freeze_encoder_bn);
        model
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_encoder_bn_frozen(&mut self, frozen: bool) {
        self.config.freeze_encoder_bn = frozen;
        match &mut self.encoder {
            Encoder::Plain(e) => e.set_bn_frozen(frozen),
            Encoder::Resnet(e) => e.set_bn_frozen(frozen),
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let f = self.config.downsampling_factor();
        let [n, c, h, w] = x.shape();
        if n == 0 || c != self.config.in_channels || h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(ModelError::Shape {
                got: x.shape(),
                in_channels: self.config.in_channels,
                factor: f,
            });
        }
        Ok(())
    }

    /// Probabilities in `(0, 1)` of shape `N x 1 x H x W`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let EncoderOutput { skips, bridge } = self.encoder.forward(x, mode);
        let mut cur = bridge;
        for (k, block) in self.decoder.iter_mut().enumerate() {
            let skip = skips.len().checked_sub(k + 1).map(|i| &skips[i]);
            let hw = match skip {
                Some(s) => (s.height(), s.width()),
                None => (x.height(), x.width()),
            };
            cur = block.forward(&cur, skip, hw, mode);
        }
        let logits = self.head.forward(&cur, mode);
        let mut p = self.sigmoid.forward(&logits, mode);
        // Keep outputs strictly inside (0, 1) even when the sigmoid saturates.
        // NaN passes through so diverged weights are not masked.
        let lo = T::epsilon();
        let hi = T::one() - T::epsilon();
        p.data_mut().iter_mut().filter(|v| !v.is_nan()).for_each(|v| *v = v.max(lo).min(hi));
        Ok(p)
    }

    /// Backpropagates `d_prob` (gradient of the loss with respect to the
    /// forward output) through the last training forward, accumulating
    /// parameter gradients. Returns the gradient with respect to the input.
    pub fn backward(&mut self, d_prob: &Tensor<T>) -> Tensor<T> {
        let d = self.sigmoid.backward(d_prob);
        let mut d = self.head.backward(&d);
        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; self.taps];
        for (k, block) in self.decoder.iter_mut().enumerate().rev() {
            let (dx, ds) = block.backward(&d);
            if let Some(i) = self.taps.checked_sub(k + 1) {
                d_skips[i] = ds;
            }
            d = dx;
        }
        self.encoder.backward(d_skips, d)
    }

    /// Convenience inference on one preprocessed image.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<Grid<T>>, ModelError> {
        let p = self.forward(x, Mode::Eval)?;
        let (h, w) = (p.height(), p.width());
        Ok((0..p.batch()).map(|n| Grid::new(h, w, p.item(n).to_vec()).expect("non-empty output")).collect())
    }

    pub fn parameter_count(&mut self) -> usize {
        crate::nn::trainable_count(self)
    }

    /// Trainable parameters living inside attention gates.
    pub fn attention_parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |name, p| {
            if p.trainable && name.contains(".gate.") {
                n += p.len();
            }
        });
        n
    }

    /// `(name, shape)` of every parameter in visiting order.
    pub fn parameter_shapes(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        self.visit("", &mut |name, p| v.push((name.to_string(), p.shape.clone())));
        v
    }

    /// SHA-256 over every parameter name, shape and value.
    pub fn checksum(&mut self) -> String {
        self.checksum_where(|_| true)
    }

    pub fn encoder_checksum(&mut self) -> String {
        self.checksum_where(|n| n.starts_with("encoder."))
    }

    fn checksum_where(&mut self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        self.visit("", &mut |name, p| {
            if keep(name) {
                h.update(name.as_bytes());
                p.shape.iter().for_each(|&d| h.update((d as u64).to_le_bytes()));
                buf.clear();
                p.value.iter().for_each(|v| v.write_le(&mut buf));
                h.update(&buf);
            }
        });
        hex::encode(h.finalize())
    }

    /// Replaces the ResNet encoder weights (including batch-norm running
    /// statistics) with the archive content, keyed by torchvision names.
    /// Decoder and gates are untouched. Returns the checksum of the loaded
    /// tensors, which is also logged.
    pub fn load_pretrained_encoder(&mut self, archive: &TensorArchive<T>) -> Result<String, ModelError> {
        if self.config.encoder != EncoderKind::Resnet18 {
            return Err(ModelError::Layout("pretrained weights need the resnet18 encoder".into()));
        }
        let Encoder::Resnet(enc) = &mut self.encoder else { unreachable!() };
        let mut expected = Vec::new();
        enc.visit("", &mut |name, p| expected.push((name.to_string(), p.shape.clone())));
        for (name, shape) in &expected {
            let t = archive
                .tensors
                .get(name)
                .ok_or_else(|| ModelError::Layout(format!("archive lacks {name}")))?;
            if &t.shape != shape {
                return Err(ModelError::Layout(format!("{name}: archive shape {:?}, model shape {shape:?}", t.shape)));
            }
        }
        let extra: Vec<_> = archive.tensors.keys().filter(|k| !expected.iter().any(|(n, _)| n == *k)).collect();
        if !extra.is_empty() {
            log::debug!("ignoring {} archive tensors outside the encoder", extra.len());
        }
        enc.visit("", &mut |name, p| {
            p.value.clone_from(&archive.tensors[name].data);
        });
        let mut loaded = TensorArchive::new(serde_json::Value::Null);
        for (name, _) in &expected {
            let t = &archive.tensors[name];
            loaded.insert(name.clone(), t.shape.clone(), t.data.clone());
        }
        let sum = loaded.tensor_checksum();
        log::info!("loaded pretrained encoder ({} tensors), checksum {sum}", expected.len());
        Ok(sum)
    }

    /// The encoder weights as an archive in the pretrained layout.
    pub fn export_encoder(&mut self) -> Result<TensorArchive<T>, ModelError> {
        let Encoder::Resnet(enc) = &mut self.encoder else {
            return Err(ModelError::Layout("only the resnet18 encoder has a pretrained layout".into()));
        };
        let mut a = TensorArchive::new(serde_json::json!({"kind": "resnet18_encoder"}));
        enc.visit("", &mut |name, p| a.insert(name, p.shape.clone(), p.value.clone()));
        Ok(a)
    }

    /// All parameters, the config and the training step.
    pub fn to_checkpoint(&mut self, step: u64) -> TensorArchive<T> {
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "model": self.config,
            "step": step,
        });
        let mut a = TensorArchive::new(meta);
        self.visit("", &mut |name, p| a.insert(name, p.shape.clone(), p.value.clone()));
        a
    }

    pub fn from_checkpoint(archive: &TensorArchive<T>) -> Result<(Self, u64), ModelError> {
        let meta = &archive.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
            return Err(ModelError::Layout("archive is not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| ModelError::Layout(format!("checkpoint model config: {e}")))?;
        config.validate()?;
        let step = meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
        let mut model = Self::random(&config, 0);
        let mut missing = None;
        let mut seen = 0;
        model.visit("", &mut |name, p| match archive.tensors.get(name) {
            Some(t) if t.shape == p.shape => {
                p.value.clone_from(&t.data);
                seen += 1;
            }
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(ModelError::Layout(format!("checkpoint lacks or misshapes {name}")));
        }
        if seen != archive.tensors.len() {
            return Err(ModelError::Layout("checkpoint has tensors the model does not".into()));
        }
        Ok((model, step))
    }

    pub fn save_checkpoint(&mut self, path: &Path, step: u64) -> Result<(), ModelError> {
        Ok(self.to_checkpoint(step).save(path)?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64), ModelError> {
        Self::from_checkpoint(&TensorArchive::load(path)?)
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit(&join(prefix, ENCODER_PREFIX), f);
        for (i, block) in self.decoder.iter_mut().enumerate() {
            block.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// Turns a grayscale image in `[0, 1]` into one network input item: the
/// plane is replicated over `channels`, and for three channels normalized
/// with the ImageNet statistics the pretrained stem was trained on.
pub fn grayscale_to_input<T: Scalar>(image: &Grid<T>, channels: usize) -> Vec<T> {
    let plane = image.as_slice();
    let mut out = Vec::with_capacity(plane.len() * channels);
    for c in 0..channels {
        if channels == 3 {
            let (m, s) = (T::lit(IMAGENET_MEAN[c]), T::lit(IMAGENET_STD[c]));
            out.extend(plane.iter().map(|&v| (v - m) / s));
        } else {
            out.extend_from_slice(plane);
        }
    }
    out
}

/// Stacks preprocessed grayscale images into a batch tensor.
pub fn batch_from_images<T: Scalar>(images: &[&Grid<T>], channels: usize) -> Tensor<T> {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * channels * h * w);
    for img in images {
        assert_eq!(img.shape(), (h, w), "batch images must share a shape");
        data.extend(grayscale_to_input(img, channels));
    }
    Tensor::from_vec([images.len(), channels, h, w], data)
}
