//! Contracting paths. Both encoders return the skip taps (finest first) and
//! the bridge feature map, and route decoder gradients back through the taps.

use rand::Rng;

use crate::nn::{join, BatchNorm2d, Conv2d, MaxPool2d, Mode, Module, Param, Relu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::blocks::{BasicBlock, DownLevel};

pub struct EncoderOutput<T> {
    pub skips: Vec<Tensor<T>>,
    pub bridge: Tensor<T>,
}

/// Classical U-net contracting path: a double convolution at full
/// resolution, then `depth` pooled levels. Widths are `base * 2^min(i, 3)`,
/// so the bridge keeps the width of the deepest skip.
#[derive(Debug, Clone)]
pub struct PlainEncoder<T> {
    levels: Vec<DownLevel<T>>,
    widths: Vec<usize>,
}

impl<T: Scalar> PlainEncoder<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, base: usize, depth: usize, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..=depth).map(|i| base << i.min(3)).collect();
        let mut levels = Vec::with_capacity(depth + 1);
        let mut prev = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            levels.push(DownLevel::new(prev, w, i > 0, rng));
            prev = w;
        }
        Self { levels, widths }
    }

    /// Channel counts of the skip taps followed by the bridge.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.levels.iter_mut().for_each(|l| l.conv.set_bn_frozen(frozen));
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> EncoderOutput<T> {
        let mut skips = Vec::with_capacity(self.levels.len() - 1);
        let mut cur = self.levels[0].forward(x, mode);
        for level in &mut self.levels[1..] {
            let next = level.forward(&cur, mode);
            skips.push(std::mem::replace(&mut cur, next));
        }
        EncoderOutput { skips, bridge: cur }
    }

    pub fn backward(&mut self, d_skips: Vec<Option<Tensor<T>>>, d_bridge: Tensor<T>) -> Tensor<T> {
        let mut d = d_bridge;
        for (i, level) in self.levels.iter_mut().enumerate().rev() {
            if let Some(Some(ds)) = d_skips.get(i) {
                d.add_assign(ds);
            }
            d = level.backward(&d);
        }
        d
    }
}

impl<T: Scalar> Module<T> for PlainEncoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, level) in self.levels.iter_mut().enumerate() {
            level.visit(&join(prefix, &format!("down{i}")), f);
        }
    }
}

/// ResNet-18 trunk without the classifier. Taps: stem (/2, 64), layer1
/// (/4, 64), layer2 (/8, 128), layer3 (/16, 256); layer4 (/32, 512) is the
/// bridge.
#[derive(Debug, Clone)]
pub struct ResNet18<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu: Relu,
    maxpool: MaxPool2d,
    layers: [Vec<BasicBlock<T>>; 4],
}

pub const RESNET18_WIDTHS: [usize; 5] = [64, 64, 128, 256, 512];

impl<T: Scalar> ResNet18<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(in_ch, 64, 7, 2, 3, false, rng);
        let stage = |i: usize, stride: usize, rng: &mut R| {
            let (cin, cout) = (RESNET18_WIDTHS[i], RESNET18_WIDTHS[i + 1]);
            vec![BasicBlock::new(cin, cout, stride, rng), BasicBlock::new(cout, cout, 1, rng)]
        };
        let layers = [stage(0, 1, rng), stage(1, 2, rng), stage(2, 2, rng), stage(3, 2, rng)];
        Self {
            conv1,
            bn1: BatchNorm2d::new(64),
            relu: Relu::new(),
            maxpool: MaxPool2d::new(3, 2, 1),
            layers,
        }
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.bn1.frozen = frozen;
        self.layers.iter_mut().flatten().for_each(|b| b.set_bn_frozen(frozen));
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> EncoderOutput<T> {
        let y = self.conv1.forward(x, mode);
        let y = self.bn1.forward(&y, mode);
        let stem = self.relu.forward(&y, mode);
        let mut cur = self.maxpool.forward(&stem, mode);
        let mut skips = vec![stem];
        for (i, stage) in self.layers.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                cur = block.forward(&cur, mode);
            }
            if i < 3 {
                skips.push(cur.clone());
            }
        }
        EncoderOutput { skips, bridge: cur }
    }

    pub fn backward(&mut self, mut d_skips: Vec<Option<Tensor<T>>>, d_bridge: Tensor<T>) -> Tensor<T> {
        d_skips.resize(4, None);
        let mut d = d_bridge;
        for i in (0..4).rev() {
            if i < 3 {
                if let Some(ds) = &d_skips[i + 1] {
                    d.add_assign(ds);
                }
            }
            for block in self.layers[i].iter_mut().rev() {
                d = block.backward(&d);
            }
        }
        let mut d = self.maxpool.backward(&d);
        if let Some(ds) = &d_skips[0] {
            d.add_assign(ds);
        }
        let d = self.relu.backward(&d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }
}

impl<T: Scalar> Module<T> for ResNet18<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        for (i, stage) in self.layers.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
    }
}
