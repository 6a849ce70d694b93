//! Composite building blocks shared by the encoders and the decoder.

use rand::Rng;

use crate::nn::{join, BatchNorm2d, BilinearResize, Conv2d, MaxPool2d, Mode, Module, Param, Relu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::attention::AttentionGate;

/// 3x3 convolution (no bias), batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, false, rng),
            bn: BatchNorm2d::new(out_ch),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.conv.forward(x, mode);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(&y, mode)
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.bn.frozen = frozen;
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Two stacked [`ConvBnRelu`] units, the classic U-net level.
#[derive(Debug, Clone)]
pub struct DoubleConv<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

impl<T: Scalar> DoubleConv<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBnRelu::new(in_ch, out_ch, rng),
            second: ConvBnRelu::new(out_ch, out_ch, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.first.forward(x, mode);
        self.second.forward(&y, mode)
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.first.set_bn_frozen(frozen);
        self.second.set_bn_frozen(frozen);
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.second.backward(dy);
        self.first.backward(&d)
    }
}

impl<T: Scalar> Module<T> for DoubleConv<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
    }
}

/// Residual block with two 3x3 convolutions and an optional 1x1 projection
/// shortcut. Parameter names follow the torchvision layout so pretrained
/// archives map one to one.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng), BatchNorm2d::new(out_ch)));
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_ch),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_ch),
            downsample,
            relu_out: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.conv1.forward(x, mode);
        let y = self.bn1.forward(&y, mode);
        let y = self.relu1.forward(&y, mode);
        let y = self.conv2.forward(&y, mode);
        let mut y = self.bn2.forward(&y, mode);
        match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode);
                y.add_assign(&bn.forward(&s, mode));
            }
            None => y.add_assign(x),
        }
        self.relu_out.forward(&y, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.relu_out.backward(dy);
        let mut dx = match &mut self.downsample {
            Some((conv, bn)) => conv.backward(&bn.backward(&d)),
            None => d.clone(),
        };
        let m = self.bn2.backward(&d);
        let m = self.conv2.backward(&m);
        let m = self.relu1.backward(&m);
        let m = self.bn1.backward(&m);
        dx.add_assign(&self.conv1.backward(&m));
        dx
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.bn1.frozen = frozen;
        self.bn2.frozen = frozen;
        if let Some((_, bn)) = &mut self.downsample {
            bn.frozen = frozen;
        }
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit(&join(prefix, "downsample.0"), f);
            bn.visit(&join(prefix, "downsample.1"), f);
        }
    }
}

/// Optional 2x2 max pool followed by a [`DoubleConv`]: one plain U-net
/// contracting level.
#[derive(Debug, Clone)]
pub struct DownLevel<T> {
    pool: Option<MaxPool2d>,
    pub conv: DoubleConv<T>,
}

impl<T: Scalar> DownLevel<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, pool: bool, rng: &mut R) -> Self {
        Self {
            pool: pool.then(|| MaxPool2d::new(2, 2, 0)),
            conv: DoubleConv::new(in_ch, out_ch, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        match &mut self.pool {
            Some(p) => {
                let y = p.forward(x, mode);
                self.conv.forward(&y, mode)
            }
            None => self.conv.forward(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.conv.backward(dy);
        match &mut self.pool {
            Some(p) => p.backward(&d),
            None => d,
        }
    }
}

impl<T: Scalar> Module<T> for DownLevel<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit(prefix, f);
    }
}

/// Decoder level: bilinear upsample + 3x3 conv, optional attention-gated
/// skip concatenation, then a [`DoubleConv`].
#[derive(Debug, Clone)]
pub struct UpBlock<T> {
    resize: BilinearResize,
    pub up: ConvBnRelu<T>,
    pub gate: Option<AttentionGate<T>>,
    pub conv: DoubleConv<T>,
    skip_ch: usize,
    out_ch: usize,
}

impl<T: Scalar> UpBlock<T> {
    /// `skip_ch == 0` builds a block without a skip connection.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, skip_ch: usize, out_ch: usize, attention: bool, rng: &mut R) -> Self {
        let up = ConvBnRelu::new(in_ch, out_ch, rng);
        let gate = (attention && skip_ch > 0).then(|| AttentionGate::new(skip_ch, out_ch, (skip_ch / 2).max(1), rng));
        Self {
            resize: BilinearResize::new(),
            up,
            gate,
            conv: DoubleConv::new(skip_ch + out_ch, out_ch, rng),
            skip_ch,
            out_ch,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn skip_channels(&self) -> usize {
        self.skip_ch
    }

    pub fn forward(&mut self, x: &Tensor<T>, skip: Option<&Tensor<T>>, out_hw: (usize, usize), mode: Mode) -> Tensor<T> {
        let u = self.resize.forward(x, out_hw.0, out_hw.1, mode);
        let u = self.up.forward(&u, mode);
        let merged = match (skip, &mut self.gate) {
            (Some(s), Some(gate)) => {
                let gated = gate.forward(s, &u, mode);
                Tensor::concat_channels(&gated, &u)
            }
            (Some(s), None) => Tensor::concat_channels(s, &u),
            (None, _) => {
                assert_eq!(self.skip_ch, 0, "decoder level expects a skip tensor");
                u
            }
        };
        self.conv.forward(&merged, mode)
    }

    /// Returns `(d_input, d_skip)`.
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
        let d = self.conv.backward(dy);
        let (d_skip, mut d_up) = if self.skip_ch > 0 {
            let (ds, du) = d.split_channels(self.skip_ch);
            (Some(ds), du)
        } else {
            (None, d)
        };
        let d_skip = match (d_skip, &mut self.gate) {
            (Some(ds), Some(gate)) => {
                let (d_s, d_g) = gate.backward(&ds);
                d_up.add_assign(&d_g);
                Some(d_s)
            }
            (ds, _) => ds,
        };
        let d = self.up.backward(&d_up);
        (self.resize.backward(&d), d_skip)
    }
}

impl<T: Scalar> Module<T> for UpBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        if let Some(g) = &mut self.gate {
            g.visit(&join(prefix, "gate"), f);
        }
        self.conv.visit(&join(prefix, "conv"), f);
    }
}
