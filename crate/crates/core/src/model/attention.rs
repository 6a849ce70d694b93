//! Additive attention gate on a skip connection.
//!
//! `alpha = sigmoid(psi(relu(w_g * gate + w_x * skip)))`, one coefficient per
//! pixel, and the gate output is `skip * alpha` broadcast over channels. The
//! gating signal must already be at the skip resolution; the decoder feeds
//! its upsampled feature map.

use rand::Rng;

use crate::nn::{join, Conv2d, Mode, Module, Param, Relu, Sigmoid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AttentionGate<T> {
    pub w_g: Conv2d<T>,
    pub w_x: Conv2d<T>,
    pub psi: Conv2d<T>,
    relu: Relu,
    sigmoid: Sigmoid<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AttentionGate<T> {
    pub fn new<R: Rng + ?Sized>(skip_ch: usize, gate_ch: usize, inter_ch: usize, rng: &mut R) -> Self {
        Self {
            w_g: Conv2d::new(gate_ch, inter_ch, 1, 1, 0, true, rng),
            w_x: Conv2d::new(skip_ch, inter_ch, 1, 1, 0, false, rng),
            psi: Conv2d::new(inter_ch, 1, 1, 1, 0, true, rng),
            relu: Relu::new(),
            sigmoid: Sigmoid::new(),
            cache: None,
        }
    }

    pub fn inter_channels(&self) -> usize {
        self.psi.in_channels()
    }

    /// The `N x 1 x H x W` coefficient map.
    pub fn coefficients(&mut self, skip: &Tensor<T>, gate: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(
            (skip.batch(), skip.height(), skip.width()),
            (gate.batch(), gate.height(), gate.width()),
            "attention gate: gating signal must match the skip resolution"
        );
        let mut a = self.w_g.forward(gate, mode);
        a.add_assign(&self.w_x.forward(skip, mode));
        let a = self.relu.forward(&a, mode);
        let a = self.psi.forward(&a, mode);
        self.sigmoid.forward(&a, mode)
    }

    pub fn forward(&mut self, skip: &Tensor<T>, gate: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let alpha = self.coefficients(skip, gate, mode);
        let out = apply_coefficients(skip, &alpha);
        self.cache = (mode == Mode::Train).then(|| (skip.clone(), alpha));
        out
    }

    /// Returns `(d_skip, d_gate)`.
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (skip, alpha) = self.cache.take().expect("attention backward without a training forward");
        let plane = skip.plane();
        let mut d_skip = Tensor::zeros(skip.shape());
        let mut d_alpha = Tensor::zeros(alpha.shape());
        for n in 0..skip.batch() {
            let a = alpha.item(n);
            let da = d_alpha.item_mut(n);
            for ((ds, g), s) in d_skip
                .item_mut(n)
                .chunks_exact_mut(plane)
                .zip(dy.item(n).chunks_exact(plane))
                .zip(skip.item(n).chunks_exact(plane))
            {
                for p in 0..plane {
                    ds[p] = g[p] * a[p];
                    da[p] += g[p] * s[p];
                }
            }
        }
        let d = self.sigmoid.backward(&d_alpha);
        let d = self.psi.backward(&d);
        let d = self.relu.backward(&d);
        let d_gate = self.w_g.backward(&d);
        d_skip.add_assign(&self.w_x.backward(&d));
        (d_skip, d_gate)
    }
}

/// `skip * alpha` with `alpha` broadcast over channels.
pub fn apply_coefficients<T: Scalar>(skip: &Tensor<T>, alpha: &Tensor<T>) -> Tensor<T> {
    assert_eq!(alpha.channels(), 1);
    let plane = skip.plane();
    let mut out = skip.clone();
    for n in 0..skip.batch() {
        let a = alpha.item(n).to_vec();
        for chunk in out.item_mut(n).chunks_exact_mut(plane) {
            for (v, &w) in chunk.iter_mut().zip(&a) {
                *v *= w;
            }
        }
    }
    out
}

impl<T: Scalar> Module<T> for AttentionGate<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.w_g.visit(&join(prefix, "w_g"), f);
        self.w_x.visit(&join(prefix, "w_x"), f);
        self.psi.visit(&join(prefix, "psi"), f);
    }
}
