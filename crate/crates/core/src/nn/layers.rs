use super::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let data: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
        self.mask = (mode == Mode::Train).then(|| x.data().iter().map(|&v| v > T::zero()).collect());
        Tensor::from_vec(x.shape(), data)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("relu backward without a training forward");
        let data = dy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &on)| if on { g } else { T::zero() })
            .collect();
        Tensor::from_vec(dy.shape(), data)
    }
}

#[derive(Debug, Clone)]
pub struct Sigmoid<T> {
    out: Option<Vec<T>>,
}

impl<T: Scalar> Default for Sigmoid<T> {
    fn default() -> Self {
        Self { out: None }
    }
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| sigmoid(v)).collect());
        self.out = (mode == Mode::Train).then(|| y.data().to_vec());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let out = self.out.take().expect("sigmoid backward without a training forward");
        let data = dy
            .data()
            .iter()
            .zip(&out)
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        Tensor::from_vec(dy.shape(), data)
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Max pooling with implicit `-inf` padding.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel > 0 && stride > 0 && padding < kernel);
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.output_size(h, w);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        let mut out_idx = 0;
        for plane_idx in 0..n * c {
            let src = &x.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0;
                    for ki in 0..self.kernel {
                        let ih = (i * self.stride + ki) as isize - self.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let iw = (j * self.stride + kj) as isize - self.padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let at = ih as usize * w + iw as usize;
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    y.data_mut()[out_idx] = best;
                    arg[out_idx] = plane_idx * h * w + best_at;
                    out_idx += 1;
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some((x.shape(), arg));
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (shape, arg) = self.cache.take().expect("max-pool backward without a training forward");
        let mut dx = Tensor::zeros(shape);
        for (&g, &at) in dy.data().iter().zip(&arg) {
            dx.data_mut()[at] += g;
        }
        dx
    }
}

/// Half-pixel-centred bilinear resampling to a fixed output size.
#[derive(Debug, Clone, Default)]
pub struct BilinearResize {
    cache: Option<[usize; 4]>,
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

impl BilinearResize {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, out_h: usize, out_w: usize, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let mut y = Tensor::zeros([n, c, out_h, out_w]);
        for plane_idx in 0..n * c {
            let src = &x.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
            let dst = &mut y.data_mut()[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
            for (i, a) in ty.iter().enumerate() {
                let (r0, r1) = (&src[a.i0 * w..(a.i0 + 1) * w], &src[a.i1 * w..(a.i1 + 1) * w]);
                let (wy0, wy1) = (T::lit(a.w0), T::lit(a.w1));
                for (j, b) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::lit(b.w0), T::lit(b.w1));
                    dst[i * out_w + j] = wy0 * (wx0 * r0[b.i0] + wx1 * r0[b.i1]) + wy1 * (wx0 * r1[b.i0] + wx1 * r1[b.i1]);
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(x.shape());
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.cache.take().expect("resize backward without a training forward");
        let [n, c, h, w] = shape;
        let (out_h, out_w) = (dy.height(), dy.width());
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let mut dx = Tensor::zeros(shape);
        for plane_idx in 0..n * c {
            let g = &dy.data()[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
            let dst = &mut dx.data_mut()[plane_idx * h * w..(plane_idx + 1) * h * w];
            for (i, a) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::lit(a.w0), T::lit(a.w1));
                for (j, b) in tx.iter().enumerate() {
                    let v = g[i * out_w + j];
                    let (wx0, wx1) = (T::lit(b.w0), T::lit(b.w1));
                    dst[a.i0 * w + b.i0] += wy0 * wx0 * v;
                    dst[a.i0 * w + b.i1] += wy0 * wx1 * v;
                    dst[a.i1 * w + b.i0] += wy1 * wx0 * v;
                    dst[a.i1 * w + b.i1] += wy1 * wx1 * v;
                }
            }
        }
        dx
    }
}
