use rand::Rng;

use super::{fan_in_uniform, join, kaiming_normal, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 20;

/// 2-D convolution, square kernel, symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<Tensor<T>>,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.c * self.k * self.k * self.ow).max(1)).clamp(1, self.oh)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, oh0: usize, oh1: usize, col: &mut [T]) {
    let p_len = (oh1 - oh0) * g.ow;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * p_len..(row + 1) * p_len];
                for (r, oh) in (oh0..oh1).enumerate() {
                    let seg = &mut dst[r * g.ow..(r + 1) * g.ow];
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    if g.s == 1 {
                        // Valid output columns form one contiguous run.
                        let lo = g.p.saturating_sub(kj).min(g.ow);
                        let hi = (g.w + g.p).saturating_sub(kj).min(g.ow).max(lo);
                        seg[..lo].iter_mut().for_each(|v| *v = T::zero());
                        seg[hi..].iter_mut().for_each(|v| *v = T::zero());
                        let start = lo + kj - g.p;
                        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (o, v) in seg.iter_mut().enumerate() {
                            let iw = (o * g.s + kj) as isize - g.p as isize;
                            *v = if iw >= 0 && iw < g.w as isize { src[iw as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, oh0: usize, oh1: usize, dx: &mut [T]) {
    let p_len = (oh1 - oh0) * g.ow;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * p_len..(row + 1) * p_len];
                for (r, oh) in (oh0..oh1).enumerate() {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let seg = &src[r * g.ow..(r + 1) * g.ow];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (o, &v) in seg.iter().enumerate() {
                        let iw = (o * g.s + kj) as isize - g.p as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0);
        let fan_out = out_ch * kernel * kernel;
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(
            vec![out_ch, in_ch, kernel, kernel],
            kaiming_normal(out_ch * fan_in, fan_out, rng),
            true,
        );
        let bias = bias.then(|| Param::new(vec![out_ch], fan_in_uniform(out_ch, fan_in, rng), true));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        assert!(
            h + 2 * self.padding >= k && w + 2 * self.padding >= k,
            "conv input {h}x{w} smaller than kernel {k}"
        );
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        let (oh, ow) = self.output_size(x.height(), x.width());
        Geometry {
            c: self.in_ch,
            h: x.height(),
            w: x.width(),
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            oh,
            ow,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_ch, "conv expects {} input channels", self.in_ch);
        let g = self.geometry(x);
        let kk = g.c * g.k * g.k;
        let out_plane = g.oh * g.ow;
        let mut y = Tensor::zeros([x.batch(), self.out_ch, g.oh, g.ow]);
        let w = &self.weight.value;
        let rows = g.rows_per_chunk();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * rows * g.ow] };
        for n in 0..x.batch() {
            let xin = x.item(n);
            let yout = y.item_mut(n);
            if g.is_pointwise() {
                T::gemm(false, false, self.out_ch, out_plane, kk, T::one(), w, kk, xin, out_plane, T::zero(), yout, out_plane);
            } else {
                let mut oh0 = 0;
                while oh0 < g.oh {
                    let oh1 = (oh0 + rows).min(g.oh);
                    let p_len = (oh1 - oh0) * g.ow;
                    im2col(xin, &g, oh0, oh1, &mut col);
                    T::gemm(
                        false,
                        false,
                        self.out_ch,
                        p_len,
                        kk,
                        T::one(),
                        w,
                        kk,
                        &col,
                        p_len,
                        T::zero(),
                        &mut yout[oh0 * g.ow..],
                        out_plane,
                    );
                    oh0 = oh1;
                }
            }
            if let Some(b) = &self.bias {
                for (o, chunk) in yout.chunks_exact_mut(out_plane).enumerate() {
                    let bv = b.value[o];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("conv backward without a training forward");
        let g = self.geometry(&x);
        assert_eq!(dy.shape(), [x.batch(), self.out_ch, g.oh, g.ow], "conv backward shape mismatch");
        let kk = g.c * g.k * g.k;
        let out_plane = g.oh * g.ow;
        let mut dx = Tensor::zeros(x.shape());
        let rows = g.rows_per_chunk();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * rows * g.ow] };
        let mut dcol = col.clone();
        for n in 0..x.batch() {
            let dyn_ = dy.item(n);
            if let Some(b) = &mut self.bias {
                for (o, chunk) in dyn_.chunks_exact(out_plane).enumerate() {
                    b.grad[o] += chunk.iter().copied().sum::<T>();
                }
            }
            let xin = x.item(n);
            if g.is_pointwise() {
                T::gemm(false, true, self.out_ch, kk, out_plane, T::one(), dyn_, out_plane, xin, out_plane, T::one(), &mut self.weight.grad, kk);
                T::gemm(true, false, kk, out_plane, self.out_ch, T::one(), &self.weight.value, kk, dyn_, out_plane, T::zero(), dx.item_mut(n), out_plane);
                continue;
            }
            let mut oh0 = 0;
            while oh0 < g.oh {
                let oh1 = (oh0 + rows).min(g.oh);
                let p_len = (oh1 - oh0) * g.ow;
                let dy_chunk = &dyn_[oh0 * g.ow..];
                im2col(xin, &g, oh0, oh1, &mut col);
                T::gemm(false, true, self.out_ch, kk, p_len, T::one(), dy_chunk, out_plane, &col, p_len, T::one(), &mut self.weight.grad, kk);
                T::gemm(true, false, kk, p_len, self.out_ch, T::one(), &self.weight.value, kk, dy_chunk, out_plane, T::zero(), &mut dcol, p_len);
                col2im(&dcol, &g, oh0, oh1, dx.item_mut(n));
                oh0 = oh1;
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
