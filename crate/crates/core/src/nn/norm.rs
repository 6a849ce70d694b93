use super::{join, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `N x H x W`.
///
/// Training forwards use batch statistics and update the running estimates
/// (unbiased variance, exponential momentum); evaluation and frozen layers use
/// the running estimates and leave them untouched.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Use running statistics even in training mode.
    pub frozen: bool,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::filled(vec![channels], T::one(), true),
            bias: Param::filled(vec![channels], T::zero(), true),
            running_mean: Param::filled(vec![channels], T::zero(), false),
            running_var: Param::filled(vec![channels], T::one(), false),
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let c = self.channels();
        assert_eq!(x.channels(), c, "batch norm expects {c} channels");
        let plane = x.plane();
        let count = x.batch() * plane;
        let eps = T::lit(self.eps);
        let batch_stats = mode == Mode::Train && !self.frozen;

        let (mean, var) = if batch_stats {
            let cnt = T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for n in 0..x.batch() {
                for (ch, chunk) in x.item(n).chunks_exact(plane).enumerate() {
                    mean[ch] += chunk.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= cnt);
            for n in 0..x.batch() {
                for (ch, chunk) in x.item(n).chunks_exact(plane).enumerate() {
                    let m = mean[ch];
                    var[ch] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= cnt);
            let mom = T::lit(self.momentum);
            let unbias = if count > 1 {
                cnt / (cnt - T::one())
            } else {
                T::one()
            };
            for ch in 0..c {
                let rm = &mut self.running_mean.value[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut self.running_var.value[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut y = Tensor::zeros(x.shape());
        let mut x_hat = if mode == Mode::Train { Some(Tensor::zeros(x.shape())) } else { None };
        for n in 0..x.batch() {
            let xin = x.item(n);
            let yout = y.item_mut(n);
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (gamma, beta) = (self.weight.value[ch], self.bias.value[ch]);
                let range = ch * plane..(ch + 1) * plane;
                for (o, &v) in yout[range.clone()].iter_mut().zip(&xin[range.clone()]) {
                    *o = gamma * ((v - m) * s) + beta;
                }
                if let Some(xh) = &mut x_hat {
                    for (o, &v) in xh.item_mut(n)[range.clone()].iter_mut().zip(&xin[range]) {
                        *o = (v - m) * s;
                    }
                }
            }
        }
        self.cache = x_hat.map(|x_hat| Cache {
            x_hat,
            inv_std,
            batch_stats,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batch norm backward without a training forward");
        assert_eq!(dy.shape(), cache.x_hat.shape(), "batch norm backward shape mismatch");
        let c = self.channels();
        let plane = dy.plane();
        let cnt = T::from_usize(dy.batch() * plane).unwrap();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for n in 0..dy.batch() {
            let d = dy.item(n);
            let xh = cache.x_hat.item(n);
            for ch in 0..c {
                let range = ch * plane..(ch + 1) * plane;
                for (&g, &h) in d[range.clone()].iter().zip(&xh[range]) {
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * h;
                }
            }
        }
        for ch in 0..c {
            self.bias.grad[ch] += sum_dy[ch];
            self.weight.grad[ch] += sum_dy_xhat[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        for n in 0..dy.batch() {
            let d = dy.item(n);
            let xh = cache.x_hat.item(n);
            let out = dx.item_mut(n);
            for ch in 0..c {
                let scale = self.weight.value[ch] * cache.inv_std[ch];
                let range = ch * plane..(ch + 1) * plane;
                if cache.batch_stats {
                    let mean_dy = sum_dy[ch] / cnt;
                    let mean_dy_xhat = sum_dy_xhat[ch] / cnt;
                    for ((o, &g), &h) in out[range.clone()].iter_mut().zip(&d[range.clone()]).zip(&xh[range]) {
                        *o = scale * (g - mean_dy - h * mean_dy_xhat);
                    }
                } else {
                    for (o, &g) in out[range.clone()].iter_mut().zip(&d[range]) {
                        *o = scale * g;
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(frozen: bool) -> (BatchNorm2d<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.frozen = frozen;
        for ch in 0..3 {
            bn.weight.value[ch] = rng.gen_range(0.5..1.5);
            bn.bias.value[ch] = rng.gen_range(-0.5..0.5);
            bn.running_mean.value[ch] = rng.gen_range(-0.5..0.5);
            bn.running_var.value[ch] = rng.gen_range(0.5..2.0);
        }
        let x = Tensor::from_vec([2, 3, 3, 2], (0..36).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let r = Tensor::from_vec([2, 3, 3, 2], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (bn, x, r)
    }

    fn check_grad(frozen: bool) {
        let (mut bn, x, r) = setup(frozen);
        let snapshot = bn.clone();
        bn.forward(&x, Mode::Train);
        let dx = bn.backward(&r);
        let objective = |x: &Tensor<f64>, gamma0: f64| {
            let mut b = snapshot.clone();
            b.weight.value[0] = gamma0;
            let y = b.forward(x, Mode::Train);
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        let g0 = snapshot.weight.value[0];
        for idx in [0, 5, 13, 29, 35] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp, g0) - objective(&xm, g0)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7, "dx[{idx}] frozen={frozen}");
        }
        let fd = (objective(&x, g0 + h) - objective(&x, g0 - h)) / (2.0 * h);
        assert!((fd - bn.weight.grad[0]).abs() < 1e-7);
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_grad(false);
        check_grad(true);
    }

    #[test]
    fn training_output_is_normalized_and_running_stats_move() {
        let (mut bn, x, _) = setup(false);
        bn.weight.value = vec![1.0; 3];
        bn.bias.value = vec![0.0; 3];
        bn.running_mean.value = vec![0.0; 3];
        let y = bn.forward(&x, Mode::Train);
        let plane = 6;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.item(n)[ch * plane..(ch + 1) * plane].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(bn.running_mean.value.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn eval_and_frozen_leave_running_stats_alone() {
        let (mut bn, x, _) = setup(true);
        let before = bn.running_mean.value.clone();
        bn.forward(&x, Mode::Train);
        bn.forward(&x, Mode::Eval);
        assert_eq!(bn.running_mean.value, before);
    }
}
