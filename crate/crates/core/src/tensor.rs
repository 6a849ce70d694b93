//! Dense `N x C x H x W` activations.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    /// Panics if `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor data length mismatch for {shape:?}");
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements in one batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "tensor add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!(
            (a.shape[0], a.shape[2], a.shape[3]),
            (b.shape[0], b.shape[2], b.shape[3]),
            "concat: batch/spatial mismatch"
        );
        let shape = [a.shape[0], a.shape[1] + b.shape[1], a.shape[2], a.shape[3]];
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..a.shape[0] {
            data.extend_from_slice(a.item(n));
            data.extend_from_slice(b.item(n));
        }
        Self { shape, data }
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.shape[1]);
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        let mut a = Vec::with_capacity(n * first * plane);
        let mut b = Vec::with_capacity(n * (c - first) * plane);
        for i in 0..n {
            let item = self.item(i);
            a.extend_from_slice(&item[..first * plane]);
            b.extend_from_slice(&item[first * plane..]);
        }
        (
            Self::from_vec([n, first, h, w], a),
            Self::from_vec([n, c - first, h, w], b),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_vec([2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec([2, 2, 1, 2], (10..18).map(|v| v as f32).collect());
        let c = Tensor::concat_channels(&a, &b);
        assert_eq!(c.shape(), [2, 3, 1, 2]);
        assert_eq!(c.item(1), &[3.0, 4.0, 14.0, 15.0, 16.0, 17.0]);
        let (x, y) = c.split_channels(1);
        assert_eq!((x, y), (a, b));
    }
}
