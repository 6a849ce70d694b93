//! Two-dimensional rasters: probability maps and binary masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid must have at least one row and one column, got {height}x{width}")]
    Empty { height: usize, width: usize },
    #[error("grid data length {len} does not match {height}x{width}")]
    DataLength { height: usize, width: usize, len: usize },
    #[error("non-finite value at ({row}, {col})")]
    NotFinite { row: usize, col: usize },
    #[error("value {value} at ({row}, {col}) is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("mask value {value} at ({row}, {col}) is not 0 or 1")]
    NotBinary { row: usize, col: usize, value: u8 },
    #[error("shape mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    ShapeMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
}

/// Row-major 2-D raster. Index `(i, j)` is row `i`, column `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::Empty { height, width });
        }
        if data.len() != height * width {
            return Err(GridError::DataLength {
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Panics on a zero dimension.
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.width + j] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_same_shape<U: Copy>(&self, other: &Grid<U>) -> Result<(), GridError> {
        if self.shape() != other.shape() {
            return Err(GridError::ShapeMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        Ok(())
    }
}

/// Per-pixel foreground probabilities, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Grid<T>", into = "Grid<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ProbabilityMap<T: Scalar>(Grid<T>);

impl<T: Scalar> ProbabilityMap<T> {
    pub fn new(grid: Grid<T>) -> Result<Self, GridError> {
        for (idx, &v) in grid.as_slice().iter().enumerate() {
            let (row, col) = (idx / grid.width(), idx % grid.width());
            if !v.is_finite() {
                return Err(GridError::NotFinite { row, col });
            }
            if v < T::zero() || v > T::one() {
                return Err(GridError::OutOfRange {
                    row,
                    col,
                    value: v.as_f64(),
                });
            }
        }
        Ok(Self(grid))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self, GridError> {
        Self::new(Grid::new(height, width, data)?)
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self, GridError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::Empty { height, width });
        }
        Self::new(Grid::filled(height, width, value))
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<T> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0.get(i, j)
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice()
    }

    /// Pixel-wise complement `1 - p`.
    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| T::one() - v))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), GridError> {
        self.0.check_same_shape(&other.0)
    }
}

impl<T: Scalar> TryFrom<Grid<T>> for ProbabilityMap<T> {
    type Error = GridError;
    fn try_from(g: Grid<T>) -> Result<Self, GridError> {
        Self::new(g)
    }
}

impl<T: Scalar> From<ProbabilityMap<T>> for Grid<T> {
    fn from(p: ProbabilityMap<T>) -> Self {
        p.0
    }
}

/// Per-pixel `{0, 1}` labelling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Grid<u8>", into = "Grid<u8>")]
pub struct BinaryMask(Grid<u8>);

impl BinaryMask {
    pub fn new(grid: Grid<u8>) -> Result<Self, GridError> {
        if let Some(idx) = grid.as_slice().iter().position(|&v| v > 1) {
            return Err(GridError::NotBinary {
                row: idx / grid.width(),
                col: idx % grid.width(),
                value: grid.as_slice()[idx],
            });
        }
        Ok(Self(grid))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self, GridError> {
        Self::new(Grid::new(height, width, data)?)
    }

    /// Any nonzero value becomes foreground.
    pub fn from_nonzero(grid: &Grid<u8>) -> Self {
        Self(grid.map(|v| u8::from(v != 0)))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(height, width, |i, j| u8::from(f(i, j))))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::filled(height, width, 0))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j) == 1
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.0.set(i, j, u8::from(v));
    }

    pub fn as_slice(&self) -> &[u8] {
        self.0.as_slice()
    }

    pub fn foreground_count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v == 1).count()
    }

    /// Foreground pixel coordinates as `(row, col)`, row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        self.as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(idx, _)| (idx / w, idx % w))
            .collect()
    }

    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| 1 - v))
    }

    pub fn to_probability<T: Scalar>(&self) -> ProbabilityMap<T> {
        ProbabilityMap(self.0.map(|v| if v == 1 { T::one() } else { T::zero() }))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), GridError> {
        self.0.check_same_shape(&other.0)
    }
}

impl TryFrom<Grid<u8>> for BinaryMask {
    type Error = GridError;
    fn try_from(g: Grid<u8>) -> Result<Self, GridError> {
        Self::new(g)
    }
}

impl From<BinaryMask> for Grid<u8> {
    fn from(m: BinaryMask) -> Self {
        m.0
    }
}
