//! Complex image container and small vector helpers shared by every module.

use num_complex::Complex64;

use crate::error::{invalid, shape, Error, Result};

pub type C64 = Complex64;

/// A 2D complex image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexImage {
    /// Builds an image, rejecting wrong lengths and non-finite samples.
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid(format!("image dimensions must be positive, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return shape(format!(
                "image data has {} samples, expected {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite(format!("image sample {i} is {}", data[i])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Wraps a buffer produced by internal arithmetic. Lengths are checked, finiteness is not.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_shape(&self, other: &ComplexImage) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn ensure_same_shape(&self, other: &ComplexImage, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn scale(&self, a: f64) -> ComplexImage {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * a).collect())
    }

    pub fn add(&self, other: &ComplexImage) -> Result<ComplexImage> {
        self.ensure_same_shape(other, "image add")?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &ComplexImage) -> Result<ComplexImage> {
        self.ensure_same_shape(other, "image subtract")?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Relative error `‖self − reference‖ / ‖reference‖`.
    pub fn relative_error(&self, reference: &ComplexImage) -> Result<f64> {
        let diff = self.sub(reference)?;
        let denom = reference.norm();
        if denom == 0.0 {
            return invalid("relative error against an all-zero reference");
        }
        Ok(diff.norm() / denom)
    }
}

/// Boolean image (object support, masks of pixels).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolImage {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Real part of the Hermitian inner product, `Re Σ conj(a_i) b_i`.
pub fn dot_re(a: &[C64], b: &[C64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// Full Hermitian inner product `Σ conj(a_i) b_i`.
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

pub fn norm2(a: &[C64]) -> f64 {
    norm_sqr(a).sqrt()
}

pub fn norm1(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm()).sum()
}
