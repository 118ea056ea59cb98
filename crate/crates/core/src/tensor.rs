//! Dense vector/matrix containers used by the attention numerics.
//!
//! Everything is generic over the element type so the same code can run at
//! working precision (`f32` by default) and at oracle precision (`f64`).

use num_traits::Float;
use thiserror::Error;

/// Floating-point element of the numerics: `f32` for the working path,
/// `f64` for the oracle path.
pub trait Real: Float + std::fmt::Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape ({rows}, {cols}) does not match data length {len}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite element at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

/// Dense 1-D real vector. All elements are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vec1D<T: Real> {
    data: Vec<T>,
}

impl<T: Real> Vec1D<T> {
    pub fn new(data: Vec<T>) -> Result<Self, TensorError> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![T::zero(); len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn dot(&self, other: &Self) -> Result<T, TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::DimMismatch(format!(
                "dot of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut acc = T::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            acc = acc + *a * *b;
        }
        Ok(acc)
    }

    /// Convert element-wise to another precision.
    pub fn cast<U: Real>(&self) -> Vec1D<U> {
        Vec1D { data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }
}

impl<T: Real> std::ops::Index<usize> for Vec1D<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Real> std::ops::IndexMut<usize> for Vec1D<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}

/// Dense row-major 2-D real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat2D<T: Real> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
}

impl<T: Real> Mat2D<T> {
    pub fn new(data: Vec<T>, rows: usize, cols: usize) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch { rows, cols, len: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { data: vec![T::zero(); rows * cols], rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// `v · M` for a row vector `v` of length `rows`; returns length `cols`.
    pub fn left_mul_vec(&self, v: &Vec1D<T>) -> Result<Vec1D<T>, TensorError> {
        if v.len() != self.rows {
            return Err(TensorError::DimMismatch(format!(
                "vec of length {} times matrix with {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            let scale = v[r];
            if scale == T::zero() {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o = *o + scale * *w;
            }
        }
        Ok(Vec1D { data: out })
    }

    /// `v · Mᵀ`: dot of `v` (length `cols`) with every row; returns length `rows`.
    pub fn mul_vec_t(&self, v: &Vec1D<T>) -> Result<Vec1D<T>, TensorError> {
        if v.len() != self.cols {
            return Err(TensorError::DimMismatch(format!(
                "vec of length {} against matrix with {} cols",
                v.len(),
                self.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let mut acc = T::zero();
            for (a, b) in v.as_slice().iter().zip(self.row(r)) {
                acc = acc + *a * *b;
            }
            out.push(acc);
        }
        Ok(Vec1D { data: out })
    }

    pub fn cast<U: Real>(&self) -> Mat2D<U> {
        Mat2D {
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Tracks live/peak scratch elements of a computation path.
///
/// The latent-attention paths report the largest intermediate tensor volume
/// they materialize, so tests can compare memory footprints of the absorbed
/// and naive routes.
#[derive(Debug, Default, Clone)]
pub struct ScratchMeter {
    live: usize,
    peak: usize,
}

impl ScratchMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, elems: usize) {
        self.live += elems;
        self.peak = self.peak.max(self.live);
    }

    pub fn release(&mut self, elems: usize) {
        debug_assert!(self.live >= elems);
        self.live -= elems;
    }

    pub fn peak_elems(&self) -> usize {
        self.peak
    }
}

/// Largest element-wise deviation of `a` from `b`, relative to the largest
/// magnitude of `b` (floored at 1 so near-zero references stay meaningful).
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_error over mismatched lengths");
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert_eq!(Vec1D::new(vec![1.0f32, f32::NAN]).unwrap_err(), TensorError::NonFinite(1));
        assert!(Mat2D::new(vec![1.0f64, f64::INFINITY], 1, 2).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        assert!(matches!(
            Mat2D::new(vec![1.0f32; 5], 2, 3),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn vec_mat_products() {
        // M = [[1,2],[3,4]]
        let m = Mat2D::new(vec![1.0f64, 2.0, 3.0, 4.0], 2, 2).unwrap();
        let v = Vec1D::new(vec![1.0f64, 1.0]).unwrap();
        assert_eq!(m.left_mul_vec(&v).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(m.mul_vec_t(&v).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn scratch_meter_tracks_peak() {
        let mut s = ScratchMeter::new();
        s.alloc(10);
        s.alloc(5);
        s.release(10);
        s.alloc(3);
        assert_eq!(s.peak_elems(), 15);
    }
}
