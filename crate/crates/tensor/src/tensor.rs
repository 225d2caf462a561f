use std::fmt;

use crate::error::{Result, TensorError};

/// Storage precision of a tensor.
///
/// Arithmetic is always carried out in double precision. A `Single` tensor
/// holds only values that are exactly representable as `f32`, which is what
/// gets written to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn from_bytes(b: u8) -> Option<Self> {
        match b {
            4 => Some(Precision::Single),
            8 => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision)
            .field("data[..8]", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::dim("from_vec", &[numel(shape)], &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            precision: Precision::Double,
        })
    }

    /// Builds a tensor from data that is already known to match `shape`.
    pub(crate) fn raw(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Self {
            shape: shape.to_vec(),
            data,
            precision: Precision::Double,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::raw(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(&[], vec![value])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Self::raw(shape, (0..numel(shape)).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Converts to the given storage precision, rounding through `f32` for
    /// single precision.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        if precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.precision = precision;
        self
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(TensorError::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination; panics on shape mismatch.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self::raw(
            &self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive 64-bit FNV-1a digest of shape and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for &d in &self.shape {
            h.write(d as u64);
        }
        for &v in &self.data {
            h.write(v.to_bits());
        }
        h.0
    }
}

/// Combined digest of several tensors.
pub fn checksum_all<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h = Fnv::default();
    for t in tensors {
        h.write(t.checksum());
    }
    h.0
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, word: u64) {
        for b in word.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(Tensor::scalar(2.5).shape(), &[] as &[usize]);
    }

    #[test]
    fn single_precision_rounds_through_f32() {
        let t = Tensor::from_vec(&[1], vec![0.1]).unwrap().with_precision(Precision::Single);
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn checksum_detects_single_bit() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }
}
