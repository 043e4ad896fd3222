//! Dense row-major tensors and a reverse-mode tape.
//!
//! Values are stored in a flat buffer; the engine is generic over the scalar
//! type so the same graph code runs in `f32` for training and in `f64` for
//! finite-difference verification.

mod gradcheck;
mod io;
pub(crate) mod kernels;
mod tape;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAGIC};
pub use tape::{Reduction, Tape, Var};

/// Scalar type usable by the tape.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} holds {n} values but {} were given",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Row count and width of a tensor viewed as a matrix over its last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("rank >= 1");
        (self.values.len() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range on axis {i}");
            flat = flat * d + ix;
        }
        self.values[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Split along `axis` into consecutive parts of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::Validation(format!(
                "cannot split {:?} on axis {axis} into {sizes:?}",
                self.shape
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.narrow(axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::Validation(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let (outer, dim, inner) = axis_split(&self.shape, axis);
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            values.extend_from_slice(&self.values[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, values })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        concat_shape(parts.iter().map(|p| p.shape()), axis)?;
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut values = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                values.extend_from_slice(&p.values[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, values })
    }

    pub fn to_bytes_f32(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|v| v.as_f32().to_le_bytes())
            .collect()
    }
}

/// (product of dims before axis, dim at axis, product of dims after axis)
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat_shape<'a>(
    mut shapes: impl Iterator<Item = &'a [usize]>,
    axis: usize,
) -> Result<Vec<usize>> {
    let first = shapes
        .next()
        .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
    if axis >= first.len() {
        return Err(Error::Validation(format!(
            "concat axis {axis} out of range for rank {}",
            first.len()
        )));
    }
    let mut out = first.to_vec();
    for s in shapes {
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::dim("concat", first, s));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn concat_rejects_mismatched_width() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4]);
        assert!(matches!(
            Tensor::concat(&[&a, &b], 0),
            Err(Error::Dimension { .. })
        ));
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap().shape(), &[2, 7]);
    }

    proptest! {
        #[test]
        fn concat_then_split_is_exact(
            rows_a in 1usize..5, rows_b in 1usize..5, cols in 1usize..5, axis in 0usize..2,
            seed in proptest::collection::vec(-1e3f32..1e3, 64),
        ) {
            let (sa, sb) = if axis == 0 {
                ([rows_a, cols], [rows_b, cols])
            } else {
                ([cols, rows_a], [cols, rows_b])
            };
            let a = Tensor::new(&sa, seed[..rows_a * cols].to_vec()).unwrap();
            let b = Tensor::new(&sb, seed[32..32 + rows_b * cols].to_vec()).unwrap();
            let c = Tensor::concat(&[&a, &b], axis).unwrap();
            let parts = c.split(axis, &[rows_a, rows_b]).unwrap();
            prop_assert_eq!(&parts[0], &a);
            prop_assert_eq!(&parts[1], &b);
        }
    }
}
