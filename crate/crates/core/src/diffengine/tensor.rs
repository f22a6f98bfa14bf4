use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Row-major 2-D extent. Scalars are `1×1`, column vectors `n×1`.
///
/// Higher-rank quantities (voxel grids, images) are stored flattened with
/// spatial cells as rows and channels as columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub const fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Result shape of a broadcasting binary op, if compatible.
    pub fn broadcast(a: Shape, b: Shape) -> Option<Shape> {
        let dim = |x: usize, y: usize| {
            if x == y {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else if y == 1 {
                Some(x)
            } else {
                None
            }
        };
        Some(Shape::new(dim(a.rows, b.rows)?, dim(a.cols, b.cols)?))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

/// Dense 64-bit tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::Shape(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(Shape::SCALAR, value)
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::new(values.len(), 1),
            data: values,
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::new(1, values.len()),
            data: values,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor {
            shape: Shape::new(rows.len(), cols),
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(Shape::new(n, n));
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub(crate) fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out = op(a) · op(b)` through `matrixmultiply`, transposes expressed as strides.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Option<Tensor> {
    let (m, k) = if ta {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (k2, n) = if tb {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if k != k2 {
        return None;
    }
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return Some(Tensor::from_parts(Shape::new(m, n), out));
    }
    let (rsa, csa) = if ta {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };
    // SAFETY: strides and extents describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Some(Tensor::from_parts(Shape::new(m, n), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        let s = |r, c| Shape::new(r, c);
        assert_eq!(Shape::broadcast(s(4, 3), s(1, 3)), Some(s(4, 3)));
        assert_eq!(Shape::broadcast(s(4, 1), s(4, 3)), Some(s(4, 3)));
        assert_eq!(Shape::broadcast(s(1, 1), s(2, 5)), Some(s(2, 5)));
        assert_eq!(Shape::broadcast(s(2, 3), s(3, 2)), None);
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap();
        let ab = matmul(&a, &b, false, false).unwrap();
        assert_eq!(ab.data(), &[4.0, 5.0, 10.0, 11.0]);
        // (bᵀ aᵀ)ᵀ = a b
        let bt_at = matmul(&b, &a, true, true).unwrap();
        assert_eq!(bt_at.data(), &[4.0, 10.0, 5.0, 11.0]);
        assert!(matmul(&a, &a, false, false).is_none());
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(Shape::new(2, 2), vec![1.0; 3]).is_err());
    }
}
