//! Dense row-major `f64` tensors of rank 0, 1 or 2.
//!
//! Tensors are immutable values; the payload is shared behind an `Arc`, so
//! cloning is cheap and a tensor can be handed to other threads freely.
//! Every constructor and every arithmetic kernel checks that no NaN/Inf
//! enters or leaves, so a `Tensor` always holds finite data.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::flt;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl Tensor {
    /// Checked constructor: the data length must match the shape and every
    /// entry must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(CoreError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} needs {} entries, got {}", shape, numel(shape), data.len()),
            });
        }
        if !all_finite(&data) {
            return Err(CoreError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor { shape: shape.to_vec(), data: data.into() })
    }

    /// Internal constructor for kernels that have already verified both
    /// invariants.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor { shape, data: data.into() }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_raw(shape.to_vec(), vec![0.0; numel(shape)])
    }

    /// Rank-0 tensor. Panics on non-finite input; use [`Tensor::from_vec`]
    /// for data that may be dirty.
    pub fn scalar(v: f64) -> Tensor {
        assert!(v.is_finite(), "Tensor::scalar requires a finite value");
        Tensor::from_raw(Vec::new(), vec![v])
    }

    /// Constant-filled tensor. Panics on non-finite fill value.
    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        assert!(v.is_finite(), "Tensor::filled requires a finite value");
        Tensor::from_raw(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = (0..numel(shape)).map(|i| f(i)).collect();
        Tensor::from_vec(shape, data)
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(CoreError::ShapeMismatch {
                op: "scalar_value",
                detail: format!("expected rank 0, got shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Entry of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        assert_eq!(self.rank(), 2, "Tensor::at requires rank 2");
        self.data[row * self.shape[1] + col]
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }

    fn checked(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Tensor> {
        if !all_finite(&data) {
            return Err(CoreError::NonFinite { op });
        }
        Ok(Tensor::from_raw(shape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect();
        Tensor::checked(self.shape.clone(), data, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        Tensor::checked(self.shape.clone(), data, "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).collect();
        Tensor::checked(self.shape.clone(), data, "mul")
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * c).collect();
        Tensor::checked(self.shape.clone(), data, "scale")
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data.iter().map(|a| -a).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn sin(&self) -> Tensor {
        let data = self.data.iter().map(|a| flt::sin(*a)).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn cos(&self) -> Tensor {
        let data = self.data.iter().map(|a| flt::cos(*a)).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data.iter().map(|a| flt::sigmoid(*a)).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn square(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * a).collect();
        Tensor::checked(self.shape.clone(), data, "square")
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        if !s.is_finite() {
            return Err(CoreError::NonFinite { op: "sum" });
        }
        Ok(Tensor::from_raw(Vec::new(), vec![s]))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        let s: f64 = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum();
        if !s.is_finite() {
            return Err(CoreError::NonFinite { op: "dot" });
        }
        Ok(s)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn dims1(&self, op: &'static str) -> Result<usize> {
        if self.rank() != 1 {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("expected rank 1, got shape {:?}", self.shape),
            });
        }
        Ok(self.shape[0])
    }

    /// Matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims differ: {:?} x {:?}", self.shape, other.shape),
            });
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * bv;
                }
            }
        }
        Tensor::checked(vec![m, n], out, "matmul")
    }

    /// Matrix-vector product `(m,n) x (n,) -> (m,)`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("matvec")?;
        let nv = v.dims1("matvec")?;
        if n != nv {
            return Err(CoreError::ShapeMismatch {
                op: "matvec",
                detail: format!("{:?} x {:?}", self.shape, v.shape),
            });
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            out[i] = row.iter().zip(v.data.iter()).map(|(a, b)| a * b).sum();
        }
        Tensor::checked(vec![m], out, "matvec")
    }

    /// Outer product `(m,) x (n,) -> (m,n)`.
    pub fn outer(&self, v: &Tensor) -> Result<Tensor> {
        let m = self.dims1("outer")?;
        let n = v.dims1("outer")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let u = self.data[i];
            for j in 0..n {
                out[i * n + j] = u * v.data[j];
            }
        }
        Tensor::checked(vec![m, n], out, "outer")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_raw(vec![n, m], out))
    }

    /// Adds a length-`n` row vector to every row of an `(m,n)` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_row")?;
        let nr = row.dims1("add_row")?;
        if n != nr {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix {:?} vs row {:?}", self.shape, row.shape),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &self.data[i * n..(i + 1) * n];
            out.extend(arow.iter().zip(row.data.iter()).map(|(a, r)| a + r));
        }
        Tensor::checked(vec![m, n], out, "add_row")
    }

    /// Stacks a length-`n` vector into `m` identical rows.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor> {
        let n = self.dims1("broadcast_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&self.data);
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Sums an `(m,n)` matrix over rows, yielding a length-`n` vector.
    pub fn sum_axis0(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("sum_axis0")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        Tensor::checked(vec![n], out, "sum_axis0")
    }

    /// Maximum absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(flt::abs(*v)))
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        flt::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// True when `self` and `other` share the same underlying allocation.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count_and_finiteness() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        let err = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
    }

    #[test]
    fn matmul_hand_value() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at(0, 1), 4.0);
        assert_eq!(t.transpose().unwrap(), a);
    }

    #[test]
    fn add_row_broadcasts_over_rows() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        let out = a.add_row(&r).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn sum_axis0_is_column_sums() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.sum_axis0().unwrap().data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn overflow_is_caught() {
        let a = Tensor::filled(&[2], 1e308);
        let err = a.add(&a).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { op: "add" }));
    }
}
