//! Dense row-major f64 tensors.
//!
//! The universal value carrier: shape metadata over a flat buffer. All
//! model math stays in f64 so gradient checks against central finite
//! differences can be tight.

use crate::error::{Error, Result};
use crate::flops;
use crate::rng::Rng;
use std::sync::Arc;

/// Clones share the buffer (copy-on-write via `data_mut`), so reshapes
/// and tape bindings cost only a reference bump.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("new", format!("zero dim in {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} wants {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![1.0; n]),
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal_scaled(std)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        match Arc::try_unwrap(self.data) {
            Ok(v) => v,
            Err(shared) => (*shared).clone(),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under a new shape; the data is shared, not copied.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Leading dims collapsed: ([..., q], rows) where rows = numel / q.
    pub fn as_rows(&self) -> (usize, usize) {
        let q = *self.shape.last().expect("rank >= 1");
        (self.data.len() / q, q)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// out = self([..., p, q]) x rhs([q, r]) with leading dims collapsed.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.shape.len() != 2 {
            return Err(Error::shape("matmul", format!("rhs {:?}", rhs.shape)));
        }
        let (rows, q) = self.as_rows();
        let (q2, r) = (rhs.shape[0], rhs.shape[1]);
        if q != q2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let mut out_shape = self.shape.clone();
        *out_shape.last_mut().unwrap() = r;
        let mut out = vec![0.0; rows * r];
        matmul_nn(&mut out, &self.data, &rhs.data, rows, q, r);
        Tensor::new(out_shape, out)
    }
}

/// out[p, r] += a[p, q] * b[q, r]; `out` must be zeroed by the caller.
#[inline]
pub fn matmul_nn(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let out_row = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    flops::add((p * q * r) as u64);
}

/// out[p, r] += a[p, q] * b[r, q]^T (dot products of contiguous rows).
#[inline]
pub fn matmul_nt(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(out.len(), p * r);
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let out_row = &mut out[i * r..(i + 1) * r];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * q..(j + 1) * q];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
    flops::add((p * q * r) as u64);
}

/// out[q, r] += a[p, q]^T * b[p, r] (rank-1 accumulation over rows).
#[inline]
pub fn matmul_tn(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), p * r);
    debug_assert_eq!(out.len(), q * r);
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let b_row = &b[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let out_row = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    flops::add((p * q * r) as u64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (p, q) = (a.shape()[0], a.shape()[1]);
        let r = b.shape()[1];
        let mut out = Tensor::zeros(&[p, r]);
        for i in 0..p {
            for j in 0..r {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += a.data()[i * q + k] * b.data()[k * r + j];
                }
                out.data_mut()[i * r + j] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_matmul_is_identity() {
        let eye = Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // eye is 2x2 identity; eye * x == x
        let y = eye.matmul(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(1, Stream::Bench);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        assert_eq!(got.shape(), &[2, 4]);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_collapses_leading_dims() {
        let mut rng = Rng::new(2, Stream::Bench);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        let flat = a.reshape(&[6, 4]).unwrap().matmul(&b).unwrap();
        assert_eq!(y.data(), flat.data());
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut rng = Rng::new(3, Stream::Bench);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let ones = Tensor::ones(&[4, 5]);
        let out = a.zip(&ones, |x, y| x * y).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_plain() {
        let mut rng = Rng::new(4, Stream::Bench);
        let a = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let want = naive_matmul(&a, &b);

        // nt path: pass b transposed, expect a * b back.
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b.data()[i * 4 + j];
            }
        }
        let mut out = vec![0.0; 20];
        matmul_nt(&mut out, a.data(), &bt, 5, 3, 4);
        for (g, w) in out.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }

        // tn path: pass a transposed, expect a * b back.
        let mut at = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                at[j * 5 + i] = a.data()[i * 3 + j];
            }
        }
        let mut out2 = vec![0.0; 20];
        matmul_tn(&mut out2, &at, b.data(), 3, 5, 4);
        for (g, w) in out2.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
