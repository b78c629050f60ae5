//! Dense row-major tensors and the raw kernels the tape is built on.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); n], grad: None }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n], grad: None }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0/1 tensor holding one element.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    /// Allocate (or keep) a zeroed gradient buffer.
    pub fn alloc_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![F::zero(); self.numel()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Accumulate `other` into the gradient buffer, allocating on demand.
    pub fn add_to_grad(&mut self, other: &[F]) {
        self.alloc_grad();
        let g = self.grad.as_mut().unwrap();
        debug_assert_eq!(g.len(), other.len());
        for (a, b) in g.iter_mut().zip(other) {
            *a += *b;
        }
    }

    pub fn map_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_c()).collect()
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|v| *v * *v).sum()
    }

    pub fn norm(&self) -> F {
        self.sq_norm().sqrt()
    }
}

/// Named tensor with a gradient slot; the unit of optimization.
#[derive(Clone, Debug)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, tensor: Tensor<F>) -> Self {
        Parameter { name: name.into(), tensor }
    }

    pub fn grad(&self) -> Result<&[F]> {
        self.tensor
            .grad
            .as_deref()
            .ok_or_else(|| Error::MissingGrad { name: self.name.clone() })
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. These operate on slices so both the tape forward and backward
// passes share one implementation. All matrices are row-major.
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (b stored row-major as n x k)
///
/// For all but tiny shapes, `b` is transposed once so the accumulation runs
/// through the vectorizing row kernel.
pub fn matmul_nt_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m * n >= 64 {
        let mut bt = vec![F::zero(); k * n];
        for j in 0..n {
            for t in 0..k {
                bt[t * n + j] = b[j * k + t];
            }
        }
        matmul_acc(a, &bt, c, m, k, n);
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = [F::zero(); 4];
            let chunks = k / 4;
            for t in 0..chunks {
                for l in 0..4 {
                    acc[l] = acc[l] + arow[4 * t + l] * brow[4 * t + l];
                }
            }
            let mut tail = F::zero();
            for t in 4 * chunks..k {
                tail = tail + arow[t] * brow[t];
            }
            crow[j] += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]  (a stored row-major as m x k)
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}
