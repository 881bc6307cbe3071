//! Dense row-major storage: named parameter tensors, HWC images and the
//! three GEMM layouts the backward passes need.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// N-dimensional row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("tensor data", &[len], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }
}

/// Image in height x width x channel layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<F = f64> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<F>,
}

impl<F: Real> Image<F> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![F::zero(); h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: F) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape("image data", &[h, w, c], &[data.len()]));
        }
        Ok(Image { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Image { h, w, c, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> F {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: F) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    pub fn ensure_same_shape(&self, other: &Image<F>, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, &self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image<F> {
        let mut out = Image::zeros(h, w, self.c);
        for y in 0..h {
            let src = self.idx(y0 + y, x0, 0);
            let dst = out.idx(y, 0, 0);
            out.data[dst..dst + w * self.c].copy_from_slice(&self.data[src..src + w * self.c]);
        }
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Image<F> {
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image<F>, f: impl Fn(F, F) -> F) -> Result<Image<F>> {
        self.ensure_same_shape(other, "element-wise image op")?;
        Ok(Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<G: Real>(&self) -> Image<G> {
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.c];
        for px in self.data.chunks(self.c) {
            for (acc, v) in m.iter_mut().zip(px) {
                *acc += v.f64();
            }
        }
        let n = (self.h * self.w).max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / self.data.len() as f64
    }
}

/// `out(m x n) (+)= a(m x k) @ b(k x n)`.
pub fn mm<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    unsafe {
        F::gemm_raw(
            m, k, n, F::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out(m x n) (+)= a^T @ b` where `a` is stored `k x m` and `b` is `k x n`.
pub fn mm_tn<F: Real>(a: &[F], k: usize, m: usize, b: &[F], n: usize, out: &mut [F], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    unsafe {
        F::gemm_raw(
            m, k, n, F::one(), a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out(m x n) (+)= a(m x k) @ b^T` where `b` is stored `n x k`.
pub fn mm_nt<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    unsafe {
        F::gemm_raw(
            m, k, n, F::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}
