//! Forward and backward kernels for the transformer pieces of a brick.
//! Matrices are row-major slices; `n` rows by `d` columns unless noted.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::{mm, mm_nt, mm_tn, Tensor};

pub(crate) const LN_EPS: f64 = 1e-6;

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
        l.w.data.iter_mut().for_each(|v| *v = F::of(u.sample(rng)));
        l
    }

    pub fn normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        fill_normal(&mut l.w.data, std, rng);
        l
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape[1]
    }

    pub fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &[F], n: usize) -> Vec<F> {
        let out_dim = self.fan_out();
        let mut y = vec![F::zero(); n * out_dim];
        for row in y.chunks_mut(out_dim) {
            row.copy_from_slice(&self.b.data);
        }
        mm(x, n, self.fan_in(), &self.w.data, out_dim, &mut y, true);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx` when asked.
    pub fn backward(&self, x: &[F], n: usize, dy: &[F], grad: &mut Linear<F>, need_dx: bool) -> Option<Vec<F>> {
        let (fi, fo) = (self.fan_in(), self.fan_out());
        mm_tn(x, n, fi, dy, fo, &mut grad.w.data, true);
        for row in dy.chunks(fo) {
            for (g, v) in grad.b.data.iter_mut().zip(row) {
                *g += *v;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![F::zero(); n * fi];
            mm_nt(dy, n, fo, &self.w.data, fi, &mut dx, false);
            dx
        })
    }
}

pub(crate) fn fill_normal<F: Real, R: Rng + ?Sized>(data: &mut [F], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("positive std");
    data.iter_mut().for_each(|v| *v = F::of(dist.sample(rng)));
}

#[inline]
pub(crate) fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly to ±1 and is several
/// times cheaper than the libm routine in the MLP hot loop.
#[inline]
fn fast_tanh<F: Real>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

#[inline]
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    half * x * (F::one() + fast_tanh(k * (x + c * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let th = fast_tanh(k * (x + c * x * x * x));
    half * (F::one() + th) + half * x * (F::one() - th * th) * k * (F::one() + F::of(3.0) * c * x * x)
}

/// Parameter-free layer norm. Returns `(xhat, rstd)`.
pub(crate) fn layer_norm<F: Real>(x: &[F], d: usize) -> (Vec<F>, Vec<F>) {
    let n = x.len() / d;
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); n];
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        for (o, &v) in xhat[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    (xhat, rstd)
}

/// Adds the input gradient of a layer norm into `dx`.
pub(crate) fn layer_norm_backward<F: Real>(xhat: &[F], rstd: &[F], dxhat: &[F], d: usize, dx: &mut [F]) {
    let inv_d = F::of(1.0 / d as f64);
    for (i, &r) in rstd.iter().enumerate() {
        let xh = &xhat[i * d..(i + 1) * d];
        let g = &dxhat[i * d..(i + 1) * d];
        let mean_g = g.iter().copied().sum::<F>() * inv_d;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
        for ((o, &gv), &xv) in dx[i * d..(i + 1) * d].iter_mut().zip(g).zip(xh) {
            *o += r * (gv - mean_g - xv * mean_gx);
        }
    }
}

/// `h = xhat * (1 + scale[img]) + shift[img]`; `rows_per_seq` rows share an image
/// through `seq_image`. `modv` is `images x stride` with shift/scale at the given offsets.
pub(crate) struct ModView<'a, F> {
    pub modv: &'a [F],
    pub stride: usize,
    pub d: usize,
    pub seq_image: &'a [usize],
    pub rows_per_seq: usize,
}

impl<F: Real> ModView<'_, F> {
    #[inline]
    fn chunk(&self, row: usize, which: usize) -> &[F] {
        let img = self.seq_image[row / self.rows_per_seq];
        let off = img * self.stride + which * self.d;
        &self.modv[off..off + self.d]
    }

    pub fn modulate(&self, xhat: &[F], shift: usize, scale: usize) -> Vec<F> {
        let d = self.d;
        let mut out = vec![F::zero(); xhat.len()];
        for (row, (o, x)) in out.chunks_mut(d).zip(xhat.chunks(d)).enumerate() {
            let sh = self.chunk(row, shift);
            let sc = self.chunk(row, scale);
            for i in 0..d {
                o[i] = x[i] * (F::one() + sc[i]) + sh[i];
            }
        }
        out
    }

    /// Returns `dxhat`, accumulating shift/scale gradients into `dmod`.
    pub fn modulate_backward(&self, xhat: &[F], dh: &[F], shift: usize, scale: usize, dmod: &mut [F]) -> Vec<F> {
        let d = self.d;
        let mut dx = vec![F::zero(); xhat.len()];
        for (row, ((o, x), g)) in dx.chunks_mut(d).zip(xhat.chunks(d)).zip(dh.chunks(d)).enumerate() {
            let img = self.seq_image[row / self.rows_per_seq];
            let sc = self.chunk(row, scale);
            for i in 0..d {
                o[i] = g[i] * (F::one() + sc[i]);
                dmod[img * self.stride + shift * d + i] += g[i];
                dmod[img * self.stride + scale * d + i] += g[i] * x[i];
            }
        }
        dx
    }

    /// `x += gate[img] * branch`.
    pub fn gated_add(&self, x: &mut [F], branch: &[F], gate: usize) {
        let d = self.d;
        for (row, (o, b)) in x.chunks_mut(d).zip(branch.chunks(d)).enumerate() {
            let g = self.chunk(row, gate);
            for i in 0..d {
                o[i] += g[i] * b[i];
            }
        }
    }

    /// Gradient of the gated branch; accumulates the gate gradient.
    pub fn gated_backward(&self, branch: &[F], dout: &[F], gate: usize, dmod: &mut [F]) -> Vec<F> {
        let d = self.d;
        let mut db = vec![F::zero(); branch.len()];
        for (row, ((o, b), g)) in db.chunks_mut(d).zip(branch.chunks(d)).zip(dout.chunks(d)).enumerate() {
            let img = self.seq_image[row / self.rows_per_seq];
            let gv = self.chunk(row, gate);
            for i in 0..d {
                o[i] = g[i] * gv[i];
                dmod[img * self.stride + gate * d + i] += g[i] * b[i];
            }
        }
        db
    }
}

/// Multi-head self-attention core on packed `qkv` rows (`[q | k | v]`, each `d`).
/// Returns `(o, probs)` with `probs` laid out `seq x head x n x n`.
pub(crate) fn attention<F: Real>(qkv: &[F], seqs: usize, n: usize, d: usize, heads: usize) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::of(1.0 / libm::sqrt(dh as f64));
    let mut o = vec![F::zero(); seqs * n * d];
    let mut probs = vec![F::zero(); seqs * heads * n * n];
    let rs = (3 * d) as isize;
    for s in 0..seqs {
        let base = s * n * 3 * d;
        for h in 0..heads {
            let p = &mut probs[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
            unsafe {
                // scores = q k^T
                F::gemm_raw(
                    n, dh, n, scale,
                    qkv.as_ptr().add(base + h * dh), rs, 1,
                    qkv.as_ptr().add(base + d + h * dh), 1, rs,
                    F::zero(), p.as_mut_ptr(), n as isize, 1,
                );
            }
            for row in p.chunks_mut(n) {
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                let inv = F::one() / z;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            unsafe {
                F::gemm_raw(
                    n, n, dh, F::one(),
                    p.as_ptr(), n as isize, 1,
                    qkv.as_ptr().add(base + 2 * d + h * dh), rs, 1,
                    F::zero(), o.as_mut_ptr().add(s * n * d + h * dh), d as isize, 1,
                );
            }
        }
    }
    (o, probs)
}

pub(crate) fn attention_backward<F: Real>(
    qkv: &[F],
    probs: &[F],
    d_o: &[F],
    seqs: usize,
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<F> {
    let dh = d / heads;
    let scale = F::of(1.0 / libm::sqrt(dh as f64));
    let mut dqkv = vec![F::zero(); qkv.len()];
    let mut dp = vec![F::zero(); n * n];
    let rs = (3 * d) as isize;
    for s in 0..seqs {
        let base = s * n * 3 * d;
        for h in 0..heads {
            let p = &probs[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
            let dob = s * n * d + h * dh;
            unsafe {
                // dP = dO V^T
                F::gemm_raw(
                    n, dh, n, F::one(),
                    d_o.as_ptr().add(dob), d as isize, 1,
                    qkv.as_ptr().add(base + 2 * d + h * dh), 1, rs,
                    F::zero(), dp.as_mut_ptr(), n as isize, 1,
                );
                // dV = P^T dO
                F::gemm_raw(
                    n, n, dh, F::one(),
                    p.as_ptr(), 1, n as isize,
                    d_o.as_ptr().add(dob), d as isize, 1,
                    F::one(), dqkv.as_mut_ptr().add(base + 2 * d + h * dh), rs, 1,
                );
            }
            for (prow, drow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            unsafe {
                // dQ = dS K * scale
                F::gemm_raw(
                    n, n, dh, scale,
                    dp.as_ptr(), n as isize, 1,
                    qkv.as_ptr().add(base + d + h * dh), rs, 1,
                    F::one(), dqkv.as_mut_ptr().add(base + h * dh), rs, 1,
                );
                // dK = dS^T Q * scale
                F::gemm_raw(
                    n, n, dh, scale,
                    dp.as_ptr(), 1, n as isize,
                    qkv.as_ptr().add(base + h * dh), rs, 1,
                    F::one(), dqkv.as_mut_ptr().add(base + d + h * dh), rs, 1,
                );
            }
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num_grad(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn scalar_activation_derivatives() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - num_grad(gelu, x)).abs() < 1e-8);
            assert!((silu_grad(x) - num_grad(silu, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).sin() * 4.0 + 2.0).collect();
        let (xh, _) = layer_norm(&x, 6);
        for row in xh.chunks(6) {
            let m: f64 = row.iter().sum::<f64>() / 6.0;
            let v: f64 = row.iter().map(|a| a * a).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (seqs, n, d, heads) = (2, 3, 4, 2);
        let qkv: Vec<f64> = (0..seqs * n * 3 * d).map(|i| (i as f64 * 0.77).cos()).collect();
        let (_, p) = attention(&qkv, seqs, n, d, heads);
        for row in p.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
