//! Shared conditioning embedder: sinusoidal time features through a two-layer
//! projection, plus a learned class table with a trailing null class used for
//! classifier-free guidance, plus the "no previous estimate" flag.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{fill_normal, silu, silu_grad, Linear};
use super::{visit_linear, visit_linear_mut};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const MAX_PERIOD: f64 = 10_000.0;

/// `[cos(t f_i), sin(t f_i)]` with geometrically spaced frequencies.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(MAX_PERIOD) * i as f64 / half as f64);
        out[i] = libm::cos(t * freq);
        out[half + i] = libm::sin(t * freq);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondParams<F> {
    pub time_fc1: Linear<F>,
    pub time_fc2: Linear<F>,
    /// `(num_classes + 1) x d`; the last row is the null class.
    pub class_table: Tensor<F>,
    pub no_prev: Tensor<F>,
}

pub struct CondTrace<F> {
    feats: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
    rows: Vec<usize>,
}

impl<F: Real> CondParams<F> {
    pub fn zeros(d: usize, freq_dim: usize, num_classes: usize) -> Self {
        CondParams {
            time_fc1: Linear::zeros(freq_dim, d),
            time_fc2: Linear::zeros(d, d),
            class_table: Tensor::zeros(&[num_classes + 1, d]),
            no_prev: Tensor::zeros(&[d]),
        }
    }

    pub fn init<R: Rng + ?Sized>(d: usize, freq_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, freq_dim, num_classes);
        fill_normal(&mut p.time_fc1.w.data, 0.02, rng);
        fill_normal(&mut p.time_fc2.w.data, 0.02, rng);
        fill_normal(&mut p.class_table.data, 0.02, rng);
        fill_normal(&mut p.no_prev.data, 0.02, rng);
        p
    }

    pub fn d(&self) -> usize {
        self.time_fc2.fan_out()
    }

    pub fn freq_dim(&self) -> usize {
        self.time_fc1.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.shape[0] - 1
    }

    pub fn null_class(&self) -> usize {
        self.num_classes()
    }

    /// Conditioning rows (`images x d`) for per-image time values and classes;
    /// `None` selects the null class.
    pub fn forward(&self, times: &[f64], classes: &[Option<usize>], keep_trace: bool) -> Result<(Vec<F>, Option<CondTrace<F>>)> {
        if times.len() != classes.len() {
            return Err(Error::shape("conditioning batch", &[times.len()], &[classes.len()]));
        }
        let (b, d, fd) = (times.len(), self.d(), self.freq_dim());
        let mut rows = Vec::with_capacity(b);
        for c in classes {
            match *c {
                Some(k) if k >= self.num_classes() => {
                    return Err(Error::Config(format!(
                        "class id {k} outside the {} trained classes",
                        self.num_classes()
                    )))
                }
                Some(k) => rows.push(k),
                None => rows.push(self.null_class()),
            }
        }
        let mut feats = Vec::with_capacity(b * fd);
        for &t in times {
            feats.extend(timestep_features(t, fd).into_iter().map(F::of));
        }
        let pre = self.time_fc1.forward(&feats, b);
        let act: Vec<F> = pre.iter().map(|&v| silu(v)).collect();
        let mut out = self.time_fc2.forward(&act, b);
        for (i, &row) in rows.iter().enumerate() {
            for (o, e) in out[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&self.class_table.data[row * d..(row + 1) * d])
            {
                *o += *e;
            }
        }
        let trace = keep_trace.then_some(CondTrace { feats, pre, act, rows });
        Ok((out, trace))
    }

    pub fn backward(&self, trace: &CondTrace<F>, d_out: &[F], grads: &mut CondParams<F>) {
        let d = self.d();
        let b = trace.rows.len();
        for (i, &row) in trace.rows.iter().enumerate() {
            for (g, v) in grads.class_table.data[row * d..(row + 1) * d]
                .iter_mut()
                .zip(&d_out[i * d..(i + 1) * d])
            {
                *g += *v;
            }
        }
        let mut dact = self
            .time_fc2
            .backward(&trace.act, b, d_out, &mut grads.time_fc2, true)
            .expect("dx requested");
        for (g, &p) in dact.iter_mut().zip(&trace.pre) {
            *g *= silu_grad(p);
        }
        self.time_fc1.backward(&trace.feats, b, &dact, &mut grads.time_fc1, false);
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        visit_linear(&self.time_fc1, &format!("{prefix}.time_fc1"), f);
        visit_linear(&self.time_fc2, &format!("{prefix}.time_fc2"), f);
        f(format!("{prefix}.class_table"), &self.class_table);
        f(format!("{prefix}.no_prev"), &self.no_prev);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        visit_linear_mut(&mut self.time_fc1, &format!("{prefix}.time_fc1"), f);
        visit_linear_mut(&mut self.time_fc2, &format!("{prefix}.time_fc2"), f);
        f(format!("{prefix}.class_table"), &mut self.class_table);
        f(format!("{prefix}.no_prev"), &mut self.no_prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn time_features_are_deterministic_and_bounded() {
        let a = timestep_features(123.0, 16);
        assert_eq!(a, timestep_features(123.0, 16));
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(timestep_features(0.0, 4), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_row_per_class_plus_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = CondParams::<f64>::init(8, 16, 3, &mut rng);
        assert_eq!(p.class_table.shape, vec![4, 8]);
        let (a, _) = p.forward(&[5.0, 5.0], &[Some(0), None], false).unwrap();
        assert_ne!(a[..8], a[8..]);
        assert!(matches!(p.forward(&[1.0], &[Some(3)], false), Err(Error::Config(_))));
    }
}
