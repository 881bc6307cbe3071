//! Closed-form diffusion quantities: the discrete noise schedule, forward
//! marginal, reverse posterior, clean-image parameterization, loss weights
//! and EDM preconditioning.
//!
//! `alpha(t)` is the *cumulative* signal fraction; `alpha(0) = 1` so that the
//! `t = 1` boundary formulas are total. All schedule math is `f64`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Image;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear per-step betas from `beta_start` to `beta_end` over `t = 1..T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alphas = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas.push(acc);
        }
        Ok(NoiseSchedule { alphas, betas })
    }

    /// Builds a schedule from explicit cumulative alphas for `t = 1..T`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::param("alphas", "need at least one step"));
        }
        let mut prev = 1.0;
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a < prev) {
                return Err(Error::param(
                    "alphas",
                    format!("alpha({}) = {a} must lie in (0, alpha({}) = {prev})", i + 1, i),
                ));
            }
            prev = a;
        }
        let mut betas = Vec::with_capacity(alphas.len());
        let mut prev = 1.0;
        for &a in &alphas {
            betas.push(1.0 - a / prev);
            prev = a;
        }
        Ok(NoiseSchedule { alphas, betas })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// Cumulative signal fraction; `alpha(0) = 1`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.alphas.len() => Ok(self.alphas[t - 1]),
            t => Err(Error::Index {
                what: "timestep",
                index: t,
                lo: 0,
                hi: self.alphas.len(),
            }),
        }
    }

    /// Per-step beta for `t = 1..T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.alphas.len() {
            return Err(Error::Index {
                what: "timestep",
                index: t,
                lo: 1,
                hi: self.alphas.len(),
            });
        }
        Ok(())
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        snr_of(self.alphas[t - 1])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// `alpha / (1 - alpha)`.
pub fn snr_of(alpha: f64) -> Result<f64> {
    if alpha >= 1.0 {
        return Err(Error::Domain(format!(
            "SNR undefined for alpha = {alpha} (degenerate zero-noise step)"
        )));
    }
    Ok(alpha / (1.0 - alpha))
}

/// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`, with `t = 0` allowed.
pub fn q_sample<F: Real>(
    x0: &Image<F>,
    t: usize,
    eps: &Image<F>,
    schedule: &NoiseSchedule,
) -> Result<Image<F>> {
    let alpha = schedule.alpha(t)?;
    q_sample_alpha(x0, alpha, eps)
}

pub fn q_sample_alpha<F: Real>(x0: &Image<F>, alpha: f64, eps: &Image<F>) -> Result<Image<F>> {
    x0.ensure_same_shape(eps, "q_sample noise")?;
    let a = F::of(libm::sqrt(alpha));
    let s = F::of(libm::sqrt(1.0 - alpha));
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Coefficients of the Gaussian posterior `q(x_prev | x_t, x0)` between two
/// cumulative alphas (`alpha_prev > alpha_t`, or equal for a degenerate step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub x0_coef: f64,
    pub xt_coef: f64,
    pub variance: f64,
}

pub fn posterior_coefficients(alpha_t: f64, alpha_prev: f64) -> Result<Posterior> {
    if !(alpha_t > 0.0 && alpha_t <= alpha_prev && alpha_prev <= 1.0) {
        return Err(Error::Domain(format!(
            "posterior needs 0 < alpha_t ({alpha_t}) <= alpha_prev ({alpha_prev}) <= 1"
        )));
    }
    let step = 1.0 - alpha_t / alpha_prev;
    if step == 0.0 {
        // No noise added between the two levels: x_prev = x_t.
        return Ok(Posterior {
            x0_coef: 0.0,
            xt_coef: 1.0,
            variance: 0.0,
        });
    }
    let one_minus = 1.0 - alpha_t;
    Ok(Posterior {
        x0_coef: libm::sqrt(alpha_prev) * step / one_minus,
        xt_coef: (1.0 - alpha_prev) * libm::sqrt(alpha_t) / (one_minus * libm::sqrt(alpha_prev)),
        variance: (1.0 - alpha_prev) / one_minus * step,
    })
}

/// Posterior mean and variance of `x_{t-1}` given `x0` and `x_t`.
pub fn posterior_params<F: Real>(
    x0: &Image<F>,
    xt: &Image<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Image<F>, f64)> {
    schedule.check_step(t)?;
    let coef = posterior_coefficients(schedule.alpha(t)?, schedule.alpha(t - 1)?)?;
    Ok((posterior_mean(x0, xt, &coef)?, coef.variance))
}

pub fn posterior_mean<F: Real>(x0: &Image<F>, xt: &Image<F>, coef: &Posterior) -> Result<Image<F>> {
    let a = F::of(coef.x0_coef);
    let b = F::of(coef.xt_coef);
    x0.zip_map(xt, |x, y| a * x + b * y)
}

/// Inverts the forward marginal given a noise prediction.
pub fn x0_from_eps<F: Real>(
    xt: &Image<F>,
    eps_hat: &Image<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Image<F>> {
    x0_from_eps_alpha(xt, eps_hat, schedule.alpha(t)?)
}

pub fn x0_from_eps_alpha<F: Real>(xt: &Image<F>, eps_hat: &Image<F>, alpha: f64) -> Result<Image<F>> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("x0_from_eps needs alpha > 0, got {alpha}")));
    }
    let inv = F::of(1.0 / libm::sqrt(alpha));
    let k = F::of(libm::sqrt(1.0 - alpha) / libm::sqrt(alpha));
    xt.zip_map(eps_hat, |x, e| x * inv - k * e)
}

/// Noise implied by a clean-image estimate: the inverse of [`x0_from_eps_alpha`].
pub fn eps_from_x0_alpha<F: Real>(xt: &Image<F>, x0_hat: &Image<F>, alpha: f64) -> Result<Image<F>> {
    if !(alpha < 1.0) {
        return Err(Error::Domain(format!("eps_from_x0 needs alpha < 1, got {alpha}")));
    }
    let a = F::of(libm::sqrt(alpha));
    let inv = F::of(1.0 / libm::sqrt(1.0 - alpha));
    xt.zip_map(x0_hat, |x, x0| (x - a * x0) * inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Unit,
    SnrDelta,
    Custom,
}

/// Per-(t, brick) loss weights. The custom table is indexed `[t - 1][k - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mode: WeightMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<f64>>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mode: WeightMode::Unit,
            values: None,
        }
    }
}

impl LossWeights {
    pub fn unit() -> Self {
        Self::default()
    }

    pub fn custom(values: Vec<Vec<f64>>) -> Result<Self> {
        for row in &values {
            for &v in row {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::param("values", format!("weight {v} must be positive and finite")));
                }
            }
        }
        Ok(LossWeights {
            mode: WeightMode::Custom,
            values: Some(values),
        })
    }
}

/// Half the SNR drop across one step; vanishes when the step adds no noise.
pub fn snr_delta_weight(alpha_prev: f64, alpha_t: f64) -> Result<f64> {
    Ok((snr_of(alpha_prev)? - snr_of(alpha_t)?) / 2.0)
}

/// Weight `lambda_t^(k)` for timestep `t` (1-based) and brick `k` (1-based).
pub fn loss_weight(weights: &LossWeights, schedule: &NoiseSchedule, t: usize, k: usize) -> Result<f64> {
    schedule.check_step(t)?;
    match weights.mode {
        WeightMode::Unit => Ok(1.0),
        WeightMode::SnrDelta => {
            if t == 1 {
                return Err(Error::Domain(
                    "snr-delta weight is unbounded at t = 1 (alpha(0) = 1)".into(),
                ));
            }
            snr_delta_weight(schedule.alpha(t - 1)?, schedule.alpha(t)?)
        }
        WeightMode::Custom => weights
            .values
            .as_ref()
            .and_then(|tab| tab.get(t - 1))
            .and_then(|row| row.get(k.wrapping_sub(1)))
            .copied()
            .ok_or_else(|| Error::Config(format!("custom loss weight table has no entry for t={t}, k={k}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdmParams {
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        EdmParams {
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl EdmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) {
            return Err(Error::param("sigma_data", "must be positive"));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::param("sigma_min", "must be positive"));
        }
        if !(self.sigma_max > self.sigma_min) {
            return Err(Error::param("sigma_max", "must exceed sigma_min"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::param("rho", "must be positive"));
        }
        Ok(())
    }

    /// Karras step grid `sigma_0 > ... > sigma_{n-1}`, followed by a final 0.
    pub fn sigma_steps(&self, n: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        let inv = 1.0 / self.rho;
        let hi = libm::pow(self.sigma_max, inv);
        let lo = libm::pow(self.sigma_min, inv);
        let mut out: Vec<f64> = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                libm::pow(hi + frac * (lo - hi), self.rho)
            })
            .collect();
        out.push(0.0);
        Ok(out)
    }

    /// EDM training loss weight `(sigma^2 + sigma_data^2) / (sigma sigma_data)^2`.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd * sigma * sd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmPrecond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// `(c_skip, c_out, c_in)`; defined down to `sigma = 0`.
pub fn edm_scalings(sigma: f64, sigma_data: f64) -> (f64, f64, f64) {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    let root = libm::sqrt(s2);
    (sigma_data * sigma_data / s2, sigma * sigma_data / root, 1.0 / root)
}

pub fn edm_precondition(sigma: f64, params: &EdmParams) -> Result<EdmPrecond> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("c_noise = ln(sigma)/4 needs sigma > 0, got {sigma}")));
    }
    let (c_skip, c_out, c_in) = edm_scalings(sigma, params.sigma_data);
    Ok(EdmPrecond {
        c_skip,
        c_out,
        c_in,
        c_noise: libm::log(sigma) / 4.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn linear_schedule_endpoints() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alphas(), &[0.9]);

        let s = NoiseSchedule::default();
        assert_relative_eq!(s.alpha(1).unwrap(), 0.9999, max_relative = 1e-15);
        // Independent cumulative product with betas rebuilt from scratch.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0);
        }
        assert_relative_eq!(s.alpha(1000).unwrap(), prod, max_relative = 1e-12);
        assert!((s.alpha(1000).unwrap() - 4.0e-5).abs() < 0.1e-5);
        assert_eq!(s.alpha(0).unwrap(), 1.0);
    }

    #[test]
    fn linear_schedule_rejects_bad_ranges() {
        assert!(matches!(NoiseSchedule::linear(0, 0.1, 0.2), Err(Error::Param { field: "steps", .. })));
        assert!(matches!(NoiseSchedule::linear(10, 0.0, 0.2), Err(Error::Param { field: "beta_start", .. })));
        assert!(matches!(NoiseSchedule::linear(10, 0.3, 0.2), Err(Error::Param { field: "beta_end", .. })));
        assert!(matches!(NoiseSchedule::linear(10, 0.1, 1.0), Err(Error::Param { field: "beta_end", .. })));
    }

    #[test]
    fn betas_recomputed_from_alphas_match() {
        let s = NoiseSchedule::default();
        let mut prev = 1.0;
        for t in 1..=s.steps() {
            let a = s.alpha(t).unwrap();
            let b = 1.0 - a / prev;
            assert_relative_eq!(b, s.beta(t).unwrap(), max_relative = 1e-12);
            assert!(a < prev && a > 0.0);
            prev = a;
        }
    }

    #[test]
    fn snr_values() {
        assert_eq!(snr_of(0.5).unwrap(), 1.0);
        assert_relative_eq!(snr_of(0.9999).unwrap(), 9999.0, max_relative = 1e-9);
        assert_relative_eq!(snr_of(0.2).unwrap(), 0.25, max_relative = 1e-15);
        assert!(matches!(snr_of(1.0), Err(Error::Domain(_))));
        let s = NoiseSchedule::default();
        assert_relative_eq!(s.snr(1).unwrap(), 9999.0, max_relative = 1e-9);
        assert!(s.snr(0).is_err());
    }

    #[test]
    fn q_sample_boundaries() {
        let s = NoiseSchedule::default();
        let x0 = Image::<f64>::from_fn(2, 2, 3, |y, x, c| (y + x + c) as f64 * 0.3 - 0.5);
        let eps = Image::<f64>::from_fn(2, 2, 3, |y, x, c| ((y * 7 + x * 3 + c) as f64).sin());
        assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Image::<f64>::zeros(2, 2, 3);
        let out = q_sample(&zero, 500, &eps, &s).unwrap();
        let k = (1.0 - s.alpha(500).unwrap()).sqrt();
        for (o, e) in out.data.iter().zip(&eps.data) {
            assert_eq!(*o, k * e);
        }
        let bad = Image::<f64>::zeros(2, 3, 3);
        assert!(matches!(q_sample(&x0, 1, &bad, &s), Err(Error::Shape { .. })));
    }

    #[test]
    fn posterior_boundaries() {
        let p = posterior_coefficients(0.4, 0.4).unwrap();
        assert_eq!((p.x0_coef, p.xt_coef, p.variance), (0.0, 1.0, 0.0));
        let s = NoiseSchedule::default();
        let x0 = Image::<f64>::filled(1, 1, 1, 0.7);
        let xt = Image::<f64>::filled(1, 1, 1, -1.3);
        let (mean, var) = posterior_params(&x0, &xt, 1, &s).unwrap();
        assert_eq!(var, 0.0);
        assert_eq!(mean.data[0], 0.7);
        assert!(matches!(posterior_params(&x0, &xt, 0, &s), Err(Error::Index { .. })));
        assert!(matches!(posterior_params(&x0, &xt, 1001, &s), Err(Error::Index { .. })));
    }

    #[test]
    fn posterior_variance_in_unit_interval() {
        let s = NoiseSchedule::default();
        for t in 1..=s.steps() {
            let p = posterior_coefficients(s.alpha(t).unwrap(), s.alpha(t - 1).unwrap()).unwrap();
            assert!((0.0..1.0).contains(&p.variance));
        }
    }

    #[test]
    fn x0_from_eps_inverts_q_sample_in_f32() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Image::<f32>::from_fn(4, 4, 3, |_, _, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32 * 0.5
        });
        let eps = Image::<f32>::from_fn(4, 4, 3, |_, _, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        for t in [1usize, 10, 300] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = x0_from_eps(&xt, &eps, t, &s).unwrap();
            for (a, b) in back.data.iter().zip(&x0.data) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0) * (1.0 / s.alpha(t).unwrap().sqrt()) as f32);
            }
        }
        let xt = Image::<f32>::filled(2, 2, 1, 0.3);
        let e = Image::<f32>::filled(2, 2, 1, 1.7);
        assert_eq!(x0_from_eps(&xt, &e, 0, &s).unwrap(), xt);
    }
}
