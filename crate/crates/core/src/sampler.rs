//! Reverse-process generation: strided ancestral DDPM sampling, the
//! stochastic Heun sampler, classifier-free guidance and brick skipping.
//!
//! Samplers talk to models through [`NoisePredictor`], which returns noise
//! predictions; guidance and window averaging both operate on those.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::schedule::{posterior_coefficients, NoiseSchedule};
use crate::skip::SkipSchedule;
use crate::stack::{ActiveSet, NoiseLevel, Slot, Stack};
use crate::tensor::Image;

/// A model seen by the samplers: a noise prediction for a batch sharing one
/// noise level.
pub trait NoisePredictor<F: Real> {
    /// `(h, w, c)` of the images the predictor accepts.
    fn resolution(&self) -> (usize, usize, usize);
    /// `active` selects bricks; `None` runs everything.
    fn eps(
        &self,
        x: &[Image<F>],
        level: NoiseLevel,
        classes: &[Option<usize>],
        active: Option<&ActiveSet>,
    ) -> Result<Vec<Image<F>>>;
}

/// Noise implied by a clean-image estimate at `level`.
pub fn x0_to_eps<F: Real>(x: &Image<F>, x0: &Image<F>, level: NoiseLevel) -> Result<Image<F>> {
    match level {
        NoiseLevel::Step { alpha, .. } => {
            let a = F::of(libm::sqrt(alpha));
            let inv = F::of(1.0 / libm::sqrt(1.0 - alpha));
            x.zip_map(x0, |x, x0| (x - a * x0) * inv)
        }
        NoiseLevel::Sigma(s) => {
            let inv = F::of(1.0 / s);
            x.zip_map(x0, |x, x0| (x - x0) * inv)
        }
    }
}

/// Clean-image estimate implied by a noise prediction at `level`.
pub fn eps_to_x0<F: Real>(x: &Image<F>, eps: &Image<F>, level: NoiseLevel) -> Result<Image<F>> {
    match level {
        NoiseLevel::Step { alpha, .. } => {
            let inv = F::of(1.0 / libm::sqrt(alpha));
            let k = F::of(libm::sqrt(1.0 - alpha));
            x.zip_map(eps, |x, e| (x - k * e) * inv)
        }
        NoiseLevel::Sigma(s) => {
            let k = F::of(s);
            x.zip_map(eps, |x, e| x - k * e)
        }
    }
}

impl<F: Real> Stack<F> {
    /// Lifts an active set over native bricks to the full element list
    /// (external elements stay active).
    pub fn expand_active(&self, active: &ActiveSet) -> Result<ActiveSet> {
        if active.0.len() == self.len() {
            return Ok(active.clone());
        }
        if active.0.len() != self.config.bricks.len() {
            return Err(Error::shape("active set", &[self.config.bricks.len()], &[active.0.len()]));
        }
        Ok(ActiveSet(
            self.layout()
                .iter()
                .map(|s| match s {
                    Slot::Native(k) => active.0[*k],
                    Slot::External(_) => true,
                })
                .collect(),
        ))
    }
}

impl<F: Real> NoisePredictor<F> for Stack<F> {
    fn resolution(&self) -> (usize, usize, usize) {
        let r = self.config.resolution;
        (r.h, r.w, r.c)
    }

    fn eps(
        &self,
        x: &[Image<F>],
        level: NoiseLevel,
        classes: &[Option<usize>],
        active: Option<&ActiveSet>,
    ) -> Result<Vec<Image<F>>> {
        let active = active.map(|a| self.expand_active(a)).transpose()?;
        let levels = vec![level; x.len()];
        let out = self.forward(x, &levels, classes, active.as_ref())?;
        x.iter().zip(&out.x0).map(|(x, x0)| x0_to_eps(x, x0, level)).collect()
    }
}

/// `uncond + scale (cond - uncond)`; exact at `scale` 0 and 1.
pub fn cfg_combine<F: Real>(cond: &Image<F>, uncond: &Image<F>, scale: f64) -> Result<Image<F>> {
    cond.ensure_same_shape(uncond, "guidance")?;
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let s = F::of(scale);
    cond.zip_map(uncond, |c, u| u + s * (c - u))
}

/// Noise prediction with optional classifier-free guidance; counts network
/// evaluations per image into `nfe`.
pub fn guided_eps<F: Real, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    x: &[Image<F>],
    level: NoiseLevel,
    classes: &[Option<usize>],
    active: Option<&ActiveSet>,
    cfg_scale: Option<f64>,
    nfe: &mut usize,
) -> Result<Vec<Image<F>>> {
    match cfg_scale {
        None => {
            *nfe += 1;
            model.eps(x, level, classes, active)
        }
        Some(scale) => {
            *nfe += 2;
            let mut xs = x.to_vec();
            xs.extend_from_slice(x);
            let mut cs = classes.to_vec();
            cs.extend(core::iter::repeat_n(None, x.len()));
            let both = model.eps(&xs, level, &cs, active)?;
            let (cond, uncond) = both.split_at(x.len());
            cond.iter().zip(uncond).map(|(c, u)| cfg_combine(c, u, scale)).collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<F> {
    pub images: Vec<Image<F>>,
    /// Network evaluations per image (guided steps count twice).
    pub nfe: usize,
}

/// Timesteps visited by an `n`-step sampler over `1..=T`, ascending; always
/// includes `T`.
pub fn ddpm_timesteps(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(Error::param("n_steps", format!("{n} not in 1..={steps}")));
    }
    if n == 1 {
        return Ok(vec![steps]);
    }
    Ok((0..n)
        .map(|i| libm::round(i as f64 * (steps - 1) as f64 / (n - 1) as f64) as usize + 1)
        .collect())
}

fn noise_like<F: Real, R: Rng + ?Sized>(h: usize, w: usize, c: usize, scale: f64, rng: &mut R) -> Image<F> {
    let data = (0..h * w * c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(scale * z)
        })
        .collect();
    Image { h, w, c, data }
}

fn check_finite<F: Real>(xs: &[Image<F>], step: usize) -> Result<()> {
    if let Some(b) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite sample at step index {step}, image {b}")));
    }
    Ok(())
}

fn check_rngs(classes: usize, rngs: usize) -> Result<()> {
    if classes != rngs {
        return Err(Error::shape("one rng stream per image", &[classes], &[rngs]));
    }
    Ok(())
}

/// Ancestral sampling over `n_steps` uniformly strided timesteps. Each image
/// draws all of its noise from its own rng stream.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<F: Real, P: NoisePredictor<F> + ?Sized, R: Rng>(
    model: &P,
    schedule: &NoiseSchedule,
    skip: Option<&SkipSchedule>,
    cfg_scale: Option<f64>,
    n_steps: usize,
    classes: &[Option<usize>],
    rngs: &mut [R],
) -> Result<SampleOutput<F>> {
    check_rngs(classes.len(), rngs.len())?;
    if let Some(s) = skip {
        if s.steps != schedule.steps() {
            return Err(Error::Config(format!(
                "skip schedule spans {} steps, noise schedule {}",
                s.steps,
                schedule.steps()
            )));
        }
    }
    let ts = ddpm_timesteps(schedule.steps(), n_steps)?;
    let (h, w, c) = model.resolution();
    let mut x: Vec<Image<F>> = rngs.iter_mut().map(|r| noise_like(h, w, c, 1.0, r)).collect();
    let mut nfe = 0;
    for (i, idx) in (0..ts.len()).rev().enumerate() {
        let t = ts[idx];
        let t_prev = if idx == 0 { 0 } else { ts[idx - 1] };
        let alpha = schedule.alpha(t)?;
        let level = NoiseLevel::Step { t, alpha };
        let active = skip.map(|s| s.active(t));
        let eps = guided_eps(model, &x, level, classes, active.as_ref(), cfg_scale, &mut nfe)?;
        let post = posterior_coefficients(alpha, schedule.alpha(t_prev)?)?;
        let (a, b) = (F::of(post.x0_coef), F::of(post.xt_coef));
        let sd = libm::sqrt(post.variance);
        for ((xb, e), rng) in x.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            let x0 = eps_to_x0(xb, e, level)?;
            let mut next = x0.zip_map(xb, |p, q| a * p + b * q)?;
            if t_prev > 0 {
                let z: Image<F> = noise_like(h, w, c, sd, rng);
                for (v, n) in next.data.iter_mut().zip(&z.data) {
                    *v += *n;
                }
            }
            *xb = next;
        }
        check_finite(&x, i)?;
    }
    Ok(SampleOutput { images: x, nfe })
}

fn default_steps() -> usize {
    18
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdmSamplerParams {
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub s_churn: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub s_noise: f64,
}

impl Default for EdmSamplerParams {
    fn default() -> Self {
        EdmSamplerParams {
            steps: default_steps(),
            s_churn: 10.0,
            s_min: 0.05,
            s_max: 20.0,
            s_noise: 1.003,
        }
    }
}

impl EdmSamplerParams {
    pub fn deterministic(steps: usize) -> Self {
        EdmSamplerParams {
            steps,
            s_churn: 0.0,
            s_min: 0.0,
            s_max: f64::INFINITY,
            s_noise: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        if !(self.s_churn >= 0.0) {
            return Err(Error::param("s_churn", "must be non-negative"));
        }
        if !(self.s_min >= 0.0 && self.s_min <= self.s_max) {
            return Err(Error::param("s_min/s_max", "need 0 <= s_min <= s_max"));
        }
        if !(self.s_noise >= 0.0) {
            return Err(Error::param("s_noise", "must be non-negative"));
        }
        Ok(())
    }

    pub fn nfe(&self) -> usize {
        2 * self.steps - 1
    }
}

/// Stochastic second-order Heun sampler on the Karras sigma grid. Under a
/// skip schedule (built with `steps = sp.steps`), step `i` counts as
/// `t = steps - i`.
#[allow(clippy::too_many_arguments)]
pub fn edm_heun_sample<F: Real, P: NoisePredictor<F> + ?Sized, R: Rng>(
    model: &P,
    edm: &crate::schedule::EdmParams,
    sp: &EdmSamplerParams,
    skip: Option<&SkipSchedule>,
    cfg_scale: Option<f64>,
    classes: &[Option<usize>],
    rngs: &mut [R],
) -> Result<SampleOutput<F>> {
    sp.validate()?;
    check_rngs(classes.len(), rngs.len())?;
    if let Some(s) = skip {
        if s.steps != sp.steps {
            return Err(Error::Config(format!(
                "skip schedule spans {} steps, sampler {}",
                s.steps, sp.steps
            )));
        }
    }
    let sigmas = edm.sigma_steps(sp.steps)?;
    let (h, w, c) = model.resolution();
    let mut x: Vec<Image<F>> = rngs.iter_mut().map(|r| noise_like(h, w, c, sigmas[0], r)).collect();
    let mut nfe = 0;
    let n = sp.steps;
    let gamma_max = libm::sqrt(2.0) - 1.0;
    for i in 0..n {
        let (s_cur, s_next) = (sigmas[i], sigmas[i + 1]);
        let active = skip.map(|s| s.active(n - i));
        let gamma = if s_cur >= sp.s_min && s_cur <= sp.s_max {
            (sp.s_churn / n as f64).min(gamma_max)
        } else {
            0.0
        };
        let s_hat = s_cur + gamma * s_cur;
        if gamma > 0.0 {
            let k = libm::sqrt(s_hat * s_hat - s_cur * s_cur) * sp.s_noise;
            for (xb, rng) in x.iter_mut().zip(rngs.iter_mut()) {
                let z: Image<F> = noise_like(h, w, c, k, rng);
                for (v, e) in xb.data.iter_mut().zip(&z.data) {
                    *v += *e;
                }
            }
        }
        let d = guided_eps(model, &x, NoiseLevel::Sigma(s_hat), classes, active.as_ref(), cfg_scale, &mut nfe)?;
        let dt = F::of(s_next - s_hat);
        let euler: Vec<Image<F>> = x
            .iter()
            .zip(&d)
            .map(|(xb, db)| xb.zip_map(db, |a, b| a + dt * b))
            .collect::<Result<_>>()?;
        if s_next > 0.0 {
            let d2 = guided_eps(model, &euler, NoiseLevel::Sigma(s_next), classes, active.as_ref(), cfg_scale, &mut nfe)?;
            let half = F::of(0.5 * (s_next - s_hat));
            for ((xb, db), d2b) in x.iter_mut().zip(&d).zip(&d2) {
                for ((v, a), b) in xb.data.iter_mut().zip(&db.data).zip(&d2b.data) {
                    *v += half * (*a + *b);
                }
            }
        } else {
            x = euler;
        }
        check_finite(&x, i)?;
    }
    Ok(SampleOutput { images: x, nfe })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_timesteps() {
        assert_eq!(ddpm_timesteps(4, 4).unwrap(), [1, 2, 3, 4]);
        assert_eq!(ddpm_timesteps(1000, 1).unwrap(), [1000]);
        let ts = ddpm_timesteps(1000, 250).unwrap();
        assert_eq!((ts.len(), ts[0], ts[249]), (250, 1, 1000));
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert!(ddpm_timesteps(10, 11).is_err());
    }

    #[test]
    fn cfg_identities() {
        let c = Image::<f64>::filled(1, 1, 1, 1.0);
        let u = Image::<f64>::filled(1, 1, 1, 0.0);
        assert_eq!(cfg_combine(&c, &u, 4.0).unwrap().data, [4.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert!(cfg_combine(&c, &Image::zeros(1, 2, 1), 2.0).is_err());
    }

    #[test]
    fn eps_x0_round_trip() {
        let x = Image::<f64>::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64 - 1.5);
        let x0 = Image::<f64>::filled(2, 2, 1, 0.25);
        for level in [NoiseLevel::Step { t: 3, alpha: 0.7 }, NoiseLevel::Sigma(2.5)] {
            let e = x0_to_eps(&x, &x0, level).unwrap();
            let back = eps_to_x0(&x, &e, level).unwrap();
            for (a, b) in back.data.iter().zip(&x0.data) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}

/// Either sampler with its settings.
#[derive(Debug, Clone, Copy)]
pub enum SamplerChoice<'a> {
    Ddpm { schedule: &'a NoiseSchedule, steps: usize },
    Edm { params: crate::schedule::EdmParams, sampler: EdmSamplerParams },
}

impl SamplerChoice<'_> {
    /// Length of the step grid a skip schedule must span.
    pub fn skip_steps(&self) -> usize {
        match self {
            SamplerChoice::Ddpm { schedule, .. } => schedule.steps(),
            SamplerChoice::Edm { sampler, .. } => sampler.steps,
        }
    }

    pub fn sample<F: Real, P: NoisePredictor<F> + ?Sized, R: Rng>(
        &self,
        model: &P,
        skip: Option<&SkipSchedule>,
        cfg_scale: Option<f64>,
        classes: &[Option<usize>],
        rngs: &mut [R],
    ) -> Result<SampleOutput<F>> {
        match self {
            SamplerChoice::Ddpm { schedule, steps } => ddpm_sample(model, schedule, skip, cfg_scale, *steps, classes, rngs),
            SamplerChoice::Edm { params, sampler } => edm_heun_sample(model, params, sampler, skip, cfg_scale, classes, rngs),
        }
    }
}
