mod common;

use std::sync::Mutex;

use common::randomize;
use lego_core::configs::lego_s_mini;
use lego_core::sampler::{
    cfg_combine, ddpm_sample, ddpm_timesteps, edm_heun_sample, x0_to_eps, EdmSamplerParams, NoisePredictor,
};
use lego_core::schedule::{EdmParams, NoiseSchedule};
use lego_core::skip::{SkipMode, SkipSchedule};
use lego_core::stack::{ActiveSet, NoiseLevel, RefineMode, Stack, StackState};
use lego_core::{Error, Image, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Always predicts the same clean image.
struct Oracle(Image<f64>);

impl NoisePredictor<f64> for Oracle {
    fn resolution(&self) -> (usize, usize, usize) {
        (self.0.h, self.0.w, self.0.c)
    }
    fn eps(&self, x: &[Image<f64>], level: NoiseLevel, _: &[Option<usize>], _: Option<&ActiveSet>) -> Result<Vec<Image<f64>>> {
        x.iter().map(|x| x0_to_eps(x, &self.0, level)).collect()
    }
}

/// `D = c` everywhere; records every evaluation point.
struct Constant {
    c: f64,
    seen: Mutex<Vec<(f64, f64)>>,
}

impl NoisePredictor<f64> for Constant {
    fn resolution(&self) -> (usize, usize, usize) {
        (1, 1, 1)
    }
    fn eps(&self, x: &[Image<f64>], level: NoiseLevel, _: &[Option<usize>], _: Option<&ActiveSet>) -> Result<Vec<Image<f64>>> {
        let NoiseLevel::Sigma(s) = level else { panic!("sigma expected") };
        self.seen.lock().unwrap().push((s, x[0].data[0]));
        x.iter().map(|x| x0_to_eps(x, &Image::filled(1, 1, 1, self.c), level)).collect()
    }
}

struct Broken;

impl NoisePredictor<f64> for Broken {
    fn resolution(&self) -> (usize, usize, usize) {
        (1, 1, 1)
    }
    fn eps(&self, x: &[Image<f64>], level: NoiseLevel, _: &[Option<usize>], _: Option<&ActiveSet>) -> Result<Vec<Image<f64>>> {
        let NoiseLevel::Step { t, .. } = level else { unreachable!() };
        Ok(x.iter().map(|_| Image::filled(1, 1, 1, if t < 3 { f64::NAN } else { 0.0 })).collect())
    }
}

fn rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n as u64).map(|i| ChaCha8Rng::seed_from_u64(seed * 1000 + i)).collect()
}

fn mini(mode: RefineMode, seed: u64) -> Stack<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = lego_s_mini(mode);
    let mut state = StackState::init(&cfg, &mut rng).unwrap();
    randomize(&mut state, 0.05, &mut rng);
    Stack::new(cfg, state).unwrap()
}

#[test]
fn oracle_collapses_onto_target() {
    let target = Image::<f64>::from_fn(2, 3, 2, |y, x, c| (y * 6 + x * 2 + c) as f64 / 10.0 - 0.5);
    let s = NoiseSchedule::linear(4, 0.1, 0.5).unwrap();
    let out = ddpm_sample(&Oracle(target.clone()), &s, None, None, 4, &[None, None], &mut rngs(1, 2)).unwrap();
    assert_eq!(out.nfe, 4);
    for img in &out.images {
        for (a, b) in img.data.iter().zip(&target.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn full_stride_visits_every_step() {
    assert_eq!(ddpm_timesteps(4, 4).unwrap(), [1, 2, 3, 4]);
    assert_eq!(ddpm_timesteps(1000, 1000).unwrap(), (1..=1000).collect::<Vec<_>>());
}

#[test]
fn zero_t_break_matches_unskipped_sampling() {
    let s = NoiseSchedule::default();
    for (mode, skip_mode) in [(RefineMode::Pg, SkipMode::Pg), (RefineMode::Pr, SkipMode::Pr)] {
        let stack = mini(mode, 2);
        let skip = SkipSchedule::new(skip_mode, 0, 1000, &stack.config).unwrap();
        let classes = [Some(0), Some(1)];
        let a = ddpm_sample(&stack, &s, Some(&skip), None, 8, &classes, &mut rngs(3, 2)).unwrap();
        let b = ddpm_sample(&stack, &s, None, None, 8, &classes, &mut rngs(3, 2)).unwrap();
        assert_eq!(a.images, b.images);
        let skipping = SkipSchedule::new(skip_mode, 600, 1000, &stack.config).unwrap();
        let c = ddpm_sample(&stack, &s, Some(&skipping), None, 8, &classes, &mut rngs(3, 2)).unwrap();
        assert_ne!(a.images, c.images);
    }
}

#[test]
fn heun_integrates_constant_denoiser_exactly() {
    let model = Constant { c: 0.3, seen: Mutex::new(Vec::new()) };
    let edm = EdmParams::default();
    let sp = EdmSamplerParams::deterministic(12);
    let out = edm_heun_sample(&model, &edm, &sp, None, None, &[None], &mut rngs(4, 1)).unwrap();
    assert_eq!(out.nfe, 2 * 12 - 1);
    let seen = model.seen.lock().unwrap();
    let (s0, x0) = seen[0];
    assert_eq!(s0, 80.0);
    for &(s, x) in seen.iter() {
        let want = 0.3 + (x0 - 0.3) * s / s0;
        assert!((x - want).abs() <= 1e-12 * want.abs().max(1.0), "sigma {s}: {x} vs {want}");
    }
    assert!((out.images[0].data[0] - 0.3).abs() < 1e-12);
}

#[test]
fn churn_free_heun_is_deterministic_and_churn_is_not_noise_free() {
    let stack = mini(RefineMode::Pg, 5);
    let mut cfg = stack.config.clone();
    cfg.precond = lego_core::stack::Preconditioning::edm_default();
    let stack = Stack::new(cfg, stack.state.clone()).unwrap();
    let edm = EdmParams::default();
    let sp = EdmSamplerParams::deterministic(4);
    let a = edm_heun_sample(&stack, &edm, &sp, None, None, &[Some(1)], &mut rngs(6, 1)).unwrap();
    let b = edm_heun_sample(&stack, &edm, &sp, None, None, &[Some(1)], &mut rngs(6, 1)).unwrap();
    assert_eq!(a.images, b.images);
    let churn = EdmSamplerParams { steps: 4, ..EdmSamplerParams::default() };
    let c = edm_heun_sample(&stack, &edm, &churn, None, None, &[Some(1)], &mut rngs(6, 1)).unwrap();
    assert_ne!(a.images, c.images);
    let skip = SkipSchedule::new(SkipMode::Pg, 0, 4, &stack.config).unwrap();
    let d = edm_heun_sample(&stack, &edm, &sp, Some(&skip), None, &[Some(1)], &mut rngs(6, 1)).unwrap();
    assert_eq!(a.images, d.images);
}

#[test]
fn unit_guidance_equals_conditional_sampling() {
    let stack = mini(RefineMode::Pg, 7);
    let s = NoiseSchedule::default();
    let classes = [Some(0), Some(1), Some(1)];
    let plain = ddpm_sample(&stack, &s, None, None, 6, &classes, &mut rngs(8, 3)).unwrap();
    let guided = ddpm_sample(&stack, &s, None, Some(1.0), 6, &classes, &mut rngs(8, 3)).unwrap();
    assert_eq!(plain.images, guided.images);
    assert_eq!((plain.nfe, guided.nfe), (6, 12));
    let strong = ddpm_sample(&stack, &s, None, Some(4.0), 6, &classes, &mut rngs(8, 3)).unwrap();
    assert_ne!(plain.images, strong.images);
}

#[test]
fn sampling_is_seed_deterministic_per_image() {
    let stack = mini(RefineMode::Pr, 9);
    let s = NoiseSchedule::default();
    let a = ddpm_sample(&stack, &s, None, None, 5, &[Some(0), Some(1)], &mut rngs(10, 2)).unwrap();
    let b = ddpm_sample(&stack, &s, None, None, 5, &[Some(0), Some(1)], &mut rngs(10, 2)).unwrap();
    assert_eq!(a.images, b.images);
    // An image depends only on its own stream, not on its batch neighbours.
    let mut solo = vec![ChaCha8Rng::seed_from_u64(10 * 1000 + 1)];
    let c = ddpm_sample(&stack, &s, None, None, 5, &[Some(1)], &mut solo).unwrap();
    let (x, y) = (&a.images[1].data, &c.images[0].data);
    assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-5 * q.abs().max(1.0)));
}

#[test]
fn non_finite_state_reports_step() {
    let s = NoiseSchedule::linear(6, 0.1, 0.3).unwrap();
    match ddpm_sample(&Broken, &s, None, None, 6, &[None], &mut rngs(11, 1)) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step index 4"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn guidance_arithmetic() {
    let c = Image::<f64>::filled(1, 1, 1, 1.0);
    let u = Image::<f64>::filled(1, 1, 1, 0.0);
    assert_eq!(cfg_combine(&c, &u, 4.0).unwrap().data[0], 4.0);
}

#[test]
fn sampler_params_validated() {
    assert!(EdmSamplerParams { steps: 0, ..Default::default() }.validate().is_err());
    assert!(EdmSamplerParams { s_min: 5.0, s_max: 1.0, ..Default::default() }.validate().is_err());
    assert!(EdmSamplerParams { s_churn: -1.0, ..Default::default() }.validate().is_err());
    let d = EdmSamplerParams::default();
    assert_eq!((d.s_churn, d.s_min, d.s_max, d.s_noise), (10.0, 0.05, 20.0, 1.003));
}
