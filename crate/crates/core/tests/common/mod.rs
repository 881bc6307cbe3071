#![allow(dead_code)]

use lego_core::brick::{BrickKind, BrickSpec};
use lego_core::schedule::LossWeights;
use lego_core::stack::{Preconditioning, RefineMode, Resolution, StackConfig, StackState, TrainingScheme};
use lego_core::{Image, Real};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Two-brick PG stack at 4x4x2: a 2x2 patch-brick under a 4x4 image-brick.
pub fn tiny_config() -> StackConfig {
    StackConfig {
        bricks: vec![
            BrickSpec::new(2, 1, 8, 1, 2, BrickKind::PatchBrick),
            BrickSpec::new(4, 2, 8, 1, 2, BrickKind::ImageBrick),
        ],
        mode: RefineMode::Pg,
        resolution: Resolution { h: 4, w: 4, c: 2 },
        num_classes: 3,
        patch_fraction: vec![0.5, 1.0],
        weights: LossWeights::unit(),
        precond: Preconditioning::Ddpm,
        time_freq_dim: 8,
        class_drop_prob: 0.1,
        scheme: TrainingScheme::EndToEnd,
    }
}

/// Overwrites every parameter with N(0, std^2) so no gate is zero.
pub fn randomize<F: Real, R: Rng>(state: &mut StackState<F>, std: f64, rng: &mut R) {
    let n = Normal::new(0.0, std).unwrap();
    state.visit_mut(&mut |_, t| {
        for v in t.data.iter_mut() {
            *v = F::of(n.sample(rng));
        }
    });
}

pub fn noise_image<F: Real, R: Rng>(h: usize, w: usize, c: usize, rng: &mut R) -> Image<F> {
    Image::from_fn(h, w, c, |_, _, _| {
        let z: f64 = StandardNormal.sample(rng);
        F::of(z)
    })
}

pub fn uniform_image<F: Real, R: Rng>(h: usize, w: usize, c: usize, rng: &mut R) -> Image<F> {
    Image::from_fn(h, w, c, |_, _, _| F::of(rng.random_range(-1.0..1.0)))
}

pub fn checksum<F: Real>(state: &StackState<F>) -> Vec<u64> {
    state
        .named_tensors()
        .iter()
        .map(|(_, t)| t.data.iter().fold(0u64, |h, v| h.rotate_left(5) ^ v.f64().to_bits()))
        .collect()
}
