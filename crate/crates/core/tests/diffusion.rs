use lego_core::schedule::{
    edm_precondition, loss_weight, posterior_params, q_sample, x0_from_eps, EdmParams, LossWeights, NoiseSchedule,
    WeightMode,
};
use lego_core::{Error, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const DRAWS: usize = 100_000;

fn scalar(v: f64) -> Image<f64> {
    Image::filled(1, 1, 1, v)
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Mean and variance each within three standard errors of the target.
fn assert_moments(xs: &[f64], mean: f64, var: f64, what: &str) {
    let n = xs.len() as f64;
    let (m, v) = moments(xs);
    let se_m = (var / n).sqrt();
    let se_v = var * (2.0 / (n - 1.0)).sqrt();
    assert!((m - mean).abs() <= 3.0 * se_m, "{what}: mean {m} vs {mean}");
    assert!((v - var).abs() <= 3.0 * se_v, "{what}: var {v} vs {var}");
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn q_sample_matches_marginal_moments() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = scalar(0.8);
    for t in [1usize, 250, 999] {
        let xs: Vec<f64> = (0..DRAWS)
            .map(|_| q_sample(&x0, t, &scalar(normal(&mut rng)), &s).unwrap().data[0])
            .collect();
        let a = s.alpha(t).unwrap();
        assert_moments(&xs, a.sqrt() * 0.8, 1.0 - a, "q_sample");
    }
}

#[test]
fn one_step_composition_matches_marginal() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = scalar(-0.6);
    for t in [2usize, 100, 1000] {
        let beta = s.beta(t).unwrap();
        let xs: Vec<f64> = (0..DRAWS)
            .map(|_| {
                let prev = q_sample(&x0, t - 1, &scalar(normal(&mut rng)), &s).unwrap().data[0];
                (1.0 - beta).sqrt() * prev + beta.sqrt() * normal(&mut rng)
            })
            .collect();
        let a = s.alpha(t).unwrap();
        assert_moments(&xs, a.sqrt() * -0.6, 1.0 - a, "composed chain");
    }
}

#[test]
fn posterior_chain_reproduces_marginals() {
    // Three-step chain with large steps so the moments are well separated.
    let s = NoiseSchedule::from_alphas(vec![0.8, 0.5, 0.2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = scalar(1.1);
    let mut levels: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(DRAWS)).collect();
    for _ in 0..DRAWS {
        let mut x = q_sample(&x0, 3, &scalar(normal(&mut rng)), &s).unwrap();
        levels[3].push(x.data[0]);
        for t in (1..=3).rev() {
            let (mean, var) = posterior_params(&x0, &x, t, &s).unwrap();
            x = scalar(mean.data[0] + var.sqrt() * normal(&mut rng));
            levels[t - 1].push(x.data[0]);
        }
    }
    for (t, xs) in levels.iter().enumerate().skip(1) {
        let a = s.alpha(t).unwrap();
        assert_moments(xs, a.sqrt() * 1.1, 1.0 - a, "posterior chain");
    }
    assert!(levels[0].iter().all(|&v| v == 1.1));
}

#[test]
fn snr_strictly_decreasing() {
    for s in [
        NoiseSchedule::default(),
        NoiseSchedule::linear(50, 1e-3, 0.3).unwrap(),
        NoiseSchedule::linear(7, 0.2, 0.2).unwrap(),
    ] {
        let v: Vec<f64> = (1..=s.steps()).map(|t| s.snr(t).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn x0_from_eps_round_trip() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in [1usize, 17, 500, 1000] {
        let xt = Image::<f64>::from_fn(3, 3, 2, |_, _, _| normal(&mut rng));
        let e = Image::<f64>::from_fn(3, 3, 2, |_, _, _| normal(&mut rng));
        let back = q_sample(&x0_from_eps(&xt, &e, t, &s).unwrap(), t, &e, &s).unwrap();
        for (a, b) in back.data.iter().zip(&xt.data) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn loss_weight_modes() {
    let s = NoiseSchedule::from_alphas(vec![0.5, 0.2]).unwrap();
    let snr_delta = LossWeights { mode: WeightMode::SnrDelta, values: None };
    assert_eq!(loss_weight(&snr_delta, &s, 2, 1).unwrap(), 0.375);
    let flat = NoiseSchedule::from_alphas(vec![0.5, 0.5]);
    // A schedule must be strictly decreasing, so the zero-delta case goes
    // through the weight formula directly.
    assert!(flat.is_err());
    assert_eq!(lego_core::schedule::snr_delta_weight(0.4, 0.4).unwrap(), 0.0);
    assert_eq!(loss_weight(&LossWeights::unit(), &s, 2, 3).unwrap(), 1.0);
    let custom = LossWeights::custom(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(loss_weight(&custom, &s, 2, 1).unwrap(), 3.0);
    assert!(matches!(loss_weight(&custom, &s, 2, 3), Err(Error::Config(_))));
}

#[test]
fn edm_preconditioners_closed_forms() {
    let p = EdmParams::default();
    let sd: f64 = 0.5;
    for sigma in [1e-3, 0.002, 0.1, 0.5, 1.0, 3.7, 80.0] {
        let got = edm_precondition(sigma, &p).unwrap();
        let want = [
            sd * sd / (sigma * sigma + sd * sd),
            sigma * sd / (sigma * sigma + sd * sd).sqrt(),
            1.0 / (sigma * sigma + sd * sd).sqrt(),
            sigma.ln() / 4.0,
        ];
        for (g, w) in [got.c_skip, got.c_out, got.c_in, got.c_noise].iter().zip(want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-300), "sigma {sigma}: {g} vs {w}");
        }
    }
    assert_eq!(edm_precondition(0.5, &p).unwrap().c_skip, 0.5);
    assert!((edm_precondition(1.0, &p).unwrap().c_in - 0.894427190999916).abs() < 1e-12);
    let tiny = edm_precondition(1e-9, &p).unwrap();
    assert!((tiny.c_skip - 1.0).abs() < 1e-12 && tiny.c_out < 1e-8);
    assert!(matches!(edm_precondition(0.0, &p), Err(Error::Domain(_))));
}

#[test]
fn karras_grid_is_strictly_decreasing() {
    let g = EdmParams::default().sigma_steps(18).unwrap();
    assert_eq!(g.len(), 19);
    assert_eq!((g[0], *g.last().unwrap()), (80.0, 0.0));
    assert!((g[17] - 0.002).abs() < 1e-15);
    assert!(g.windows(2).all(|w| w[1] < w[0]));
}
