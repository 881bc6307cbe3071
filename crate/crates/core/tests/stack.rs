mod common;

use std::sync::Arc;

use common::{randomize, tiny_config, uniform_image};
use lego_core::brick::brick_forward;
use lego_core::configs::{lego, lego_s_mini, ModelSize};
use lego_core::optim::{adamw_step, AdamState, TrainConfig};
use lego_core::patch::{coord_grid, partition, PatchGrid};
use lego_core::schedule::NoiseSchedule;
use lego_core::stack::{
    boxed_predictor, wrap_external_brick, ActiveSet, NoiseLevel, RefineMode, Stack, StackState,
};
use lego_core::{Error, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_stack(seed: u64) -> Stack<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let mut state = StackState::init(&cfg, &mut rng).unwrap();
    randomize(&mut state, 0.3, &mut rng);
    Stack::new(cfg, state).unwrap()
}

/// Reference: run one brick over every patch with the per-patch API.
fn brick_by_patches(
    stack: &Stack<f64>,
    k: usize,
    xt: &Image<f64>,
    prev: Option<&Image<f64>>,
    t: usize,
    class: Option<usize>,
) -> Image<f64> {
    let spec = &stack.config.bricks[k];
    let r = stack.config.resolution;
    let grid = PatchGrid::new(r.h, r.w, spec.r).unwrap();
    let coords = partition(&coord_grid(r.h, r.w).unwrap(), spec.r).unwrap();
    let xs = partition(xt, spec.r).unwrap();
    let ps = prev.map(|p| partition(p, spec.r).unwrap());
    let mut out = Image::zeros(r.h, r.w, r.c);
    for l in 0..grid.len() {
        let y = brick_forward(
            &xs.patches[l],
            ps.as_ref().map(|p| &p.patches[l]),
            &coords.patches[l],
            t as f64,
            class,
            &stack.state.cond,
            spec,
            &stack.state.bricks[k],
        )
        .unwrap();
        grid.insert_from(&mut out, l, &y.data);
    }
    out
}

fn level(t: usize) -> NoiseLevel {
    NoiseLevel::step(&NoiseSchedule::default(), t).unwrap()
}

#[test]
fn forward_matches_patchwise_reference() {
    let stack = tiny_stack(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = common::noise_image(4, 4, 2, &mut rng);
    let out = stack.forward(std::slice::from_ref(&xt), &[level(37)], &[Some(2)], None).unwrap();
    let z1 = brick_by_patches(&stack, 0, &xt, None, 37, Some(2));
    let z2 = brick_by_patches(&stack, 1, &xt, Some(&z1), 37, Some(2));
    for (a, b) in out.x0[0].data.iter().zip(&z2.data) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    assert!(!out.fallback);
}

#[test]
fn single_brick_stack_is_the_brick() {
    let mut cfg = tiny_config();
    cfg.bricks.truncate(1);
    cfg.bricks[0] = lego_core::brick::BrickSpec::new(4, 2, 8, 1, 2, lego_core::brick::BrickKind::ImageBrick);
    cfg.patch_fraction = vec![1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut state = StackState::init(&cfg, &mut rng).unwrap();
    randomize(&mut state, 0.3, &mut rng);
    let stack = Stack::new(cfg, state).unwrap();
    let xt = common::noise_image(4, 4, 2, &mut rng);
    let out = stack.forward(std::slice::from_ref(&xt), &[level(5)], &[None], None).unwrap();
    let want = brick_by_patches(&stack, 0, &xt, None, 5, None);
    for (a, b) in out.x0[0].data.iter().zip(&want.data) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn skipped_bricks_pass_through() {
    let stack = tiny_stack(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = common::noise_image(4, 4, 2, &mut rng);
    let lv = [level(200)];
    let only_first = stack.forward(std::slice::from_ref(&xt), &lv, &[Some(0)], Some(&ActiveSet::only(2, &[1]))).unwrap();
    let z1 = brick_by_patches(&stack, 0, &xt, None, 200, Some(0));
    for (a, b) in only_first.x0[0].data.iter().zip(&z1.data) {
        assert!((a - b).abs() <= 1e-12);
    }
    let all = stack.forward(std::slice::from_ref(&xt), &lv, &[Some(0)], Some(&ActiveSet::all(2))).unwrap();
    let none = stack.forward(std::slice::from_ref(&xt), &lv, &[Some(0)], None).unwrap();
    assert_eq!(all.x0, none.x0);
    let top_only = stack.forward(std::slice::from_ref(&xt), &lv, &[Some(0)], Some(&ActiveSet::only(2, &[2]))).unwrap();
    assert_eq!(top_only.x0[0].shape(), [4, 4, 2]);
}

#[test]
fn empty_active_set_falls_back_to_zero_noise_prediction() {
    let stack = tiny_stack(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = common::noise_image(4, 4, 2, &mut rng);
    let lv = level(300);
    let out = stack.forward(std::slice::from_ref(&xt), &[lv], &[None], Some(&ActiveSet(vec![false, false]))).unwrap();
    assert!(out.fallback);
    let NoiseLevel::Step { alpha, .. } = lv else { unreachable!() };
    let want = lego_core::schedule::x0_from_eps_alpha(&xt, &Image::zeros(4, 4, 2), alpha).unwrap();
    assert_eq!(out.x0[0], want);
}

#[test]
fn reference_layout_patch_counts() {
    let cfg = lego(ModelSize::S, 64, RefineMode::Pg).unwrap();
    let counts: Vec<usize> = cfg.bricks.iter().map(|b| PatchGrid::new(64, 64, b.r).unwrap().len()).collect();
    assert_eq!(counts, [256, 16, 1]);
}

#[test]
fn pg_pr_duality_and_ordering() {
    let pg = lego_s_mini(RefineMode::Pg);
    let pr = pg.reversed().unwrap();
    assert_eq!(pr.mode, RefineMode::Pr);
    assert_eq!(pr.reversed().unwrap(), pg);
    let mut bad = pg.clone();
    bad.mode = RefineMode::Pr;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut u = pg.clone();
    u.mode = RefineMode::U;
    assert!(u.validate().is_err());
}

#[test]
fn mismatched_brick_width_rejected() {
    let mut cfg = tiny_config();
    cfg.bricks[1].d = 16;
    cfg.bricks[1].heads = 2;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config();
    cfg.bricks[0].kind = lego_core::brick::BrickKind::ImageBrick;
    assert!(cfg.validate().is_err());
}

#[test]
fn zero_init_loss_is_mean_square_of_data() {
    let mut cfg = lego_s_mini(RefineMode::Pg);
    cfg.patch_fraction = vec![1.0; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stack: Stack<f64> = Stack::init(cfg, &mut rng).unwrap();
    let x0: Vec<Image<f64>> = (0..4).map(|_| uniform_image(16, 16, 3, &mut rng)).collect();
    let want = x0.iter().map(|x| x.mean_square()).sum::<f64>() / 4.0;
    let report = stack
        .training_loss(&x0, &[Some(0), Some(1), None, Some(1)], &NoiseSchedule::default(), &mut rng)
        .unwrap();
    assert!((report.total - want).abs() <= 1e-12 * want);
    for l in &report.per_brick {
        assert!((l - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn loss_decomposes_into_independent_brick_losses() {
    let stack = tiny_stack(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0: Vec<Image<f64>> = (0..3).map(|_| uniform_image(4, 4, 2, &mut rng)).collect();
    let report = stack
        .training_loss(&x0, &[Some(0), Some(1), Some(2)], &NoiseSchedule::default(), &mut rng)
        .unwrap();
    let d = &report.draws;
    let grid0 = PatchGrid::new(4, 4, 2).unwrap();
    let mut per = [0.0f64; 2];
    for b in 0..3 {
        let NoiseLevel::Step { t, .. } = d.levels[b] else { unreachable!() };
        let z1 = brick_by_patches(&stack, 0, &d.xt[b], None, t, d.classes[b]);
        // Brick 1 is scored on its sampled patches only.
        let mut se = 0.0;
        let mut n = 0;
        let mut filled = x0[b].clone();
        let mut buf = vec![0.0; 8];
        for &l in &d.patches[0][b] {
            grid0.extract_into(&z1, l, &mut buf);
            grid0.insert_from(&mut filled, l, &buf);
            let mut target = vec![0.0; 8];
            grid0.extract_into(&x0[b], l, &mut target);
            se += buf.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n += 8;
        }
        assert_eq!(d.patches[0][b].len(), 2);
        per[0] += se / n as f64 / 3.0;
        // Brick 2 sees brick 1's sampled patches and data elsewhere.
        let z2 = brick_by_patches(&stack, 1, &d.xt[b], Some(&filled), t, d.classes[b]);
        per[1] += z2.data.iter().zip(&x0[b].data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 32.0 / 3.0;
    }
    for k in 0..2 {
        assert!((report.per_brick[k] - per[k]).abs() <= 1e-6 * per[k], "brick {k}");
    }
    assert!((report.total - (per[0] + per[1]) / 2.0).abs() <= 1e-6 * report.total);
}

#[test]
fn single_full_brick_reduces_to_plain_denoising_loss() {
    let mut cfg = tiny_config();
    cfg.bricks = vec![lego_core::brick::BrickSpec::new(4, 2, 8, 1, 2, lego_core::brick::BrickKind::ImageBrick)];
    cfg.patch_fraction = vec![1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut state = StackState::init(&cfg, &mut rng).unwrap();
    randomize(&mut state, 0.3, &mut rng);
    let stack = Stack::new(cfg, state).unwrap();
    let x0: Vec<Image<f64>> = (0..2).map(|_| uniform_image(4, 4, 2, &mut rng)).collect();
    let report = stack.training_loss(&x0, &[Some(1), Some(0)], &NoiseSchedule::default(), &mut rng).unwrap();
    let mut want = 0.0;
    for b in 0..2 {
        let out = stack.forward(&[report.draws.xt[b].clone()], &[report.draws.levels[b]], &[report.draws.classes[b]], None).unwrap();
        want += out.x0[0].data.iter().zip(&x0[b].data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 32.0 / 2.0;
    }
    assert!((report.total - want).abs() <= 1e-12 * want);
}

#[test]
fn class_drop_rate_is_binomial() {
    let stack = tiny_stack(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x0: Vec<Image<f64>> = (0..100).map(|_| uniform_image(4, 4, 2, &mut rng)).collect();
    let classes = vec![Some(1); 100];
    let mut dropped = 0usize;
    for _ in 0..100 {
        let r = stack.training_loss(&x0, &classes, &NoiseSchedule::default(), &mut rng).unwrap();
        dropped += r.draws.classes.iter().filter(|c| c.is_none()).count();
    }
    let n = 10_000.0;
    let sd = (n * 0.1 * 0.9f64).sqrt();
    assert!((dropped as f64 - 0.1 * n).abs() <= 3.0 * sd, "{dropped}");
}

#[test]
fn non_finite_loss_names_the_example() {
    let stack = tiny_stack(14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut x0: Vec<Image<f64>> = (0..3).map(|_| uniform_image(4, 4, 2, &mut rng)).collect();
    x0[2].data.iter_mut().for_each(|v| *v = f64::NAN);
    match stack.training_loss(&x0, &[None, None, None], &NoiseSchedule::default(), &mut rng) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("t = ") && msg.contains("k = 1") && msg.contains("batch index 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn identity_external_feeds_upper_bricks() {
    let mut stack = tiny_stack(16);
    let ext = wrap_external_brick(boxed_predictor((4, 4, 2), |x: &Image<f64>, _, _| Ok(x.clone())), true).unwrap();
    stack.insert_external(1, ext).unwrap();
    assert_eq!(stack.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xt = common::noise_image(4, 4, 2, &mut rng);
    let out = stack.forward(std::slice::from_ref(&xt), &[level(50)], &[Some(1)], None).unwrap();
    let z1 = brick_by_patches(&stack, 0, &xt, Some(&xt), 50, Some(1));
    let z2 = brick_by_patches(&stack, 1, &xt, Some(&z1), 50, Some(1));
    for (a, b) in out.x0[0].data.iter().zip(&z2.data) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn external_resolution_and_freeze_checked() {
    let mut stack = tiny_stack(18);
    let wrong = wrap_external_brick(boxed_predictor((8, 8, 2), |x: &Image<f64>, _, _| Ok(x.clone())), true).unwrap();
    assert!(matches!(stack.insert_external(1, wrong), Err(Error::Shape { .. })));
    assert!(wrap_external_brick(boxed_predictor((4, 4, 2), |x: &Image<f64>, _, _| Ok(x.clone())), false).is_err());
}

#[test]
fn frozen_elements_keep_their_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut stack: Stack<f32> = Stack::init(lego_s_mini(RefineMode::Pr), &mut rng).unwrap();
    // A stateful black box: its parameters live outside the optimizer.
    let table = Arc::new(vec![0.25f32; 16 * 16 * 3]);
    let inner = table.clone();
    let ext = wrap_external_brick(
        boxed_predictor((16, 16, 3), move |_: &Image<f32>, _, _| Image::from_vec(16, 16, 3, inner.to_vec())),
        true,
    )
    .unwrap();
    stack.insert_external(1, ext).unwrap();
    stack.state.frozen[0] = true;
    let before_table = table.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let before = stack.state.bricks[0].clone();
    let x0: Vec<Image<f32>> = (0..2).map(|_| uniform_image(16, 16, 3, &mut rng)).collect();
    let tc = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
    let mut opt = AdamState::new(&stack.state);
    let schedule = NoiseSchedule::default();
    for _ in 0..100 {
        let (_, g) = stack.loss_and_grad(&x0, &[Some(0), Some(1)], &schedule, &mut rng).unwrap();
        adamw_step(&mut stack.state, &g, &mut opt, &tc, tc.lr).unwrap();
    }
    assert_eq!(stack.state.bricks[0], before);
    assert_ne!(stack.state.bricks[1], StackState::<f32>::zeros(&stack.config).bricks[1]);
    assert_eq!(table.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before_table);
}

#[test]
fn oracle_external_lets_upper_bricks_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let data: Vec<Image<f32>> = (0..2).map(|_| uniform_image(16, 16, 3, &mut rng)).collect();
    let mut cfg = lego_s_mini(RefineMode::Pr);
    // The oracle plays the full-image element; refine it with the patch-bricks.
    cfg.bricks.remove(0);
    cfg.patch_fraction.remove(0);
    let mut stack: Stack<f32> = Stack::init(cfg, &mut rng).unwrap();
    let table = data.clone();
    let oracle = boxed_predictor((16, 16, 3), move |_: &Image<f32>, _, class: Option<usize>| {
        Ok(table[class.unwrap_or(0)].clone())
    });
    stack.insert_external(1, wrap_external_brick(oracle, true).unwrap()).unwrap();
    stack.config.class_drop_prob = 0.0;
    let tc = TrainConfig { lr: 2e-3, ..TrainConfig::default() };
    let mut opt = AdamState::new(&stack.state);
    let schedule = NoiseSchedule::default();
    let classes = [Some(0), Some(1)];
    let mut first = None;
    let mut last = Vec::new();
    for step in 0..500 {
        let (r, g) = stack.loss_and_grad(&data, &classes, &schedule, &mut rng).unwrap();
        first.get_or_insert(r.total);
        if step >= 450 {
            last.push(r.total);
        }
        adamw_step(&mut stack.state, &g, &mut opt, &tc, tc.lr).unwrap();
    }
    let tail = last.iter().sum::<f64>() / last.len() as f64;
    assert!(tail < 0.05 * first.unwrap(), "{} -> {tail}", first.unwrap());
}
