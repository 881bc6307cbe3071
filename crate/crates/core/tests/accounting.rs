use lego_core::brick::{flops_estimate, param_count, BrickKind, BrickParams, BrickSpec, FlopsMode};
use lego_core::configs::{dit_l_baseline, lego, lego_s_mini, ModelSize};
use lego_core::skip::{SkipMode, SkipSchedule};
use lego_core::stack::{RefineMode, StackConfig, StackState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn count(cfg: &StackConfig) -> u64 {
    param_count(&cfg.bricks, cfg.resolution.c, cfg.num_classes, cfg.time_freq_dim)
}

fn sample_flops(cfg: &StackConfig, skip: Option<&SkipSchedule>) -> f64 {
    let r = cfg.resolution;
    flops_estimate(&cfg.bricks, (r.h, r.w, r.c), FlopsMode::Sample, &cfg.patch_fraction, skip, cfg.time_freq_dim)
}

/// Independent tally: one formula per layer, written out longhand.
fn hand_count(spec: &BrickSpec, c: usize) -> u64 {
    let d = spec.d as u64;
    let field = (spec.l * spec.l) as u64;
    let cin = 2 * c as u64 + 2;
    let tokens = ((spec.r / spec.l) * (spec.r / spec.l)) as u64;
    let embed = field * cin * d + d;
    let pos = tokens * d;
    let block = (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
    let fin = d * 2 * d + 2 * d;
    let dec = d * field * c as u64 + field * c as u64;
    embed + pos + spec.depth as u64 * block + fin + dec
}

#[test]
fn brick_counts_match_hand_tally_and_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = lego_s_mini(RefineMode::Pg);
    let state: StackState<f32> = StackState::init(&cfg, &mut rng).unwrap();
    assert_eq!(state.param_len() as u64, count(&cfg));
    for spec in &cfg.bricks {
        let p = BrickParams::<f32>::init(spec, 3, &mut rng);
        assert_eq!(p.param_len() as u64, hand_count(spec, 3));
    }
}

#[test]
fn reference_sizes_param_counts() {
    for (size, millions) in [(ModelSize::S, 35.0), (ModelSize::L, 464.0)] {
        let cfg = lego(size, 64, RefineMode::Pg).unwrap();
        let m = count(&cfg) as f64 / 1e6;
        assert!((m / millions - 1.0).abs() <= 0.05, "{size:?}: {m:.1}M vs {millions}M");
    }
}

#[test]
fn pg_and_pr_share_parameter_count() {
    for size in [ModelSize::S, ModelSize::L, ModelSize::XL] {
        let pg = lego(size, 64, RefineMode::Pg).unwrap();
        let pr = lego(size, 64, RefineMode::Pr).unwrap();
        assert_eq!(count(&pg), count(&pr));
    }
}

#[test]
fn sampling_flops_non_increasing_in_t_break() {
    for mode in [RefineMode::Pg, RefineMode::Pr] {
        let cfg = lego_s_mini(mode);
        let skip_mode = if mode == RefineMode::Pg { SkipMode::Pg } else { SkipMode::Pr };
        let mut last = f64::INFINITY;
        for t_break in (0..=1000).step_by(50) {
            let s = SkipSchedule::new(skip_mode, t_break, 1000, &cfg).unwrap();
            let f = sample_flops(&cfg, Some(&s));
            assert!(f <= last, "{mode:?} t_break {t_break}");
            last = f;
        }
        let none = sample_flops(&cfg, None);
        let zero = sample_flops(&cfg, Some(&SkipSchedule::new(skip_mode, 0, 1000, &cfg).unwrap()));
        assert_eq!(none, zero);
    }
}

#[test]
fn training_flops_scale_with_patch_fraction() {
    let mut cfg = lego_s_mini(RefineMode::Pg);
    let r = cfg.resolution;
    let full = flops_estimate(&cfg.bricks, (r.h, r.w, r.c), FlopsMode::Train, &[1.0; 3], None, 64);
    cfg.patch_fraction = vec![0.5, 0.5, 1.0];
    let half = flops_estimate(&cfg.bricks, (r.h, r.w, r.c), FlopsMode::Train, &cfg.patch_fraction, None, 64);
    assert!(half < full);
}

#[test]
fn single_brick_flops_hand_count() {
    // One 8x8 image-brick, l = 4 (4 tokens), d = 8, one block, 1 channel.
    let spec = BrickSpec::new(8, 4, 8, 1, 2, BrickKind::ImageBrick);
    let (n, d, field, cin, c) = (4.0, 8.0, 16.0, 4.0, 1.0);
    let embed = 2.0 * n * field * cin * d;
    let block = n * 2.0 * (3.0 * d * d + d * d + 8.0 * d * d) + 4.0 * n * n * d + 2.0 * 6.0 * d * d;
    let fin = 2.0 * d * 2.0 * d;
    let dec = 2.0 * n * d * field * c;
    let cond = 2.0 * (16.0 * d + d * d);
    let got = flops_estimate(&[spec], (8, 8, 1), FlopsMode::Sample, &[1.0], None, 16);
    assert_eq!(got, embed + block + fin + dec + cond);
}

#[test]
fn baseline_is_single_image_brick() {
    let b = dit_l_baseline();
    assert_eq!(b.bricks.len(), 1);
    assert_eq!(b.bricks[0].tokens(), 1024);
    println!(
        "S {:.3}G  L {:.3}G  DiT-L {:.3}G",
        sample_flops(&lego(ModelSize::S, 64, RefineMode::Pg).unwrap(), None) / 1e9,
        sample_flops(&lego(ModelSize::L, 64, RefineMode::Pg).unwrap(), None) / 1e9,
        sample_flops(&b, None) / 1e9
    );
    for s in [ModelSize::S, ModelSize::L, ModelSize::XL] {
        println!("{s:?} {:.2}M", count(&lego(s, 64, RefineMode::Pg).unwrap()) as f64 / 1e6);
    }
}
