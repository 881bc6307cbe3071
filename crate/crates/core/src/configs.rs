//! Reference stack layouts.

use alloc::vec;
use alloc::vec::Vec;

use crate::brick::{BrickKind, BrickSpec};
use crate::error::{Error, Result};
use crate::schedule::LossWeights;
use crate::stack::{Preconditioning, RefineMode, Resolution, StackConfig, TrainingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSize {
    S,
    L,
    XL,
}

/// Per-size `(d, heads)` and per-level `(l, depth)` bottom to top in PG order.
fn layout(size: ModelSize) -> (usize, usize, [(usize, usize); 3]) {
    match size {
        ModelSize::S => (384, 6, [(2, 2), (8, 4), (2, 6)]),
        ModelSize::L => (1024, 16, [(2, 4), (8, 8), (2, 12)]),
        ModelSize::XL => (1152, 16, [(4, 4), (8, 12), (2, 14)]),
    }
}

fn spec(r: usize, l: usize, d: usize, depth: usize, heads: usize, full: usize) -> BrickSpec {
    let kind = if r == full { BrickKind::ImageBrick } else { BrickKind::PatchBrick };
    BrickSpec::new(r, l, d, depth, heads, kind)
}

fn assemble(bricks: Vec<BrickSpec>, mode: RefineMode, res: Resolution, classes: usize, patch_fraction: f64) -> StackConfig {
    let fractions = bricks
        .iter()
        .map(|b| if b.kind == BrickKind::ImageBrick { 1.0 } else { patch_fraction })
        .collect();
    StackConfig {
        bricks,
        mode,
        resolution: res,
        num_classes: classes,
        patch_fraction: fractions,
        weights: LossWeights::unit(),
        precond: Preconditioning::edm_default(),
        time_freq_dim: 256,
        class_drop_prob: 0.1,
        scheme: TrainingScheme::EndToEnd,
    }
}

/// Class-conditional three-brick LEGO at `64x64x3` (bricks 4, 16, 64) or at
/// `32x32x4` latent resolution (bricks 4, 8, 32), 1000 classes.
pub fn lego(size: ModelSize, resolution: usize, mode: RefineMode) -> Result<StackConfig> {
    let (sizes, c, mid_l): ([usize; 3], usize, Option<usize>) = match resolution {
        64 => ([4, 16, 64], 3, None),
        32 => ([4, 8, 32], 4, Some(4)),
        _ => return Err(Error::Config("reference layouts exist for 64 and 32 only".into())),
    };
    let (d, heads, levels) = layout(size);
    let mut bricks: Vec<BrickSpec> = sizes
        .iter()
        .zip(levels)
        .enumerate()
        .map(|(i, (&r, (l, depth)))| {
            let l = if i == 1 { mid_l.unwrap_or(l) } else { l };
            spec(r, l, d, depth, heads, resolution)
        })
        .collect();
    match mode {
        RefineMode::Pg => {}
        RefineMode::Pr => bricks.reverse(),
        RefineMode::U => return lego_u(size, resolution, c),
    }
    let cfg = assemble(bricks, mode, Resolution { h: resolution, w: resolution, c }, 1000, 0.75);
    cfg.validate()?;
    Ok(cfg)
}

/// U-shaped stack: full → mid → small → mid → full, each repeated size
/// receiving half of the reference depth (no parameter sharing).
fn lego_u(size: ModelSize, resolution: usize, c: usize) -> Result<StackConfig> {
    let (d, heads, [(l0, n0), (l1, n1), (l2, n2)]) = layout(size);
    let mid = if resolution == 32 { 8 } else { 16 };
    let l1 = if resolution == 32 { 4 } else { l1 };
    let half = |n: usize| n.div_ceil(2).max(1);
    let bricks = vec![
        spec(resolution, l2, d, half(n2), heads, resolution),
        spec(mid, l1, d, half(n1), heads, resolution),
        spec(4, l0, d, n0, heads, resolution),
        spec(mid, l1, d, half(n1), heads, resolution),
        spec(resolution, l2, d, half(n2), heads, resolution),
    ];
    let cfg = assemble(bricks, RefineMode::U, Resolution { h: resolution, w: resolution, c }, 1000, 0.75);
    cfg.validate()?;
    Ok(cfg)
}

/// Single image-brick baseline equivalent to a DiT-L with 2x2 patches at 64x64.
pub fn dit_l_baseline() -> StackConfig {
    let bricks = vec![spec(64, 2, 1024, 24, 16, 64)];
    assemble(bricks, RefineMode::Pg, Resolution { h: 64, w: 64, c: 3 }, 1000, 1.0)
}

/// Desk-scale stack at `16x16x3`, two classes, d = 64, bricks 4 / 8 / 16
/// with depths 1 / 2 / 2 (PG order; PR reverses it).
pub fn lego_s_mini(mode: RefineMode) -> StackConfig {
    let mut bricks = vec![
        BrickSpec::new(4, 2, 64, 1, 4, BrickKind::PatchBrick),
        BrickSpec::new(8, 4, 64, 2, 4, BrickKind::PatchBrick),
        BrickSpec::new(16, 2, 64, 2, 4, BrickKind::ImageBrick),
    ];
    if mode == RefineMode::Pr {
        bricks.reverse();
    }
    let mut cfg = assemble(bricks, mode, Resolution { h: 16, w: 16, c: 3 }, 2, 0.75);
    cfg.precond = Preconditioning::Ddpm;
    cfg.time_freq_dim = 64;
    cfg
}
