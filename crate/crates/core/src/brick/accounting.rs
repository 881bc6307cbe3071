//! Exact parameter counts and analytic FLOPs.
//!
//! FLOPs count a multiply-add as two operations and cover the matrix products
//! only (token embedding, qkv/proj/MLP per token, both attention products per
//! sequence, adaLN modulation per image, decoder); norms, softmax and
//! activations are ignored.

use alloc::vec::Vec;

use super::BrickSpec;
use crate::patch::sampled_count;
use crate::skip::SkipSchedule;

fn linear_params(fan_in: usize, fan_out: usize) -> u64 {
    (fan_in * fan_out + fan_out) as u64
}

pub(crate) fn brick_params(spec: &BrickSpec, image_channels: usize) -> u64 {
    let d = spec.d;
    let h = spec.hidden();
    let field = spec.l * spec.l;
    let cin = BrickSpec::input_channels(image_channels);
    let block = linear_params(d, 6 * d)
        + linear_params(d, 3 * d)
        + linear_params(d, d)
        + linear_params(d, h)
        + linear_params(h, d);
    linear_params(field * cin, d)
        + (spec.tokens() * d) as u64
        + spec.depth as u64 * block
        + linear_params(d, 2 * d)
        + linear_params(d, field * image_channels)
}

pub(crate) fn cond_params(d: usize, freq_dim: usize, num_classes: usize) -> u64 {
    linear_params(freq_dim, d) + linear_params(d, d) + ((num_classes + 1) * d + d) as u64
}

/// Scalar parameters across all bricks plus the shared conditioning embedder.
pub fn param_count(specs: &[BrickSpec], image_channels: usize, num_classes: usize, freq_dim: usize) -> u64 {
    let bricks: u64 = specs.iter().map(|s| brick_params(s, image_channels)).sum();
    let d = specs.first().map_or(0, |s| s.d);
    bricks + if specs.is_empty() { 0 } else { cond_params(d, freq_dim, num_classes) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsMode {
    /// Patch-bricks see only their sampled fraction of patches.
    Train,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrickFlops {
    pub params: u64,
    /// FLOPs of one full evaluation of this brick on one image.
    pub flops: f64,
    /// Weight applied to `flops` (sampled fraction or share of active steps).
    pub weight: f64,
}

fn brick_flops(spec: &BrickSpec, c: usize, patches: usize) -> f64 {
    let d = spec.d as f64;
    let hid = spec.hidden() as f64;
    let n = spec.tokens() as f64;
    let field = (spec.l * spec.l) as f64;
    let cin = BrickSpec::input_channels(c) as f64;
    let p = patches as f64;
    let tokens = p * n;
    let per_token_block = 2.0 * (3.0 * d * d + d * d + 2.0 * d * hid);
    let attn_per_seq_block = 4.0 * n * n * d;
    let modulation = 2.0 * d * 6.0 * d;
    2.0 * tokens * field * cin * d
        + spec.depth as f64 * (tokens * per_token_block + p * attn_per_seq_block + modulation)
        + 2.0 * d * 2.0 * d
        + 2.0 * tokens * d * field * c as f64
}

/// Per-brick breakdown behind [`flops_estimate`].
pub fn flops_breakdown(
    specs: &[BrickSpec],
    resolution: (usize, usize, usize),
    mode: FlopsMode,
    fractions: &[f64],
    skip: Option<&SkipSchedule>,
) -> Vec<BrickFlops> {
    let (h, w, c) = resolution;
    let activity = skip.map(|s| s.activity());
    specs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let total = (h / s.r) * (w / s.r);
            let patches = match mode {
                FlopsMode::Train => sampled_count(total, fractions.get(k).copied().unwrap_or(1.0)),
                FlopsMode::Sample => total,
            };
            let weight = match (mode, &activity) {
                (FlopsMode::Sample, Some(a)) => a.get(k).copied().unwrap_or(1.0),
                _ => 1.0,
            };
            BrickFlops {
                params: brick_params(s, c),
                flops: brick_flops(s, c, patches),
                weight,
            }
        })
        .collect()
}

/// FLOPs per image per forward pass. Under a skip schedule the cost is the
/// average over sampling steps of the active bricks.
pub fn flops_estimate(
    specs: &[BrickSpec],
    resolution: (usize, usize, usize),
    mode: FlopsMode,
    fractions: &[f64],
    skip: Option<&SkipSchedule>,
    freq_dim: usize,
) -> f64 {
    let bricks: f64 = flops_breakdown(specs, resolution, mode, fractions, skip)
        .iter()
        .map(|b| b.flops * b.weight)
        .sum();
    let d = specs.first().map_or(0, |s| s.d) as f64;
    let embedder = if specs.is_empty() { 0.0 } else { 2.0 * (freq_dim as f64 * d + d * d) };
    bricks + embedder
}
