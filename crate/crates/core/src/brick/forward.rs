//! Batched brick evaluation over many patches at once, with the trace needed
//! for the hand-written backward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::nn::{attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, silu, silu_grad, ModView};
use super::{BrickParams, BrickSpec};
use crate::real::Real;

/// Patches to refine in one call. `patches` holds `seqs` patches of
/// `r x r x C_in` (HWC) values; patch `s` is conditioned on row
/// `seq_image[s]` of `cond` (`images x d`).
pub struct BrickBatch<'a, F> {
    pub patches: &'a [F],
    pub seq_image: &'a [usize],
    pub cond: &'a [F],
    pub images: usize,
}

struct BlockTrace<F> {
    modv: Vec<F>,
    xh1: Vec<F>,
    rstd1: Vec<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    ao: Vec<F>,
    a: Vec<F>,
    xh2: Vec<F>,
    rstd2: Vec<F>,
    h2: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
    m: Vec<F>,
}

pub struct BrickTrace<F> {
    t0: Vec<F>,
    silu_c: Vec<F>,
    blocks: Vec<BlockTrace<F>>,
    fmod: Vec<F>,
    xhf: Vec<F>,
    rstdf: Vec<F>,
    hf: Vec<F>,
    /// Token states entering the first block, then after each block.
    pub residuals: Vec<Vec<F>>,
}

/// `seqs` patches of `r x r x ch` to `(seqs * n) x (l * l * ch)` token rows.
pub(crate) fn tokens_from_patches<F: Real>(patches: &[F], seqs: usize, r: usize, l: usize, ch: usize) -> Vec<F> {
    let m = r / l;
    let n = m * m;
    let width = l * l * ch;
    let mut out = vec![F::zero(); seqs * n * width];
    let run = l * ch;
    for s in 0..seqs {
        let patch = &patches[s * r * r * ch..(s + 1) * r * r * ch];
        for a in 0..m {
            for b in 0..m {
                let row = (s * n + a * m + b) * width;
                for yy in 0..l {
                    let src = ((a * l + yy) * r + b * l) * ch;
                    out[row + yy * run..row + (yy + 1) * run].copy_from_slice(&patch[src..src + run]);
                }
            }
        }
    }
    out
}

/// Inverse of [`tokens_from_patches`].
pub(crate) fn patches_from_tokens<F: Real>(tokens: &[F], seqs: usize, r: usize, l: usize, ch: usize) -> Vec<F> {
    let m = r / l;
    let n = m * m;
    let width = l * l * ch;
    let mut out = vec![F::zero(); seqs * r * r * ch];
    let run = l * ch;
    for s in 0..seqs {
        let patch = &mut out[s * r * r * ch..(s + 1) * r * r * ch];
        for a in 0..m {
            for b in 0..m {
                let row = (s * n + a * m + b) * width;
                for yy in 0..l {
                    let dst = ((a * l + yy) * r + b * l) * ch;
                    patch[dst..dst + run].copy_from_slice(&tokens[row + yy * run..row + (yy + 1) * run]);
                }
            }
        }
    }
    out
}

pub(crate) fn add_positions<F: Real>(x: &mut [F], pos: &[F], n: usize, d: usize) {
    for (row, xr) in x.chunks_mut(d).enumerate() {
        let slot = row % n;
        for (v, p) in xr.iter_mut().zip(&pos[slot * d..(slot + 1) * d]) {
            *v += *p;
        }
    }
}

/// Returns `seqs x (r * r * C)` decoded patches, plus the trace when asked.
pub fn forward_batch<F: Real>(
    spec: &BrickSpec,
    params: &BrickParams<F>,
    image_channels: usize,
    batch: &BrickBatch<'_, F>,
    keep_trace: bool,
) -> (Vec<F>, Option<BrickTrace<F>>) {
    let (r, l, d, n) = (spec.r, spec.l, spec.d, spec.tokens());
    let cin = BrickSpec::input_channels(image_channels);
    let seqs = batch.seq_image.len();
    debug_assert_eq!(batch.patches.len(), seqs * r * r * cin);
    let rows = seqs * n;
    let images = batch.images;

    let t0 = tokens_from_patches(batch.patches, seqs, r, l, cin);
    let mut x = params.embed.forward(&t0, rows);
    add_positions(&mut x, &params.pos.data, n, d);

    let silu_c: Vec<F> = batch.cond.iter().map(|&v| silu(v)).collect();
    let mut traces = Vec::new();
    let mut residuals = Vec::new();
    if keep_trace {
        residuals.push(x.clone());
    }

    for block in &params.blocks {
        let modv = block.modulation.forward(&silu_c, images);
        let mv = ModView {
            modv: &modv,
            stride: 6 * d,
            d,
            seq_image: batch.seq_image,
            rows_per_seq: n,
        };
        let (xh1, rstd1) = layer_norm(&x, d);
        let h1 = mv.modulate(&xh1, 0, 1);
        let qkv = block.qkv.forward(&h1, rows);
        let (ao, probs) = attention(&qkv, seqs, n, d, spec.heads);
        let a = block.proj.forward(&ao, rows);
        mv.gated_add(&mut x, &a, 2);
        let (xh2, rstd2) = layer_norm(&x, d);
        let h2 = mv.modulate(&xh2, 3, 4);
        let f1 = block.fc1.forward(&h2, rows);
        let g: Vec<F> = f1.iter().map(|&v| gelu(v)).collect();
        let m = block.fc2.forward(&g, rows);
        mv.gated_add(&mut x, &m, 5);
        if keep_trace {
            residuals.push(x.clone());
            traces.push(BlockTrace {
                modv,
                xh1,
                rstd1,
                h1,
                qkv,
                probs,
                ao,
                a,
                xh2,
                rstd2,
                h2,
                f1,
                g,
                m,
            });
        }
    }

    let fmod = params.final_mod.forward(&silu_c, images);
    let fv = ModView {
        modv: &fmod,
        stride: 2 * d,
        d,
        seq_image: batch.seq_image,
        rows_per_seq: n,
    };
    let (xhf, rstdf) = layer_norm(&x, d);
    let hf = fv.modulate(&xhf, 0, 1);
    let y = params.decoder.forward(&hf, rows);
    let out = patches_from_tokens(&y, seqs, r, l, image_channels);

    let trace = keep_trace.then_some(BrickTrace {
        t0,
        silu_c,
        blocks: traces,
        fmod,
        xhf,
        rstdf,
        hf,
        residuals,
    });
    (out, trace)
}

/// Accumulates parameter gradients into `grads`; returns the gradient with
/// respect to the conditioning rows and, when asked, the input patches.
pub fn backward_batch<F: Real>(
    spec: &BrickSpec,
    params: &BrickParams<F>,
    image_channels: usize,
    batch: &BrickBatch<'_, F>,
    trace: &BrickTrace<F>,
    d_out: &[F],
    grads: &mut BrickParams<F>,
    need_input_grad: bool,
) -> (Vec<F>, Option<Vec<F>>) {
    let (r, l, d, n) = (spec.r, spec.l, spec.d, spec.tokens());
    let cin = BrickSpec::input_channels(image_channels);
    let seqs = batch.seq_image.len();
    let rows = seqs * n;
    let images = batch.images;

    let dy = tokens_from_patches(d_out, seqs, r, l, image_channels);
    let dhf = params
        .decoder
        .backward(&trace.hf, rows, &dy, &mut grads.decoder, true)
        .expect("dx requested");
    let fv = ModView {
        modv: &trace.fmod,
        stride: 2 * d,
        d,
        seq_image: batch.seq_image,
        rows_per_seq: n,
    };
    let mut dfmod = vec![F::zero(); images * 2 * d];
    let dxhf = fv.modulate_backward(&trace.xhf, &dhf, 0, 1, &mut dfmod);
    let mut dx = vec![F::zero(); rows * d];
    layer_norm_backward(&trace.xhf, &trace.rstdf, &dxhf, d, &mut dx);
    let mut dsilu = params
        .final_mod
        .backward(&trace.silu_c, images, &dfmod, &mut grads.final_mod, true)
        .expect("dx requested");

    for ((block, bt), bg) in params
        .blocks
        .iter()
        .zip(&trace.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        let mv = ModView {
            modv: &bt.modv,
            stride: 6 * d,
            d,
            seq_image: batch.seq_image,
            rows_per_seq: n,
        };
        let mut dmod = vec![F::zero(); images * 6 * d];

        let dm = mv.gated_backward(&bt.m, &dx, 5, &mut dmod);
        let mut dg = block.fc2.backward(&bt.g, rows, &dm, &mut bg.fc2, true).expect("dx");
        for (g, &f) in dg.iter_mut().zip(&bt.f1) {
            *g *= gelu_grad(f);
        }
        let dh2 = block.fc1.backward(&bt.h2, rows, &dg, &mut bg.fc1, true).expect("dx");
        let dxh2 = mv.modulate_backward(&bt.xh2, &dh2, 3, 4, &mut dmod);
        layer_norm_backward(&bt.xh2, &bt.rstd2, &dxh2, d, &mut dx);

        let da = mv.gated_backward(&bt.a, &dx, 2, &mut dmod);
        let dao = block.proj.backward(&bt.ao, rows, &da, &mut bg.proj, true).expect("dx");
        let dqkv = attention_backward(&bt.qkv, &bt.probs, &dao, seqs, n, d, spec.heads);
        let dh1 = block.qkv.backward(&bt.h1, rows, &dqkv, &mut bg.qkv, true).expect("dx");
        let dxh1 = mv.modulate_backward(&bt.xh1, &dh1, 0, 1, &mut dmod);
        layer_norm_backward(&bt.xh1, &bt.rstd1, &dxh1, d, &mut dx);

        let ds = block
            .modulation
            .backward(&trace.silu_c, images, &dmod, &mut bg.modulation, true)
            .expect("dx");
        for (a, b) in dsilu.iter_mut().zip(&ds) {
            *a += *b;
        }
    }

    for (row, g) in dx.chunks(d).enumerate() {
        let slot = row % n;
        for (p, v) in grads.pos.data[slot * d..(slot + 1) * d].iter_mut().zip(g) {
            *p += *v;
        }
    }
    let dt0 = params.embed.backward(&trace.t0, rows, &dx, &mut grads.embed, need_input_grad);
    let d_patches = dt0.map(|t| patches_from_tokens(&t, seqs, r, l, cin));

    let d_cond = dsilu
        .iter()
        .zip(batch.cond)
        .map(|(&g, &c)| g * silu_grad(c))
        .collect();
    (d_cond, d_patches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_layout_round_trips() {
        let (seqs, r, l, ch) = (3, 8, 2, 5);
        let src: Vec<f64> = (0..seqs * r * r * ch).map(|i| i as f64).collect();
        let t = tokens_from_patches(&src, seqs, r, l, ch);
        // token (a=1, b=2) of patch 0, first pixel is patch pixel (2, 4)
        let m = r / l;
        let row = m + 2;
        assert_eq!(t[row * l * l * ch], src[(2 * r + 4) * ch]);
        assert_eq!(patches_from_tokens(&t, seqs, r, l, ch), src);
    }
}
