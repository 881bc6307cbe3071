//! A single brick: local receptive fields are flattened into tokens, refined
//! by DiT blocks with adaLN-zero conditioning, and decoded back into an
//! `r x r` patch. Bricks see one patch at a time; nothing crosses patch
//! boundaries inside a brick.

mod accounting;
mod cond;
mod forward;
pub(crate) mod nn;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Image, Tensor};

pub use accounting::{flops_breakdown, flops_estimate, param_count, BrickFlops, FlopsMode};
pub use cond::{timestep_features, CondParams, CondTrace};
pub use forward::{backward_batch, forward_batch, BrickBatch, BrickTrace};
pub use nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrickKind {
    PatchBrick,
    ImageBrick,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrickSpec {
    /// Patch edge in pixels.
    pub r: usize,
    /// Local receptive field edge; one token per `l x l` tile.
    pub l: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub kind: BrickKind,
}

impl BrickSpec {
    pub fn new(r: usize, l: usize, d: usize, depth: usize, heads: usize, kind: BrickKind) -> Self {
        BrickSpec {
            r,
            l,
            d,
            depth,
            heads,
            mlp_ratio: 4,
            kind,
        }
    }

    pub fn tokens_per_side(&self) -> usize {
        self.r / self.l
    }

    /// Attention span `(r / l)^2`.
    pub fn tokens(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }

    /// Channels fed to the token embedding: noisy image, previous estimate and
    /// the two coordinate channels.
    pub fn input_channels(image_channels: usize) -> usize {
        2 * image_channels + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.l == 0 || !self.r.is_multiple_of(self.l) {
            return Err(Error::Config(format!(
                "receptive field l = {} must divide brick size r = {}",
                self.l, self.r
            )));
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::param("mlp_ratio", "must be positive"));
        }
        Ok(())
    }
}

/// One DiT block. The modulation output is laid out
/// `[shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams<F> {
    pub modulation: Linear<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrickParams<F> {
    pub embed: Linear<F>,
    pub pos: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    /// `[shift, scale]` for the final norm.
    pub final_mod: Linear<F>,
    pub decoder: Linear<F>,
}

const INIT_STD: f64 = 0.02;

impl<F: Real> BlockParams<F> {
    fn zeros(d: usize, hidden: usize) -> Self {
        BlockParams {
            modulation: Linear::zeros(d, 6 * d),
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            fc1: Linear::zeros(d, hidden),
            fc2: Linear::zeros(hidden, d),
        }
    }

    fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let mut modulation = Linear::normal(d, 6 * d, INIT_STD, rng);
        zero_columns(&mut modulation, 2 * d..3 * d);
        zero_columns(&mut modulation, 5 * d..6 * d);
        BlockParams {
            modulation,
            qkv: Linear::xavier(d, 3 * d, rng),
            proj: Linear::xavier(d, d, rng),
            fc1: Linear::xavier(d, hidden, rng),
            fc2: Linear::xavier(hidden, d, rng),
        }
    }
}

fn zero_columns<F: Real>(l: &mut Linear<F>, cols: core::ops::Range<usize>) {
    let out = l.fan_out();
    for row in l.w.data.chunks_mut(out) {
        row[cols.clone()].iter_mut().for_each(|v| *v = F::zero());
    }
    l.b.data[cols].iter_mut().for_each(|v| *v = F::zero());
}

impl<F: Real> BrickParams<F> {
    pub fn zeros(spec: &BrickSpec, image_channels: usize) -> Self {
        let cin = BrickSpec::input_channels(image_channels);
        let field = spec.l * spec.l;
        BrickParams {
            embed: Linear::zeros(field * cin, spec.d),
            pos: Tensor::zeros(&[spec.tokens(), spec.d]),
            blocks: (0..spec.depth).map(|_| BlockParams::zeros(spec.d, spec.hidden())).collect(),
            final_mod: Linear::zeros(spec.d, 2 * spec.d),
            decoder: Linear::zeros(spec.d, field * image_channels),
        }
    }

    /// adaLN-zero initialization: residual gates and the decoder start at
    /// exactly zero, so every block is the identity and the brick outputs zeros.
    pub fn init<R: Rng + ?Sized>(spec: &BrickSpec, image_channels: usize, rng: &mut R) -> Self {
        let cin = BrickSpec::input_channels(image_channels);
        let field = spec.l * spec.l;
        let mut pos = Tensor::zeros(&[spec.tokens(), spec.d]);
        nn::fill_normal(&mut pos.data, INIT_STD, rng);
        BrickParams {
            embed: Linear::xavier(field * cin, spec.d, rng),
            pos,
            blocks: (0..spec.depth)
                .map(|_| BlockParams::init(spec.d, spec.hidden(), rng))
                .collect(),
            final_mod: Linear::normal(spec.d, 2 * spec.d, INIT_STD, rng),
            decoder: Linear::zeros(spec.d, field * image_channels),
        }
    }

    /// Image channels `C`, recovered from `fan_in = l^2 (2C + 2)` and `fan_out = l^2 C`.
    pub fn image_channels(&self) -> usize {
        let field = (self.embed.fan_in() - 2 * self.decoder.fan_out()) / 2;
        self.decoder.fan_out() / field.max(1)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        visit_linear(&self.embed, &format!("{prefix}.embed"), f);
        f(format!("{prefix}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            visit_linear(&b.modulation, &format!("{p}.modulation"), f);
            visit_linear(&b.qkv, &format!("{p}.qkv"), f);
            visit_linear(&b.proj, &format!("{p}.proj"), f);
            visit_linear(&b.fc1, &format!("{p}.fc1"), f);
            visit_linear(&b.fc2, &format!("{p}.fc2"), f);
        }
        visit_linear(&self.final_mod, &format!("{prefix}.final_mod"), f);
        visit_linear(&self.decoder, &format!("{prefix}.decoder"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        visit_linear_mut(&mut self.embed, &format!("{prefix}.embed"), f);
        f(format!("{prefix}.pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.block{i}");
            visit_linear_mut(&mut b.modulation, &format!("{p}.modulation"), f);
            visit_linear_mut(&mut b.qkv, &format!("{p}.qkv"), f);
            visit_linear_mut(&mut b.proj, &format!("{p}.proj"), f);
            visit_linear_mut(&mut b.fc1, &format!("{p}.fc1"), f);
            visit_linear_mut(&mut b.fc2, &format!("{p}.fc2"), f);
        }
        visit_linear_mut(&mut self.final_mod, &format!("{prefix}.final_mod"), f);
        visit_linear_mut(&mut self.decoder, &format!("{prefix}.decoder"), f);
    }

    pub fn param_len(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn visit_linear<'a, F>(l: &'a Linear<F>, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
    f(format!("{prefix}.w"), &l.w);
    f(format!("{prefix}.b"), &l.b);
}

pub(crate) fn visit_linear_mut<'a, F>(
    l: &'a mut Linear<F>,
    prefix: &str,
    f: &mut dyn FnMut(String, &'a mut Tensor<F>),
) {
    f(format!("{prefix}.w"), &mut l.w);
    f(format!("{prefix}.b"), &mut l.b);
}

fn check_params<F: Real>(spec: &BrickSpec, params: &BrickParams<F>, image_channels: usize) -> Result<()> {
    let want = BrickParams::<F>::zeros(spec, image_channels);
    let mut expected = Vec::new();
    want.visit("brick", &mut |name, t| expected.push((name, t.shape.clone())));
    let mut i = 0;
    let mut err = None;
    params.visit("brick", &mut |name, t| {
        if err.is_none() {
            match expected.get(i) {
                Some((n, s)) if *n == name && *s == t.shape => {}
                Some((n, s)) => err = Some(Error::shape(format!("tensor {n}"), s, &t.shape)),
                None => err = Some(Error::Structure(format!("unexpected tensor {name}"))),
            }
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != expected.len() {
        return Err(Error::Structure(format!(
            "brick has {i} tensors, spec needs {}",
            expected.len()
        )));
    }
    Ok(())
}

/// Embeds one `r x r x C_in` patch into `(r / l)^2` tokens of width `d`
/// (shared projection of every flattened field plus a learned per-slot offset).
pub fn tokenize<F: Real>(patch: &Image<F>, spec: &BrickSpec, params: &BrickParams<F>) -> Result<Tensor<F>> {
    spec.validate()?;
    let cin = params.embed.fan_in() / (spec.l * spec.l);
    if patch.h != spec.r || patch.w != spec.r || patch.c != cin {
        return Err(Error::shape("tokenize patch", &[spec.r, spec.r, cin], &patch.shape()));
    }
    let t0 = forward::tokens_from_patches(&patch.data, 1, spec.r, spec.l, cin);
    let mut x = params.embed.forward(&t0, spec.tokens());
    forward::add_positions(&mut x, &params.pos.data, spec.tokens(), spec.d);
    Tensor::from_vec(&[spec.tokens(), spec.d], x)
}

/// Refines one patch: concatenates `[x_t, previous estimate, coordinates]`,
/// runs the transformer trunk conditioned on `(time, class)` and decodes an
/// `r x r x C` patch. `prev = None` encodes the empty input of the bottom brick.
#[allow(clippy::too_many_arguments)]
pub fn brick_forward<F: Real>(
    xt_patch: &Image<F>,
    prev_patch: Option<&Image<F>>,
    coords: &Image<f64>,
    time: f64,
    class: Option<usize>,
    cond: &CondParams<F>,
    spec: &BrickSpec,
    params: &BrickParams<F>,
) -> Result<Image<F>> {
    spec.validate()?;
    let c = xt_patch.c;
    check_params(spec, params, c)?;
    if xt_patch.h != spec.r || xt_patch.w != spec.r {
        return Err(Error::shape("x_t patch", &[spec.r, spec.r, c], &xt_patch.shape()));
    }
    if coords.shape() != [spec.r, spec.r, 2] {
        return Err(Error::shape("coordinate patch", &[spec.r, spec.r, 2], &coords.shape()));
    }
    if let Some(p) = prev_patch {
        xt_patch.ensure_same_shape(p, "previous-estimate patch")?;
    }
    let cin = BrickSpec::input_channels(c);
    let mut input = vec![F::zero(); spec.r * spec.r * cin];
    for px in 0..spec.r * spec.r {
        let dst = &mut input[px * cin..(px + 1) * cin];
        dst[..c].copy_from_slice(&xt_patch.data[px * c..(px + 1) * c]);
        if let Some(p) = prev_patch {
            dst[c..2 * c].copy_from_slice(&p.data[px * c..(px + 1) * c]);
        }
        dst[2 * c] = F::of(coords.data[px * 2]);
        dst[2 * c + 1] = F::of(coords.data[px * 2 + 1]);
    }
    let (mut cvec, _) = cond.forward(&[time], &[class], false)?;
    if prev_patch.is_none() {
        for (v, f) in cvec.iter_mut().zip(&cond.no_prev.data) {
            *v += *f;
        }
    }
    let batch = BrickBatch {
        patches: &input,
        seq_image: &[0],
        cond: &cvec,
        images: 1,
    };
    let (out, _) = forward_batch(spec, params, c, &batch, false);
    Image::from_vec(spec.r, spec.r, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini() -> BrickSpec {
        BrickSpec::new(8, 4, 16, 2, 2, BrickKind::PatchBrick)
    }

    #[test]
    fn token_counts() {
        let s = BrickSpec::new(16, 8, 8, 1, 1, BrickKind::PatchBrick);
        assert_eq!(s.tokens(), 4);
        let s = BrickSpec::new(16, 16, 8, 1, 1, BrickKind::PatchBrick);
        assert_eq!(s.tokens(), 1);
        let s = BrickSpec::new(64, 2, 8, 1, 1, BrickKind::ImageBrick);
        assert_eq!(s.tokens(), 1024);
    }

    #[test]
    fn tokenize_shape_and_channel_check() {
        let spec = mini();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = BrickParams::<f64>::init(&spec, 3, &mut rng);
        let patch = Image::<f64>::filled(8, 8, 8, 0.1);
        let tok = tokenize(&patch, &spec, &params).unwrap();
        assert_eq!(tok.shape, vec![4, 16]);
        let bad = Image::<f64>::filled(8, 8, 7, 0.1);
        assert!(matches!(tokenize(&bad, &spec, &params), Err(Error::Shape { .. })));
    }

    #[test]
    fn init_zeroes_gates_and_decoder() {
        let spec = mini();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BrickParams::<f32>::init(&spec, 3, &mut rng);
        let d = spec.d;
        for b in &p.blocks {
            for row in b.modulation.w.data.chunks(6 * d) {
                assert!(row[2 * d..3 * d].iter().all(|&v| v == 0.0));
                assert!(row[5 * d..].iter().all(|&v| v == 0.0));
                assert!(row[..d].iter().any(|&v| v != 0.0));
            }
        }
        assert!(p.decoder.w.data.iter().chain(&p.decoder.b.data).all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_brick_outputs_zero() {
        let spec = mini();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BrickParams::<f32>::init(&spec, 3, &mut rng);
        let cond = CondParams::<f32>::init(spec.d, 32, 4, &mut rng);
        let xt = Image::<f32>::from_fn(8, 8, 3, |y, x, c| (y + 2 * x + c) as f32 * 0.1);
        let coords = crate::patch::coord_grid(8, 8).unwrap();
        let out = brick_forward(&xt, None, &coords, 17.0, Some(1), &cond, &spec, &p).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), [8, 8, 3]);
    }

    #[test]
    fn mismatched_params_are_named() {
        let spec = mini();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = BrickParams::<f32>::init(&spec, 3, &mut rng);
        p.blocks[1].fc1 = Linear::zeros(16, 32);
        let cond = CondParams::<f32>::init(spec.d, 32, 4, &mut rng);
        let xt = Image::<f32>::zeros(8, 8, 3);
        let coords = crate::patch::coord_grid(8, 8).unwrap();
        let err = brick_forward(&xt, None, &coords, 1.0, None, &cond, &spec, &p).unwrap_err();
        match err {
            Error::Shape { context, .. } => assert!(context.contains("block1.fc1")),
            e => panic!("unexpected {e:?}"),
        }
    }
}
