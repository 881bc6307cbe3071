//! The recursive brick ensemble. Every element maps the full-resolution noisy
//! image and the previous element's full-resolution estimate to a refined
//! full-resolution estimate; skipped elements pass the estimate through.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::brick::{backward_batch, forward_batch, BrickBatch, BrickKind, BrickParams, BrickSpec, BrickTrace, CondParams};
use crate::error::{Error, Result};
use crate::patch::{coord_grid, sample_patch_linear, PatchGrid};
use crate::real::Real;
use crate::schedule::{edm_scalings, loss_weight, EdmParams, LossWeights, NoiseSchedule, WeightMode};
use crate::tensor::{Image, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// Brick sizes grow bottom to top.
    Pg,
    /// Brick sizes shrink bottom to top.
    Pr,
    /// Shrink, then grow.
    U,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Preconditioning {
    /// The network predicts the clean image directly from the unscaled `x_t`.
    Ddpm,
    /// `D(x; sigma) = c_skip x + c_out F(c_in x; c_noise)`, trained with
    /// log-normal `sigma ~ exp(N(p_mean, p_std^2))`.
    Edm {
        #[serde(flatten)]
        params: EdmParams,
        p_mean: f64,
        p_std: f64,
    },
}

impl Preconditioning {
    pub fn edm_default() -> Self {
        Preconditioning::Edm {
            params: EdmParams::default(),
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingScheme {
    /// Gradients flow through each brick's estimate into the bricks below.
    #[default]
    EndToEnd,
    /// Each brick sees the lower estimate as a constant.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

fn default_freq_dim() -> usize {
    256
}

fn default_drop() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    /// Bottom to top.
    pub bricks: Vec<BrickSpec>,
    pub mode: RefineMode,
    pub resolution: Resolution,
    pub num_classes: usize,
    /// Training-time sampling fraction per brick.
    pub patch_fraction: Vec<f64>,
    #[serde(default)]
    pub weights: LossWeights,
    pub precond: Preconditioning,
    #[serde(default = "default_freq_dim")]
    pub time_freq_dim: usize,
    /// Probability of replacing the label with the null class while training.
    #[serde(default = "default_drop")]
    pub class_drop_prob: f64,
    #[serde(default)]
    pub scheme: TrainingScheme,
}

/// Scale applied to `c_noise` before the sinusoidal time features.
pub const EDM_TIME_SCALE: f64 = 1000.0;

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let Resolution { h, w, c } = self.resolution;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!("resolution {h}x{w}x{c} must be positive")));
        }
        if self.bricks.is_empty() {
            return Err(Error::Config("a stack needs at least one brick".into()));
        }
        let d = self.bricks[0].d;
        for (k, b) in self.bricks.iter().enumerate() {
            b.validate()?;
            if h % b.r != 0 || w % b.r != 0 {
                return Err(Error::Config(format!(
                    "brick {} size {} does not divide resolution {h}x{w}",
                    k + 1,
                    b.r
                )));
            }
            let image = b.r == h && b.r == w;
            if image != (b.kind == BrickKind::ImageBrick) {
                return Err(Error::Config(format!(
                    "brick {} (r = {}) must be declared {}",
                    k + 1,
                    b.r,
                    if image { "image-brick" } else { "patch-brick" }
                )));
            }
            if b.d != d {
                return Err(Error::Config(format!(
                    "brick {} has d = {} but the shared conditioning embedder uses d = {d}",
                    k + 1,
                    b.d
                )));
            }
        }
        if self.patch_fraction.len() != self.bricks.len() {
            return Err(Error::Config(format!(
                "{} patch fractions for {} bricks",
                self.patch_fraction.len(),
                self.bricks.len()
            )));
        }
        if let Some(f) = self.patch_fraction.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::param("patch_fraction", format!("{f} not in (0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            return Err(Error::param("class_drop_prob", "must lie in [0, 1]"));
        }
        if self.time_freq_dim == 0 || !self.time_freq_dim.is_multiple_of(2) {
            return Err(Error::param("time_freq_dim", "must be a positive even number"));
        }
        if let Preconditioning::Edm { params, p_std, .. } = &self.precond {
            params.validate()?;
            if !(*p_std > 0.0) {
                return Err(Error::param("p_std", "must be positive"));
            }
            if self.weights.mode != WeightMode::Unit {
                return Err(Error::Config("EDM training uses its own sigma weighting; set weights to unit".into()));
            }
        }
        self.check_order()
    }

    fn check_order(&self) -> Result<()> {
        let sizes: Vec<usize> = self.bricks.iter().map(|b| b.r).collect();
        let inc = |s: &[usize]| s.windows(2).all(|w| w[0] < w[1]);
        let dec = |s: &[usize]| s.windows(2).all(|w| w[0] > w[1]);
        let ok = match self.mode {
            RefineMode::Pg => inc(&sizes),
            RefineMode::Pr => dec(&sizes),
            RefineMode::U => {
                let turn = sizes
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, &r)| r)
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                turn > 0 && turn + 1 < sizes.len() && dec(&sizes[..=turn]) && inc(&sizes[turn..])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("brick sizes {sizes:?} do not follow {:?} ordering", self.mode)))
        }
    }

    /// The same bricks stacked in reverse, swapping PG and PR.
    pub fn reversed(&self) -> Result<StackConfig> {
        let mut out = self.clone();
        out.bricks.reverse();
        out.patch_fraction.reverse();
        out.mode = match self.mode {
            RefineMode::Pg => RefineMode::Pr,
            RefineMode::Pr => RefineMode::Pg,
            RefineMode::U => RefineMode::U,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn image_channels(&self) -> usize {
        self.resolution.c
    }

    /// FNV-1a over the config's debug rendering; binds parameters to a layout.
    pub fn hash64(&self) -> u64 {
        struct Fnv(u64);
        impl core::fmt::Write for Fnv {
            fn write_str(&mut self, s: &str) -> core::fmt::Result {
                for b in s.bytes() {
                    self.0 ^= b as u64;
                    self.0 = self.0.wrapping_mul(0x100_0000_01b3);
                }
                Ok(())
            }
        }
        let mut h = Fnv(0xcbf2_9ce4_8422_2325);
        let _ = core::fmt::write(&mut h, format_args!("{self:?}"));
        h.0
    }
}

/// Noise level of one example: a discrete step (with its cumulative alpha) or
/// a continuous EDM sigma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Step { t: usize, alpha: f64 },
    Sigma(f64),
}

impl NoiseLevel {
    pub fn step(schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        Ok(NoiseLevel::Step {
            t,
            alpha: schedule.alpha(t)?,
        })
    }

    /// `(c_skip, c_out, c_in, time feature input)`.
    fn scalings(&self, precond: &Preconditioning) -> Result<(f64, f64, f64, f64)> {
        match (self, precond) {
            (NoiseLevel::Step { t, .. }, Preconditioning::Ddpm) => Ok((0.0, 1.0, 1.0, *t as f64)),
            (NoiseLevel::Sigma(s), Preconditioning::Edm { params, .. }) => {
                if !(*s > 0.0) {
                    return Err(Error::Domain(format!("network evaluated at sigma = {s}")));
                }
                let (a, b, c) = edm_scalings(*s, params.sigma_data);
                Ok((a, b, c, EDM_TIME_SCALE * libm::log(*s) / 4.0))
            }
            _ => Err(Error::Config(format!("noise level {self:?} does not match {precond:?}"))),
        }
    }

    /// Estimate used when no element is active: a zero noise prediction
    /// (discrete) or a zero network output (EDM).
    fn fallback<F: Real>(&self, xt: &Image<F>, precond: &Preconditioning) -> Result<Image<F>> {
        match (self, precond) {
            (NoiseLevel::Step { alpha, .. }, _) => {
                let k = F::of(1.0 / libm::sqrt(*alpha));
                Ok(xt.map(|v| v * k))
            }
            (NoiseLevel::Sigma(s), Preconditioning::Edm { params, .. }) => {
                let (c_skip, _, _) = edm_scalings(*s, params.sigma_data);
                let k = F::of(c_skip);
                Ok(xt.map(|v| v * k))
            }
            _ => Err(Error::Config("sigma level with discrete preconditioning".into())),
        }
    }
}

/// Black-box clean-image predictor that can sit in the stack like a brick.
pub trait Predictor<F>: Send + Sync {
    /// `(h, w, c)` the predictor operates at.
    fn resolution(&self) -> (usize, usize, usize);
    fn predict(&self, xt: &Image<F>, level: NoiseLevel, class: Option<usize>) -> Result<Image<F>>;
}

#[derive(Clone)]
pub struct ExternalBrick<F> {
    pub predictor: Arc<dyn Predictor<F>>,
    pub frozen: bool,
}

impl<F> core::fmt::Debug for ExternalBrick<F> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ExternalBrick").field("frozen", &self.frozen).finish()
    }
}

/// Wraps a pretrained predictor. External predictors expose no parameters to
/// the optimizer, so they must be frozen.
pub fn wrap_external_brick<F>(predictor: Arc<dyn Predictor<F>>, frozen: bool) -> Result<ExternalBrick<F>> {
    if !frozen {
        return Err(Error::Config(
            "external predictors expose no trainable parameters; wrap them frozen".into(),
        ));
    }
    Ok(ExternalBrick { predictor, frozen })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Native(usize),
    External(usize),
}

/// Per-element activity flags over the full element list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet(pub Vec<bool>);

impl ActiveSet {
    pub fn all(k: usize) -> Self {
        ActiveSet(vec![true; k])
    }

    pub fn only(k: usize, on: &[usize]) -> Self {
        let mut v = vec![false; k];
        for &i in on {
            if i >= 1 && i <= k {
                v[i - 1] = true;
            }
        }
        ActiveSet(v)
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.0.get(k).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackState<F> {
    pub cond: CondParams<F>,
    pub bricks: Vec<BrickParams<F>>,
    pub frozen: Vec<bool>,
    pub config_hash: u64,
}

impl<F: Real> StackState<F> {
    pub fn init<R: Rng + ?Sized>(config: &StackConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.image_channels();
        let d = config.bricks[0].d;
        let cond = CondParams::init(d, config.time_freq_dim, config.num_classes, rng);
        let bricks = config.bricks.iter().map(|s| BrickParams::init(s, c, rng)).collect();
        Ok(StackState {
            cond,
            bricks,
            frozen: vec![false; config.bricks.len()],
            config_hash: config.hash64(),
        })
    }

    pub fn zeros(config: &StackConfig) -> Self {
        let c = config.image_channels();
        let d = config.bricks.first().map_or(0, |b| b.d);
        StackState {
            cond: CondParams::zeros(d, config.time_freq_dim, config.num_classes),
            bricks: config.bricks.iter().map(|s| BrickParams::zeros(s, c)).collect(),
            frozen: vec![false; config.bricks.len()],
            config_hash: config.hash64(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(F::zero()));
        z
    }

    /// Visits every tensor in a fixed order: `cond.*`, then `brick{k}.*` (1-based).
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.cond.visit("cond", f);
        for (k, b) in self.bricks.iter().enumerate() {
            b.visit(&format!("brick{}", k + 1), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        self.cond.visit_mut("cond", f);
        for (k, b) in self.bricks.iter_mut().enumerate() {
            b.visit_mut(&format!("brick{}", k + 1), f);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn param_len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Brick index (0-based) owning a tensor name, `None` for the embedder.
    pub fn owner(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("brick")?;
        let end = rest.find('.')?;
        rest[..end].parse::<usize>().ok().map(|k| k - 1)
    }

    pub fn cast<G: Real>(&self) -> StackState<G> {
        let mut out: StackState<G> = StackState {
            cond: CondParams::zeros(0, 0, 0),
            bricks: Vec::new(),
            frozen: self.frozen.clone(),
            config_hash: self.config_hash,
        };
        // Rebuild by shape, then copy values in visit order.
        out.cond = CondParams {
            time_fc1: cast_linear(&self.cond.time_fc1),
            time_fc2: cast_linear(&self.cond.time_fc2),
            class_table: self.cond.class_table.cast(),
            no_prev: self.cond.no_prev.cast(),
        };
        out.bricks = self
            .bricks
            .iter()
            .map(|b| BrickParams {
                embed: cast_linear(&b.embed),
                pos: b.pos.cast(),
                blocks: b
                    .blocks
                    .iter()
                    .map(|blk| crate::brick::BlockParams {
                        modulation: cast_linear(&blk.modulation),
                        qkv: cast_linear(&blk.qkv),
                        proj: cast_linear(&blk.proj),
                        fc1: cast_linear(&blk.fc1),
                        fc2: cast_linear(&blk.fc2),
                    })
                    .collect(),
                final_mod: cast_linear(&b.final_mod),
                decoder: cast_linear(&b.decoder),
            })
            .collect();
        out
    }
}

fn cast_linear<F: Real, G: Real>(l: &crate::brick::Linear<F>) -> crate::brick::Linear<G> {
    crate::brick::Linear {
        w: l.w.cast(),
        b: l.b.cast(),
    }
}

#[derive(Debug, Clone)]
pub struct StackOutput<F> {
    pub x0: Vec<Image<F>>,
    /// No element was active; `x0` is the parameter-free fallback.
    pub fallback: bool,
}

/// Random draws behind one loss evaluation, exposed for inspection.
#[derive(Debug, Clone)]
pub struct LossDraws<F> {
    pub levels: Vec<NoiseLevel>,
    /// Class actually used (after label dropout).
    pub classes: Vec<Option<usize>>,
    pub xt: Vec<Image<F>>,
    /// `[native brick][example]` sampled linear patch indices.
    pub patches: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct LossReport<F> {
    /// Mean of the per-brick losses.
    pub total: f64,
    /// Batch mean of `lambda * mse` for each native brick.
    pub per_brick: Vec<f64>,
    pub draws: LossDraws<F>,
}

#[derive(Debug, Clone)]
pub struct Stack<F> {
    pub config: StackConfig,
    pub state: StackState<F>,
    externals: Vec<ExternalBrick<F>>,
    layout: Vec<Slot>,
}

struct BrickRun<F> {
    native: usize,
    inputs: Vec<F>,
    seq_image: Vec<usize>,
    seq_patch: Vec<usize>,
    cond: Vec<F>,
    trace: BrickTrace<F>,
    /// Prior element was a native brick whose estimate feeds this one.
    has_native_prev: bool,
    no_prev: bool,
}

impl<F: Real> Stack<F> {
    pub fn new(config: StackConfig, state: StackState<F>) -> Result<Self> {
        config.validate()?;
        if state.bricks.len() != config.bricks.len() {
            return Err(Error::Structure(format!(
                "state has {} bricks, config {}",
                state.bricks.len(),
                config.bricks.len()
            )));
        }
        let expected = StackState::<F>::zeros(&config);
        let mut shapes = Vec::new();
        expected.visit(&mut |n, t| shapes.push((n, t.shape.clone())));
        let mut got = Vec::new();
        state.visit(&mut |n, t| got.push((n, t.shape.clone())));
        if shapes != got {
            if let Some(((n, s), (_, g))) = shapes.iter().zip(&got).find(|(a, b)| a != b) {
                return Err(Error::shape(format!("tensor {n}"), s, g));
            }
            return Err(Error::Structure(format!("expected {} tensors, got {}", shapes.len(), got.len())));
        }
        let layout = (0..config.bricks.len()).map(Slot::Native).collect();
        Ok(Stack {
            config,
            state,
            externals: Vec::new(),
            layout,
        })
    }

    pub fn init<R: Rng + ?Sized>(config: StackConfig, rng: &mut R) -> Result<Self> {
        let state = StackState::init(&config, rng)?;
        Self::new(config, state)
    }

    /// Number of elements (native and external).
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn layout(&self) -> &[Slot] {
        &self.layout
    }

    /// Inserts an external element so that it becomes element `position` (1-based).
    pub fn insert_external(&mut self, position: usize, brick: ExternalBrick<F>) -> Result<()> {
        let Resolution { h, w, c } = self.config.resolution;
        let got = brick.predictor.resolution();
        if got != (h, w, c) {
            return Err(Error::shape("external predictor resolution", &[h, w, c], &[got.0, got.1, got.2]));
        }
        if position == 0 || position > self.layout.len() + 1 {
            return Err(Error::Index {
                what: "stack position",
                index: position,
                lo: 1,
                hi: self.layout.len() + 1,
            });
        }
        self.externals.push(brick);
        self.layout.insert(position - 1, Slot::External(self.externals.len() - 1));
        Ok(())
    }

    /// Element index (0-based) of the topmost element.
    pub fn top(&self) -> usize {
        self.layout.len() - 1
    }

    pub fn spec_of(&self, element: usize) -> Option<&BrickSpec> {
        match self.layout.get(element)? {
            Slot::Native(k) => self.config.bricks.get(*k),
            Slot::External(_) => None,
        }
    }

    fn check_batch(&self, xt: &[Image<F>], levels: &[NoiseLevel], classes: &[Option<usize>]) -> Result<()> {
        let Resolution { h, w, c } = self.config.resolution;
        if levels.len() != xt.len() || classes.len() != xt.len() {
            return Err(Error::shape("batch sizes (images, levels, classes)", &[xt.len(); 3], &[xt.len(), levels.len(), classes.len()]));
        }
        for x in xt {
            if x.shape() != [h, w, c] {
                return Err(Error::shape("x_t", &[h, w, c], &x.shape()));
            }
        }
        Ok(())
    }

    fn cond_rows(&self, times: &[f64], classes: &[Option<usize>], keep: bool) -> Result<(Vec<F>, Option<crate::brick::CondTrace<F>>)> {
        self.state.cond.forward(times, classes, keep)
    }

    fn with_no_prev(&self, cond: &[F]) -> Vec<F> {
        let d = self.state.cond.d();
        let mut out = cond.to_vec();
        for row in out.chunks_mut(d) {
            for (v, f) in row.iter_mut().zip(&self.state.cond.no_prev.data) {
                *v += *f;
            }
        }
        out
    }

    /// Assembles `[c_in x_t, prev, coords]` for the listed patches.
    #[allow(clippy::too_many_arguments)]
    fn gather_inputs(
        &self,
        grid: &PatchGrid,
        xt: &[Image<F>],
        c_in: &[f64],
        prev: Option<&[Image<F>]>,
        coords: &Image<F>,
        seq_image: &[usize],
        seq_patch: &[usize],
    ) -> Vec<F> {
        let c = self.config.resolution.c;
        let cin = BrickSpec::input_channels(c);
        let r = grid.r;
        let px = r * r;
        let mut out = vec![F::zero(); seq_image.len() * px * cin];
        let mut xbuf = vec![F::zero(); px * c];
        let mut pbuf = vec![F::zero(); px * c];
        let mut cbuf = vec![F::zero(); px * 2];
        for (s, (&b, &l)) in seq_image.iter().zip(seq_patch).enumerate() {
            grid.extract_into(&xt[b], l, &mut xbuf);
            grid.extract_into(coords, l, &mut cbuf);
            if let Some(p) = prev {
                grid.extract_into(&p[b], l, &mut pbuf);
            }
            let k = F::of(c_in[b]);
            let dst = &mut out[s * px * cin..(s + 1) * px * cin];
            for i in 0..px {
                let o = &mut dst[i * cin..(i + 1) * cin];
                for ch in 0..c {
                    o[ch] = xbuf[i * c + ch] * k;
                }
                if prev.is_some() {
                    o[c..2 * c].copy_from_slice(&pbuf[i * c..(i + 1) * c]);
                }
                o[2 * c] = cbuf[i * 2];
                o[2 * c + 1] = cbuf[i * 2 + 1];
            }
        }
        out
    }

    fn coords(&self) -> Result<Image<F>> {
        Ok(coord_grid(self.config.resolution.h, self.config.resolution.w)?.cast())
    }

    /// Clean-image estimate for a batch, running only the `active` elements
    /// (all when `None`).
    pub fn forward(
        &self,
        xt: &[Image<F>],
        levels: &[NoiseLevel],
        classes: &[Option<usize>],
        active: Option<&ActiveSet>,
    ) -> Result<StackOutput<F>> {
        self.check_batch(xt, levels, classes)?;
        if let Some(a) = active {
            if a.0.len() != self.layout.len() {
                return Err(Error::shape("active set", &[self.layout.len()], &[a.0.len()]));
            }
        }
        let precond = self.config.precond;
        let scal: Vec<(f64, f64, f64, f64)> = levels.iter().map(|l| l.scalings(&precond)).collect::<Result<_>>()?;
        let times: Vec<f64> = scal.iter().map(|s| s.3).collect();
        let c_in: Vec<f64> = scal.iter().map(|s| s.2).collect();
        let (cond, _) = self.cond_rows(&times, classes, false)?;
        let coords = self.coords()?;
        let Resolution { h, w, c } = self.config.resolution;

        let mut z: Option<Vec<Image<F>>> = None;
        for (e, slot) in self.layout.iter().enumerate() {
            if active.is_some_and(|a| !a.is_active(e)) {
                continue;
            }
            match *slot {
                Slot::External(i) => {
                    let p = &self.externals[i].predictor;
                    let out = xt
                        .iter()
                        .zip(levels)
                        .zip(classes)
                        .map(|((x, l), c)| p.predict(x, *l, *c))
                        .collect::<Result<Vec<_>>>()?;
                    z = Some(out);
                }
                Slot::Native(k) => {
                    let spec = &self.config.bricks[k];
                    let grid = PatchGrid::new(h, w, spec.r)?;
                    let seq_image: Vec<usize> = (0..xt.len()).flat_map(|b| core::iter::repeat_n(b, grid.len())).collect();
                    let seq_patch: Vec<usize> = (0..xt.len()).flat_map(|_| 0..grid.len()).collect();
                    let inputs = self.gather_inputs(&grid, xt, &c_in, z.as_deref(), &coords, &seq_image, &seq_patch);
                    let cond_k = if z.is_none() { self.with_no_prev(&cond) } else { cond.clone() };
                    let batch = BrickBatch {
                        patches: &inputs,
                        seq_image: &seq_image,
                        cond: &cond_k,
                        images: xt.len(),
                    };
                    let (out, _) = forward_batch(spec, &self.state.bricks[k], c, &batch, false);
                    let px = spec.r * spec.r * c;
                    let mut next = Vec::with_capacity(xt.len());
                    let mut buf = vec![F::zero(); px];
                    for (b, x) in xt.iter().enumerate() {
                        let (c_skip, c_out) = (F::of(scal[b].0), F::of(scal[b].1));
                        let mut img = Image::zeros(h, w, c);
                        for l in 0..grid.len() {
                            let s = b * grid.len() + l;
                            grid.extract_into(x, l, &mut buf);
                            for (v, f) in buf.iter_mut().zip(&out[s * px..(s + 1) * px]) {
                                *v = c_skip * *v + c_out * *f;
                            }
                            grid.insert_from(&mut img, l, &buf);
                        }
                        next.push(img);
                    }
                    z = Some(next);
                }
            }
        }
        match z {
            Some(x0) => Ok(StackOutput { x0, fallback: false }),
            None => {
                log::warn!("stack evaluated with an empty active set; using the parameter-free fallback");
                let x0 = xt
                    .iter()
                    .zip(levels)
                    .map(|(x, l)| l.fallback(x, &precond))
                    .collect::<Result<Vec<_>>>()?;
                Ok(StackOutput { x0, fallback: true })
            }
        }
    }

    /// Stochastic training objective (no gradients).
    pub fn training_loss<R: Rng + ?Sized>(
        &self,
        x0: &[Image<F>],
        classes: &[Option<usize>],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<LossReport<F>> {
        Ok(self.loss_impl(x0, classes, schedule, rng, false)?.0)
    }

    /// Training objective and its gradient with respect to every parameter.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        x0: &[Image<F>],
        classes: &[Option<usize>],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<(LossReport<F>, StackState<F>)> {
        let (report, grads) = self.loss_impl(x0, classes, schedule, rng, true)?;
        Ok((report, grads.expect("gradients requested")))
    }

    fn draw_levels<R: Rng + ?Sized>(
        &self,
        x0: &[Image<F>],
        classes: &[Option<usize>],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<(Vec<NoiseLevel>, Vec<Option<usize>>, Vec<Image<F>>)> {
        let mut levels = Vec::with_capacity(x0.len());
        let mut used = Vec::with_capacity(x0.len());
        let mut xt = Vec::with_capacity(x0.len());
        let lo = if self.config.weights.mode == WeightMode::SnrDelta { 2 } else { 1 };
        if schedule.steps() < lo {
            return Err(Error::Config("schedule too short for the snr-delta weighting".into()));
        }
        for (x, &class) in x0.iter().zip(classes) {
            let level = match self.config.precond {
                Preconditioning::Ddpm => NoiseLevel::step(schedule, rng.random_range(lo..=schedule.steps()))?,
                Preconditioning::Edm { p_mean, p_std, .. } => {
                    let n: f64 = StandardNormal.sample(rng);
                    NoiseLevel::Sigma(libm::exp(p_mean + p_std * n))
                }
            };
            let drop = rng.random::<f64>() < self.config.class_drop_prob;
            used.push(if drop { None } else { class });
            let eps: Vec<F> = (0..x.data.len())
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    F::of(v)
                })
                .collect();
            let noisy = match level {
                NoiseLevel::Step { alpha, .. } => {
                    let (a, s) = (F::of(libm::sqrt(alpha)), F::of(libm::sqrt(1.0 - alpha)));
                    x.data.iter().zip(&eps).map(|(&x, &e)| a * x + s * e).collect()
                }
                NoiseLevel::Sigma(sigma) => {
                    let s = F::of(sigma);
                    x.data.iter().zip(&eps).map(|(&x, &e)| x + s * e).collect()
                }
            };
            xt.push(Image::from_vec(x.h, x.w, x.c, noisy)?);
            levels.push(level);
        }
        Ok((levels, used, xt))
    }

    fn weight(&self, level: &NoiseLevel, schedule: &NoiseSchedule, k: usize) -> Result<f64> {
        match (level, &self.config.precond) {
            (NoiseLevel::Step { t, .. }, _) => loss_weight(&self.config.weights, schedule, *t, k + 1),
            (NoiseLevel::Sigma(s), Preconditioning::Edm { params, .. }) => Ok(params.loss_weight(*s)),
            _ => Err(Error::Config("sigma level with discrete preconditioning".into())),
        }
    }

    fn loss_impl<R: Rng + ?Sized>(
        &self,
        x0: &[Image<F>],
        classes: &[Option<usize>],
        schedule: &NoiseSchedule,
        rng: &mut R,
        want_grad: bool,
    ) -> Result<(LossReport<F>, Option<StackState<F>>)> {
        if x0.is_empty() {
            return Err(Error::param("batch", "empty training batch"));
        }
        let dummy_levels = vec![NoiseLevel::Sigma(1.0); x0.len()];
        self.check_batch(x0, &dummy_levels, classes)?;
        let Resolution { h, w, c } = self.config.resolution;
        let batch = x0.len();
        let (levels, used, xt) = self.draw_levels(x0, classes, schedule, rng)?;
        let precond = self.config.precond;
        let scal: Vec<(f64, f64, f64, f64)> = levels.iter().map(|l| l.scalings(&precond)).collect::<Result<_>>()?;
        let times: Vec<f64> = scal.iter().map(|s| s.3).collect();
        let c_in: Vec<f64> = scal.iter().map(|s| s.2).collect();
        let (cond, cond_trace) = self.cond_rows(&times, &used, want_grad)?;
        let coords = self.coords()?;
        let natives = self.config.bricks.len();

        let mut z: Option<Vec<Image<F>>> = None;
        let mut prev_native = false;
        let mut runs: Vec<BrickRun<F>> = Vec::new();
        let mut per_brick = vec![0.0; natives];
        let mut grad_seeds: Vec<Vec<F>> = Vec::new();
        let mut all_patches = vec![Vec::new(); natives];

        for slot in &self.layout {
            match *slot {
                Slot::External(i) => {
                    let p = &self.externals[i].predictor;
                    let out = xt
                        .iter()
                        .zip(&levels)
                        .zip(&used)
                        .map(|((x, l), c)| p.predict(x, *l, *c))
                        .collect::<Result<Vec<_>>>()?;
                    z = Some(out);
                    prev_native = false;
                }
                Slot::Native(k) => {
                    let spec = &self.config.bricks[k];
                    let grid = PatchGrid::new(h, w, spec.r)?;
                    let mut seq_image = Vec::new();
                    let mut seq_patch = Vec::new();
                    for b in 0..batch {
                        let picked = sample_patch_linear(&grid, self.config.patch_fraction[k], rng)?;
                        seq_image.extend(core::iter::repeat_n(b, picked.len()));
                        seq_patch.extend(picked.iter().copied());
                        all_patches[k].push(picked);
                    }
                    let inputs = self.gather_inputs(&grid, &xt, &c_in, z.as_deref(), &coords, &seq_image, &seq_patch);
                    let no_prev = z.is_none();
                    let cond_k = if no_prev { self.with_no_prev(&cond) } else { cond.clone() };
                    let bb = BrickBatch {
                        patches: &inputs,
                        seq_image: &seq_image,
                        cond: &cond_k,
                        images: batch,
                    };
                    let (out, trace) = forward_batch(spec, &self.state.bricks[k], c, &bb, want_grad);

                    let px = spec.r * spec.r * c;
                    let mut sq = vec![0.0f64; batch];
                    let mut count = vec![0usize; batch];
                    let mut dout = if want_grad { vec![F::zero(); out.len()] } else { Vec::new() };
                    let mut next: Vec<Image<F>> = x0.to_vec();
                    let mut xbuf = vec![F::zero(); px];
                    let mut tbuf = vec![F::zero(); px];
                    let mut diffs = vec![F::zero(); out.len()];
                    for (s, (&b, &l)) in seq_image.iter().zip(&seq_patch).enumerate() {
                        let (c_skip, c_out) = (F::of(scal[b].0), F::of(scal[b].1));
                        grid.extract_into(&xt[b], l, &mut xbuf);
                        grid.extract_into(&x0[b], l, &mut tbuf);
                        let est = &mut xbuf;
                        for (i, v) in est.iter_mut().enumerate() {
                            *v = c_skip * *v + c_out * out[s * px + i];
                            let diff = *v - tbuf[i];
                            diffs[s * px + i] = diff;
                            sq[b] += diff.f64() * diff.f64();
                        }
                        count[b] += px;
                        grid.insert_from(&mut next[b], l, est);
                    }
                    let mut total_k = 0.0;
                    let mut lambdas = vec![0.0; batch];
                    for b in 0..batch {
                        let lam = self.weight(&levels[b], schedule, k)?;
                        let mse = sq[b] / count[b] as f64;
                        let term = lam * mse;
                        if !term.is_finite() {
                            let at = match levels[b] {
                                NoiseLevel::Step { t, .. } => format!("t = {t}"),
                                NoiseLevel::Sigma(s) => format!("sigma = {s}"),
                            };
                            return Err(Error::Numeric(format!("loss at {at}, brick k = {}, batch index {b}", k + 1)));
                        }
                        lambdas[b] = lam;
                        total_k += term;
                    }
                    per_brick[k] = total_k / batch as f64;
                    if want_grad {
                        for (s, &b) in seq_image.iter().enumerate() {
                            let g = 2.0 * lambdas[b] / (batch as f64 * natives as f64 * count[b] as f64);
                            let g = F::of(g * scal[b].1);
                            for i in 0..px {
                                dout[s * px + i] = g * diffs[s * px + i];
                            }
                        }
                        grad_seeds.push(dout);
                        runs.push(BrickRun {
                            native: k,
                            inputs,
                            seq_image,
                            seq_patch,
                            cond: cond_k,
                            trace: trace.expect("trace requested"),
                            has_native_prev: prev_native,
                            no_prev,
                        });
                    }
                    z = Some(next);
                    prev_native = true;
                }
            }
        }

        let total = per_brick.iter().sum::<f64>() / natives as f64;
        let report = LossReport {
            total,
            per_brick,
            draws: LossDraws {
                levels,
                classes: used,
                xt,
                patches: all_patches,
            },
        };
        if !want_grad {
            return Ok((report, None));
        }

        let mut grads = self.state.zeros_like();
        let d = self.state.cond.d();
        let mut d_cond = vec![F::zero(); batch * d];
        let cin = BrickSpec::input_channels(c);
        // Gradient arriving at the previous brick's assembled estimate.
        let mut carry: Option<Vec<Image<F>>> = None;
        for (run, mut seed) in runs.iter().zip(grad_seeds).rev() {
            let k = run.native;
            let spec = &self.config.bricks[k];
            let grid = PatchGrid::new(h, w, spec.r)?;
            let px = spec.r * spec.r * c;
            if let Some(g) = carry.take() {
                let mut buf = vec![F::zero(); px];
                for (s, (&b, &l)) in run.seq_image.iter().zip(&run.seq_patch).enumerate() {
                    grid.extract_into(&g[b], l, &mut buf);
                    let c_out = F::of(scal[b].1);
                    for (o, v) in seed[s * px..(s + 1) * px].iter_mut().zip(&buf) {
                        *o += c_out * *v;
                    }
                }
            }
            let bb = BrickBatch {
                patches: &run.inputs,
                seq_image: &run.seq_image,
                cond: &run.cond,
                images: batch,
            };
            let pass_down = run.has_native_prev && self.config.scheme == TrainingScheme::EndToEnd;
            let (dc, dinp) = backward_batch(
                spec,
                &self.state.bricks[k],
                c,
                &bb,
                &run.trace,
                &seed,
                &mut grads.bricks[k],
                pass_down,
            );
            for (a, v) in d_cond.iter_mut().zip(&dc) {
                *a += *v;
            }
            if run.no_prev {
                for row in dc.chunks(d) {
                    for (g, v) in grads.cond.no_prev.data.iter_mut().zip(row) {
                        *g += *v;
                    }
                }
            }
            if let Some(dinp) = dinp {
                let mut full: Vec<Image<F>> = (0..batch).map(|_| Image::zeros(h, w, c)).collect();
                let mut buf = vec![F::zero(); spec.r * spec.r * c];
                for (s, (&b, &l)) in run.seq_image.iter().zip(&run.seq_patch).enumerate() {
                    let src = &dinp[s * spec.r * spec.r * cin..(s + 1) * spec.r * spec.r * cin];
                    for i in 0..spec.r * spec.r {
                        buf[i * c..(i + 1) * c].copy_from_slice(&src[i * cin + c..i * cin + 2 * c]);
                    }
                    grid.insert_from(&mut full[b], l, &buf);
                }
                carry = Some(full);
            }
        }
        if let Some(tr) = cond_trace {
            self.state.cond.backward(&tr, &d_cond, &mut grads.cond);
        }
        Ok((report, Some(grads)))
    }
}

/// Boxed predictor from a closure.
pub struct FnPredictor<F, P> {
    pub resolution: (usize, usize, usize),
    pub f: P,
    _marker: core::marker::PhantomData<fn() -> F>,
}

impl<F, P> FnPredictor<F, P> {
    pub fn new(resolution: (usize, usize, usize), f: P) -> Self {
        FnPredictor {
            resolution,
            f,
            _marker: core::marker::PhantomData,
        }
    }
}

impl<F: Real, P> Predictor<F> for FnPredictor<F, P>
where
    P: Fn(&Image<F>, NoiseLevel, Option<usize>) -> Result<Image<F>> + Send + Sync,
{
    fn resolution(&self) -> (usize, usize, usize) {
        self.resolution
    }

    fn predict(&self, xt: &Image<F>, level: NoiseLevel, class: Option<usize>) -> Result<Image<F>> {
        (self.f)(xt, level, class)
    }
}

pub fn boxed_predictor<F: Real + 'static, P>(resolution: (usize, usize, usize), f: P) -> Arc<dyn Predictor<F>>
where
    P: Fn(&Image<F>, NoiseLevel, Option<usize>) -> Result<Image<F>> + Send + Sync + 'static,
{
    Arc::new(FnPredictor::new(resolution, f))
}
