//! Sampling and panorama generation from a checkpoint, optionally split
//! across worker threads. Image `i` always draws its noise from the stream
//! `(seed, i)`, so results do not depend on the worker count.

use lego_core::panorama::{panorama_sample, ClassMap, WindowPlan};
use lego_core::sampler::{EdmSamplerParams, SampleOutput, SamplerChoice};
use lego_core::schedule::NoiseSchedule;
use lego_core::skip::{SkipMode, SkipSchedule};
use lego_core::stack::{Preconditioning, Stack};
use lego_core::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::SamplerSpec;
use crate::error::{Error, Result};

/// Rebuilds the model from a checkpoint using the EMA or the raw weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint, ema: bool) -> Result<Stack<f32>> {
    let state = if ema { ckpt.ema.clone() } else { ckpt.params.clone() };
    Ok(Stack::new(ckpt.model.clone(), state)?)
}

/// Noise stream of image `index` under `seed`.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// The sampler matching the model's preconditioning. `steps` overrides the
/// configured step count.
pub fn sampler_choice<'a>(
    model: &Stack<f32>,
    schedule: &'a NoiseSchedule,
    spec: &SamplerSpec,
    steps: Option<usize>,
) -> SamplerChoice<'a> {
    match model.config.precond {
        Preconditioning::Ddpm => SamplerChoice::Ddpm {
            schedule,
            steps: steps.unwrap_or(spec.ddpm_steps),
        },
        Preconditioning::Edm { params, .. } => SamplerChoice::Edm {
            params,
            sampler: EdmSamplerParams {
                steps: steps.unwrap_or(spec.edm.steps),
                ..spec.edm
            },
        },
    }
}

pub fn skip_schedule(model: &Stack<f32>, choice: &SamplerChoice<'_>, mode: SkipMode, t_break: usize) -> Result<Option<SkipSchedule>> {
    Ok(match mode {
        SkipMode::None => None,
        _ => Some(SkipSchedule::new(mode, t_break, choice.skip_steps(), &model.config)?),
    })
}

/// Class of image `index`: cycles through `requested` when given, otherwise
/// through all classes; unconditional for a class-free model.
pub fn class_for(index: usize, requested: &[usize], num_classes: usize) -> Option<usize> {
    if num_classes == 0 {
        None
    } else if requested.is_empty() {
        Some(index % num_classes)
    } else {
        Some(requested[index % requested.len()])
    }
}

/// Splits `0..n` into at most `workers` contiguous chunks and runs `job` on
/// each in its own thread, concatenating the results in order.
fn parallel<T: Send>(
    n: usize,
    workers: usize,
    job: impl Fn(std::ops::Range<usize>) -> Result<(Vec<T>, usize)> + Sync,
) -> Result<(Vec<T>, usize)> {
    let workers = workers.clamp(1, n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    let ranges: Vec<_> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    if ranges.len() <= 1 {
        return job(0..n);
    }
    let parts: Vec<Result<(Vec<T>, usize)>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges.iter().map(|r| s.spawn(|| job(r.clone()))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("sampling worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    let mut nfe = 0;
    for p in parts {
        let (items, k) = p?;
        out.extend(items);
        nfe = nfe.max(k);
    }
    Ok((out, nfe))
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub n: usize,
    pub classes: Vec<usize>,
    pub cfg_scale: Option<f64>,
    pub skip_mode: SkipMode,
    pub t_break: usize,
    pub seed: u64,
    pub workers: usize,
}

/// Samples `req.n` images; returns them with their classes and the NFE of
/// one sampling run.
pub fn sample_images(
    model: &Stack<f32>,
    choice: &SamplerChoice<'_>,
    req: &SampleRequest,
) -> Result<(Vec<Image<f32>>, Vec<Option<usize>>, usize)> {
    let skip = skip_schedule(model, choice, req.skip_mode, req.t_break)?;
    let classes: Vec<Option<usize>> = (0..req.n).map(|i| class_for(i, &req.classes, model.config.num_classes)).collect();
    let (images, nfe) = parallel(req.n, req.workers, |range| {
        let mut rngs: Vec<ChaCha8Rng> = range.clone().map(|i| image_rng(req.seed, i)).collect();
        let SampleOutput { images, nfe } =
            choice.sample(model, skip.as_ref(), req.cfg_scale, &classes[range], &mut rngs)?;
        Ok((images, nfe))
    })?;
    Ok((images, classes, nfe))
}

/// Samples `req.n` panorama canvases following `class_map`.
pub fn sample_panoramas(
    model: &Stack<f32>,
    choice: &SamplerChoice<'_>,
    plan: &WindowPlan,
    class_map: &ClassMap,
    req: &SampleRequest,
) -> Result<(Vec<Image<f32>>, usize)> {
    let skip = skip_schedule(model, choice, req.skip_mode, req.t_break)?;
    parallel(req.n, req.workers, |range| {
        let mut rngs: Vec<ChaCha8Rng> = range.map(|i| image_rng(req.seed, i)).collect();
        let out = panorama_sample(
            model,
            plan.clone(),
            class_map,
            model.config.num_classes,
            choice,
            skip.as_ref(),
            req.cfg_scale,
            &mut rngs,
        )?;
        Ok((out.images, out.nfe))
    })
}
