//! The optimization loop: AdamW over the stochastic stack loss, EMA shadow
//! weights, learning-rate warmup and diagnostic checkpoints on divergence.

use std::path::Path;
use std::time::Instant;

use lego_core::brick::{flops_estimate, FlopsMode};
use lego_core::optim::{adamw_step, ema_update, lr_at, AdamState, TrainConfig};
use lego_core::schedule::NoiseSchedule;
use lego_core::stack::{Stack, StackConfig, StackState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{lr_mode, SamplerSpec, ScheduleSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// One metrics record; serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Zero-based index of the optimizer step that produced `loss`.
    pub step: u64,
    /// Images consumed including this step's batch.
    pub images_seen: u64,
    /// Mean over bricks of the weighted denoising loss, before the update.
    pub loss: f64,
    pub per_brick: Vec<f64>,
    /// Learning rate applied by this step.
    pub lr: f64,
    /// Seconds since this trainer was constructed.
    pub wall_clock_s: f64,
    /// Estimated training FLOPs so far (three forward passes per image).
    pub est_flops: f64,
}

pub struct Trainer {
    pub stack: Stack<f32>,
    pub ema: StackState<f32>,
    pub opt: AdamState<f32>,
    pub train: TrainConfig,
    pub schedule_spec: ScheduleSpec,
    pub sampler: SamplerSpec,
    /// Optimizer steps taken.
    pub step: u64,
    pub images_seen: u64,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
    started: Instant,
    flops_per_image: f64,
}

fn train_flops(config: &StackConfig) -> f64 {
    let r = config.resolution;
    3.0 * flops_estimate(
        &config.bricks,
        (r.h, r.w, r.c),
        FlopsMode::Train,
        &config.patch_fraction,
        None,
        config.time_freq_dim,
    )
}

impl Trainer {
    /// Fresh parameters drawn from `train.seed`; the same stream then drives
    /// all training randomness.
    pub fn new(model: StackConfig, train: TrainConfig, schedule: ScheduleSpec, sampler: SamplerSpec) -> Result<Self> {
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let stack = Stack::init(model, &mut rng)?;
        let ema = stack.state.clone();
        let opt = AdamState::new(&stack.state);
        Self::assemble(stack, ema, opt, train, schedule, sampler, rng, 0, 0)
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let rng = ckpt
            .rng
            .restore()
            .map_err(|e| Error::Config(format!("checkpoint rng state: {e}")))?;
        let stack = Stack::new(ckpt.model, ckpt.params)?;
        Self::assemble(
            stack,
            ckpt.ema,
            ckpt.adam,
            ckpt.train,
            ckpt.schedule,
            ckpt.sampler,
            rng,
            ckpt.step,
            ckpt.images_seen,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        stack: Stack<f32>,
        ema: StackState<f32>,
        opt: AdamState<f32>,
        train: TrainConfig,
        schedule_spec: ScheduleSpec,
        sampler: SamplerSpec,
        rng: ChaCha8Rng,
        step: u64,
        images_seen: u64,
    ) -> Result<Self> {
        let flops_per_image = train_flops(&stack.config);
        Ok(Trainer {
            schedule: schedule_spec.build()?,
            stack,
            ema,
            opt,
            train,
            schedule_spec,
            sampler,
            step,
            images_seen,
            rng,
            started: Instant::now(),
            flops_per_image,
        })
    }

    pub fn config(&self) -> &StackConfig {
        &self.stack.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.stack.config.clone(),
            train: self.train.clone(),
            schedule: self.schedule_spec,
            sampler: self.sampler,
            step: self.step,
            images_seen: self.images_seen,
            params: self.stack.state.clone(),
            ema: self.ema.clone(),
            adam: self.opt.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    fn check_dataset(&self, data: &dyn Dataset) -> Result<()> {
        let cfg = &self.stack.config;
        if data.resolution() != cfg.resolution {
            return Err(Error::Ingest(format!(
                "dataset yields {:?}, model expects {:?}",
                data.resolution(),
                cfg.resolution
            )));
        }
        if data.num_classes() > cfg.num_classes {
            return Err(Error::Ingest(format!(
                "dataset has {} classes, model {}",
                data.num_classes(),
                cfg.num_classes
            )));
        }
        Ok(())
    }

    /// One optimizer step on the next batch of the stream.
    pub fn step(&mut self, data: &mut dyn Dataset) -> Result<StepRecord> {
        self.check_dataset(data)?;
        let bs = self.train.batch_size;
        let (images, labels) = data.batch(self.images_seen, bs)?;
        let r = self.stack.config.resolution;
        for (i, x) in images.iter().enumerate() {
            if x.shape() != [r.h, r.w, r.c] {
                return Err(Error::Ingest(format!("sample {} has shape {:?}", self.images_seen + i as u64, x.shape())));
            }
        }
        let classes: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
        let lr = lr_at(self.images_seen, &self.train, lr_mode(&self.stack.config));
        let (report, grads) = self.stack.loss_and_grad(&images, &classes, &self.schedule, &mut self.rng)?;
        adamw_step(&mut self.stack.state, &grads, &mut self.opt, &self.train, lr)?;
        ema_update(&mut self.ema, &self.stack.state, self.train.ema_decay)?;
        let record = StepRecord {
            step: self.step,
            images_seen: self.images_seen + bs as u64,
            loss: report.total,
            per_brick: report.per_brick,
            lr,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            est_flops: self.flops_per_image * (self.images_seen + bs as u64) as f64,
        };
        self.step += 1;
        self.images_seen += bs as u64;
        Ok(record)
    }

    /// Runs `steps` optimizer steps, handing each record to `hook`. A
    /// non-finite loss aborts the run; when `diagnostics` is set the state
    /// before the failing step is saved there first.
    pub fn run(
        &mut self,
        data: &mut dyn Dataset,
        steps: u64,
        diagnostics: Option<&Path>,
        mut hook: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            // A failing step leaves the parameters untouched; only the rng moved.
            let rng_before = self.rng.clone();
            match self.step(data) {
                Ok(rec) => hook(self, &rec)?,
                Err(Error::Core(e @ lego_core::Error::Numeric(_))) => {
                    let Some(dir) = diagnostics else {
                        return Err(Error::Core(e));
                    };
                    let path = dir.join(format!("diagnostic-step{:08}.ckpt", self.step));
                    let mut ckpt = self.checkpoint();
                    ckpt.rng = RngState::capture(&rng_before);
                    ckpt.save(&path)?;
                    log::error!("{e}; state saved to {}", path.display());
                    return Err(Error::Diverged {
                        source: e,
                        checkpoint: path,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}
