//! File-level training driver: metrics log, periodic checkpoints and the run
//! manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::output::RunManifest;
use crate::trainer::{StepRecord, Trainer};

/// Metrics log inside the output directory (JSON lines of [`StepRecord`]).
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Checkpoint written at the end of every run.
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub last_checkpoint: PathBuf,
    pub steps: u64,
    /// Every step's record, logged or not.
    pub records: Vec<StepRecord>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:08}.ckpt")
}

/// Trains until `cfg.train.total_images` (or `max_steps` more steps),
/// starting fresh or from `resume`.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>, force: bool, max_steps: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, Some(&cfg.model), force)?;
            let mut t = Trainer::resume(ckpt)?;
            t.train = cfg.train.clone();
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.schedule, cfg.sampler)?,
    };
    let mut data = cfg.dataset.open()?;
    let mut remaining = cfg.train.steps().saturating_sub(trainer.step);
    if let Some(m) = max_steps {
        remaining = remaining.min(m);
    }
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut manifest = RunManifest::new("train", cfg.model.hash64(), cfg.train.seed);
    manifest.outputs.push(metrics_path.clone());
    let mut records = Vec::with_capacity(remaining as usize);
    let last_step = trainer.step + remaining;
    let (log_every, ckpt_every) = (cfg.output.log_every, cfg.output.checkpoint_every);
    let mut saved = Vec::new();
    trainer.run(&mut *data, remaining, Some(&out), |t, rec| {
        let done = rec.step + 1;
        if rec.step % log_every == 0 || done == last_step {
            let line = serde_json::to_string(rec).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            log::info!("step {} loss {:.5} lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        if done % ckpt_every == 0 {
            let path = out.join(checkpoint_name(done));
            t.checkpoint().save(&path)?;
            saved.push(path);
        }
        records.push(rec.clone());
        Ok(())
    })?;
    let last = out.join(LAST_CHECKPOINT);
    trainer.checkpoint().save(&last)?;
    manifest.outputs.extend(saved);
    manifest.outputs.push(last.clone());
    manifest.write(&out)?;
    Ok(TrainOutcome {
        out_dir: out,
        last_checkpoint: last,
        steps: trainer.step,
        records,
    })
}
