#![allow(dead_code)]

use std::path::Path;

use lego::config::{preset, RunConfig};
use lego::dataset::Dataset;
use lego_core::stack::Resolution;
use lego_core::Image;

/// The desk-scale preset trained for `steps` steps of `batch` images into `out`.
pub fn mini_run(mode: &str, steps: u64, batch: usize, out: &Path) -> RunConfig {
    let mut cfg = preset(&format!("lego-s-mini-{mode}")).unwrap();
    cfg.train.batch_size = batch;
    cfg.train.total_images = steps * batch as u64;
    cfg.sampler.ddpm_steps = 5;
    cfg.output.dir = out.to_path_buf();
    cfg.output.log_every = 1;
    cfg.output.checkpoint_every = 1000;
    cfg
}

/// A fixed list of images cycled in order.
pub struct Fixed {
    pub images: Vec<(Image<f32>, usize)>,
    pub classes: usize,
}

impl Dataset for Fixed {
    fn resolution(&self) -> Resolution {
        let [h, w, c] = self.images[0].0.shape();
        Resolution { h, w, c }
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn get(&mut self, index: u64) -> lego::Result<(Image<f32>, usize)> {
        Ok(self.images[(index % self.images.len() as u64) as usize].clone())
    }
}
