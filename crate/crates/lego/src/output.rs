//! PNG emission and run manifests.

use std::path::{Path, PathBuf};

use lego_core::Image;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

/// Maps `[-1, 1]` to 8-bit RGB. One channel is shown as grey; beyond three
/// channels only the first three are shown.
pub fn to_rgb8(img: &Image<f32>) -> image::RgbImage {
    let [h, w, c] = img.shape();
    let q = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |ch: usize| q(img.at(y, x, ch.min(c - 1)));
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_atomic(path, &bytes)
}

pub fn write_png(img: &Image<f32>, path: &Path) -> Result<()> {
    save_png(&to_rgb8(img), path)
}

/// Tiles equally sized images row-major into a near-square grid with a
/// two-pixel grey gutter.
pub fn grid(images: &[Image<f32>]) -> image::RgbImage {
    const GAP: u32 = 2;
    let Some(first) = images.first() else {
        return image::RgbImage::new(0, 0);
    };
    let [h, w, _] = first.shape();
    let (h, w) = (h as u32, w as u32);
    let n = images.len() as u32;
    let cols = (n as f64).sqrt().ceil() as u32;
    let rows = n.div_ceil(cols);
    let mut out = image::RgbImage::from_pixel(
        cols * (w + GAP) + GAP,
        rows * (h + GAP) + GAP,
        image::Rgb([128, 128, 128]),
    );
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        image::imageops::replace(&mut out, &to_rgb8(img), (GAP + c * (w + GAP)) as i64, (GAP + r * (h + GAP)) as i64);
    }
    out
}

pub fn write_grid(images: &[Image<f32>], path: &Path) -> Result<()> {
    save_png(&grid(images), path)
}

/// File name of one sample; encodes the seed, index and class.
pub fn sample_file_name(prefix: &str, seed: u64, index: usize, class: Option<usize>) -> String {
    match class {
        Some(c) => format!("{prefix}-seed{seed}-{index:04}-class{c}.png"),
        None => format!("{prefix}-seed{seed}-{index:04}-uncond.png"),
    }
}

/// Written next to the outputs of every CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub args: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: u64, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: format!("{config_hash:016x}"),
            seed,
            code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            args: std::env::args().collect(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&path, &json)?;
        Ok(path)
    }
}
