//! Training data: a seeded synthetic blob generator and a class-per-subdirectory
//! image folder. Both are random-access by global sample index, so a resumed
//! run sees exactly the batches the unbroken run would have seen.

use std::path::{Path, PathBuf};

use lego_core::stack::Resolution;
use lego_core::Image;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    SyntheticBlobs(BlobSpec),
    ImageDir(ImageDirSpec),
}

impl DatasetSpec {
    pub fn resolution(&self) -> Resolution {
        match self {
            DatasetSpec::SyntheticBlobs(b) => b.resolution,
            DatasetSpec::ImageDir(d) => d.resolution,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::SyntheticBlobs(b) => b.num_classes,
            DatasetSpec::ImageDir(d) => d.num_classes,
        }
    }

    pub fn open(&self) -> Result<Box<dyn Dataset>> {
        Ok(match self {
            DatasetSpec::SyntheticBlobs(b) => Box::new(Blobs::new(b.clone())?),
            DatasetSpec::ImageDir(d) => Box::new(ImageDir::open(d)?),
        })
    }
}

/// Labelled images addressed by a global sample index.
pub trait Dataset: Send {
    fn resolution(&self) -> Resolution;
    fn num_classes(&self) -> usize;
    /// Sample number `index` of the stream; deterministic in `index`.
    fn get(&mut self, index: u64) -> Result<(Image<f32>, usize)>;

    /// `n` consecutive samples starting at `start`.
    fn batch(&mut self, start: u64, n: usize) -> Result<(Vec<Image<f32>>, Vec<usize>)> {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let (x, y) = self.get(start + i)?;
            images.push(x);
            labels.push(y);
        }
        Ok((images, labels))
    }
}

fn default_background() -> Vec<f64> {
    vec![-0.5, -0.5, -0.5]
}

fn default_radius() -> [f64; 2] {
    [0.12, 0.22]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub resolution: Resolution,
    pub num_classes: usize,
    /// One colour per class in `[-1, 1]`, `resolution.c` components each.
    /// Empty means evenly spaced fully saturated hues starting at red.
    #[serde(default)]
    pub palette: Vec<Vec<f64>>,
    #[serde(default = "default_background")]
    pub background: Vec<f64>,
    /// Blobs drawn for each class; empty means `class + 1`.
    #[serde(default)]
    pub blob_counts: Vec<usize>,
    /// Blob radius range as a fraction of the shorter image side.
    #[serde(default = "default_radius")]
    pub radius: [f64; 2],
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(resolution: Resolution, num_classes: usize, seed: u64) -> Self {
        BlobSpec {
            resolution,
            num_classes,
            palette: Vec::new(),
            background: default_background(),
            blob_counts: Vec::new(),
            radius: default_radius(),
            seed,
        }
    }
}

/// Fully saturated hue `k / n` of the colour wheel as RGB in `[-1, 1]`.
pub fn hue_color(k: usize, n: usize) -> [f64; 3] {
    let h = 6.0 * k as f64 / n.max(1) as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [2.0 * r - 1.0, 2.0 * g - 1.0, 2.0 * b - 1.0]
}

pub struct Blobs {
    spec: BlobSpec,
    palette: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl Blobs {
    pub fn new(spec: BlobSpec) -> Result<Self> {
        let Resolution { h, w, c } = spec.resolution;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("blob images must be at least 8x8, got {h}x{w}")));
        }
        if spec.num_classes == 0 {
            return Err(Error::Config("blob dataset needs at least one class".into()));
        }
        let palette: Vec<Vec<f64>> = if spec.palette.is_empty() {
            if c != 3 {
                return Err(Error::Config(format!("the default palette is RGB; set `palette` for {c} channels")));
            }
            (0..spec.num_classes).map(|k| hue_color(k, spec.num_classes).to_vec()).collect()
        } else {
            spec.palette.clone()
        };
        let in_range = |v: &[f64]| v.len() == c && v.iter().all(|x| (-1.0..=1.0).contains(x));
        if palette.len() != spec.num_classes || !palette.iter().all(|p| in_range(p)) {
            return Err(Error::Config(format!(
                "palette needs {} colours of {c} components in [-1, 1]",
                spec.num_classes
            )));
        }
        if !in_range(&spec.background) {
            return Err(Error::Config(format!("background needs {c} components in [-1, 1]")));
        }
        let counts = if spec.blob_counts.is_empty() {
            (1..=spec.num_classes).collect()
        } else {
            spec.blob_counts.clone()
        };
        if counts.len() != spec.num_classes || counts.contains(&0) {
            return Err(Error::Config("blob_counts needs one positive count per class".into()));
        }
        let [r0, r1] = spec.radius;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 1.0) {
            return Err(Error::Config(format!("radius range {r0}..{r1} must satisfy 0 < min <= max <= 1")));
        }
        Ok(Blobs { spec, palette, counts })
    }

    pub fn palette(&self) -> &[Vec<f64>] {
        &self.palette
    }
}

impl Dataset for Blobs {
    fn resolution(&self) -> Resolution {
        self.spec.resolution
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn get(&mut self, index: u64) -> Result<(Image<f32>, usize)> {
        let Resolution { h, w, c } = self.spec.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index);
        let class = rng.random_range(0..self.spec.num_classes);
        let side = h.min(w) as f64;
        let [r0, r1] = self.spec.radius;
        let blobs: Vec<(f64, f64, f64)> = (0..self.counts[class])
            .map(|_| {
                let r = side * rng.random_range(r0..=r1);
                (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), r)
            })
            .collect();
        let color = &self.palette[class];
        let bg = &self.spec.background;
        let img = Image::from_fn(h, w, c, |y, x, ch| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = blobs.iter().any(|&(cy, cx, r)| (py - cy).powi(2) + (px - cx).powi(2) <= r * r);
            (if inside { color[ch] } else { bg[ch] }) as f32
        });
        Ok((img, class))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDirSpec {
    pub path: PathBuf,
    pub resolution: Resolution,
    pub num_classes: usize,
    /// Seed of the per-epoch shuffle.
    #[serde(default)]
    pub seed: u64,
}

/// One subdirectory per class (sorted by name); every readable raster file
/// inside is a sample.
pub struct ImageDir {
    spec: ImageDirSpec,
    files: Vec<(PathBuf, usize)>,
    order: Option<(u64, Vec<usize>)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

impl ImageDir {
    pub fn open(spec: &ImageDirSpec) -> Result<Self> {
        if spec.resolution.c != 3 {
            return Err(Error::Config(format!(
                "image directories decode to RGB; resolution.c is {}",
                spec.resolution.c
            )));
        }
        let classes: Vec<PathBuf> = sorted_entries(&spec.path)?.into_iter().filter(|p| p.is_dir()).collect();
        if classes.len() != spec.num_classes {
            return Err(Error::Config(format!(
                "{} holds {} class directories, config expects {}",
                spec.path.display(),
                classes.len(),
                spec.num_classes
            )));
        }
        let mut files = Vec::new();
        for (label, dir) in classes.iter().enumerate() {
            let before = files.len();
            for f in sorted_entries(dir)? {
                if !f.is_file() {
                    continue;
                }
                match image::image_dimensions(&f) {
                    Ok(_) => files.push((f, label)),
                    Err(e) => log::warn!("skipping unreadable image {}: {e}", f.display()),
                }
            }
            if files.len() == before {
                return Err(Error::Config(format!("class directory {} has no readable images", dir.display())));
            }
        }
        Ok(ImageDir {
            spec: spec.clone(),
            files,
            order: None,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    fn slot(&mut self, index: u64) -> usize {
        let n = self.files.len() as u64;
        let epoch = index / n;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.files.len()).collect();
            perm.shuffle(&mut rng);
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().expect("order set").1[(index % n) as usize]
    }
}

impl Dataset for ImageDir {
    fn resolution(&self) -> Resolution {
        self.spec.resolution
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn get(&mut self, index: u64) -> Result<(Image<f32>, usize)> {
        let n = self.files.len() as u64;
        // A file that passed the header probe can still fail to decode; fall
        // through to the next one so the stream stays deterministic.
        for k in 0..n {
            let slot = self.slot(index + k);
            let (path, label) = &self.files[slot];
            match load_image(path, self.spec.resolution) {
                Ok(img) => return Ok((img, *label)),
                Err(e) => log::warn!("skipping unreadable image: {e}"),
            }
        }
        Err(Error::Ingest(format!("no readable image in {}", self.spec.path.display())))
    }
}

/// Decodes an 8-bit image, centre-crops it to the target aspect ratio,
/// resizes it and maps `[0, 255]` to `[-1, 1]`.
pub fn load_image(path: &Path, res: Resolution) -> Result<Image<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(prepare(&img, res))
}

pub(crate) fn prepare(img: &image::RgbImage, res: Resolution) -> Image<f32> {
    let (sw, sh) = img.dimensions();
    // Largest centred window with the target aspect ratio.
    let (cw, ch) = if sw as u64 * res.h as u64 >= sh as u64 * res.w as u64 {
        ((sh as u64 * res.w as u64 / res.h as u64) as u32, sh)
    } else {
        (sw, (sw as u64 * res.h as u64 / res.w as u64) as u32)
    };
    let cropped = image::imageops::crop_imm(img, (sw - cw) / 2, (sh - ch) / 2, cw, ch).to_image();
    let resized = if (cw, ch) == (res.w as u32, res.h as u32) {
        cropped
    } else {
        image::imageops::resize(&cropped, res.w as u32, res.h as u32, image::imageops::FilterType::Triangle)
    };
    Image::from_fn(res.h, res.w, 3, |y, x, c| {
        resized.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    })
}
