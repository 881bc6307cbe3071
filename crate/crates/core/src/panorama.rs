//! Beyond-training-resolution generation with overlapping windows.
//!
//! At every reverse step the trained model predicts noise on each window of
//! the canvas; predictions are summed into the canvas and divided by the
//! per-pixel window count, and the ordinary sampler update is then applied
//! once to the whole canvas.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sampler::{NoisePredictor, SampleOutput, SamplerChoice};
use crate::skip::SkipSchedule;
use crate::stack::{ActiveSet, NoiseLevel};
use crate::tensor::Image;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub target: (usize, usize),
    pub window: (usize, usize),
    pub stride: usize,
    /// Top-left `(y, x)` offsets, row-major.
    pub windows: Vec<(usize, usize)>,
    /// Per-pixel window count, `target.0 x target.1` row-major.
    pub weight_map: Vec<u32>,
}

fn axis_offsets(target: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=target - window).step_by(stride).collect();
    if out.last() != Some(&(target - window)) {
        out.push(target - window);
    }
    out
}

impl WindowPlan {
    pub fn new(target_h: usize, target_w: usize, window: (usize, usize), stride: usize) -> Result<Self> {
        let (wh, ww) = window;
        if wh == 0 || ww == 0 {
            return Err(Error::param("window", "must be non-empty"));
        }
        if target_h < wh || target_w < ww {
            return Err(Error::param(
                "target",
                format!("{target_h}x{target_w} is smaller than the {wh}x{ww} window"),
            ));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        let rows = axis_offsets(target_h, wh, stride);
        let cols = axis_offsets(target_w, ww, stride);
        let windows: Vec<(usize, usize)> = rows.iter().flat_map(|&y| cols.iter().map(move |&x| (y, x))).collect();
        let mut weight_map = vec![0u32; target_h * target_w];
        for &(y0, x0) in &windows {
            for y in y0..y0 + wh {
                for c in &mut weight_map[y * target_w + x0..y * target_w + x0 + ww] {
                    *c += 1;
                }
            }
        }
        Ok(WindowPlan {
            target: (target_h, target_w),
            window,
            stride,
            windows,
            weight_map,
        })
    }

    pub fn coverage(&self, y: usize, x: usize) -> u32 {
        self.weight_map[y * self.target.1 + x]
    }
}

/// Square-window convenience for [`WindowPlan::new`].
pub fn window_plan(target_h: usize, target_w: usize, window: usize, stride: usize) -> Result<WindowPlan> {
    WindowPlan::new(target_h, target_w, (window, window), stride)
}

/// One class id per canvas pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<usize>,
}

/// Rectangle `[x0, x1) x [y0, y1)` assigned to `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub class: usize,
}

impl ClassMap {
    pub fn uniform(h: usize, w: usize, class: usize) -> Self {
        ClassMap {
            h,
            w,
            classes: vec![class; h * w],
        }
    }

    /// Paints regions in order (later regions win). Every pixel must be
    /// covered by some region.
    pub fn from_regions(h: usize, w: usize, regions: &[Region]) -> Result<Self> {
        let mut cells: Vec<Option<usize>> = vec![None; h * w];
        for (i, r) in regions.iter().enumerate() {
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > w || r.y1 > h {
                return Err(Error::Config(format!(
                    "region {} ({} {} {} {}) is empty or outside the {h}x{w} canvas",
                    i + 1,
                    r.x0,
                    r.y0,
                    r.x1,
                    r.y1
                )));
            }
            for y in r.y0..r.y1 {
                for c in &mut cells[y * w + r.x0..y * w + r.x1] {
                    *c = Some(r.class);
                }
            }
        }
        let classes = cells
            .iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Config(format!("pixel (y {}, x {}) has no class", i / w, i % w))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassMap { h, w, classes })
    }

    pub fn at(&self, y: usize, x: usize) -> usize {
        self.classes[y * self.w + x]
    }

    /// Most frequent class inside a window; ties go to the smaller id.
    pub fn majority(&self, y0: usize, x0: usize, wh: usize, ww: usize) -> usize {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for y in y0..y0 + wh {
            for &c in &self.classes[y * self.w + x0..y * self.w + x0 + ww] {
                match counts.iter_mut().find(|(k, _)| *k == c) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((c, 1)),
                }
            }
        }
        counts
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|&(c, _)| c)
            .unwrap_or(0)
    }
}

/// Canvas-level noise predictor built from a window-level one. A `Some` class
/// requests conditioning on each window's majority class from the map; `None`
/// requests the unconditional prediction everywhere.
pub struct WindowedPredictor<'a, P: ?Sized> {
    pub inner: &'a P,
    pub plan: WindowPlan,
    pub window_classes: Vec<usize>,
    pub channels: usize,
}

impl<'a, P: ?Sized> WindowedPredictor<'a, P> {
    pub fn new<F: Real>(inner: &'a P, plan: WindowPlan, class_map: &ClassMap, num_classes: usize) -> Result<Self>
    where
        P: NoisePredictor<F>,
    {
        let (h, w, c) = inner.resolution();
        if plan.window != (h, w) {
            return Err(Error::shape("window vs trained resolution", &[h, w], &[plan.window.0, plan.window.1]));
        }
        if (class_map.h, class_map.w) != plan.target {
            return Err(Error::shape(
                "class map vs canvas",
                &[plan.target.0, plan.target.1],
                &[class_map.h, class_map.w],
            ));
        }
        if let Some(bad) = class_map.classes.iter().find(|&&k| k >= num_classes) {
            return Err(Error::Config(format!("class {bad} is not among the {num_classes} trained classes")));
        }
        let window_classes = plan.windows.iter().map(|&(y, x)| class_map.majority(y, x, h, w)).collect();
        Ok(WindowedPredictor {
            inner,
            plan,
            window_classes,
            channels: c,
        })
    }
}

impl<F: Real, P: NoisePredictor<F> + ?Sized> NoisePredictor<F> for WindowedPredictor<'_, P> {
    fn resolution(&self) -> (usize, usize, usize) {
        (self.plan.target.0, self.plan.target.1, self.channels)
    }

    fn eps(
        &self,
        x: &[Image<F>],
        level: NoiseLevel,
        classes: &[Option<usize>],
        active: Option<&ActiveSet>,
    ) -> Result<Vec<Image<F>>> {
        let (wh, ww) = self.plan.window;
        let (th, tw) = self.plan.target;
        let c = self.channels;
        let mut crops = Vec::with_capacity(x.len() * self.plan.windows.len());
        let mut wclass = Vec::with_capacity(crops.capacity());
        for (canvas, class) in x.iter().zip(classes) {
            if canvas.shape() != [th, tw, c] {
                return Err(Error::shape("canvas", &[th, tw, c], &canvas.shape()));
            }
            for (j, &(y, xo)) in self.plan.windows.iter().enumerate() {
                crops.push(canvas.crop(y, xo, wh, ww));
                wclass.push(class.map(|_| self.window_classes[j]));
            }
        }
        let preds = self.inner.eps(&crops, level, &wclass, active)?;
        let nw = self.plan.windows.len();
        let mut out = Vec::with_capacity(x.len());
        for b in 0..x.len() {
            let mut acc = Image::<F>::zeros(th, tw, c);
            for (j, &(y0, x0)) in self.plan.windows.iter().enumerate() {
                let p = &preds[b * nw + j];
                for y in 0..wh {
                    let src = &p.data[y * ww * c..(y + 1) * ww * c];
                    let start = ((y0 + y) * tw + x0) * c;
                    for (d, s) in acc.data[start..start + ww * c].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
            for (i, v) in acc.data.iter_mut().enumerate() {
                let n = self.plan.weight_map[i / c];
                assert!(n > 0, "window plan leaves a pixel uncovered");
                *v /= F::of(n as f64);
            }
            out.push(acc);
        }
        Ok(out)
    }
}

/// Samples canvases of the plan's target size; each canvas's noise comes from
/// its own rng stream.
#[allow(clippy::too_many_arguments)]
pub fn panorama_sample<F: Real, P: NoisePredictor<F> + ?Sized, R: Rng>(
    model: &P,
    plan: WindowPlan,
    class_map: &ClassMap,
    num_classes: usize,
    sampler: &SamplerChoice<'_>,
    skip: Option<&SkipSchedule>,
    cfg_scale: Option<f64>,
    rngs: &mut [R],
) -> Result<SampleOutput<F>> {
    let windowed = WindowedPredictor::new::<F>(model, plan, class_map, num_classes)?;
    let marks = vec![Some(0); rngs.len()];
    sampler.sample(&windowed, skip, cfg_scale, &marks, rngs)
}
