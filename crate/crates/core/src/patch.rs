//! Non-overlapping patch decomposition, normalized coordinate fields, patch
//! subsampling and missing-value fill.
//!
//! Storage is 0-based; [`PatchIndex`] carries the 1-based `(i, j)` used at the
//! API boundary, where patch `(i, j)` covers rows `(i-1)r+1 ..= i r` and
//! columns `(j-1)r+1 ..= j r`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Image;

/// Pixel coordinates normalized to `[-1, 1]`, stored as a 2-channel image
/// holding `(row, col)`.
pub type CoordGrid = Image<f64>;

/// Affine map of pixel indices onto `[-1, 1]`; a length-1 axis maps to 0.
pub fn coord_grid(h: usize, w: usize) -> Result<CoordGrid> {
    if h == 0 {
        return Err(Error::param("h", "must be at least 1"));
    }
    if w == 0 {
        return Err(Error::param("w", "must be at least 1"));
    }
    let axis = |p: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            2.0 * p as f64 / (n - 1) as f64 - 1.0
        }
    };
    Ok(Image::from_fn(h, w, 2, |y, x, c| if c == 0 { axis(y, h) } else { axis(x, w) }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchIndex {
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, r: usize) -> Result<Self> {
        if r == 0 || h == 0 || w == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(Error::Shape {
                context: format!("patch size {r} must divide image {h}x{w}"),
                expected: vec![h, w, r],
                actual: vec![h % r.max(1), w % r.max(1)],
            });
        }
        Ok(PatchGrid {
            h,
            w,
            r,
            rows: h / r,
            cols: w / r,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index of a 1-based patch coordinate.
    pub fn linear(&self, p: PatchIndex) -> Result<usize> {
        if p.i == 0 || p.i > self.rows {
            return Err(Error::Index {
                what: "patch row",
                index: p.i,
                lo: 1,
                hi: self.rows,
            });
        }
        if p.j == 0 || p.j > self.cols {
            return Err(Error::Index {
                what: "patch column",
                index: p.j,
                lo: 1,
                hi: self.cols,
            });
        }
        Ok((p.i - 1) * self.cols + (p.j - 1))
    }

    pub fn index(&self, linear: usize) -> PatchIndex {
        PatchIndex {
            i: linear / self.cols + 1,
            j: linear % self.cols + 1,
        }
    }

    /// 0-based top-left pixel of the patch at `linear`.
    pub fn origin(&self, linear: usize) -> (usize, usize) {
        ((linear / self.cols) * self.r, (linear % self.cols) * self.r)
    }

    pub fn indices(&self) -> impl Iterator<Item = PatchIndex> + '_ {
        (0..self.len()).map(move |l| self.index(l))
    }

    fn check_image<F: Real>(&self, x: &Image<F>, context: &str) -> Result<()> {
        if x.h != self.h || x.w != self.w {
            return Err(Error::shape(
                format!("{context} vs patch grid (r = {})", self.r),
                &[self.h, self.w],
                &[x.h, x.w],
            ));
        }
        Ok(())
    }

    /// Copies patch `linear` of `x` into `out` (length `r * r * c`).
    pub fn extract_into<F: Real>(&self, x: &Image<F>, linear: usize, out: &mut [F]) {
        let (y0, x0) = self.origin(linear);
        let row = self.r * x.c;
        for y in 0..self.r {
            let src = x.idx(y0 + y, x0, 0);
            out[y * row..(y + 1) * row].copy_from_slice(&x.data[src..src + row]);
        }
    }

    /// Writes a patch (length `r * r * c`) back into `x` at `linear`.
    pub fn insert_from<F: Real>(&self, x: &mut Image<F>, linear: usize, patch: &[F]) {
        let (y0, x0) = self.origin(linear);
        let row = self.r * x.c;
        for y in 0..self.r {
            let dst = x.idx(y0 + y, x0, 0);
            x.data[dst..dst + row].copy_from_slice(&patch[y * row..(y + 1) * row]);
        }
    }
}

/// An image split into its `rows x cols` patches, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches<F> {
    pub grid: PatchGrid,
    pub channels: usize,
    pub patches: Vec<Image<F>>,
}

impl<F: Real> Patches<F> {
    pub fn get(&self, p: PatchIndex) -> Result<&Image<F>> {
        Ok(&self.patches[self.grid.linear(p)?])
    }

    pub fn assemble(&self) -> Image<F> {
        let mut out = Image::zeros(self.grid.h, self.grid.w, self.channels);
        for (l, p) in self.patches.iter().enumerate() {
            self.grid.insert_from(&mut out, l, &p.data);
        }
        out
    }
}

pub fn partition<F: Real>(x: &Image<F>, r: usize) -> Result<Patches<F>> {
    let grid = PatchGrid::new(x.h, x.w, r)?;
    let patches = (0..grid.len())
        .map(|l| {
            let mut p = Image::zeros(r, r, x.c);
            grid.extract_into(x, l, &mut p.data);
            p
        })
        .collect();
    Ok(Patches {
        grid,
        channels: x.c,
        patches,
    })
}

/// Number of patches kept at a sampling fraction: round half up, at least one.
pub fn sampled_count(total: usize, fraction: f64) -> usize {
    let n = libm::floor(fraction * total as f64 + 0.5) as usize;
    n.clamp(1, total.max(1))
}

/// Uniform draw without replacement, returned as sorted linear indices.
pub fn sample_patch_linear<R: Rng + ?Sized>(grid: &PatchGrid, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param("fraction", format!("{fraction} not in (0, 1]")));
    }
    let total = grid.len();
    let k = sampled_count(total, fraction);
    if k == total {
        return Ok((0..total).collect());
    }
    let mut picked = rand::seq::index::sample(rng, total, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn sample_patch_indices<R: Rng + ?Sized>(
    grid: &PatchGrid,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<PatchIndex>> {
    Ok(sample_patch_linear(grid, fraction, rng)?
        .into_iter()
        .map(|l| grid.index(l))
        .collect())
}

/// Full-resolution image where only some patches hold valid values.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage<F> {
    pub image: Image<F>,
    /// One flag per patch of the grid, row-major.
    pub present: Vec<bool>,
}

/// Replaces absent patches of `prev` with the matching pixels of `fallback`.
pub fn fill_missing<F: Real>(prev: &MaskedImage<F>, fallback: &Image<F>, grid: &PatchGrid) -> Result<Image<F>> {
    grid.check_image(&prev.image, "previous prediction")?;
    prev.image.ensure_same_shape(fallback, "fill_missing fallback")?;
    if prev.present.len() != grid.len() {
        return Err(Error::shape("fill_missing mask", &[grid.rows, grid.cols], &[prev.present.len()]));
    }
    let mut out = prev.image.clone();
    let mut buf = vec![F::zero(); grid.r * grid.r * fallback.c];
    for (l, &present) in prev.present.iter().enumerate() {
        if !present {
            grid.extract_into(fallback, l, &mut buf);
            grid.insert_from(&mut out, l, &buf);
        }
    }
    Ok(out)
}
