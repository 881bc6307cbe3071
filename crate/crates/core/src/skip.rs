//! Per-timestep active-brick sets for sampling with brick skipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::brick::BrickKind;
use crate::error::{Error, Result};
use crate::stack::{ActiveSet, RefineMode, StackConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    /// Drop the top image-brick once `t <= t_break`.
    Pg,
    /// Drop the top patch-brick while `t > T - t_break`.
    Pr,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipSchedule {
    pub mode: SkipMode,
    pub t_break: usize,
    /// Length of the step grid (`T`).
    pub steps: usize,
    /// Number of bricks the schedule covers.
    pub bricks: usize,
    /// 0-based index of the brick that gets dropped.
    pub dropped: usize,
}

impl SkipSchedule {
    /// Schedule that never skips.
    pub fn none(bricks: usize, steps: usize) -> Self {
        SkipSchedule {
            mode: SkipMode::None,
            t_break: 0,
            steps,
            bricks,
            dropped: bricks.saturating_sub(1),
        }
    }

    /// Builds the schedule for `config`'s native bricks. The dropped brick is
    /// the top one, which must be an image-brick under PG and a patch-brick
    /// under PR.
    pub fn new(mode: SkipMode, t_break: usize, steps: usize, config: &StackConfig) -> Result<Self> {
        if t_break > steps {
            return Err(Error::Index {
                what: "t_break",
                index: t_break,
                lo: 0,
                hi: steps,
            });
        }
        let bricks = config.bricks.len();
        if bricks == 0 {
            return Err(Error::Config("skip schedule over an empty stack".into()));
        }
        let top = bricks - 1;
        let kind = config.bricks[top].kind;
        match mode {
            SkipMode::None => return Ok(Self::none(bricks, steps)),
            SkipMode::Pg => {
                if config.mode != RefineMode::Pg || kind != BrickKind::ImageBrick {
                    return Err(Error::Config(format!(
                        "PG skipping needs a PG stack topped by an image-brick (stack is {:?}, top is {:?})",
                        config.mode, kind
                    )));
                }
            }
            SkipMode::Pr => {
                if config.mode != RefineMode::Pr || kind != BrickKind::PatchBrick {
                    return Err(Error::Config(format!(
                        "PR skipping needs a PR stack topped by a patch-brick (stack is {:?}, top is {:?})",
                        config.mode, kind
                    )));
                }
            }
        }
        Ok(SkipSchedule {
            mode,
            t_break,
            steps,
            bricks,
            dropped: top,
        })
    }

    /// Whether the dropped brick is skipped at step `t` (1-based).
    pub fn skips_at(&self, t: usize) -> bool {
        match self.mode {
            SkipMode::None => false,
            SkipMode::Pg => t <= self.t_break,
            SkipMode::Pr => t > self.steps - self.t_break,
        }
    }

    pub fn active(&self, t: usize) -> ActiveSet {
        let mut v = vec![true; self.bricks];
        if self.skips_at(t) {
            v[self.dropped] = false;
        }
        ActiveSet(v)
    }

    /// Fraction of steps `1..=T` each brick is active.
    pub fn activity(&self) -> Vec<f64> {
        let ts: Vec<usize> = (1..=self.steps).collect();
        self.activity_over(&ts)
    }

    /// Fraction of the listed steps each brick is active.
    pub fn activity_over(&self, ts: &[usize]) -> Vec<f64> {
        let mut out = vec![1.0; self.bricks];
        if ts.is_empty() || self.bricks == 0 {
            return out;
        }
        let skipped = ts.iter().filter(|&&t| self.skips_at(t)).count();
        out[self.dropped] = 1.0 - skipped as f64 / ts.len() as f64;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configs;

    #[test]
    fn pg_break_counts() {
        let cfg = configs::lego_s_mini(RefineMode::Pg);
        let s = SkipSchedule::new(SkipMode::Pg, 500, 1000, &cfg).unwrap();
        let top = cfg.bricks.len() - 1;
        let on: Vec<usize> = (1..=1000).filter(|&t| s.active(t).is_active(top)).collect();
        assert_eq!(on.len(), 500);
        assert_eq!((on[0], on[499]), (501, 1000));
    }

    #[test]
    fn pr_skips_the_noisy_end() {
        let cfg = configs::lego_s_mini(RefineMode::Pr);
        let s = SkipSchedule::new(SkipMode::Pr, 300, 1000, &cfg).unwrap();
        let top = cfg.bricks.len() - 1;
        assert!(s.active(700).is_active(top));
        assert!(!s.active(701).is_active(top));
        assert!((s.activity()[top] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_break_is_identity() {
        let cfg = configs::lego_s_mini(RefineMode::Pg);
        let s = SkipSchedule::new(SkipMode::Pg, 0, 1000, &cfg).unwrap();
        assert!((1..=1000).all(|t| s.active(t).count() == cfg.bricks.len()));
    }

    #[test]
    fn wrong_top_kind_rejected() {
        let cfg = configs::lego_s_mini(RefineMode::Pg);
        assert!(SkipSchedule::new(SkipMode::Pr, 10, 1000, &cfg).is_err());
        assert!(SkipSchedule::new(SkipMode::Pg, 1001, 1000, &cfg).is_err());
    }
}
