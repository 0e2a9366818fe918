use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::SliceAxis;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Lrr,
    Mse,
    Ncc,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Lrr => "lrr",
            LossKind::Mse => "mse",
            LossKind::Ncc => "ncc",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lrr" => Ok(LossKind::Lrr),
            "mse" => Ok(LossKind::Mse),
            "ncc" => Ok(LossKind::Ncc),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}`"))),
        }
    }
}

/// Optimization hyperparameters for one registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub loss: LossKind,
    /// Projector rank at full resolution (LRR only).
    pub rank: usize,
    /// Bending-energy weight.
    pub lambda: f64,
    pub axis: SliceAxis,
    /// Optimizer steps per pyramid level.
    pub steps: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Length of one triangular learning-rate cycle, in steps.
    pub cycle: usize,
    pub levels: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Voxels of displacement per unit of optimizer parameter.
    pub displacement_scale: f64,
    pub seed: u64,
    /// Stop a level when the relative loss change over `tol_window` steps
    /// falls below this.
    pub tol: f64,
    pub tol_window: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            loss: LossKind::Lrr,
            rank: 48,
            lambda: 0.5,
            axis: SliceAxis::Z,
            steps: 400,
            lr_min: 1e-5,
            lr_max: 1e-4,
            cycle: 100,
            levels: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            displacement_scale: 1000.0,
            seed: 0,
            tol: 1e-6,
            tol_window: 20,
        }
    }
}

impl RegConfig {
    pub fn with_loss(loss: LossKind) -> Self {
        RegConfig { loss, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.cycle < 2 {
            return bad("cycle must be >= 2 steps".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam moments need beta in [0, 1) and eps > 0".into());
        }
        if !(self.displacement_scale > 0.0 && self.displacement_scale.is_finite()) {
            return bad("displacement_scale must be positive".into());
        }
        if self.tol_window == 0 {
            return bad("tol_window must be >= 1".into());
        }
        Ok(())
    }

    /// Projector rank at `level` (0 = coarsest): halved per level below full
    /// resolution, never below 1.
    pub fn rank_at_level(&self, level: usize) -> usize {
        let down = self.levels - 1 - level;
        (self.rank >> down).max(1)
    }

    pub fn schedule(&self) -> CyclicLr {
        CyclicLr { min: self.lr_min, max: self.lr_max, cycle: self.cycle }
    }
}

/// Triangular cyclic learning rate: `min` at the start of every cycle, `max`
/// at step `cycle / 2`, linear in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CyclicLr {
    pub min: f64,
    pub max: f64,
    pub cycle: usize,
}

impl CyclicLr {
    pub fn at(&self, step: usize) -> f64 {
        let pos = step % self.cycle;
        let half = self.cycle / 2;
        let frac = if pos <= half {
            pos as f64 / half as f64
        } else {
            (self.cycle - pos) as f64 / (self.cycle - half) as f64
        };
        self.min + (self.max - self.min) * frac
    }
}
