//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
    /// Cosine whose phase is slowed by `zeta`, so it stops at `pi / zeta`
    /// and ends on a nonzero floor.
    DecayedCosine,
    /// Linear decay to zero.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: usize,
    /// Slowdown coefficient; only read by [`ScheduleKind::DecayedCosine`].
    pub zeta: f64,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base_lr: f64, total_steps: usize) -> Result<Self> {
        Self {
            kind,
            base_lr,
            total_steps,
            zeta: 2.5,
        }
        .validated()
    }

    pub fn with_zeta(mut self, zeta: f64) -> Result<Self> {
        self.zeta = zeta;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps must be positive"));
        }
        if !(self.zeta > 0.0) {
            return Err(Error::invalid(format!("zeta must be positive, got {}", self.zeta)));
        }
        Ok(self)
    }

    /// Learning rate at step `t`, `0 <= t <= total_steps`.
    pub fn lr(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::invalid(format!(
                "step {t} beyond schedule length {}",
                self.total_steps
            )));
        }
        let frac = t as f64 / self.total_steps as f64;
        let pi = std::f64::consts::PI;
        Ok(match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => self.base_lr * 0.5 * (1.0 + (pi * frac).cos()),
            ScheduleKind::DecayedCosine => {
                self.base_lr * 0.5 * (1.0 + (pi * frac / self.zeta).cos())
            }
            ScheduleKind::Linear => self.base_lr * (1.0 - frac),
        })
    }
}
