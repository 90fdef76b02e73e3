use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    InverseSqrtAnnealing,
    CosineAnnealing,
}

/// Linear warmup followed by inverse-square-root or cosine decay.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak_lr: f32,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub min_lr: f32,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, peak_lr: f32, warmup_steps: u64, max_steps: u64, min_lr: f32) -> Result<Self> {
        let s = Self {
            kind,
            peak_lr,
            warmup_steps,
            max_steps,
            min_lr,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.max_steps == 0 || self.warmup_steps > self.max_steps {
            return Err(Error::Parameter(format!(
                "schedule needs 0 < warmup_steps ({}) <= max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::Parameter(format!(
                "schedule needs 0 <= min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    /// Warmup covering `fraction` of `max_steps`, at least one step.
    pub fn with_warmup_fraction(kind: ScheduleKind, peak_lr: f32, max_steps: u64, fraction: f64, min_lr: f32) -> Result<Self> {
        let warmup = ((max_steps as f64 * fraction).round() as u64).clamp(1, max_steps.max(1));
        Self::new(kind, peak_lr, warmup, max_steps, min_lr)
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f32 {
    let s = schedule;
    if step < s.warmup_steps {
        return (f64::from(s.peak_lr) * step as f64 / s.warmup_steps as f64) as f32;
    }
    let lr = match s.kind {
        ScheduleKind::InverseSqrtAnnealing => {
            s.peak_lr * (s.warmup_steps as f32 / step as f32).sqrt()
        }
        ScheduleKind::CosineAnnealing => {
            let span = (s.max_steps - s.warmup_steps).max(1) as f32;
            let progress = ((step - s.warmup_steps) as f32 / span).min(1.0);
            s.min_lr + (s.peak_lr - s.min_lr) * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
        }
    };
    lr.max(s.min_lr)
}
