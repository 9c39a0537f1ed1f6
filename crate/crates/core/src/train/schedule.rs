use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One phase of the staged sequence-length schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub tokens: u64,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_stable: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    /// Fraction of all steps after which the decay phase starts.
    pub decay_start_fraction: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Tokens per optimizer step; each step takes `batch_tokens / seq_len` rows.
    pub batch_tokens: usize,
    pub stages: Vec<Stage>,
    /// Share of each batch drawn from the primary data stream.
    #[serde(default = "default_mix")]
    pub mix_fraction: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_mix() -> f64 {
    0.7
}

impl TrainConfig {
    /// Default optimiser and schedule hyperparameters; callers set the token
    /// budget, batch and warmup.
    pub fn standard(batch_tokens: usize, stages: Vec<Stage>) -> Self {
        Self {
            lr_stable: 4.5e-4,
            lr_min: 4.5e-6,
            warmup_steps: 0,
            decay_start_fraction: 0.82,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: default_weight_decay(),
            batch_tokens,
            stages,
            mix_fraction: default_mix(),
            grad_clip: None,
        }
    }

    /// `lr_stable = lr_min = 0` is accepted as a frozen run.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        let frozen = self.lr_stable == 0.0 && self.lr_min == 0.0;
        if !frozen && !(self.lr_min > 0.0 && self.lr_min <= self.lr_stable) {
            return fail("need 0 < lr_min ≤ lr_stable");
        }
        if !self.lr_stable.is_finite() {
            return fail("lr_stable must be finite");
        }
        for (name, f) in [("decay_start_fraction", self.decay_start_fraction), ("mix_fraction", self.mix_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} = {f} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return fail("need adam_eps > 0 and weight_decay ≥ 0");
        }
        if self.stages.is_empty() {
            return fail("stage list is empty");
        }
        if self.batch_tokens == 0 || self.stages.iter().any(|s| s.seq_len == 0) {
            return fail("batch_tokens and seq_len must be positive");
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return fail("grad_clip must be positive");
        }
        let total = self.total_steps();
        if self.warmup_steps > self.decay_start(total) {
            return fail("warmup runs past the decay start");
        }
        Ok(())
    }

    pub fn stage_steps(&self, stage: &Stage) -> usize {
        (stage.tokens / self.batch_tokens as u64) as usize
    }

    pub fn rows_per_step(&self, stage: &Stage) -> usize {
        (self.batch_tokens / stage.seq_len).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| self.stage_steps(s)).sum()
    }

    fn decay_start(&self, total: usize) -> usize {
        (self.decay_start_fraction * total as f64).round() as usize
    }

    pub fn schedule(&self) -> WsdSchedule {
        let total = self.total_steps();
        WsdSchedule {
            lr_stable: self.lr_stable,
            lr_min: self.lr_min,
            warmup_steps: self.warmup_steps,
            decay_start: self.decay_start(total),
            total_steps: total,
        }
    }
}

/// Warmup-stable-decay: linear ramp from 0, a constant plateau, then a cosine
/// from `lr_stable` down to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub lr_stable: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub decay_start: usize,
    pub total_steps: usize,
}

impl WsdSchedule {
    /// Steps past `total_steps` stay at `lr_min`.
    pub fn lr(&self, step: usize) -> f64 {
        self.lr_at(step as f64)
    }

    /// Same schedule on a continuous step axis.
    pub fn lr_at(&self, step: f64) -> f64 {
        let (w, d, t) = (self.warmup_steps as f64, self.decay_start as f64, self.total_steps as f64);
        if step < w {
            self.lr_stable * step / w
        } else if step <= d {
            self.lr_stable
        } else if step >= t {
            self.lr_min
        } else {
            let progress = (step - d) / (t - d);
            self.lr_min + 0.5 * (self.lr_stable - self.lr_min) * (1.0 + (PI * progress).cos())
        }
    }
}

/// Learning rate for `step` under the schedule `cfg` implies.
pub fn wsd_lr(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.schedule().lr(step)
}
