//! Linear-beta DDPM noise schedule.

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

/// Per-step quantities, indexed by `t = 1..=T`. `alpha_bar(0)` is 1 (clean data).
#[derive(Debug, Clone)]
pub struct Schedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Schedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleParams { steps, beta_min, beta_max })
    }

    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { steps, beta_min, beta_max } = params;
        if steps == 0 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        if 1.0 - beta_min == 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "beta_min {beta_min} is below f64 resolution around 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).sqrt()
            })
            .collect();
        Ok(Self { params, betas, alpha_bars, sigmas })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Standard deviation of the ancestral noise added when stepping from `t`
    /// to `t - 1`; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// The positive factor relating noise predictions to scores:
    /// `eps = -eps_scale(t) * score`.
    pub fn eps_scale(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn digest(&self) -> String {
        json_digest(&self.params)
    }
}
