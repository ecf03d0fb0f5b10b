//! Bandwidth regulators: per-core LLC budget regulation driven by an L1-D
//! refill count, and the 32-level iGPU throttle actuator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::platform::GpuSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThrottleConfig {
    pub llc_threshold_mb_s: f64,
    pub regulation_period_us: u64,
    pub gpu_level: u32,
}

impl Default for ThrottleConfig {
    fn default() -> Self {
        ThrottleConfig {
            llc_threshold_mb_s: 100.0,
            regulation_period_us: 1000,
            gpu_level: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChargeResult {
    Ok,
    Throttled,
}

/// Per-core count of L2 refills attributed to best-effort contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct RefillCounter {
    pub line_bytes: u64,
    refills: Vec<f64>,
}

impl RefillCounter {
    pub fn new(num_cores: usize, line_bytes: u64) -> Self {
        RefillCounter {
            line_bytes,
            refills: vec![0.0; num_cores],
        }
    }

    pub fn add_lines(&mut self, core: usize, lines: f64) {
        self.refills[core] += lines;
    }

    pub fn lines(&self, core: usize) -> f64 {
        self.refills[core]
    }

    pub fn bytes(&self, core: usize) -> f64 {
        self.refills[core] * self.line_bytes as f64
    }

    pub fn reset(&mut self) {
        self.refills.iter_mut().for_each(|r| *r = 0.0);
    }
}

/// MemGuard-style budget regulator over LLC bandwidth. Only best-effort
/// consumption is ever charged.
#[derive(Clone, Debug, PartialEq)]
pub struct LlcRegulator {
    pub threshold_bytes_per_s: f64,
    pub regulation_period: SimTime,
    pub budget_bytes: f64,
    consumed: Vec<f64>,
    throttled: Vec<bool>,
    pub counter: RefillCounter,
}

impl LlcRegulator {
    pub fn new(num_cores: usize, line_bytes: u64, cfg: &ThrottleConfig) -> Self {
        let period = SimTime::from_us(cfg.regulation_period_us);
        let threshold = cfg.llc_threshold_mb_s * 1e6;
        LlcRegulator {
            threshold_bytes_per_s: threshold,
            regulation_period: period,
            budget_bytes: threshold * period.as_secs_f64(),
            consumed: vec![0.0; num_cores],
            throttled: vec![false; num_cores],
            counter: RefillCounter::new(num_cores, line_bytes),
        }
    }

    pub fn consumed(&self, core: usize) -> f64 {
        self.consumed[core]
    }

    pub fn is_throttled(&self, core: usize) -> bool {
        self.throttled[core]
    }

    pub fn throttled_cores(&self) -> impl Iterator<Item = usize> + '_ {
        self.throttled
            .iter()
            .enumerate()
            .filter(|(_, t)| **t)
            .map(|(c, _)| c)
    }

    pub fn remaining(&self, core: usize) -> f64 {
        (self.budget_bytes - self.consumed[core]).max(0.0)
    }

    /// Budget exhausted, within floating-point slack of a fraction of a byte.
    pub fn exhausted(&self, core: usize) -> bool {
        self.consumed[core] >= self.budget_bytes - 1e-6
    }

    /// Accounts `bytes` of best-effort traffic. `enforce` tells whether an
    /// RT gang is active for this core's throttle scope; without one the
    /// charge is a no-op.
    pub fn charge(&mut self, core: usize, bytes: f64, enforce: bool) -> ChargeResult {
        if !enforce {
            return ChargeResult::Ok;
        }
        if bytes > 0.0 {
            self.consumed[core] += bytes;
            self.counter
                .add_lines(core, bytes / self.counter.line_bytes as f64);
        }
        self.enforce(core, true)
    }

    /// Throttles the core if its budget is gone and enforcement applies.
    pub fn enforce(&mut self, core: usize, enforce: bool) -> ChargeResult {
        if self.throttled[core] || (enforce && self.exhausted(core)) {
            self.throttled[core] = true;
            ChargeResult::Throttled
        } else {
            ChargeResult::Ok
        }
    }

    /// Period boundary: clears budgets and returns the cores that resume.
    pub fn replenish(&mut self) -> Vec<usize> {
        let resumed: Vec<usize> = self.throttled_cores().collect();
        self.consumed.iter_mut().for_each(|c| *c = 0.0);
        self.throttled.iter_mut().for_each(|t| *t = false);
        self.counter.reset();
        resumed
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThrottleError {
    #[error("gpu throttle level {level} outside [0, {max}]")]
    LevelOutOfRange { level: u32, max: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuThrottleState {
    pub level: u32,
    pub fraction: f64,
}

impl GpuThrottleState {
    pub fn unthrottled() -> Self {
        GpuThrottleState {
            level: 0,
            fraction: 1.0,
        }
    }
}

pub fn set_gpu_level(gpu: &GpuSpec, level: u32) -> Result<GpuThrottleState, ThrottleError> {
    let fraction = gpu.fraction(level).ok_or(ThrottleError::LevelOutOfRange {
        level,
        max: gpu.num_throttle_levels.saturating_sub(1),
    })?;
    Ok(GpuThrottleState { level, fraction })
}
