//! Replay-ratio accumulator and the adaptive replay-ratio controller.
//!
//! The controller starts at a low replay ratio and, once the critic's FAU
//! stops moving between consecutive checkpoints, latches to a high one.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RRMode {
    Static,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RRDecision {
    Keep,
    Switch,
}

/// Replay-ratio settings as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RRConfig {
    pub mode: RRMode,
    pub low: f64,
    pub high: f64,
    /// Replay ratio of a static run; defaults to `low`.
    pub value: Option<f64>,
    pub epsilon: f64,
    /// Checkpoint spacing in episodes.
    pub check_interval_episodes: u64,
    /// Optional exponential smoothing factor applied to the observed FAU
    /// (`s ← β·s + (1−β)·φ`); absent means raw values.
    pub ema: Option<f64>,
    /// Values run by the replay-ratio sweep protocol.
    pub sweep: Vec<f64>,
}

impl Default for RRConfig {
    fn default() -> Self {
        Self {
            mode: RRMode::Static,
            low: 0.5,
            high: 2.0,
            value: None,
            epsilon: 1e-3,
            check_interval_episodes: 10,
            ema: None,
            sweep: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl RRConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.low) || !ok(self.high) || !self.value.is_none_or(ok) {
            return Err(LabError::Config("replay ratios must be positive".into()));
        }
        if !self.sweep.iter().all(|&x| ok(x)) {
            return Err(LabError::Config("rr.sweep values must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(LabError::Config("rr.epsilon must be non-negative".into()));
        }
        if self.check_interval_episodes == 0 {
            return Err(LabError::Config("rr.check_interval_episodes must be positive".into()));
        }
        if let Some(b) = self.ema {
            if !(0.0..1.0).contains(&b) {
                return Err(LabError::Config("rr.ema must be in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Controller for a run with the given episode length and warm-up.
    pub fn build(&self, episode_len: u64, seed_steps: u64) -> Result<RRControllerState> {
        self.validate()?;
        let check_interval = self.check_interval_episodes * episode_len;
        let mut s = match self.mode {
            RRMode::Static => RRControllerState::fixed(self.value.unwrap_or(self.low)),
            RRMode::Adaptive => RRControllerState::adaptive(self.low, self.high, self.epsilon, check_interval),
        };
        s.check_interval = check_interval;
        s.min_steps_before_check = seed_steps + check_interval;
        s.ema = self.ema;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RRControllerState {
    pub mode: RRMode,
    pub rr_low: f64,
    pub rr_high: f64,
    pub rr_current: f64,
    pub accumulator: f64,
    pub check_interval: u64,
    pub epsilon: f64,
    pub last_phi: Option<f64>,
    pub switched: bool,
    pub switch_step: Option<u64>,
    pub min_steps_before_check: u64,
    pub ema: Option<f64>,
    total_updates: u64,
}

/// Loggable view of a controller.
#[derive(Clone, Debug, PartialEq)]
pub struct RRSummary {
    pub mode: RRMode,
    pub rr_current: f64,
    pub switched: bool,
    pub switch_step: Option<u64>,
}

impl RRControllerState {
    pub fn fixed(rr: f64) -> Self {
        Self {
            mode: RRMode::Static,
            rr_low: rr,
            rr_high: rr,
            rr_current: rr,
            accumulator: 0.0,
            check_interval: 0,
            epsilon: 0.0,
            last_phi: None,
            switched: false,
            switch_step: None,
            min_steps_before_check: 0,
            ema: None,
            total_updates: 0,
        }
    }

    pub fn adaptive(rr_low: f64, rr_high: f64, epsilon: f64, check_interval: u64) -> Self {
        Self {
            mode: RRMode::Adaptive,
            rr_high,
            epsilon,
            check_interval,
            ..Self::fixed(rr_low)
        }
    }

    /// Number of gradient updates owed after one environment step.
    pub fn updates_due(&mut self) -> u64 {
        self.accumulator += self.rr_current;
        let k = self.accumulator.floor();
        self.accumulator -= k;
        let k = k as u64;
        self.total_updates += k;
        k
    }

    pub fn total_updates(&self) -> u64 {
        self.total_updates
    }

    /// Whether `step` is a checkpoint at which the controller wants a reading.
    pub fn is_check_step(&self, step: u64) -> bool {
        self.mode == RRMode::Adaptive
            && self.check_interval > 0
            && step >= self.min_steps_before_check
            && step % self.check_interval == 0
    }

    /// Feeds the critic FAU measured at a checkpoint. Switches to the high
    /// replay ratio (once, permanently) when it moved by less than `epsilon`
    /// since the previous checkpoint.
    pub fn observe_fau(&mut self, step: u64, phi_critic: f64) -> Result<RRDecision> {
        if !(0.0..=1.0).contains(&phi_critic) {
            return Err(LabError::Contract(format!("FAU {phi_critic} outside [0, 1]")));
        }
        let phi = match (self.ema, self.last_phi) {
            (Some(b), Some(prev)) => b * prev + (1.0 - b) * phi_critic,
            _ => phi_critic,
        };
        if self.mode == RRMode::Static || self.switched {
            self.last_phi = Some(phi);
            return Ok(RRDecision::Keep);
        }
        if let Some(prev) = self.last_phi {
            if (phi - prev).abs() < self.epsilon {
                self.rr_current = self.rr_high;
                self.switched = true;
                self.switch_step = Some(step);
                self.last_phi = Some(phi);
                return Ok(RRDecision::Switch);
            }
        }
        self.last_phi = Some(phi);
        Ok(RRDecision::Keep)
    }

    pub fn describe(&self) -> RRSummary {
        RRSummary {
            mode: self.mode,
            rr_current: self.rr_current,
            switched: self.switched,
            switch_step: self.switch_step,
        }
    }
}
