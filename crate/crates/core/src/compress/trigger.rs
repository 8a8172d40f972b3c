use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub decay: f64,
    pub window: usize,
    pub tolerance: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            decay: 0.9998,
            window: 15_000,
            tolerance: 0.001,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config("trigger decay must lie in (0, 1)"));
        }
        if self.window == 0 {
            return Err(Error::config("trigger window must be positive"));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::config("trigger tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Convergence detector on an exponential moving average of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerState {
    pub config: TriggerConfig,
    /// Current average; starts at the first observed loss.
    pub ema: Option<f64>,
    /// Averages from the previous `window` updates, oldest first.
    pub history: VecDeque<f64>,
}

impl TriggerState {
    pub fn new(config: TriggerConfig) -> Self {
        Self {
            config,
            ema: None,
            history: VecDeque::with_capacity(config.window),
        }
    }

    /// Fold in one loss. Fires when the average moved by at most the
    /// tolerance over the last `window` updates; firing restarts the window.
    pub fn update(&mut self, loss: f64) -> bool {
        let c = self.config;
        let ema = match self.ema {
            None => loss,
            Some(prev) => c.decay * prev + (1.0 - c.decay) * loss,
        };
        self.ema = Some(ema);
        let fire = self.history.len() == c.window && (ema - self.history[0]).abs() <= c.tolerance;
        if fire {
            self.history.clear();
        } else if self.history.len() == c.window {
            self.history.pop_front();
        }
        self.history.push_back(ema);
        fire
    }

    /// Forget the average and the window.
    pub fn reset(&mut self) {
        self.ema = None;
        self.history.clear();
    }
}
