use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entropy weight `kappa` and the window of recent mean entropies that
/// drives it.
///
/// While fewer than `window` entropies have been seen, `kappa` stays 0.
/// Afterwards `kappa` grows by `step` whenever the current entropy is not
/// below the window mean and shrinks by `step / 2` (never below 0)
/// otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaState {
    kappa: f64,
    history: VecDeque<f64>,
    window: usize,
    step: f64,
}

impl KappaState {
    pub fn new(window: usize, step: f64) -> Result<Self> {
        Self::with_history(0.0, &[], window, step)
    }

    /// Starts from a given `kappa` and past entropies, oldest first. Only
    /// the last `window` entries are kept.
    pub fn with_history(kappa: f64, history: &[f64], window: usize, step: f64) -> Result<Self> {
        if window == 0 || !(step > 0.0) || !(kappa >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kappa schedule needs window >= 1, step > 0 and kappa >= 0, got {window}, {step}, {kappa}"
            )));
        }
        let skip = history.len().saturating_sub(window);
        Ok(Self {
            kappa,
            history: history[skip..].iter().copied().collect(),
            window,
            step,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    /// Feeds the mean entropy of the epoch just finished and returns the
    /// weight for the next one.
    pub fn update(&mut self, entropy: f64) -> f64 {
        if self.history.len() == self.window {
            let mean = self.history.iter().sum::<f64>() / self.window as f64;
            self.kappa = if mean <= entropy {
                self.kappa + self.step
            } else {
                (self.kappa - self.step / 2.0).max(0.0)
            };
            self.history.pop_front();
        }
        self.history.push_back(entropy);
        self.kappa
    }
}

/// Scale `s` of the feasible region, W.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionState {
    pub s: f64,
}

impl RegionState {
    /// Shrinks `s` by `rho` when the widths are small relative to it:
    /// mean below `0.5 s` and maximum below `0.9 s`, both in watts.
    /// Returns whether the region shrank.
    pub fn update(&mut self, mean_width_w: f64, max_width_w: f64, rho: f64) -> bool {
        let shrink = mean_width_w < 0.5 * self.s && max_width_w < 0.9 * self.s;
        if shrink {
            self.s *= rho;
        }
        shrink
    }
}
