//! Satisfaction penalties.
//!
//! The dynamic penalty mixes a linear and a squared term whose coefficients
//! follow a dual-ascent rule on the satisfaction shortfall. Each step computes
//! the penalty with the current coefficients and only then updates them.

use serde::{Deserialize, Serialize};

use crate::domain::PenaltyConfig;

/// `beta * max(0, c_bound - c_ave)`.
pub fn linear_penalty(beta: f64, c_bound: f64, c_ave: f64) -> f64 {
    beta * (c_bound - c_ave).max(0.0)
}

/// `beta * (c_bound - c_ave)²`; deviations on either side are penalized.
pub fn squared_penalty(beta: f64, c_bound: f64, c_ave: f64) -> f64 {
    let gap = c_bound - c_ave;
    beta * gap * gap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyState {
    pub beta_lin: f64,
    pub beta_sqr: f64,
    pub cfg: PenaltyConfig,
}

impl PenaltyState {
    pub fn new(cfg: PenaltyConfig) -> Self {
        Self {
            beta_lin: cfg.beta_lin0,
            beta_sqr: cfg.beta_sqr0,
            cfg,
        }
    }

    /// Restores the initial coefficients.
    pub fn reset(&mut self) {
        *self = Self::new(self.cfg);
    }

    /// Penalty for the running average `c_ave` under the current coefficients.
    pub fn penalty(&self, c_ave: f64) -> f64 {
        if !self.cfg.enabled {
            return 0.0;
        }
        combined_penalty(self, self.cfg.c_bound, c_ave)
    }

    /// Penalty first, then the coefficient update. Returns the penalty.
    pub fn apply(&mut self, c_ave: f64) -> f64 {
        let pen = self.penalty(c_ave);
        if self.cfg.enabled {
            *self = update_coefficients(self, self.cfg.c_bound, c_ave);
        }
        pen
    }
}

/// `½ β_lin max(0, C^b - C_ave) + ½ β_sqr (C^b - C_ave)²`.
pub fn combined_penalty(st: &PenaltyState, c_bound: f64, c_ave: f64) -> f64 {
    0.5 * linear_penalty(st.beta_lin, c_bound, c_ave)
        + 0.5 * squared_penalty(st.beta_sqr, c_bound, c_ave)
}

/// One ascent step on both coefficients, capped at `beta_cap`.
pub fn update_coefficients(st: &PenaltyState, c_bound: f64, c_ave: f64) -> PenaltyState {
    let gap = c_bound - c_ave;
    let cap = st.cfg.beta_cap;
    PenaltyState {
        beta_lin: (st.beta_lin + st.cfg.eta_lin * gap).max(0.0).min(cap),
        beta_sqr: (st.beta_sqr + st.cfg.eta_sqr * gap.abs()).min(cap),
        cfg: st.cfg,
    }
}
