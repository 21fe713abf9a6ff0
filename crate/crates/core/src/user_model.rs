//! End-user response and satisfaction scoring.
//!
//! Users are myopic welfare maximizers: each period they pick the demand that
//! maximizes `u_a d² + u_b d - λ d` within their bounds. The objective is
//! separable over periods, so the per-period maximizer is closed form.

use crate::domain::{SatisfactionConfig, UserProfile};

/// Upward nudge applied before flooring the raw satisfaction value.
pub const FLOOR_NUDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatisfactionIndices {
    /// Deviation from the ideal demand.
    pub deviation: f64,
    /// Change relative to the previous period.
    pub variation: f64,
    /// 1 when the demand sits within epsilon of a bound.
    pub limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserStepResult {
    pub demand: f64,
    pub welfare: f64,
    pub satisfaction: u8,
    pub indices: SatisfactionIndices,
}

/// Welfare-maximizing demand at `price` in period `t`.
pub fn optimal_demand(profile: &UserProfile, price: f64, t: usize) -> f64 {
    let stationary = (price - profile.u_b) / (2.0 * profile.u_a);
    stationary.clamp(profile.d_lo[t], profile.d_hi[t])
}

/// `U(d) - λ d`.
pub fn welfare(profile: &UserProfile, demand: f64, price: f64) -> f64 {
    profile.u_a * demand * demand + profile.u_b * demand - price * demand
}

pub fn deviation_index(profile: &UserProfile, demand: f64, t: usize) -> f64 {
    let ideal = profile.d_ideal[t];
    let denom = (profile.d_hi[t] - ideal).max(ideal - profile.d_lo[t]);
    if denom <= 0.0 {
        return 0.0;
    }
    ((demand - ideal).abs() / denom).min(1.0)
}

pub fn variation_index(profile: &UserProfile, demand: f64, prev_demand: f64, t: usize) -> f64 {
    let span = (profile.d_hi[t] - profile.d_lo[t]).abs();
    if span == 0.0 {
        return 0.0;
    }
    // The previous demand obeys the previous period's bounds, which may be
    // wider than this period's span.
    ((demand - prev_demand).abs() / span).min(1.0)
}

pub fn limit_index(profile: &UserProfile, demand: f64, t: usize) -> f64 {
    let eps = profile.epsilon;
    if (demand - profile.d_hi[t]).abs() <= eps || (demand - profile.d_lo[t]).abs() <= eps {
        1.0
    } else {
        0.0
    }
}

/// Quantized satisfaction score in `0..=10`.
pub fn satisfaction_level(cfg: &SatisfactionConfig, ind: SatisfactionIndices) -> u8 {
    let raw = 10.0
        - cfg.omega1 * ind.deviation
        - cfg.omega2 * ind.variation
        - cfg.omega3() * ind.limit;
    (raw + FLOOR_NUDGE).floor().clamp(0.0, 10.0) as u8
}

/// Response, welfare, indices and score of one user for one period.
pub fn respond(
    profile: &UserProfile,
    cfg: &SatisfactionConfig,
    price: f64,
    prev_demand: f64,
    t: usize,
) -> UserStepResult {
    let demand = optimal_demand(profile, price, t);
    let indices = SatisfactionIndices {
        deviation: deviation_index(profile, demand, t),
        variation: variation_index(profile, demand, prev_demand, t),
        limit: limit_index(profile, demand, t),
    };
    UserStepResult {
        demand,
        welfare: welfare(profile, demand, price),
        satisfaction: satisfaction_level(cfg, indices),
        indices,
    }
}

/// Cumulative within-episode mean of all users' scores over periods `1..=t`.
///
/// `history[k]` holds the scores of period `k + 1`.
pub fn running_average_satisfaction(history: &[Vec<u8>], t: usize, n_users: usize) -> f64 {
    let total: u64 = history[..t]
        .iter()
        .flat_map(|row| row.iter().map(|&c| u64::from(c)))
        .sum();
    total as f64 / (n_users * t) as f64
}
