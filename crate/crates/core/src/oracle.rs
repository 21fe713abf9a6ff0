//! Optimal-value references over a discretized action grid.
//!
//! Grid actions are raw actions (`a1` and `a2` evenly spaced over `[-1, 1]`)
//! pushed through the true environment step, so the price grid always lies on
//! the step's feasible interval and battery commands are clipped exactly as
//! the agent's would be.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Scenario;
use crate::error::{Error, Result};
use crate::market_env::{
    episode_return, initial_state, rollout, step, ActionRaw, EnvState, FixedActions, Policy,
    StepOutcome,
};

pub const EXHAUSTIVE_LIMIT: f64 = 1e7;
pub const DP_HORIZON_LIMIT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_price: usize,
    pub n_batt: usize,
    /// Longest horizon exhaustive search accepts.
    pub max_horizon: usize,
}

impl GridSpec {
    pub fn new(n_price: usize, n_batt: usize) -> Self {
        Self {
            n_price,
            n_batt,
            max_horizon: 6,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_price < 2 || self.n_batt < 2 {
            return Err(Error::InvalidArgument("grid needs at least 2 points per axis".into()));
        }
        Ok(())
    }

    /// Grid actions, price-major. Index order defines the tie-break order.
    pub fn actions(&self) -> Vec<ActionRaw> {
        let lin = |n: usize, k: usize| -1.0 + 2.0 * k as f64 / (n - 1) as f64;
        let mut v = Vec::with_capacity(self.n_price * self.n_batt);
        for i in 0..self.n_price {
            for j in 0..self.n_batt {
                v.push(ActionRaw::new(lin(self.n_price, i), lin(self.n_batt, j)));
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Total reward of `best_actions` replayed through the environment.
    pub best_value: f64,
    pub best_actions: Vec<ActionRaw>,
    pub trace: Vec<StepOutcome>,
    /// Value the search itself computed; differs from `best_value` only when
    /// the dynamic program rounds the state of charge.
    pub search_value: f64,
}

/// The oracle always starts from per-episode penalty coefficients.
fn episode_scenario(s: &Scenario) -> Scenario {
    let mut s = s.clone();
    s.penalty.persist_across_episodes = false;
    s
}

fn finish(s: &Scenario, actions: Vec<ActionRaw>, search_value: f64) -> Result<OracleResult> {
    let trace = rollout(s, &mut FixedActions(actions.clone()), 0)?;
    Ok(OracleResult {
        best_value: episode_return(&trace),
        best_actions: actions,
        trace,
        search_value,
    })
}

struct Best {
    value: f64,
    path: Vec<usize>,
}

fn search(
    s: &Scenario,
    grid: &[ActionRaw],
    st: &EnvState,
    acc: f64,
    path: &mut Vec<usize>,
    best: &mut Option<Best>,
) -> Result<()> {
    if st.t >= s.horizon {
        if best.as_ref().is_none_or(|b| acc > b.value) {
            *best = Some(Best {
                value: acc,
                path: path.clone(),
            });
        }
        return Ok(());
    }
    for (k, &a) in grid.iter().enumerate() {
        let (out, next, _) = step(s, st, a)?;
        path.push(k);
        search(s, grid, &next, acc + out.reward, path, best)?;
        path.pop();
    }
    Ok(())
}

/// Enumerates every grid action sequence; ties go to the lexicographically
/// smallest sequence of grid indices.
pub fn exhaustive_optimal(scenario: &Scenario, grid: &GridSpec) -> Result<OracleResult> {
    grid.check()?;
    let s = episode_scenario(scenario);
    if s.horizon > grid.max_horizon {
        return Err(Error::Guard(format!(
            "horizon {} exceeds the exhaustive limit {}",
            s.horizon, grid.max_horizon
        )));
    }
    let actions = grid.actions();
    let count = (actions.len() as f64).powi(s.horizon as i32);
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::Guard(format!(
            "{count:.0} action sequences exceed the limit {EXHAUSTIVE_LIMIT:.0}"
        )));
    }
    let root = initial_state(&s, 0);
    let branches: Vec<Result<Option<Best>>> = (0..actions.len())
        .into_par_iter()
        .map(|k| {
            let (out, next, _) = step(&s, &root, actions[k])?;
            let mut best = None;
            let mut path = vec![k];
            search(&s, &actions, &next, 0.0 + out.reward, &mut path, &mut best)?;
            Ok(best)
        })
        .collect();
    let mut best: Option<Best> = None;
    for b in branches {
        if let Some(b) = b? {
            if best.as_ref().is_none_or(|x| b.value > x.value) {
                best = Some(b);
            }
        }
    }
    let best = best.expect("grid is non-empty");
    let seq = best.path.iter().map(|&k| actions[k]).collect();
    finish(&s, seq, best.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpLimits {
    /// Number of evenly spaced state-of-charge buckets over `[soc_min, soc_max]`.
    pub soc_levels: usize,
    /// Largest number of distinct states allowed in one period.
    pub max_states: usize,
}

impl Default for DpLimits {
    fn default() -> Self {
        Self {
            soc_levels: 201,
            max_states: 2_000_000,
        }
    }
}

/// Everything the rest of an episode depends on, with the state of charge
/// replaced by its bucket. The previous price and the penalty coefficients
/// are kept bit-exact; the previous demands are a function of the previous
/// price and period, so they need no key of their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct DpKey {
    soc_bucket: usize,
    price_bits: u64,
    sat_sum: u64,
    beta_lin_bits: u64,
    beta_sqr_bits: u64,
}

struct DpNode {
    value: f64,
    path: Vec<usize>,
    state: EnvState,
}

fn soc_bucket(s: &Scenario, levels: usize, soc: f64) -> (usize, f64) {
    let (lo, hi) = (s.battery.soc_min, s.battery.soc_max);
    if levels < 2 || hi <= lo {
        return (0, soc);
    }
    let step = (hi - lo) / (levels - 1) as f64;
    let k = ((soc - lo) / step).round().clamp(0.0, (levels - 1) as f64) as usize;
    (k, lo + k as f64 * step)
}

/// Forward dynamic program over reachable states. Among paths that reach the
/// same state the one with the higher value survives, ties going to the
/// lexicographically smaller path, so with exact buckets the result equals
/// exhaustive search.
pub fn dp_optimal(scenario: &Scenario, grid: &GridSpec, limits: &DpLimits) -> Result<OracleResult> {
    grid.check()?;
    let s = episode_scenario(scenario);
    if s.horizon > DP_HORIZON_LIMIT {
        return Err(Error::Guard(format!(
            "horizon {} exceeds the dynamic-programming limit {DP_HORIZON_LIMIT}",
            s.horizon
        )));
    }
    let actions = grid.actions();
    let battery_active = s.battery.capacity > 0.0 && s.battery.soc_max > s.battery.soc_min;
    let key_of = |st: &EnvState| DpKey {
        soc_bucket: if battery_active {
            soc_bucket(&s, limits.soc_levels, st.soc).0
        } else {
            0
        },
        price_bits: st.lambda_prev.to_bits(),
        sat_sum: st.sat_sum,
        beta_lin_bits: st.penalty.beta_lin.to_bits(),
        beta_sqr_bits: st.penalty.beta_sqr.to_bits(),
    };

    let mut layer: Vec<DpNode> = vec![DpNode {
        value: 0.0,
        path: Vec::new(),
        state: initial_state(&s, 0),
    }];
    for _t in 0..s.horizon {
        let mut index: HashMap<DpKey, usize> = HashMap::new();
        let mut next_layer: Vec<DpNode> = Vec::new();
        for node in &layer {
            for (k, &a) in actions.iter().enumerate() {
                let (out, mut next, _) = step(&s, &node.state, a)?;
                if battery_active {
                    next.soc = soc_bucket(&s, limits.soc_levels, next.soc).1;
                }
                let value = node.value + out.reward;
                let key = key_of(&next);
                let mut path = node.path.clone();
                path.push(k);
                match index.get(&key) {
                    Some(&i) => {
                        let cur = &mut next_layer[i];
                        if value > cur.value || (value == cur.value && path < cur.path) {
                            *cur = DpNode {
                                value,
                                path,
                                state: next,
                            };
                        }
                    }
                    None => {
                        if next_layer.len() >= limits.max_states {
                            return Err(Error::Guard(format!(
                                "more than {} states in one period",
                                limits.max_states
                            )));
                        }
                        index.insert(key, next_layer.len());
                        next_layer.push(DpNode {
                            value,
                            path,
                            state: next,
                        });
                    }
                }
            }
        }
        layer = next_layer;
    }
    let best = layer
        .into_iter()
        .reduce(|a, b| {
            if b.value > a.value || (b.value == a.value && b.path < a.path) {
                b
            } else {
                a
            }
        })
        .expect("at least one path");
    let seq = best.path.iter().map(|&k| actions[k]).collect();
    finish(&s, seq, best.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub agent_return: f64,
    pub agent_trace: Vec<StepOutcome>,
    pub oracle: OracleResult,
    /// `agent_return / oracle.best_value`, not clamped.
    pub ratio: f64,
}

/// Scores a policy against the dynamic-programming optimum of the same
/// scenario, both starting from per-episode penalty coefficients.
pub fn certify(
    policy: &mut dyn Policy,
    scenario: &Scenario,
    grid: &GridSpec,
    limits: &DpLimits,
) -> Result<CertifyReport> {
    let s = episode_scenario(scenario);
    let oracle = dp_optimal(&s, grid, limits)?;
    let agent_trace = rollout(&s, policy, 0)?;
    let agent_return = episode_return(&agent_trace);
    Ok(CertifyReport {
        ratio: agent_return / oracle.best_value,
        agent_return,
        agent_trace,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_window, SynthProfile};
    use crate::domain::{BatterySpec, PenaltyConfig};
    use crate::market_env::ConstantAction;
    use crate::user_model::optimal_demand;
    use proptest::prelude::*;

    fn small(horizon: usize, users: usize) -> Scenario {
        let mut s = synth_window(7, SynthProfile::Winter, 6, horizon, users).unwrap();
        s.t_his = 2;
        s.t_pre = 1;
        s
    }

    fn no_battery(mut s: Scenario) -> Scenario {
        s.battery = BatterySpec::disabled();
        s
    }

    fn linspace(n: usize) -> Vec<f64> {
        (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn single_period_matches_a_price_scan() {
        let mut s = no_battery(small(1, 1));
        s.penalty = PenaltyConfig::off();
        let grid = GridSpec::new(7, 2);
        let r = exhaustive_optimal(&s, &grid).unwrap();
        // Direct scan over prices on the hard interval.
        let dso = s.dso_price_at(0);
        let pv = s.pv_at(0);
        let (lo, hi) = (s.pricing.k1 * dso, s.pricing.k2 * dso);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for a in linspace(7) {
            let price = 0.5 * (lo + hi) + a * 0.5 * (hi - lo);
            let d = optimal_demand(&s.users[0], price, 0);
            let net = d - pv;
            let value = price * d - net.max(0.0) * dso - s.pricing.rho_res * (-net).max(0.0);
            if value > best.0 {
                best = (value, price);
            }
        }
        assert!((r.best_value - best.0).abs() < 1e-9);
        assert!((r.trace[0].price - best.1).abs() < 1e-12);
    }

    #[test]
    fn single_period_search_methods_agree() {
        let s = small(1, 2);
        let g = GridSpec::new(5, 3);
        let a = exhaustive_optimal(&s, &g).unwrap();
        let b = dp_optimal(&s, &g, &DpLimits::default()).unwrap();
        assert_eq!(a.best_value, b.best_value);
        assert_eq!(a.best_actions, b.best_actions);
    }

    #[test]
    fn dp_matches_exhaustive_without_battery() {
        for horizon in 1..=3 {
            let s = no_battery(small(horizon, 3));
            let g = GridSpec::new(3, 2);
            let a = exhaustive_optimal(&s, &g).unwrap();
            let b = dp_optimal(&s, &g, &DpLimits::default()).unwrap();
            assert!((a.best_value - b.best_value).abs() < 1e-9, "T={horizon}");
            assert_eq!(a.best_actions, b.best_actions);
        }
    }

    #[test]
    fn replay_reproduces_the_value() {
        let s = small(3, 1);
        let g = GridSpec::new(3, 3);
        let r = exhaustive_optimal(&s, &g).unwrap();
        assert_eq!(r.best_value, r.search_value);
        let again = rollout(&s, &mut FixedActions(r.best_actions.clone()), 0).unwrap();
        assert!((episode_return(&again) - r.best_value).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_ramp_decomposes_per_period() {
        let mut s = no_battery(small(3, 2));
        s.penalty = PenaltyConfig::off();
        s.pricing.delta_lambda = 10.0;
        let g = GridSpec::new(5, 2);
        let r = dp_optimal(&s, &g, &DpLimits::default()).unwrap();
        let mut total = 0.0;
        for t in 0..s.horizon {
            let dso = s.dso_price_at(t);
            let pv = s.pv_at(t);
            let (lo, hi) = (s.pricing.k1 * dso, s.pricing.k2 * dso);
            total += linspace(5)
                .into_iter()
                .map(|a| {
                    let price = 0.5 * (lo + hi) + a * 0.5 * (hi - lo);
                    let d: f64 = s.users.iter().map(|u| optimal_demand(u, price, t)).sum();
                    let net = d - pv;
                    price * d - net.max(0.0) * dso - s.pricing.rho_res * (-net).max(0.0)
                })
                .fold(f64::NEG_INFINITY, f64::max);
        }
        assert!((r.best_value - total).abs() < 1e-9);
    }

    #[test]
    fn ramp_constrained_prices_match_a_price_only_search() {
        let mut s = no_battery(small(3, 2));
        s.penalty = PenaltyConfig::off();
        s.pricing.delta_lambda = 0.01;
        let g = GridSpec::new(4, 2);
        let r = dp_optimal(&s, &g, &DpLimits::default()).unwrap();
        // Independent recursion over prices only.
        fn go(s: &Scenario, t: usize, prev: Option<f64>, n: usize) -> f64 {
            if t == s.horizon {
                return 0.0;
            }
            let dso = s.dso_price_at(t);
            let pv = s.pv_at(t);
            let (mut lo, mut hi) = (s.pricing.k1 * dso, s.pricing.k2 * dso);
            if let Some(p) = prev {
                let (rl, rh) = (lo.max(p - s.pricing.delta_lambda), hi.min(p + s.pricing.delta_lambda));
                if rl <= rh {
                    (lo, hi) = (rl, rh);
                } else {
                    let c = p.clamp(lo, hi);
                    (lo, hi) = (c, c);
                }
            }
            (0..n)
                .map(|k| {
                    let a = -1.0 + 2.0 * k as f64 / (n - 1) as f64;
                    let price = (0.5 * (lo + hi) + a * 0.5 * (hi - lo)).clamp(lo, hi);
                    let d: f64 = s.users.iter().map(|u| optimal_demand(u, price, t)).sum();
                    let net = d - pv;
                    let v = price * d - net.max(0.0) * dso - s.pricing.rho_res * (-net).max(0.0);
                    v + go(s, t + 1, Some(price), n)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
        assert!((r.best_value - go(&s, 0, None, 4)).abs() < 1e-9);
    }

    #[test]
    fn dp_beats_constant_grid_policies() {
        let s = small(4, 2);
        let g = GridSpec::new(3, 3);
        let r = dp_optimal(&s, &g, &DpLimits::default()).unwrap();
        for a in g.actions() {
            let v = episode_return(&rollout(&s, &mut ConstantAction(a), 0).unwrap());
            assert!(r.search_value >= v - 1e-9);
        }
    }

    #[test]
    fn certifying_the_oracle_gives_one() {
        let s = small(3, 1);
        let g = GridSpec::new(3, 3);
        let limits = DpLimits::default();
        let o = dp_optimal(&s, &g, &limits).unwrap();
        let rep = certify(&mut FixedActions(o.best_actions.clone()), &s, &g, &limits).unwrap();
        assert_eq!(rep.ratio, 1.0);
    }

    #[test]
    fn guards() {
        let s = small(7, 1);
        assert!(matches!(
            exhaustive_optimal(&s, &GridSpec::new(3, 3)),
            Err(Error::Guard(_))
        ));
        let mut g = GridSpec::new(10, 10);
        g.max_horizon = 6;
        assert!(matches!(
            exhaustive_optimal(&small(4, 1), &g),
            Err(Error::Guard(_))
        ));
        let tight = DpLimits {
            soc_levels: 11,
            max_states: 5,
        };
        assert!(matches!(dp_optimal(&small(3, 1), &GridSpec::new(3, 3), &tight), Err(Error::Guard(_))));
        assert!(exhaustive_optimal(&s, &GridSpec::new(1, 3)).is_err());
    }

    #[test]
    fn persistence_flag_is_ignored() {
        let mut s = small(2, 1);
        let g = GridSpec::new(3, 2);
        let a = exhaustive_optimal(&s, &g).unwrap();
        s.penalty.persist_across_episodes = !s.penalty.persist_across_episodes;
        assert_eq!(exhaustive_optimal(&s, &g).unwrap().best_value, a.best_value);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn refining_a_grid_never_lowers_the_optimum(seed in 0u64..1000, n in 2usize..4) {
            let mut s = synth_window(seed, SynthProfile::Summer, 6, 2, 3).unwrap();
            s.t_his = 2;
            s.t_pre = 1;
            let coarse = exhaustive_optimal(&s, &GridSpec::new(n, n)).unwrap();
            // 2n - 1 evenly spaced points contain the n-point grid.
            let fine = exhaustive_optimal(&s, &GridSpec::new(2 * n - 1, 2 * n - 1)).unwrap();
            prop_assert!(fine.best_value >= coarse.best_value - 1e-9);
        }
    }
}
