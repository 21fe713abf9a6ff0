//! The provider's decision process as a step/reset environment.
//!
//! One step: price interval, action mapping, user responses, satisfaction
//! scoring, penalty (then coefficient update), battery, settlement, reward.
//! The environment itself has no randomness; `seed` is recorded so traces are
//! attributable, and exploration noise lives entirely in the agent.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{BatterySpec, Calendar, PricingRules, Scenario};
use crate::error::{Error, Result};
use crate::penalty::PenaltyState;
use crate::user_model;

/// Number of non-sequential observation entries.
pub const N_SCALARS: usize = 8;

/// Sine/cosine pairs for hour (÷23), week (÷51) and month (÷11).
pub fn encode_time(hour: u32, week: u32, month: u32) -> Result<[f64; 6]> {
    Calendar::new(hour, week, month).check()?;
    let enc = |v: u32, div: f64| {
        let a = 2.0 * PI * f64::from(v) / div;
        (a.sin(), a.cos())
    };
    let (hs, hc) = enc(hour, 23.0);
    let (ws, wc) = enc(week, 51.0);
    let (ms, mc) = enc(month, 11.0);
    Ok([hs, hc, ws, wc, ms, mc])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pv_window: Vec<f64>,
    pub dso_window: Vec<f64>,
    /// `c_ave(t-1), soc(t-1), h_sin, h_cos, w_sin, w_cos, m_sin, m_cos`.
    pub scalars: [f64; N_SCALARS],
}

impl Observation {
    pub fn seq_len(&self) -> usize {
        self.pv_window.len()
    }

    /// `[pv_window, dso_window, scalars]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.seq_len() + N_SCALARS);
        v.extend_from_slice(&self.pv_window);
        v.extend_from_slice(&self.dso_window);
        v.extend_from_slice(&self.scalars);
        v
    }

    pub fn from_flat(flat: &[f64], seq_len: usize) -> Result<Self> {
        if flat.len() != 2 * seq_len + N_SCALARS {
            return Err(Error::Shape(format!(
                "flat observation of length {} for sequence length {seq_len}",
                flat.len()
            )));
        }
        let mut scalars = [0.0; N_SCALARS];
        scalars.copy_from_slice(&flat[2 * seq_len..]);
        Ok(Self {
            pv_window: flat[..seq_len].to_vec(),
            dso_window: flat[seq_len..2 * seq_len].to_vec(),
            scalars,
        })
    }
}

/// Raw agent output, both components in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRaw {
    pub a1: f64,
    pub a2: f64,
}

impl ActionRaw {
    pub fn new(a1: f64, a2: f64) -> Self {
        Self { a1, a2 }
    }

    pub fn clipped(self) -> Self {
        Self {
            a1: self.a1.clamp(-1.0, 1.0),
            a2: self.a2.clamp(-1.0, 1.0),
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.a1, self.a2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    pub soc: f64,
    pub lambda_prev: f64,
    pub d_prev: Vec<f64>,
    pub sat_sum: u64,
    pub penalty: PenaltyState,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceInterval {
    pub lo: f64,
    pub hi: f64,
}

impl PriceInterval {
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub t: usize,
    pub dso_price: f64,
    pub pv: f64,
    pub price: f64,
    pub p_b: f64,
    /// State of charge after the step.
    pub soc: f64,
    pub demands: Vec<f64>,
    pub scores: Vec<u8>,
    pub c_ave: f64,
    pub p_dso: f64,
    pub p_neg: f64,
    /// Coefficients the step's penalty was computed with.
    pub beta_lin: f64,
    pub beta_sqr: f64,
    pub penalty: f64,
    pub reward: f64,
    pub done: bool,
}

impl StepOutcome {
    /// Reward before the satisfaction penalty.
    pub fn profit(&self) -> f64 {
        self.reward + self.penalty
    }
}

/// Hard price bounds intersected with the ramp around the previous price.
///
/// An empty intersection collapses to the point of the hard interval closest
/// to the previous price.
pub fn feasible_price_interval(
    rules: &PricingRules,
    dso_price: f64,
    lambda_prev: Option<f64>,
) -> PriceInterval {
    let (lo, hi) = (rules.k1 * dso_price, rules.k2 * dso_price);
    let Some(prev) = lambda_prev else {
        return PriceInterval { lo, hi };
    };
    let rlo = lo.max(prev - rules.delta_lambda);
    let rhi = hi.min(prev + rules.delta_lambda);
    if rlo <= rhi {
        PriceInterval { lo: rlo, hi: rhi }
    } else {
        let p = prev.clamp(lo, hi);
        PriceInterval { lo: p, hi: p }
    }
}

/// Maps a raw action to `(price, battery power)`, clipping the power so the
/// state of charge stays within its bounds.
pub fn map_action(
    raw: ActionRaw,
    interval: PriceInterval,
    battery: &BatterySpec,
    soc: f64,
) -> (f64, f64) {
    let raw = raw.clipped();
    let price = (interval.mid() + raw.a1 * interval.half_width()).clamp(interval.lo, interval.hi);
    let p_raw = battery.p_min + 0.5 * (raw.a2 + 1.0) * (battery.p_max - battery.p_min);
    let charge_cap = ((battery.soc_max - soc) * battery.capacity / battery.eta_ch).max(0.0);
    let discharge_cap = ((soc - battery.soc_min) * battery.capacity * battery.eta_dis).max(0.0);
    let p_b = p_raw.clamp(-discharge_cap, charge_cap);
    (price, p_b)
}

/// State-of-charge update over one one-hour period.
pub fn battery_step(battery: &BatterySpec, soc: f64, p_b: f64) -> f64 {
    if p_b == 0.0 || battery.capacity == 0.0 {
        return soc;
    }
    let next = soc + p_b.max(0.0) * battery.eta_ch / battery.capacity
        + p_b.min(0.0) / (battery.eta_dis * battery.capacity);
    next.clamp(battery.soc_min, battery.soc_max)
}

/// Grid purchase and unused renewable energy for one period.
///
/// Net grid demand is `Σd + p_b - pv`; a positive balance is bought from the
/// DSO, a negative one is curtailed renewable output.
pub fn settle_power(pv: f64, demands: &[f64], p_b: f64) -> (f64, f64) {
    let net = demands.iter().sum::<f64>() + p_b - pv;
    (net.max(0.0), (-net).max(0.0))
}

/// Provider reward for one period.
#[allow(clippy::too_many_arguments)]
pub fn reward(
    price: f64,
    demands: &[f64],
    p_dso: f64,
    dso_price: f64,
    p_b: f64,
    p_neg: f64,
    penalty: f64,
    battery: &BatterySpec,
    rules: &PricingRules,
) -> f64 {
    let revenue: f64 = demands.iter().map(|d| price * d).sum();
    revenue - p_dso * dso_price - battery.alpha_b * p_b * p_b - rules.rho_res * p_neg - penalty
}

fn window(series: &[f64], lo: i64, hi: i64, clamp_right: bool) -> Result<Vec<f64>> {
    let len = series.len() as i64;
    (lo..=hi)
        .map(|k| {
            if k >= len {
                if clamp_right {
                    Ok(series[series.len() - 1])
                } else {
                    Err(Error::Coverage { index: k, len: series.len() })
                }
            } else {
                Ok(series[k.max(0) as usize])
            }
        })
        .collect()
}

/// Observation for the state's current period.
///
/// Windows cover market indices `t - t_his + 1 ..= t + t_pre`; indices before
/// the series start repeat the first sample. The terminal observation
/// (`t == horizon`) repeats the last sample past the series end, since it is
/// never bootstrapped from.
pub fn build_observation(s: &Scenario, st: &EnvState) -> Result<Observation> {
    let k = s.market_index(st.t) as i64;
    let lo = k - s.t_his as i64 + 1;
    let hi = k + s.t_pre as i64;
    let terminal = st.t >= s.horizon;
    let pv_window = window(&s.market.pv, lo, hi, terminal)?;
    let dso_window = window(&s.market.dso_price, lo, hi, terminal)?;
    let cal_idx = (k as usize).min(s.market.calendar.len() - 1);
    let cal = s.market.calendar[cal_idx];
    let ta = encode_time(cal.hour, cal.week, cal.month)?;
    let c_prev = if st.t == 0 {
        s.penalty.c_bound
    } else {
        st.sat_sum as f64 / (s.n_users() * st.t) as f64
    };
    let mut scalars = [0.0; N_SCALARS];
    scalars[0] = c_prev;
    scalars[1] = st.soc;
    scalars[2..].copy_from_slice(&ta);
    Ok(Observation {
        pv_window,
        dso_window,
        scalars,
    })
}

/// Initial state; penalty coefficients start from the configuration.
pub fn initial_state(s: &Scenario, seed: u64) -> EnvState {
    let dso0 = s.dso_price_at(0);
    EnvState {
        t: 0,
        soc: s.battery.soc0,
        lambda_prev: dso0.clamp(s.pricing.k1 * dso0, s.pricing.k2 * dso0),
        d_prev: s.users.iter().map(|u| u.d_ideal[0]).collect(),
        sat_sum: 0,
        penalty: PenaltyState::new(s.penalty),
        rng_seed: seed,
    }
}

/// Fresh state and first observation.
pub fn reset(s: &Scenario, seed: u64) -> Result<(EnvState, Observation)> {
    let st = initial_state(s, seed);
    let obs = build_observation(s, &st)?;
    Ok((st, obs))
}

/// Advances one period.
pub fn step(
    s: &Scenario,
    st: &EnvState,
    raw: ActionRaw,
) -> Result<(StepOutcome, EnvState, Observation)> {
    let t = st.t;
    if t >= s.horizon {
        return Err(Error::EpisodeFinished(t));
    }
    let dso_price = s.dso_price_at(t);
    let pv = s.pv_at(t);
    let prev_price = (t > 0).then_some(st.lambda_prev);
    let interval = feasible_price_interval(&s.pricing, dso_price, prev_price);
    let (price, p_b) = map_action(raw, interval, &s.battery, st.soc);

    let mut demands = Vec::with_capacity(s.n_users());
    let mut scores = Vec::with_capacity(s.n_users());
    for (user, &prev) in s.users.iter().zip(&st.d_prev) {
        let r = user_model::respond(user, &s.satisfaction, price, prev, t);
        demands.push(r.demand);
        scores.push(r.satisfaction);
    }
    let sat_sum = st.sat_sum + scores.iter().map(|&c| u64::from(c)).sum::<u64>();
    let c_ave = sat_sum as f64 / (s.n_users() * (t + 1)) as f64;

    let mut penalty_state = st.penalty;
    let (beta_lin, beta_sqr) = (penalty_state.beta_lin, penalty_state.beta_sqr);
    let penalty = penalty_state.apply(c_ave);

    let soc = battery_step(&s.battery, st.soc, p_b);
    let (p_dso, p_neg) = settle_power(pv, &demands, p_b);
    let r = reward(
        price, &demands, p_dso, dso_price, p_b, p_neg, penalty, &s.battery, &s.pricing,
    );

    let next = EnvState {
        t: t + 1,
        soc,
        lambda_prev: price,
        d_prev: demands.clone(),
        sat_sum,
        penalty: penalty_state,
        rng_seed: st.rng_seed,
    };
    let obs = build_observation(s, &next)?;
    let outcome = StepOutcome {
        t,
        dso_price,
        pv,
        price,
        p_b,
        soc,
        demands,
        scores,
        c_ave,
        p_dso,
        p_neg,
        beta_lin,
        beta_sqr,
        penalty,
        reward: r,
        done: t + 1 == s.horizon,
    };
    Ok((outcome, next, obs))
}

/// Single-owner environment wrapper that carries penalty coefficients across
/// episodes when the configuration asks for it.
#[derive(Debug, Clone)]
pub struct MarketEnv {
    scenario: Arc<Scenario>,
    state: EnvState,
}

impl MarketEnv {
    pub fn new(scenario: Arc<Scenario>, seed: u64) -> Self {
        let state = initial_state(&scenario, seed);
        Self { scenario, state }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn penalty_state(&self) -> PenaltyState {
        self.state.penalty
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let keep = self.state.penalty;
        let (mut st, _) = reset(&self.scenario, seed)?;
        if self.scenario.penalty.persist_across_episodes {
            st.penalty = keep;
        }
        self.state = st;
        build_observation(&self.scenario, &self.state)
    }

    pub fn observation(&self) -> Result<Observation> {
        build_observation(&self.scenario, &self.state)
    }

    pub fn step(&mut self, raw: ActionRaw) -> Result<(StepOutcome, Observation)> {
        let (out, next, obs) = step(&self.scenario, &self.state, raw)?;
        self.state = next;
        Ok((out, obs))
    }
}

/// Anything that picks a raw action from an observation.
pub trait Policy {
    fn act(&mut self, obs: &Observation, t: usize) -> Result<ActionRaw>;
}

/// Replays a fixed action sequence, one entry per period.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedActions(pub Vec<ActionRaw>);

impl Policy for FixedActions {
    fn act(&mut self, _obs: &Observation, t: usize) -> Result<ActionRaw> {
        self.0
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no action for period {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantAction(pub ActionRaw);

impl Policy for ConstantAction {
    fn act(&mut self, _obs: &Observation, _t: usize) -> Result<ActionRaw> {
        Ok(self.0)
    }
}

/// Uniform random actions in `[-1, 1]²`.
#[derive(Debug, Clone)]
pub struct UniformPolicy<R>(pub R);

impl<R: rand::Rng> Policy for UniformPolicy<R> {
    fn act(&mut self, _obs: &Observation, _t: usize) -> Result<ActionRaw> {
        Ok(ActionRaw::new(
            self.0.gen_range(-1.0..=1.0),
            self.0.gen_range(-1.0..=1.0),
        ))
    }
}

/// One full episode from `state`, returning the step outcomes.
pub fn rollout_from(
    s: &Scenario,
    state: EnvState,
    policy: &mut dyn Policy,
) -> Result<Vec<StepOutcome>> {
    let mut st = state;
    let mut obs = build_observation(s, &st)?;
    let mut trace = Vec::with_capacity(s.horizon);
    while st.t < s.horizon {
        let a = policy.act(&obs, st.t)?;
        let (out, next, next_obs) = step(s, &st, a)?;
        trace.push(out);
        st = next;
        obs = next_obs;
    }
    Ok(trace)
}

/// One full episode from the initial state.
pub fn rollout(s: &Scenario, policy: &mut dyn Policy, seed: u64) -> Result<Vec<StepOutcome>> {
    rollout_from(s, initial_state(s, seed), policy)
}

/// Undiscounted sum of rewards.
pub fn episode_return(trace: &[StepOutcome]) -> f64 {
    trace.iter().map(|o| o.reward).sum()
}

/// Column names of the step trace table for `n_users` users.
pub fn trace_header(n_users: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "dso_price", "pv", "price", "p_b", "soc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n_users).map(|i| format!("demand_{i}")));
    h.extend((0..n_users).map(|i| format!("score_{i}")));
    h.extend(
        ["c_ave", "p_dso", "p_neg", "beta_lin", "beta_sqr", "penalty", "reward"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn trace_record(o: &StepOutcome) -> Vec<String> {
    let mut r = vec![
        o.t.to_string(),
        o.dso_price.to_string(),
        o.pv.to_string(),
        o.price.to_string(),
        o.p_b.to_string(),
        o.soc.to_string(),
    ];
    r.extend(o.demands.iter().map(|d| d.to_string()));
    r.extend(o.scores.iter().map(|c| c.to_string()));
    r.extend(
        [o.c_ave, o.p_dso, o.p_neg, o.beta_lin, o.beta_sqr, o.penalty, o.reward]
            .iter()
            .map(|x| x.to_string()),
    );
    r
}

/// Writes one row per period as CSV.
pub fn write_trace<W: Write>(w: W, trace: &[StepOutcome]) -> Result<()> {
    let n_users = trace.first().map_or(0, |o| o.demands.len());
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wr.write_record(trace_header(n_users)).map_err(csv_err)?;
    for o in trace {
        wr.write_record(trace_record(o)).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}
