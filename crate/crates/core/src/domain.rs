//! Configuration types shared by the simulator, the agent and the oracle.
//!
//! A [`Scenario`] is immutable once validated. [`validate_scenario`] reports
//! every broken invariant instead of stopping at the first one, so a scenario
//! file can be fixed in a single pass.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quadratic-utility end user with per-period demand bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    /// Utility curvature (currency/kW²), must be negative.
    pub u_a: f64,
    /// Utility slope (currency/kW), must be positive.
    pub u_b: f64,
    /// Lower demand bound per period (kW).
    pub d_lo: Vec<f64>,
    /// Upper demand bound per period (kW).
    pub d_hi: Vec<f64>,
    /// Ideal demand per period (kW).
    pub d_ideal: Vec<f64>,
    /// Limit-proximity tolerance (kW).
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionConfig {
    pub omega1: f64,
    pub omega2: f64,
}

impl SatisfactionConfig {
    /// Weight of the at-limit indicator, `10 - omega1 - omega2`.
    pub fn omega3(&self) -> f64 {
        10.0 - self.omega1 - self.omega2
    }
}

impl Default for SatisfactionConfig {
    fn default() -> Self {
        Self {
            omega1: 4.0,
            omega2: 3.0,
        }
    }
}

/// Battery energy storage owned by the provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    /// Maximum discharge power, as a nonpositive number (kW).
    pub p_min: f64,
    /// Maximum charge power (kW).
    pub p_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    /// Energy capacity (kWh).
    pub capacity: f64,
    /// Quadratic utilization cost (currency/kW²).
    pub alpha_b: f64,
    pub soc0: f64,
}

impl Default for BatterySpec {
    fn default() -> Self {
        Self {
            p_min: -25.0,
            p_max: 25.0,
            soc_min: 0.1,
            soc_max: 0.9,
            eta_ch: 0.95,
            eta_dis: 0.95,
            capacity: 100.0,
            alpha_b: 0.01,
            soc0: 0.5,
        }
    }
}

impl BatterySpec {
    /// A battery that can never move any power.
    pub fn disabled() -> Self {
        Self {
            p_min: 0.0,
            p_max: 0.0,
            capacity: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingRules {
    /// Lower multiplicative bound on the DSO price.
    pub k1: f64,
    /// Upper multiplicative bound on the DSO price.
    pub k2: f64,
    /// Per-period price ramp limit (currency/kWh).
    pub delta_lambda: f64,
    /// Penalty price for unused renewable energy (currency/kWh).
    pub rho_res: f64,
}

impl Default for PricingRules {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 2.0,
            delta_lambda: 0.05,
            rho_res: 0.1,
        }
    }
}

/// Satisfaction penalty configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// When false the penalty is identically zero and the coefficients never move.
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Satisfaction threshold (score points, 0..=10).
    pub c_bound: f64,
    pub beta_lin0: f64,
    pub beta_sqr0: f64,
    pub eta_lin: f64,
    pub eta_sqr: f64,
    pub beta_cap: f64,
    pub persist_across_episodes: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PenaltyConfig {
    /// Winter-day settings: `eta_lin = 5`, `eta_sqr = 1`, `beta_lin0 = 10`, `beta_sqr0 = 20`.
    fn default() -> Self {
        Self {
            enabled: true,
            c_bound: 7.0,
            beta_lin0: 10.0,
            beta_sqr0: 20.0,
            eta_lin: 5.0,
            eta_sqr: 1.0,
            beta_cap: 1000.0,
            persist_across_episodes: true,
        }
    }
}

impl PenaltyConfig {
    /// Summer-day settings differ only in the squared-term step (`eta_sqr = 5`).
    pub fn summer() -> Self {
        Self {
            eta_sqr: 5.0,
            ..Self::default()
        }
    }

    /// A configuration whose penalty is always zero.
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Hour of day, week of year and month, all zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Calendar {
    pub hour: u32,
    pub week: u32,
    pub month: u32,
}

impl Calendar {
    pub fn new(hour: u32, week: u32, month: u32) -> Self {
        Self { hour, week, month }
    }

    pub fn check(&self) -> Result<()> {
        if self.hour > 23 || self.week > 51 || self.month > 11 {
            return Err(Error::Calendar(format!(
                "hour {} (0..=23), week {} (0..=51), month {} (0..=11)",
                self.hour, self.week, self.month
            )));
        }
        Ok(())
    }
}

/// Renewable generation and DSO price series with calendar alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MarketDoc", try_from = "MarketDoc")]
pub struct MarketSeries {
    /// Renewable generation (kW).
    pub pv: Vec<f64>,
    /// DSO price (currency/kWh).
    pub dso_price: Vec<f64>,
    pub calendar: Vec<Calendar>,
}

impl MarketSeries {
    pub fn len(&self) -> usize {
        self.pv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pv.is_empty()
    }
}

/// On-disk layout of [`MarketSeries`]: parallel arrays instead of a table per row.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MarketDoc {
    pv: Vec<f64>,
    dso_price: Vec<f64>,
    hour: Vec<u32>,
    week: Vec<u32>,
    month: Vec<u32>,
}

impl From<MarketSeries> for MarketDoc {
    fn from(m: MarketSeries) -> Self {
        Self {
            hour: m.calendar.iter().map(|c| c.hour).collect(),
            week: m.calendar.iter().map(|c| c.week).collect(),
            month: m.calendar.iter().map(|c| c.month).collect(),
            pv: m.pv,
            dso_price: m.dso_price,
        }
    }
}

impl TryFrom<MarketDoc> for MarketSeries {
    type Error = String;

    fn try_from(d: MarketDoc) -> std::result::Result<Self, String> {
        let n = d.hour.len();
        if d.week.len() != n || d.month.len() != n {
            return Err(format!(
                "calendar arrays differ in length (hour {}, week {}, month {})",
                n,
                d.week.len(),
                d.month.len()
            ));
        }
        let calendar = (0..n)
            .map(|i| Calendar::new(d.hour[i], d.week[i], d.month[i]))
            .collect();
        Ok(Self {
            pv: d.pv,
            dso_price: d.dso_price,
            calendar,
        })
    }
}

/// A complete experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Episode length in periods (one period is one hour).
    pub horizon: usize,
    /// History window length (periods).
    pub t_his: usize,
    /// Forecast window length (periods).
    pub t_pre: usize,
    /// Index into the market series of episode period 0.
    #[serde(default)]
    pub start: usize,
    pub satisfaction: SatisfactionConfig,
    pub battery: BatterySpec,
    pub pricing: PricingRules,
    pub penalty: PenaltyConfig,
    pub users: Vec<UserProfile>,
    pub market: MarketSeries,
}

/// Default history / forecast window lengths (sequence length 32).
pub const DEFAULT_T_HIS: usize = 24;
pub const DEFAULT_T_PRE: usize = 8;

impl Scenario {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn seq_len(&self) -> usize {
        self.t_his + self.t_pre
    }

    /// Length of the flattened observation vector.
    pub fn obs_dim(&self) -> usize {
        2 * self.seq_len() + 8
    }

    /// Market index of episode period `t`.
    pub fn market_index(&self, t: usize) -> usize {
        self.start + t
    }

    pub fn dso_price_at(&self, t: usize) -> f64 {
        self.market.dso_price[self.market_index(t)]
    }

    pub fn pv_at(&self, t: usize) -> f64 {
        self.market.pv[self.market_index(t)]
    }

    /// Returns the scenario if it validates, otherwise every violation.
    pub fn validated(self) -> Result<Self> {
        let v = validate_scenario(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(v))
        }
    }

    /// A shorter episode starting `offset` periods into this one, keeping the
    /// first `n_users` users. The market series is shared, not copied down.
    pub fn window(&self, offset: usize, horizon: usize, n_users: usize) -> Result<Self> {
        if horizon == 0 || offset + horizon > self.horizon {
            return Err(Error::InvalidArgument(format!(
                "window {offset}+{horizon} exceeds the {}-period episode",
                self.horizon
            )));
        }
        if n_users == 0 || n_users > self.users.len() {
            return Err(Error::InvalidArgument(format!(
                "user count must be in 1..={}",
                self.users.len()
            )));
        }
        let cut = |v: &Vec<f64>| v.get(offset..offset + horizon).map(<[f64]>::to_vec);
        let mut out = self.clone();
        out.users.truncate(n_users);
        for u in &mut out.users {
            let (Some(lo), Some(hi), Some(ideal)) = (cut(&u.d_lo), cut(&u.d_hi), cut(&u.d_ideal))
            else {
                return Err(Error::InvalidArgument(
                    "user arrays are shorter than the episode".into(),
                ));
            };
            u.d_lo = lo;
            u.d_hi = hi;
            u.d_ideal = ideal;
        }
        out.start += offset;
        out.horizon = horizon;
        Ok(out)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ScenarioFile(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::ScenarioFile(e.to_string()))
    }

    /// Loads a scenario file. `market.pv_file` / `market.price_file` entries,
    /// when present, are resolved relative to the scenario file and replace
    /// the inline arrays.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: toml::Table =
            toml::from_str(&text).map_err(|e| Error::ScenarioFile(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        crate::dataio::resolve_market_files(&mut value, base)?;
        let s: Scenario = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ScenarioFile(e.to_string()))?;
        Ok(s)
    }

    pub fn write_toml_file(&self, path: &Path) -> Result<()> {
        let mut out = String::from(SCENARIO_HEADER);
        out.push_str(&self.to_toml_string()?);
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Comment block with units written at the top of scenario files.
pub const SCENARIO_HEADER: &str = "\
# drlab scenario file. Units:
#   horizon, t_his, t_pre, start      periods (1 period = 1 hour)
#   users.u_a                         currency/kW^2 (< 0)
#   users.u_b                         currency/kW (> 0)
#   users.d_lo, d_hi, d_ideal         kW, one entry per episode period
#   users.epsilon                     kW
#   satisfaction.omega1, omega2       score points
#   battery.p_min, p_max              kW (p_min <= 0 <= p_max)
#   battery.soc_*                     fraction of capacity
#   battery.capacity                  kWh
#   battery.alpha_b                   currency/kW^2
#   pricing.k1, k2                    multiples of the DSO price
#   pricing.delta_lambda, rho_res     currency/kWh
#   penalty.c_bound                   score points (0..=10)
#   market.pv                         kW
#   market.dso_price                  currency/kWh
#   market.hour, week, month          zero-based calendar fields
";

/// One broken invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn check(&mut self, ok: bool, field: impl Into<String>, rule: &str) {
        if !ok {
            self.0.push(Violation {
                field: field.into(),
                rule: rule.to_string(),
            });
        }
    }
}

fn finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Returns every invariant the scenario breaks; empty means valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut c = Collector(Vec::new());

    c.check(s.horizon >= 1, "horizon", "horizon >= 1");
    c.check(s.t_his >= 1, "t_his", "t_his >= 1");
    c.check(!s.users.is_empty(), "users", "at least one user");

    for (i, u) in s.users.iter().enumerate() {
        let f = |name: &str| format!("users[{i}].{name}");
        c.check(u.u_a < 0.0 && u.u_a.is_finite(), f("u_a"), "u_a < 0");
        c.check(u.u_b > 0.0 && u.u_b.is_finite(), f("u_b"), "u_b > 0");
        c.check(u.epsilon >= 0.0, f("epsilon"), "epsilon >= 0");
        for (name, arr) in [("d_lo", &u.d_lo), ("d_hi", &u.d_hi), ("d_ideal", &u.d_ideal)] {
            c.check(
                arr.len() >= s.horizon,
                f(name),
                "one entry per episode period (length >= horizon)",
            );
            c.check(finite(arr), f(name), "finite values");
        }
        let n = u.d_lo.len().min(u.d_hi.len()).min(u.d_ideal.len());
        if let Some(t) = (0..n).find(|&t| !(u.d_lo[t] <= u.d_ideal[t] && u.d_ideal[t] <= u.d_hi[t])) {
            c.check(
                false,
                format!("users[{i}].d_ideal[{t}]"),
                "d_lo[t] <= d_ideal[t] <= d_hi[t]",
            );
        }
    }

    let sat = &s.satisfaction;
    c.check(sat.omega1 >= 0.0, "satisfaction.omega1", "omega1 >= 0");
    c.check(sat.omega2 >= 0.0, "satisfaction.omega2", "omega2 >= 0");
    c.check(
        sat.omega1 + sat.omega2 <= 10.0,
        "satisfaction.omega1+omega2",
        "omega1 + omega2 <= 10",
    );

    let b = &s.battery;
    c.check(
        b.p_min <= 0.0 && b.p_max >= 0.0,
        "battery.p_min/p_max",
        "p_min <= 0 <= p_max",
    );
    c.check(
        0.0 <= b.soc_min && b.soc_min < b.soc_max && b.soc_max <= 1.0,
        "battery.soc_min/soc_max",
        "0 <= soc_min < soc_max <= 1",
    );
    c.check(
        b.soc_min <= b.soc0 && b.soc0 <= b.soc_max,
        "battery.soc0",
        "soc_min <= soc0 <= soc_max",
    );
    c.check(b.eta_ch > 0.0 && b.eta_ch <= 1.0, "battery.eta_ch", "0 < eta_ch <= 1");
    c.check(
        b.eta_dis > 0.0 && b.eta_dis <= 1.0,
        "battery.eta_dis",
        "0 < eta_dis <= 1",
    );
    c.check(b.capacity >= 0.0, "battery.capacity", "capacity >= 0");
    c.check(b.alpha_b >= 0.0, "battery.alpha_b", "alpha_b >= 0");

    let p = &s.pricing;
    c.check(p.k1 > 0.0 && p.k1 <= p.k2, "pricing.k1/k2", "0 < k1 <= k2");
    c.check(p.delta_lambda >= 0.0, "pricing.delta_lambda", "delta_lambda >= 0");
    c.check(p.rho_res >= 0.0, "pricing.rho_res", "rho_res >= 0");

    let q = &s.penalty;
    c.check(
        (0.0..=10.0).contains(&q.c_bound),
        "penalty.c_bound",
        "0 <= c_bound <= 10",
    );
    for (name, v) in [
        ("beta_lin0", q.beta_lin0),
        ("beta_sqr0", q.beta_sqr0),
        ("eta_lin", q.eta_lin),
        ("eta_sqr", q.eta_sqr),
    ] {
        c.check(v >= 0.0, format!("penalty.{name}"), "coefficients and steps >= 0");
    }
    c.check(
        q.beta_cap > q.beta_lin0.max(q.beta_sqr0),
        "penalty.beta_cap",
        "beta_cap > max(beta_lin0, beta_sqr0)",
    );

    let m = &s.market;
    c.check(
        m.dso_price.len() == m.pv.len() && m.calendar.len() == m.pv.len(),
        "market",
        "pv, dso_price and calendar share one length",
    );
    c.check(m.pv.iter().all(|&x| x >= 0.0 && x.is_finite()), "market.pv", "pv >= 0");
    c.check(
        m.dso_price.iter().all(|&x| x > 0.0 && x.is_finite()),
        "market.dso_price",
        "dso_price > 0",
    );
    c.check(
        m.calendar.iter().all(|cal| cal.check().is_ok()),
        "market.calendar",
        "hour in 0..=23, week in 0..=51, month in 0..=11",
    );
    // Every observation inside the episode needs its forecast window.
    let needed = s.start + s.horizon + s.t_pre;
    c.check(
        m.len() >= needed && m.len() > 0,
        "market",
        "series covers start + horizon + t_pre periods",
    );

    c.0
}

/// Markup over the DSO price of the tariff users' ideal demand is fitted to.
pub const REFERENCE_MARKUP: f64 = 1.4;

/// Three heterogeneous users, one period per entry of `reference_dso_price`.
///
/// Each user's ideal demand is the response to a reference tariff of
/// `REFERENCE_MARKUP` times the given DSO price curve, scaled so the ideal
/// averages the user's size over the day. Demand may move 20% either way.
pub fn default_users(reference_dso_price: &[f64]) -> Vec<UserProfile> {
    let sizes = [100.0, 150.0, 200.0];
    let slopes = [0.55, 0.6, 0.7];
    let n = reference_dso_price.len().max(1) as f64;
    let mean_tariff = REFERENCE_MARKUP * reference_dso_price.iter().sum::<f64>() / n;
    sizes
        .iter()
        .zip(slopes)
        .map(|(&size, u_b)| {
            let u_a = -(u_b - mean_tariff) / (2.0 * size);
            let d_ideal: Vec<f64> = reference_dso_price
                .iter()
                .map(|&p| (REFERENCE_MARKUP * p - u_b) / (2.0 * u_a))
                .collect();
            let d_lo = d_ideal.iter().map(|d| 0.8 * d).collect();
            let d_hi = d_ideal.iter().map(|d| 1.2 * d).collect();
            UserProfile {
                u_a,
                u_b,
                d_lo,
                d_hi,
                d_ideal,
                epsilon: 0.05,
            }
        })
        .collect()
}
