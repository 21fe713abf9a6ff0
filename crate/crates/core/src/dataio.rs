//! Series files and synthetic scenarios.
//!
//! A series file is a two-column CSV with a one-line header of the form
//! `timestamp,<name>[<unit>]`, e.g. `timestamp,pv[kW]`, followed by hourly
//! ISO-8601 timestamps and values.

use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::domain::{
    default_users, BatterySpec, Calendar, MarketSeries, PenaltyConfig, PricingRules,
    SatisfactionConfig, Scenario, DEFAULT_T_HIS, DEFAULT_T_PRE,
};
use crate::error::{Error, Result};

pub const UNIT_PV: &str = "kW";
pub const UNIT_PRICE: &str = "currency/kWh";

/// One loaded column with its calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
    pub calendar: Vec<Calendar>,
    pub unit: String,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Zero-based calendar fields; week is the ISO week minus one, clamped to 51.
pub fn calendar_of(ts: &NaiveDateTime) -> Calendar {
    Calendar::new(
        ts.hour(),
        (ts.iso_week().week() - 1).min(51),
        ts.month0(),
    )
}

fn unit_of(header: &str) -> Option<&str> {
    let open = header.find('[')?;
    let close = header.rfind(']')?;
    (close > open).then(|| header[open + 1..close].trim())
}

/// Loads an hourly series and checks its declared unit.
pub fn load_series(path: &Path, expected_unit: &str) -> Result<Series> {
    let err = |msg: String| Error::Series {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.len() != 2 {
        return Err(err(format!("expected 2 columns, header has {}", headers.len())));
    }
    let unit = unit_of(&headers[1])
        .ok_or_else(|| err(format!("header '{}' declares no [unit]", &headers[1])))?
        .to_string();
    if unit != expected_unit {
        return Err(err(format!("unit mismatch: file has {unit}, expected {expected_unit}")));
    }

    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| err(format!("row {row}: {e}")))?;
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| err(format!("row {row}: bad timestamp '{}'", &rec[0])))?;
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| err(format!("row {row}: bad value '{}'", &rec[1])))?;
        if let Some(prev) = timestamps.last() {
            let gap = (ts - *prev).num_seconds();
            if gap == 0 {
                return Err(err(format!("row {row}: duplicate timestamp {ts}")));
            }
            if gap != 3600 {
                return Err(err(format!("row {row}: non-hourly spacing ({gap} s) at {ts}")));
            }
        }
        timestamps.push(ts);
        values.push(v);
    }
    let calendar = timestamps.iter().map(calendar_of).collect();
    Ok(Series {
        timestamps,
        values,
        calendar,
        unit,
    })
}

/// Writes a series file; `name` becomes the value column's label.
pub fn write_series(path: &Path, name: &str, series: &Series) -> Result<()> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| Error::Series {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wr.write_record(["timestamp", &format!("{name}[{}]", series.unit)])
        .map_err(io)?;
    for (ts, v) in series.timestamps.iter().zip(&series.values) {
        // `{:?}` on f64 is the shortest representation that parses back bit-exactly.
        wr.write_record([ts.format("%Y-%m-%dT%H:%M:%S").to_string(), format!("{v:?}")])
            .map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn scale_series(series: &Series, factor: f64) -> Result<Series> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale factor must be positive, got {factor}"
        )));
    }
    Ok(Series {
        values: series.values.iter().map(|v| v * factor).collect(),
        ..series.clone()
    })
}

/// Replaces `market.pv_file` / `market.price_file` references in a parsed
/// scenario table with inline arrays. Optional `pv_scale` / `price_scale`
/// multiply the loaded values.
pub(crate) fn resolve_market_files(doc: &mut toml::Table, base: &Path) -> Result<()> {
    let Some(toml::Value::Table(market)) = doc.get_mut("market") else {
        return Ok(());
    };
    let take_str = |m: &mut toml::Table, k: &str| match m.remove(k) {
        Some(toml::Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::ScenarioFile(format!("market.{k} must be a string, got {other}"))),
        None => Ok(None),
    };
    let take_f64 = |m: &mut toml::Table, k: &str| match m.remove(k) {
        Some(toml::Value::Float(f)) => Ok(f),
        Some(toml::Value::Integer(i)) => Ok(i as f64),
        Some(other) => Err(Error::ScenarioFile(format!("market.{k} must be a number, got {other}"))),
        None => Ok(1.0),
    };
    let pv_file = take_str(market, "pv_file")?;
    let price_file = take_str(market, "price_file")?;
    let pv_scale = take_f64(market, "pv_scale")?;
    let price_scale = take_f64(market, "price_scale")?;

    let mut calendar: Option<Vec<Calendar>> = None;
    let mut set = |m: &mut toml::Table, key: &str, s: Series| -> Result<()> {
        if let Some(c) = &calendar {
            if *c != s.calendar {
                return Err(Error::ScenarioFile(
                    "pv and price files are not calendar-aligned".into(),
                ));
            }
        }
        m.insert(
            key.into(),
            toml::Value::Array(s.values.iter().map(|&v| toml::Value::Float(v)).collect()),
        );
        let arr = |f: fn(&Calendar) -> u32| {
            toml::Value::Array(
                s.calendar
                    .iter()
                    .map(|c| toml::Value::Integer(i64::from(f(c))))
                    .collect(),
            )
        };
        m.insert("hour".into(), arr(|c| c.hour));
        m.insert("week".into(), arr(|c| c.week));
        m.insert("month".into(), arr(|c| c.month));
        calendar = Some(s.calendar);
        Ok(())
    };
    if let Some(f) = pv_file {
        let s = scale_series(&load_series(&base.join(f), UNIT_PV)?, pv_scale)?;
        set(market, "pv", s)?;
    }
    if let Some(f) = price_file {
        let s = scale_series(&load_series(&base.join(f), UNIT_PRICE)?, price_scale)?;
        set(market, "dso_price", s)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthProfile {
    Winter,
    Summer,
}

impl std::str::FromStr for SynthProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "winter" => Ok(Self::Winter),
            "summer" => Ok(Self::Summer),
            _ => Err(Error::InvalidArgument(format!("unknown synthetic profile '{s}'"))),
        }
    }
}

impl std::fmt::Display for SynthProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Winter => "winter",
            Self::Summer => "summer",
        })
    }
}

struct ProfileShape {
    date: NaiveDate,
    sunrise: f64,
    sunset: f64,
    pv_peak: f64,
    price_base: f64,
}

impl SynthProfile {
    fn shape(self) -> ProfileShape {
        match self {
            Self::Winter => ProfileShape {
                date: NaiveDate::from_ymd_opt(2024, 1, 15).unwrap(),
                sunrise: 8.0,
                sunset: 17.0,
                pv_peak: 150.0,
                price_base: 0.11,
            },
            Self::Summer => ProfileShape {
                date: NaiveDate::from_ymd_opt(2024, 10, 5).unwrap(),
                sunrise: 6.0,
                sunset: 19.0,
                pv_peak: 450.0,
                price_base: 0.09,
            },
        }
    }
}

/// Relative DSO price by hour: overnight low, morning shoulder, evening peak.
fn price_shape(hour: f64) -> f64 {
    let bump = |center: f64, width: f64| (-((hour - center) / width).powi(2)).exp();
    0.8 + 0.35 * bump(8.0, 1.8) + 0.9 * bump(19.0, 2.2)
}

/// Seeded three-day market (previous day, episode day, next day) and default
/// users, battery, pricing and penalty; the episode covers the middle day.
pub fn synth_scenario(seed: u64, profile: SynthProfile) -> Scenario {
    let shape = profile.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let pv_noise = Normal::new(0.0, 0.08).unwrap();
    let price_noise = Normal::new(0.0, 0.03).unwrap();

    let horizon = 24;
    let days = 3;
    let first = shape.date.pred_opt().unwrap().and_hms_opt(0, 0, 0).unwrap();
    let mut market = MarketSeries {
        pv: Vec::with_capacity(days * 24),
        dso_price: Vec::with_capacity(days * 24),
        calendar: Vec::with_capacity(days * 24),
    };
    for k in 0..days * 24 {
        let ts = first + chrono::Duration::hours(k as i64);
        let h = f64::from(ts.hour());
        let daylight = (h - shape.sunrise) / (shape.sunset - shape.sunrise);
        let pv = if (0.0..=1.0).contains(&daylight) {
            let clear = (std::f64::consts::PI * daylight).sin();
            (shape.pv_peak * clear * (1.0 + pv_noise.sample(&mut rng))).max(0.0)
        } else {
            0.0
        };
        let price =
            (shape.price_base * price_shape(h) * (1.0 + price_noise.sample(&mut rng))).max(0.01);
        market.pv.push(pv);
        market.dso_price.push(price);
        market.calendar.push(calendar_of(&ts));
    }

    let reference: Vec<f64> = (0..horizon)
        .map(|h| shape.price_base * price_shape(h as f64))
        .collect();
    let penalty = match profile {
        SynthProfile::Winter => PenaltyConfig::default(),
        SynthProfile::Summer => PenaltyConfig::summer(),
    };
    Scenario {
        horizon,
        t_his: DEFAULT_T_HIS,
        t_pre: DEFAULT_T_PRE,
        start: 24,
        satisfaction: SatisfactionConfig::default(),
        battery: BatterySpec::default(),
        pricing: PricingRules::default(),
        penalty,
        users: default_users(&reference),
        market,
    }
}

/// A slice of [`synth_scenario`]: an episode of `horizon` hours starting at
/// `start_hour` of the episode day, with the first `n_users` default users.
pub fn synth_window(
    seed: u64,
    profile: SynthProfile,
    start_hour: usize,
    horizon: usize,
    n_users: usize,
) -> Result<Scenario> {
    synth_scenario(seed, profile).window(start_hour, horizon, n_users)
}

/// Splits a scenario's market into its two series files' contents.
pub fn market_to_series(s: &Scenario, start: NaiveDateTime) -> (Series, Series) {
    let timestamps: Vec<NaiveDateTime> = (0..s.market.len())
        .map(|k| start + chrono::Duration::hours(k as i64))
        .collect();
    let calendar: Vec<Calendar> = timestamps.iter().map(calendar_of).collect();
    (
        Series {
            timestamps: timestamps.clone(),
            values: s.market.pv.clone(),
            calendar: calendar.clone(),
            unit: UNIT_PV.into(),
        },
        Series {
            timestamps,
            values: s.market.dso_price.clone(),
            calendar,
            unit: UNIT_PRICE.into(),
        },
    )
}
