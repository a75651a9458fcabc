//! Technical indicators and the per-day feature row.
//!
//! Every indicator is causal: the value at index `t` depends only on inputs at
//! indices `<= t`. Warm-up positions are reported as `None`.

use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::DailyBar;

/// Number of engineered features per day.
pub const NUM_FEATURES: usize = 15;

/// Feature names in column order (the feature-cache CSV uses `date` followed
/// by these).
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "intraday_return",
    "ema10",
    "ema12",
    "ema26",
    "stoch_k",
    "roc",
    "rsi",
    "accdo",
    "macd",
    "disparity5",
    "disparity10",
    "ma5",
    "ma10",
    "close_lag10",
    "day_of_year",
];

/// Replacement for a non-finite %K (flat high/low window).
pub const STOCH_K_FALLBACK: f64 = 50.0;
/// Replacement for a non-finite AccDO (zero-range bar).
pub const ACCDO_FALLBACK: f64 = 0.0;

/// The fifteen features of one ticker-date.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub date: NaiveDate,
    pub intraday_return: f64,
    pub ema10: f64,
    pub ema12: f64,
    pub ema26: f64,
    pub stoch_k: f64,
    pub roc: f64,
    pub rsi: f64,
    pub accdo: f64,
    pub macd: f64,
    pub disparity5: f64,
    pub disparity10: f64,
    pub ma5: f64,
    pub ma10: f64,
    pub close_lag10: f64,
    pub day_of_year: f64,
}

impl FeatureRow {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.intraday_return,
            self.ema10,
            self.ema12,
            self.ema26,
            self.stoch_k,
            self.roc,
            self.rsi,
            self.accdo,
            self.macd,
            self.disparity5,
            self.disparity10,
            self.ma5,
            self.ma10,
            self.close_lag10,
            self.day_of_year,
        ]
    }

    pub fn from_array(date: NaiveDate, v: [f64; NUM_FEATURES]) -> Self {
        Self {
            date,
            intraday_return: v[0],
            ema10: v[1],
            ema12: v[2],
            ema26: v[3],
            stoch_k: v[4],
            roc: v[5],
            rsi: v[6],
            accdo: v[7],
            macd: v[8],
            disparity5: v[9],
            disparity10: v[10],
            ma5: v[11],
            ma10: v[12],
            close_lag10: v[13],
            day_of_year: v[14],
        }
    }
}

/// Window lengths for the indicators whose parameters are not pinned by the
/// feature list itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorConfig {
    pub stoch_window: usize,
    pub rsi_window: usize,
    /// ROC lag; also the lag of the `close_lag10` feature.
    pub roc_lag: usize,
    /// Treat the first `n - 1` EMA values as warm-up (the recurrence itself is
    /// seeded with the first close and is defined everywhere).
    pub ema_warmup: bool,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self { stoch_window: 10, rsi_window: 14, roc_lag: 10, ema_warmup: true }
    }
}

impl IndicatorConfig {
    /// Index of the first bar at which every feature is defined.
    pub fn warmup(&self) -> usize {
        let ema = if self.ema_warmup { 25 } else { 0 };
        [ema, self.rsi_window, self.roc_lag, self.stoch_window.saturating_sub(1), 9, 1]
            .into_iter()
            .max()
            .unwrap()
    }
}

/// `(close - open) / open`.
pub fn intraday_return(bar: &DailyBar) -> Result<f64> {
    if !(bar.open > 0.0) {
        return Err(Error::InvalidBar { date: bar.date, reason: format!("open = {} is not positive", bar.open) });
    }
    Ok((bar.close - bar.open) / bar.open)
}

/// Trailing simple moving average; `None` before index `n - 1`.
pub fn sma(values: &[f64], n: usize) -> Vec<Option<f64>> {
    assert!(n >= 1, "window must be >= 1");
    (0..values.len())
        .map(|t| (t + 1 >= n).then(|| values[t + 1 - n..=t].iter().sum::<f64>() / n as f64))
        .collect()
}

/// Exponential moving average with `alpha = 2 / (n + 1)`, seeded with the
/// first value.
pub fn ema(values: &[f64], n: usize) -> Vec<f64> {
    assert!(n >= 1, "window must be >= 1");
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let Some(&first) = values.first() else {
        return out;
    };
    let mut prev = first;
    out.push(prev);
    for &v in &values[1..] {
        prev += alpha * (v - prev);
        out.push(prev);
    }
    out
}

/// Raw stochastic %K over `n` bars. A flat window yields a non-finite value,
/// which [`sanitize`] replaces.
pub fn stochastic_k(bars: &[DailyBar], n: usize) -> Vec<Option<f64>> {
    assert!(n >= 1, "window must be >= 1");
    (0..bars.len())
        .map(|t| {
            if t + 1 < n {
                return None;
            }
            let w = &bars[t + 1 - n..=t];
            let hh = w.iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max);
            let ll = w.iter().map(|b| b.low).fold(f64::INFINITY, f64::min);
            Some(100.0 * (bars[t].close - ll) / (hh - ll))
        })
        .collect()
}

/// Percent change versus the value `n` steps earlier.
pub fn roc(values: &[f64], n: usize) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|t| (t >= n).then(|| 100.0 * (values[t] - values[t - n]) / values[t - n]))
        .collect()
}

/// RSI with simple averages of the last `n` gains and losses. All-flat
/// windows give 50; windows without losses give 100.
pub fn rsi(values: &[f64], n: usize) -> Vec<Option<f64>> {
    assert!(n >= 1, "window must be >= 1");
    (0..values.len())
        .map(|t| {
            if t < n {
                return None;
            }
            let (mut gain, mut loss) = (0.0, 0.0);
            for i in t + 1 - n..=t {
                let diff = values[i] - values[i - 1];
                if diff > 0.0 {
                    gain += diff;
                } else {
                    loss -= diff;
                }
            }
            let (gain, loss) = (gain / n as f64, loss / n as f64);
            Some(if loss == 0.0 {
                if gain == 0.0 {
                    50.0
                } else {
                    100.0
                }
            } else {
                100.0 - 100.0 / (1.0 + gain / loss)
            })
        })
        .collect()
}

/// `(high_t - close_{t-1}) / (high_t - low_t)`; undefined at `t = 0`.
pub fn accdo(bars: &[DailyBar]) -> Vec<Option<f64>> {
    (0..bars.len())
        .map(|t| (t >= 1).then(|| (bars[t].high - bars[t - 1].close) / (bars[t].high - bars[t].low)))
        .collect()
}

/// `ema12 - ema26` elementwise.
pub fn macd(ema12: &[f64], ema26: &[f64]) -> Result<Vec<f64>> {
    if ema12.len() != ema26.len() {
        return Err(Error::Shape(format!("macd inputs have lengths {} and {}", ema12.len(), ema26.len())));
    }
    Ok(ema12.iter().zip(ema26).map(|(a, b)| a - b).collect())
}

/// Close as a percentage of its `n`-day simple moving average.
pub fn disparity(values: &[f64], n: usize) -> Vec<Option<f64>> {
    sma(values, n).into_iter().zip(values).map(|(m, &c)| m.map(|m| 100.0 * c / m)).collect()
}

/// Applies the replacement rules: non-finite %K becomes 50, non-finite AccDO
/// becomes 0, and any other non-finite field rejects the row.
pub fn sanitize(mut row: FeatureRow) -> Result<FeatureRow> {
    if !row.stoch_k.is_finite() {
        row.stoch_k = STOCH_K_FALLBACK;
    }
    if !row.accdo.is_finite() {
        row.accdo = ACCDO_FALLBACK;
    }
    for (name, v) in FEATURE_NAMES.iter().zip(row.to_array()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteFeature { field: name, date: row.date });
        }
    }
    Ok(row)
}

/// Computed features for one series.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
    /// Rows dropped by [`sanitize`].
    pub rejected: Vec<String>,
}

/// Computes sanitized feature rows for every bar past the warm-up.
pub fn compute_features(bars: &[DailyBar], cfg: &IndicatorConfig) -> Result<FeatureTable> {
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let ema10 = ema(&closes, 10);
    let ema12 = ema(&closes, 12);
    let ema26 = ema(&closes, 26);
    let macd_line = macd(&ema12, &ema26)?;
    let stoch = stochastic_k(bars, cfg.stoch_window);
    let roc_v = roc(&closes, cfg.roc_lag);
    let rsi_v = rsi(&closes, cfg.rsi_window);
    let acc = accdo(bars);
    let ma5 = sma(&closes, 5);
    let ma10 = sma(&closes, 10);
    let disp5 = disparity(&closes, 5);
    let disp10 = disparity(&closes, 10);

    let mut table = FeatureTable::default();
    for t in cfg.warmup()..bars.len() {
        let bar = &bars[t];
        let (Some(stoch_k), Some(roc), Some(rsi), Some(accdo), Some(ma5), Some(ma10), Some(d5), Some(d10)) =
            (stoch[t], roc_v[t], rsi_v[t], acc[t], ma5[t], ma10[t], disp5[t], disp10[t])
        else {
            continue;
        };
        let raw = FeatureRow {
            date: bar.date,
            intraday_return: intraday_return(bar)?,
            ema10: ema10[t],
            ema12: ema12[t],
            ema26: ema26[t],
            stoch_k,
            roc,
            rsi,
            accdo,
            macd: macd_line[t],
            disparity5: d5,
            disparity10: d10,
            ma5,
            ma10,
            close_lag10: closes[t - cfg.roc_lag],
            day_of_year: bar.date.ordinal() as f64,
        };
        match sanitize(raw) {
            Ok(row) => table.rows.push(row),
            Err(e) => table.rejected.push(e.to_string()),
        }
    }
    Ok(table)
}

pub fn write_feature_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 200);
    out.push_str("date,");
    out.push_str(&FEATURE_NAMES.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.date.format("%Y-%m-%d").to_string());
        for v in row.to_array() {
            out.push(',');
            // Shortest round-trip representation.
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let expected: Vec<&str> = std::iter::once("date").chain(FEATURE_NAMES).collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!("{}: unexpected feature header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| Error::Format(e.to_string()))?;
        let mut v = [0.0; NUM_FEATURES];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = rec[i + 1].parse().map_err(|e| Error::Format(format!("{}: {e}", &rec[i + 1])))?;
        }
        rows.push(FeatureRow::from_array(date, v));
    }
    Ok(rows)
}
