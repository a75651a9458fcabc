//! Every indicator operation against its direct-definition oracle.
#![allow(dead_code)]

use chrono::{Duration, NaiveDate};
use i2e_core::indicators::{
    accdo, compute_features, disparity, ema, intraday_return, macd, roc, rsi, sanitize, sma, stochastic_k, FeatureRow,
    IndicatorConfig, NUM_FEATURES,
};
use i2e_core::DailyBar;

use super::oracles::*;

pub const TOL: f64 = 1e-10;

fn check(what: &str, t: usize, got: Option<f64>, want: f64) -> Result<(), String> {
    match got {
        Some(g) if close_enough(g, want, TOL) => Ok(()),
        _ => Err(format!("{what} at {t}: {got:?} vs oracle {want}")),
    }
}

/// Compares all ten indicator operations on a `n`-bar random walk. Returns
/// the number of comparisons made.
pub fn random_walk_matches(n: usize, seed: u64) -> Result<usize, String> {
    let bars = random_walk_bars(n, seed);
    let c: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let mut count = 0;
    for (t, b) in bars.iter().enumerate() {
        let r = intraday_return(b).map_err(|e| e.to_string())?;
        check("intraday_return", t, Some(r), (b.close - b.open) / b.open)?;
        count += 1;
    }
    for w in [5, 10] {
        let s = sma(&c, w);
        let d = disparity(&c, w);
        for t in w - 1..c.len() {
            check("sma", t, s[t], sma_at(&c, w, t))?;
            check("disparity", t, d[t], 100.0 * c[t] / sma_at(&c, w, t))?;
            count += 2;
        }
    }
    for w in [10, 12, 26] {
        for (t, (a, b)) in ema(&c, w).iter().zip(ema_series(&c, w)).enumerate() {
            check("ema", t, Some(*a), b)?;
            count += 1;
        }
    }
    let k = stochastic_k(&bars, 10);
    let rc = roc(&c, 10);
    let rs = rsi(&c, 14);
    let acc = accdo(&bars);
    for t in 14..bars.len() {
        check("stochastic_k", t, k[t], stoch_at(&bars, 10, t))?;
        check("roc", t, rc[t], roc_at(&c, 10, t))?;
        check("rsi", t, rs[t], rsi_at(&c, 14, t))?;
        check("accdo", t, acc[t], accdo_at(&bars, t))?;
        count += 4;
    }
    let e12 = ema_series(&c, 12);
    let e26 = ema_series(&c, 26);
    let m = macd(&ema(&c, 12), &ema(&c, 26)).map_err(|e| e.to_string())?;
    for t in 0..c.len() {
        check("macd", t, Some(m[t]), e12[t] - e26[t])?;
        count += 1;
    }
    let rows = compute_features(&bars, &IndicatorConfig::default()).map_err(|e| e.to_string())?.rows;
    for (t, row) in rows.iter().enumerate() {
        let clean = sanitize(*row).map_err(|e| e.to_string())?;
        if clean != *row {
            return Err(format!("sanitize changed a finite row at {t}"));
        }
        count += 1;
    }
    Ok(count)
}

/// Constant prices: %K is 0/0 and AccDO is 0/0 everywhere, so both take
/// their substitutes exactly; a lone NaN elsewhere rejects the row.
pub fn flat_window_substitutions() -> Result<usize, String> {
    let d0 = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
    let bars: Vec<DailyBar> = (0..60)
        .map(|i| DailyBar { date: d0 + Duration::days(i), open: 10.0, high: 10.0, low: 10.0, close: 10.0, volume: 1 })
        .collect();
    let rows = compute_features(&bars, &IndicatorConfig::default()).map_err(|e| e.to_string())?.rows;
    if rows.is_empty() {
        return Err("no feature rows".into());
    }
    for row in &rows {
        if row.stoch_k != 50.0 || row.accdo != 0.0 || row.rsi != 50.0 || row.macd != 0.0 || row.disparity5 != 100.0 {
            return Err(format!("flat row {row:?}"));
        }
    }
    let mut raw = [1.0; NUM_FEATURES];
    raw[4] = f64::NAN;
    raw[7] = f64::INFINITY;
    let fixed = sanitize(FeatureRow::from_array(d0, raw)).map_err(|e| e.to_string())?;
    if fixed.stoch_k != 50.0 || fixed.accdo != 0.0 {
        return Err(format!("sanitize substitutes {fixed:?}"));
    }
    raw[0] = f64::NAN;
    if sanitize(FeatureRow::from_array(d0, raw)).is_ok() {
        return Err("a NaN return was not rejected".into());
    }
    Ok(rows.len())
}
