//! Look-ahead guard: rebuild from data truncated at `t` and compare.
#![allow(dead_code)]

use chrono::NaiveDate;
use i2e_core::dataset::{make_windows, series_features};
use i2e_core::indicators::{intraday_return, FeatureRow, IndicatorConfig};
use i2e_core::{Sample, TickerSeries};

pub type Builder = fn(&TickerSeries) -> (Vec<FeatureRow>, Vec<Sample>);

pub fn clean_builder(s: &TickerSeries) -> (Vec<FeatureRow>, Vec<Sample>) {
    let (bars, rows) = series_features(s, &IndicatorConfig::default()).unwrap();
    let returns: Vec<(NaiveDate, f64)> = bars.iter().map(|b| (b.date, intraday_return(b).unwrap())).collect();
    let samples = make_windows(s.symbol(), &rows, &returns);
    (rows, samples)
}

/// Labels each day with the next day's features.
pub fn leaky_builder(s: &TickerSeries) -> (Vec<FeatureRow>, Vec<Sample>) {
    let (bars, rows) = series_features(s, &IndicatorConfig::default()).unwrap();
    let shifted: Vec<FeatureRow> = rows.windows(2).map(|w| FeatureRow { date: w[0].date, ..w[1] }).collect();
    let returns: Vec<(NaiveDate, f64)> = bars.iter().map(|b| (b.date, intraday_return(b).unwrap())).collect();
    let samples = make_windows(s.symbol(), &shifted, &returns);
    (shifted, samples)
}

/// Ok when truncating at `t` leaves every sample anchored at or before the
/// previous day and every feature row dated at or before `t` bitwise
/// unchanged; Err describes the first difference.
pub fn guard(build: Builder, series: &TickerSeries, t: NaiveDate) -> Result<usize, String> {
    let (rows_full, samples_full) = build(series);
    let (rows_cut, samples_cut) = build(&series.truncated(t));
    let before: Vec<&Sample> = samples_full.iter().filter(|s| s.anchor_date < t).collect();
    let before_cut: Vec<&Sample> = samples_cut.iter().filter(|s| s.anchor_date < t).collect();
    if before.len() != before_cut.len() {
        return Err(format!("{} samples before {t}, {} after truncation", before.len(), before_cut.len()));
    }
    for (a, b) in before.iter().zip(&before_cut) {
        if a.anchor_date != b.anchor_date || !bitwise_eq_sample(a, b) {
            return Err(format!("sample anchored {} changed", a.anchor_date));
        }
    }
    let rows_a: Vec<&FeatureRow> = rows_full.iter().filter(|r| r.date <= t).collect();
    let rows_b: Vec<&FeatureRow> = rows_cut.iter().filter(|r| r.date <= t).collect();
    if rows_a.len() != rows_b.len() {
        return Err(format!("{} feature rows up to {t}, {} after truncation", rows_a.len(), rows_b.len()));
    }
    for (a, b) in rows_a.iter().zip(&rows_b) {
        let same = a.date == b.date && a.to_array().iter().zip(b.to_array()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("feature row {} changed", a.date));
        }
    }
    Ok(before.len())
}

fn bitwise_eq_sample(a: &Sample, b: &Sample) -> bool {
    a.symbol == b.symbol
        && a.target_date == b.target_date
        && a.target_label == b.target_label
        && a.target_return.to_bits() == b.target_return.to_bits()
        && a.target_raw.to_bits() == b.target_raw.to_bits()
        && a.window.iter().flatten().zip(b.window.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
}
