//! Classification/regression metrics and the ranked long/short backtest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_nn::loss::weighted_bce;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bce_loss: f64,
    pub n: usize,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// A sample is predicted positive when `prob > threshold`. Precision, recall
/// and F1 are for the positive class and are 0 when undefined. `class_weights`
/// `(negative, positive)` weight the BCE exactly as in training.
pub fn classification_metrics(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
    class_weights: Option<(f64, f64)>,
) -> Result<ClassificationMetrics> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("metrics over zero samples".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities, {} labels", probs.len(), labels.len())));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p > threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let w: Option<Vec<f64>> = class_weights.map(|(w0, w1)| labels.iter().map(|&l| if l == 1 { w1 } else { w0 }).collect());
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, probs.len()),
        precision,
        recall,
        f1,
        bce_loss: weighted_bce(probs, &y, w.as_deref())?,
        n: probs.len(),
        true_pos: tp,
        false_pos: fp,
        true_neg: tn,
        false_neg: fneg,
    })
}

/// Mean squared error.
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("metrics over zero samples".into()));
    }
    crate::tensor_nn::loss::mse(preds, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    /// In the min-max scaled target space.
    pub mse_scaled: f64,
    /// In raw return space.
    pub mse_raw: f64,
    pub n: usize,
}

/// Orders by descending prediction, ties by ascending symbol, and returns the
/// first `k` (longs) and last `k` (shorts, lowest prediction last).
pub fn daily_rank(preds: &[(String, f64)], k: usize) -> Result<(Vec<String>, Vec<String>)> {
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (s, p) in preds {
        if !seen.insert(s.as_str()) {
            return Err(Error::InvalidInput(format!("symbol {s} appears twice on one day")));
        }
        if !p.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite prediction for {s}")));
        }
    }
    if preds.len() < 2 * k {
        return Err(Error::InvalidInput(format!("{} candidates, need at least {}", preds.len(), 2 * k)));
    }
    let mut order: Vec<&(String, f64)> = preds.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let longs = order[..k].iter().map(|x| x.0.clone()).collect();
    let shorts = order[order.len() - k..].iter().map(|x| x.0.clone()).collect();
    Ok((longs, shorts))
}

/// `(sum of long returns - sum of short returns) / (2k)`.
pub fn portfolio_return(longs: &[String], shorts: &[String], realized: &BTreeMap<String, f64>) -> Result<f64> {
    if longs.len() != shorts.len() {
        return Err(Error::InvalidInput(format!("{} longs vs {} shorts", longs.len(), shorts.len())));
    }
    if longs.is_empty() {
        return Ok(0.0);
    }
    let get = |s: &String| {
        realized
            .get(s)
            .copied()
            .filter(|r| r.is_finite())
            .ok_or_else(|| Error::InvalidInput(format!("no realized return for {s}")))
    };
    let mut total = 0.0;
    for s in longs {
        total += get(s)?;
    }
    for s in shorts {
        total -= get(s)?;
    }
    Ok(total / (2 * longs.len()) as f64)
}

/// One prediction with its realized next-day return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub date: NaiveDate,
    pub symbol: String,
    pub predicted: f64,
    pub realized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayResult {
    pub date: NaiveDate,
    pub longs: Vec<String>,
    pub shorts: Vec<String>,
    pub portfolio_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDay {
    pub date: NaiveDate,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyReturn {
    pub iso_year: i32,
    pub iso_week: u32,
    /// Monday of the ISO week.
    pub week_start: NaiveDate,
    pub days: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub k: usize,
    pub days: Vec<DayResult>,
    pub skipped: Vec<SkippedDay>,
    pub average_daily_return: f64,
    pub weekly: Vec<WeeklyReturn>,
}

/// Trades every date with at least `2k` candidates and a realized return for
/// each selected symbol; other dates are recorded in `skipped`.
pub fn backtest(predictions: &[RankedPrediction], k: usize) -> Result<BacktestReport> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let mut by_date: BTreeMap<NaiveDate, Vec<&RankedPrediction>> = BTreeMap::new();
    for p in predictions {
        by_date.entry(p.date).or_default().push(p);
    }
    let mut days = Vec::new();
    let mut skipped = Vec::new();
    for (date, rows) in by_date {
        let preds: Vec<(String, f64)> = rows.iter().map(|r| (r.symbol.clone(), r.predicted)).collect();
        let (longs, shorts) = match daily_rank(&preds, k) {
            Ok(sel) => sel,
            Err(e) => {
                tracing::info!(%date, reason = %e, "day skipped");
                skipped.push(SkippedDay { date, reason: e.to_string() });
                continue;
            }
        };
        let realized: BTreeMap<String, f64> =
            rows.iter().filter_map(|r| r.realized.map(|v| (r.symbol.clone(), v))).collect();
        match portfolio_return(&longs, &shorts, &realized) {
            Ok(r) => days.push(DayResult { date, longs, shorts, portfolio_return: r }),
            Err(e) => {
                tracing::info!(%date, reason = %e, "day skipped");
                skipped.push(SkippedDay { date, reason: e.to_string() });
            }
        }
    }
    if days.is_empty() {
        return Err(Error::InvalidInput(format!("no tradable days ({} skipped)", skipped.len())));
    }
    let average_daily_return = days.iter().map(|d| d.portfolio_return).sum::<f64>() / days.len() as f64;
    let weekly = weekly_returns(&days);
    Ok(BacktestReport { k, days, skipped, average_daily_return, weekly })
}

/// Groups traded days by ISO week.
pub fn weekly_returns(days: &[DayResult]) -> Vec<WeeklyReturn> {
    let mut weeks: BTreeMap<(i32, u32), Vec<f64>> = BTreeMap::new();
    for d in days {
        let w = d.date.iso_week();
        weeks.entry((w.year(), w.week())).or_default().push(d.portfolio_return);
    }
    weeks
        .into_iter()
        .map(|((y, w), rs)| WeeklyReturn {
            iso_year: y,
            iso_week: w,
            week_start: NaiveDate::from_isoywd_opt(y, w, Weekday::Mon).expect("valid iso week"),
            days: rs.len(),
            mean_return: rs.iter().sum::<f64>() / rs.len() as f64,
        })
        .collect()
}

impl BacktestReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// `date,longs,shorts,return` with symbols joined by `;`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "date,longs,shorts,return")?;
        for d in &self.days {
            writeln!(w, "{},{},{},{}", d.date, d.longs.join(";"), d.shorts.join(";"), d.portfolio_return)?;
        }
        Ok(())
    }

    pub fn write_weekly_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iso_year,iso_week,week_start,days,mean_return")?;
        for x in &self.weekly {
            writeln!(w, "{},{},{},{},{}", x.iso_year, x.iso_week, x.week_start, x.days, x.mean_return)?;
        }
        Ok(())
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>_weekly.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let daily = dir.join(format!("{stem}.csv"));
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        std::fs::write(&daily, buf).map_err(|e| Error::io(&daily, e))?;
        let weekly = dir.join(format!("{stem}_weekly.csv"));
        let mut buf = Vec::new();
        self.write_weekly_csv(&mut buf).expect("writing to memory");
        std::fs::write(&weekly, buf).map_err(|e| Error::io(&weekly, e))
    }
}
