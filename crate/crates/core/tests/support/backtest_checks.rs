//! Hand-computed portfolio fixtures and exhaustive-search comparisons.
#![allow(dead_code)]

use chrono::NaiveDate;
use i2e_core::evaluation::{backtest, daily_rank, RankedPrediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{best_long_short, worst_long_short};

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn rows(date: NaiveDate, v: &[(&str, f64, f64)]) -> Vec<RankedPrediction> {
    v.iter()
        .map(|&(s, p, r)| RankedPrediction { date, symbol: s.into(), predicted: p, realized: Some(r) })
        .collect()
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-15
}

/// Three traded days over two ISO weeks plus one short day, k = 2.
pub fn hand_fixture() -> Result<(), String> {
    let mut p = rows(
        day(2023, 1, 5),
        &[("A", 0.9, 0.02), ("B", 0.8, -0.01), ("C", 0.5, 0.03), ("D", 0.5, 0.0), ("E", 0.1, -0.02), ("F", 0.2, 0.01)],
    );
    p.extend(rows(
        day(2023, 1, 6),
        &[("A", 0.1, 0.01), ("B", 0.2, 0.01), ("C", 0.3, 0.01), ("D", 0.4, 0.01), ("E", 0.5, 0.01), ("F", 0.6, 0.05)],
    ));
    p.extend(rows(
        day(2023, 1, 9),
        &[("A", 0.0, 0.04), ("B", 0.0, 0.02), ("C", 0.0, 0.5), ("D", 0.0, -0.5), ("E", 0.0, -0.02), ("F", 0.0, 0.0)],
    ));
    p.extend(rows(day(2023, 1, 10), &[("A", 0.3, 0.1), ("B", 0.2, 0.1), ("C", 0.1, 0.1)]));

    let r = backtest(&p, 2).map_err(|e| e.to_string())?;
    let want = [
        (day(2023, 1, 5), ["A", "B"], ["F", "E"], 0.005),
        (day(2023, 1, 6), ["F", "E"], ["B", "A"], 0.01),
        (day(2023, 1, 9), ["A", "B"], ["E", "F"], 0.02),
    ];
    if r.days.len() != 3 {
        return Err(format!("{} traded days", r.days.len()));
    }
    for (got, (d, l, s, ret)) in r.days.iter().zip(want) {
        if got.date != d || got.longs != l || got.shorts != s || !near(got.portfolio_return, ret) {
            return Err(format!("{got:?} vs {d} {l:?} {s:?} {ret}"));
        }
    }
    if r.skipped.len() != 1 || r.skipped[0].date != day(2023, 1, 10) {
        return Err(format!("skipped {:?}", r.skipped));
    }
    if !near(r.average_daily_return, 0.035 / 3.0) {
        return Err(format!("average {}", r.average_daily_return));
    }
    let weeks: Vec<(u32, usize, f64)> = r.weekly.iter().map(|w| (w.iso_week, w.days, w.mean_return)).collect();
    if weeks.len() != 2
        || (weeks[0].0, weeks[0].1) != (1, 2)
        || !near(weeks[0].2, 0.0075)
        || (weeks[1].0, weeks[1].1) != (2, 1)
        || !near(weeks[1].2, 0.02)
        || r.weekly[1].week_start != day(2023, 1, 9)
    {
        return Err(format!("weekly {weeks:?}"));
    }
    Ok(())
}

/// Predicting the realized return attains the exhaustive best long/short;
/// predicting its negation attains the worst.
pub fn perfect_foresight(seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(2..=12);
    let k = r.random_range(1..=n / 2);
    let date = day(2023, 3, 1);
    let realized: Vec<f64> = (0..n)
        .map(|_| if r.random_bool(0.2) { 0.01 } else { r.random_range(-0.05..0.05) })
        .collect();
    let preds: Vec<RankedPrediction> = realized
        .iter()
        .enumerate()
        .map(|(i, &v)| RankedPrediction { date, symbol: format!("S{i:02}"), predicted: v, realized: Some(v) })
        .collect();
    let got = backtest(&preds, k).map_err(|e| e.to_string())?.average_daily_return;
    let best = best_long_short(&realized, k);
    if (got - best).abs() > 1e-12 {
        return Err(format!("n={n} k={k}: {got} vs exhaustive {best}"));
    }
    let negated: Vec<RankedPrediction> = preds.into_iter().map(|p| RankedPrediction { predicted: -p.predicted, ..p }).collect();
    let got = backtest(&negated, k).map_err(|e| e.to_string())?.average_daily_return;
    let worst = worst_long_short(&realized, k);
    if (got - worst).abs() > 1e-12 {
        return Err(format!("n={n} k={k}: negated {got} vs exhaustive minimum {worst}"));
    }
    Ok(())
}

/// Selections are unchanged by strictly increasing transforms of the scores.
pub fn rank_invariant(scores: &[f64], k: usize) -> Result<(), String> {
    let named: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &v)| (format!("T{i:02}"), v)).collect();
    let base = daily_rank(&named, k).map_err(|e| e.to_string())?;
    let transforms: [fn(f64) -> f64; 4] = [|x| 3.0 * x + 7.0, |x| x * x * x + x, |x| (x / 4.0).exp(), |x| x.atan()];
    for (i, f) in transforms.iter().enumerate() {
        let moved: Vec<(String, f64)> = named.iter().map(|(s, v)| (s.clone(), f(*v))).collect();
        if daily_rank(&moved, k).map_err(|e| e.to_string())? != base {
            return Err(format!("transform {i} changed the selection"));
        }
    }
    Ok(())
}
