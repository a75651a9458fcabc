//! Deterministic inputs shared by the benchmarks.

use chrono::NaiveDate;
use i2e_core::dataset::{synth_market, SynthConfig};
use i2e_core::evaluation::RankedPrediction;
use i2e_core::{Sample, TickerSeries, NUM_FEATURES, WINDOW_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn series(n_days: usize) -> TickerSeries {
    let m = synth_market(&SynthConfig { n_stocks: 2, n_days, seed: 1, ..SynthConfig::default() }).expect("synthetic market");
    let first = m.universe.iter().next().expect("one stock").clone();
    first
}

pub fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    (0..n)
        .map(|_| {
            let mut window = [[0.0; NUM_FEATURES]; WINDOW_LEN];
            for v in window.iter_mut().flatten() {
                *v = r.random_range(0.0..1.0);
            }
            let label = r.random_bool(0.5);
            Sample {
                symbol: "X".into(),
                anchor_date: d,
                target_date: d,
                window,
                target_return: r.random_range(0.0..1.0),
                target_raw: 0.0,
                target_label: label as u8,
            }
        })
        .collect()
}

pub fn regression_table(n: usize, features: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..features).map(|_| r.random_range(0.0..1.0)).collect()).collect();
    let y = x.iter().map(|row| row[0] - row[1] * row[2] + r.random_range(-0.1..0.1)).collect();
    (x, y)
}

/// `days` trading days of `stocks` predictions with realized returns.
pub fn predictions(days: usize, stocks: usize, seed: u64) -> Vec<RankedPrediction> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2021, 1, 4).unwrap();
    let mut out = Vec::with_capacity(days * stocks);
    for d in 0..days {
        let date = start + chrono::Duration::days(d as i64);
        for s in 0..stocks {
            out.push(RankedPrediction {
                date,
                symbol: format!("S{s:03}"),
                predicted: r.random_range(-0.02..0.02),
                realized: Some(r.random_range(-0.03..0.03)),
            });
        }
    }
    out
}
