//! Straight-line reference implementations used by several test targets.
//! Nothing here calls into the library's numeric code.
#![allow(dead_code)]

use chrono::{Duration, NaiveDate};
use i2e_core::DailyBar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_walk_bars(n: usize, seed: u64) -> Vec<DailyBar> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut date = NaiveDate::from_ymd_opt(2012, 1, 2).unwrap();
    let mut close: f64 = 50.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let open = close * (1.0 + r.random_range(-0.01..0.01));
        close = (open * (1.0 + r.random_range(-0.03..0.03))).max(0.5);
        let high = open.max(close) * (1.0 + r.random_range(0.0..0.02));
        let low = open.min(close) * (1.0 - r.random_range(0.0..0.02));
        out.push(DailyBar { date, open, high, low, close, volume: r.random_range(1_000..1_000_000) });
        date += Duration::days(1);
    }
    out
}

pub fn sma_at(c: &[f64], n: usize, t: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        s += c[t - i];
    }
    s / n as f64
}

pub fn ema_series(c: &[f64], n: usize) -> Vec<f64> {
    let a = 2.0 / (n as f64 + 1.0);
    let mut out = vec![c[0]];
    for t in 1..c.len() {
        let prev = out[t - 1];
        out.push(a * c[t] + (1.0 - a) * prev);
    }
    out
}

pub fn stoch_at(b: &[DailyBar], n: usize, t: usize) -> f64 {
    let mut hh = b[t].high;
    let mut ll = b[t].low;
    for i in 0..n {
        if b[t - i].high > hh {
            hh = b[t - i].high;
        }
        if b[t - i].low < ll {
            ll = b[t - i].low;
        }
    }
    100.0 * (b[t].close - ll) / (hh - ll)
}

pub fn roc_at(c: &[f64], n: usize, t: usize) -> f64 {
    (c[t] / c[t - n] - 1.0) * 100.0
}

pub fn rsi_at(c: &[f64], n: usize, t: usize) -> f64 {
    let mut gains = Vec::new();
    let mut losses = Vec::new();
    for i in (t + 1 - n)..=t {
        let d = c[i] - c[i - 1];
        gains.push(if d > 0.0 { d } else { 0.0 });
        losses.push(if d < 0.0 { -d } else { 0.0 });
    }
    let g: f64 = gains.iter().sum::<f64>() / n as f64;
    let l: f64 = losses.iter().sum::<f64>() / n as f64;
    if g == 0.0 && l == 0.0 {
        50.0
    } else if l == 0.0 {
        100.0
    } else {
        100.0 * g / (g + l)
    }
}

pub fn accdo_at(b: &[DailyBar], t: usize) -> f64 {
    (b[t].high - b[t - 1].close) / (b[t].high - b[t].low)
}

pub fn close_enough(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Dense weights `w[in][out]`, bias `b[out]`.
pub struct Lin {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Lin {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += xi * self.w[i][j];
            }
        }
        y
    }
}

/// Multi-head self-attention over one sequence with explicit loops.
/// Returns `(output[seq][d], weights[head][query][key])`.
pub fn attention_loops(x: &[Vec<f64>], q: &Lin, k: &Lin, v: &Lin, o: &Lin, heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let seq = x.len();
    let d = x[0].len();
    let dk = d / heads;
    let qs: Vec<Vec<f64>> = x.iter().map(|t| q.apply(t)).collect();
    let ks: Vec<Vec<f64>> = x.iter().map(|t| k.apply(t)).collect();
    let vs: Vec<Vec<f64>> = x.iter().map(|t| v.apply(t)).collect();
    let mut concat = vec![vec![0.0; d]; seq];
    let mut all_w = Vec::new();
    for h in 0..heads {
        let mut wh = Vec::new();
        for i in 0..seq {
            let mut scores = Vec::new();
            for j in 0..seq {
                let mut s = 0.0;
                for c in 0..dk {
                    s += qs[i][h * dk + c] * ks[j][h * dk + c];
                }
                scores.push(s / (dk as f64).sqrt());
            }
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|v| v / z).collect();
            for c in 0..dk {
                let mut acc = 0.0;
                for j in 0..seq {
                    acc += w[j] * vs[j][h * dk + c];
                }
                concat[i][h * dk + c] = acc;
            }
            wh.push(w);
        }
        all_w.push(wh);
    }
    (concat.iter().map(|t| o.apply(t)).collect(), all_w)
}

/// Best squared-loss stump by trying every feature and every gap between
/// distinct values, with L2 penalty `lambda` and base prediction `base`.
/// Returns `(feature, threshold, left_value, right_value)`; ties keep the
/// first feature and the lowest threshold.
pub fn best_stump(x: &[Vec<f64>], y: &[f64], base: f64, lambda: f64, min_child: f64) -> Option<(usize, f64, f64, f64)> {
    let n = x.len();
    let g: Vec<f64> = y.iter().map(|t| base - t).collect();
    let gs: f64 = g.iter().sum();
    let parent = gs * gs / (n as f64 + lambda);
    let mut best: Option<(f64, usize, f64, f64, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        for w in vals.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            let (mut gl, mut nl, mut gr, mut nr) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                if x[i][f] < thr {
                    gl += g[i];
                    nl += 1.0;
                } else {
                    gr += g[i];
                    nr += 1.0;
                }
            }
            if nl < min_child || nr < min_child {
                continue;
            }
            let gain = 0.5 * (gl * gl / (nl + lambda) + gr * gr / (nr + lambda) - parent);
            if gain > 1e-12 && best.is_none_or(|b| gain > b.0) {
                best = Some((gain, f, thr, -gl / (nl + lambda), -gr / (nr + lambda)));
            }
        }
    }
    best.map(|(_, f, t, l, r)| (f, t, l, r))
}

/// Highest achievable `(sum long - sum short) / 2k` over every pair of
/// disjoint k-subsets.
pub fn best_long_short(r: &[f64], k: usize) -> f64 {
    extreme_long_short(r, k, true)
}

pub fn worst_long_short(r: &[f64], k: usize) -> f64 {
    extreme_long_short(r, k, false)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

fn extreme_long_short(r: &[f64], k: usize, max: bool) -> f64 {
    let n = r.len();
    let all = subsets(n, k);
    let mut best = if max { f64::NEG_INFINITY } else { f64::INFINITY };
    for l in &all {
        for s in &all {
            if l.iter().any(|i| s.contains(i)) {
                continue;
            }
            let v = (l.iter().map(|&i| r[i]).sum::<f64>() - s.iter().map(|&i| r[i]).sum::<f64>()) / (2 * k) as f64;
            best = if max { best.max(v) } else { best.min(v) };
        }
    }
    best
}
