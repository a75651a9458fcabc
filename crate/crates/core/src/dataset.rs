//! Windowed samples, scaling, date splits and the synthetic factor market.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::{compute_features, intraday_return, FeatureRow, IndicatorConfig};
use crate::market_data::{exclude_first_year, DailyBar, DateRange, TickerSeries, Universe};

pub use crate::indicators::NUM_FEATURES;

/// Days per input window (the anchor day and the nine before it).
pub const WINDOW_LEN: usize = 10;
/// Length of a flattened window.
pub const FLAT_LEN: usize = WINDOW_LEN * NUM_FEATURES;
/// Feature channels plus the target channel.
pub const NUM_CHANNELS: usize = NUM_FEATURES + 1;
/// Upper clip applied to raw target returns.
pub const TARGET_CLIP: f64 = 2.0;

/// Oldest-first `WINDOW_LEN x NUM_FEATURES` feature block.
pub type Window = [[f64; NUM_FEATURES]; WINDOW_LEN];

/// One training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub symbol: String,
    /// Last feature day of the window.
    pub anchor_date: NaiveDate,
    /// First trading day after `anchor_date`; the prediction date.
    pub target_date: NaiveDate,
    pub window: Window,
    /// Clipped next-day return, min-max scaled once a scaler is applied.
    pub target_return: f64,
    /// Realized next-day return, never clipped or scaled.
    pub target_raw: f64,
    /// 1 when `target_raw > 0`.
    pub target_label: u8,
}

/// `min(r, 2)`; the lower tail is untouched.
pub fn clip_target(r: f64) -> f64 {
    r.min(TARGET_CLIP)
}

/// One sample per feature date with nine earlier feature rows and a
/// following return. `returns` holds the raw intraday return of every bar.
pub fn make_windows(symbol: &str, features: &[FeatureRow], returns: &[(NaiveDate, f64)]) -> Vec<Sample> {
    let mut out = Vec::new();
    if features.len() < WINDOW_LEN {
        return out;
    }
    for end in WINDOW_LEN - 1..features.len() {
        let anchor = features[end].date;
        let next = returns.partition_point(|(d, _)| *d <= anchor);
        let Some(&(target_date, raw)) = returns.get(next) else {
            break;
        };
        out.push(Sample {
            symbol: symbol.to_string(),
            anchor_date: anchor,
            target_date,
            window: window_at(features, end),
            target_return: clip_target(raw),
            target_raw: raw,
            target_label: u8::from(raw > 0.0),
        });
    }
    out
}

fn window_at(features: &[FeatureRow], end: usize) -> Window {
    let mut w = [[0.0; NUM_FEATURES]; WINDOW_LEN];
    for (slot, row) in w.iter_mut().zip(&features[end + 1 - WINDOW_LEN..=end]) {
        *slot = row.to_array();
    }
    w
}

/// Feature rows for a series after first-year exclusion and warm-up.
pub fn series_features(series: &TickerSeries, cfg: &IndicatorConfig) -> Result<(Vec<DailyBar>, Vec<FeatureRow>)> {
    let trimmed = exclude_first_year(series);
    let table = compute_features(trimmed.bars(), cfg)?;
    Ok((trimmed.into_bars(), table.rows))
}

/// Full per-series pipeline: first-year exclusion, features, windows.
pub fn build_samples(series: &TickerSeries, cfg: &IndicatorConfig) -> Result<Vec<Sample>> {
    let (bars, rows) = series_features(series, cfg)?;
    let returns = bars.iter().map(|b| Ok((b.date, intraday_return(b)?))).collect::<Result<Vec<_>>>()?;
    Ok(make_windows(series.symbol(), &rows, &returns))
}

/// Samples for every member of a universe, symbol-ordered.
pub fn build_universe_samples(universe: &Universe, cfg: &IndicatorConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for series in universe.iter() {
        out.extend(build_samples(series, cfg)?);
    }
    Ok(out)
}

/// The window ending at the latest feature date, used for out-of-sample
/// prediction where no target exists yet.
pub fn latest_window(features: &[FeatureRow]) -> Option<(NaiveDate, Window)> {
    (features.len() >= WINDOW_LEN).then(|| (features[features.len() - 1].date, window_at(features, features.len() - 1)))
}

/// Row-major day-then-feature flattening, oldest day first.
pub fn flatten_window(window: &Window) -> [f64; FLAT_LEN] {
    let mut out = [0.0; FLAT_LEN];
    for (d, row) in window.iter().enumerate() {
        out[d * NUM_FEATURES..(d + 1) * NUM_FEATURES].copy_from_slice(row);
    }
    out
}

pub fn unflatten_window(flat: &[f64]) -> Result<Window> {
    if flat.len() != FLAT_LEN {
        return Err(Error::Shape(format!("expected {FLAT_LEN} values, got {}", flat.len())));
    }
    let mut w = [[0.0; NUM_FEATURES]; WINDOW_LEN];
    for (d, row) in w.iter_mut().enumerate() {
        row.copy_from_slice(&flat[d * NUM_FEATURES..(d + 1) * NUM_FEATURES]);
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Scaling

/// Per-channel min-max scaler: fifteen feature channels and one target channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits on training samples only. Targets should already be clipped.
    pub fn fit(train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Scaler("cannot fit on an empty training set".into()));
        }
        let mut mins = vec![f64::INFINITY; NUM_CHANNELS];
        let mut maxs = vec![f64::NEG_INFINITY; NUM_CHANNELS];
        for s in train {
            for row in &s.window {
                for (c, &v) in row.iter().enumerate() {
                    mins[c] = mins[c].min(v);
                    maxs[c] = maxs[c].max(v);
                }
            }
            mins[NUM_FEATURES] = mins[NUM_FEATURES].min(s.target_return);
            maxs[NUM_FEATURES] = maxs[NUM_FEATURES].max(s.target_return);
        }
        Ok(Self { mins, maxs })
    }

    pub fn from_bounds(mins: Vec<f64>, maxs: Vec<f64>) -> Result<Self> {
        if mins.len() != NUM_CHANNELS || maxs.len() != NUM_CHANNELS {
            return Err(Error::Scaler(format!("expected {NUM_CHANNELS} channels, got {}/{}", mins.len(), maxs.len())));
        }
        if mins.iter().zip(&maxs).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Scaler("channel max below min".into()));
        }
        Ok(Self { mins, maxs })
    }

    pub fn is_fitted(&self) -> bool {
        self.mins.len() == NUM_CHANNELS
    }

    fn check(&self) -> Result<()> {
        if self.is_fitted() {
            Ok(())
        } else if self.mins.is_empty() {
            Err(Error::Scaler("scaler has not been fitted".into()))
        } else {
            Err(Error::Scaler(format!("scaler has {} channels, expected {NUM_CHANNELS}", self.mins.len())))
        }
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn maxs(&self) -> &[f64] {
        &self.maxs
    }

    #[inline]
    fn scale(&self, c: usize, v: f64) -> f64 {
        let span = self.maxs[c] - self.mins[c];
        if span > 0.0 {
            (v - self.mins[c]) / span
        } else {
            0.0
        }
    }

    #[inline]
    fn unscale(&self, c: usize, v: f64) -> f64 {
        self.mins[c] + v * (self.maxs[c] - self.mins[c])
    }

    pub fn transform_window(&self, window: &Window) -> Result<Window> {
        self.check()?;
        let mut out = *window;
        for row in out.iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.scale(c, *v);
            }
        }
        Ok(out)
    }

    pub fn transform_target(&self, r: f64) -> Result<f64> {
        self.check()?;
        Ok(self.scale(NUM_FEATURES, r))
    }

    pub fn inverse_target(&self, r: f64) -> Result<f64> {
        self.check()?;
        Ok(self.unscale(NUM_FEATURES, r))
    }

    pub fn transform(&self, samples: &[Sample]) -> Result<Vec<Sample>> {
        self.check()?;
        samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    window: self.transform_window(&s.window)?,
                    target_return: self.scale(NUM_FEATURES, s.target_return),
                    ..s.clone()
                })
            })
            .collect()
    }

    /// Inverse of [`transform`](Self::transform) for non-constant channels.
    pub fn inverse(&self, samples: &[Sample]) -> Result<Vec<Sample>> {
        self.check()?;
        Ok(samples
            .iter()
            .map(|s| {
                let mut w = s.window;
                for row in w.iter_mut() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = self.unscale(c, *v);
                    }
                }
                Sample { window: w, target_return: self.unscale(NUM_FEATURES, s.target_return), ..s.clone() }
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: DateRange,
    pub validation: DateRange,
    pub test: DateRange,
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

impl Default for SplitSpec {
    /// Train 2010 to 2021, validation 2022, test 2023-01-01..2023-12-01.
    fn default() -> Self {
        Self {
            train: DateRange::new(ymd(2010, 1, 1), ymd(2021, 12, 31)),
            validation: DateRange::new(ymd(2022, 1, 1), ymd(2022, 12, 31)),
            test: DateRange::new(ymd(2023, 1, 1), ymd(2023, 12, 1)),
        }
    }
}

impl SplitSpec {
    /// Consecutive train/validation/test intervals covering `start..=end`,
    /// sized by calendar-day fractions (test gets the remainder).
    pub fn by_fractions(start: NaiveDate, end: NaiveDate, train: f64, validation: f64) -> Result<Self> {
        if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
            return Err(Error::Config(format!("bad split fractions {train} / {validation}")));
        }
        let days = (end - start).num_days();
        let at = |f: f64| start + Days::new((f * days as f64).floor() as u64);
        let train_end = at(train);
        let val_end = at(train + validation);
        let spec = Self {
            train: DateRange::new(start, train_end),
            validation: DateRange::new(train_end + Days::new(1), val_end),
            test: DateRange::new(val_end + Days::new(1), end),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [("train", self.train), ("validation", self.validation), ("test", self.test)];
        for (name, r) in parts {
            if r.is_empty() {
                return Err(Error::Config(format!("{name} interval is empty")));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if parts[i].1.overlaps(&parts[j].1) {
                    return Err(Error::Config(format!("{} and {} intervals overlap", parts[i].0, parts[j].0)));
                }
            }
        }
        if !(self.train.end < self.validation.start && self.validation.end < self.test.start) {
            return Err(Error::Config("intervals must be ordered train < validation < test".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partitions {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Assigns each sample by its target date; samples outside every interval
/// are dropped.
pub fn split_by_date(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Partitions> {
    spec.validate()?;
    let mut parts = Partitions::default();
    for s in samples {
        let d = s.target_date;
        if spec.train.contains(d) {
            parts.train.push(s);
        } else if spec.validation.contains(d) {
            parts.validation.push(s);
        } else if spec.test.contains(d) {
            parts.test.push(s);
        }
    }
    Ok(parts)
}

/// Inverse-frequency weights `N / (2 N_c)` for (negative, positive).
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("class weights need both classes present".into()));
    }
    let n = labels.len() as f64;
    Ok((n / (2.0 * neg as f64), n / (2.0 * pos as f64)))
}

// ---------------------------------------------------------------------------
// Synthetic market

/// Parameters of the synthetic one-factor market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_stocks: usize,
    pub n_days: usize,
    pub seed: u64,
    /// AR(1) coefficient of the latent daily factor.
    pub phi: f64,
    /// Stationary standard deviation of the factor.
    pub factor_vol: f64,
    /// Idiosyncratic noise, in units of `factor_vol`.
    pub noise_scale: f64,
    pub start: NaiveDate,
    pub index_symbol: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stocks: 50,
            n_days: 1500,
            seed: 0,
            phi: 0.3,
            factor_vol: 0.01,
            noise_scale: 1.0,
            start: ymd(2010, 1, 4),
            index_symbol: "^GSPTSE".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMarket {
    pub universe: Universe,
    pub index: TickerSeries,
    pub betas: Vec<f64>,
}

/// Weekday calendar of `n` trading days starting at `start` (or the next
/// weekday).
pub fn weekday_calendar(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// Generates a deterministic market: the index's intraday return is a
/// latent AR(1) factor `f_t` and stock `i` returns `beta_i f_t + noise`.
pub fn synth_market(cfg: &SynthConfig) -> Result<SyntheticMarket> {
    if cfg.n_stocks < 2 || cfg.n_days < 200 {
        return Err(Error::Config("synthetic market needs n_stocks >= 2 and n_days >= 200".into()));
    }
    if !(cfg.phi.abs() < 1.0) || !(cfg.factor_vol > 0.0) || !(cfg.noise_scale >= 0.0) {
        return Err(Error::Config("synthetic market needs |phi| < 1, factor_vol > 0, noise_scale >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let dates = weekday_calendar(cfg.start, cfg.n_days);

    let innov = cfg.factor_vol * (1.0 - cfg.phi * cfg.phi).sqrt();
    let mut factor = Vec::with_capacity(cfg.n_days);
    let mut f = cfg.factor_vol * std_normal.sample(&mut rng);
    for _ in 0..cfg.n_days {
        f = cfg.phi * f + innov * std_normal.sample(&mut rng);
        factor.push(f);
    }

    let index_returns = factor.clone();
    let index = price_path(&cfg.index_symbol, &dates, &index_returns, 1000.0, &mut rng);

    let mut betas = Vec::with_capacity(cfg.n_stocks);
    let mut series = Vec::with_capacity(cfg.n_stocks);
    for i in 0..cfg.n_stocks {
        let beta = rng.random_range(0.6..1.4);
        let start_price = rng.random_range(10.0..100.0);
        let returns: Vec<f64> = factor
            .iter()
            .map(|&f| beta * f + cfg.noise_scale * cfg.factor_vol * std_normal.sample(&mut rng))
            .collect();
        betas.push(beta);
        series.push(price_path(&format!("S{i:03}"), &dates, &returns, start_price, &mut rng));
    }
    Ok(SyntheticMarket { universe: Universe::from_series(series), index, betas })
}

fn price_path(symbol: &str, dates: &[NaiveDate], returns: &[f64], start: f64, rng: &mut ChaCha8Rng) -> TickerSeries {
    let wick = Normal::<f64>::new(0.0, 0.003).unwrap();
    let gap = Normal::<f64>::new(0.0, 0.002).unwrap();
    let vol = Normal::<f64>::new(12.0, 0.5).unwrap();
    let mut open = start;
    let mut bars = Vec::with_capacity(dates.len());
    for (&date, &r) in dates.iter().zip(returns) {
        let close = open * (1.0 + r.max(-0.9));
        let high = open.max(close) * (1.0 + f64::abs(wick.sample(rng)));
        let low = open.min(close) * (1.0 - f64::abs(wick.sample(rng)).min(0.5));
        let volume = vol.sample(rng).exp().round() as u64;
        bars.push(DailyBar { date, open, high, low, close, volume });
        open = close * (1.0 + gap.sample(rng));
    }
    TickerSeries::new(symbol, bars).expect("calendar is strictly increasing")
}

// ---------------------------------------------------------------------------
// Binary dataset cache

/// Magic bytes of the dataset cache format.
pub const DATASET_MAGIC: &[u8; 6] = b"I2EDS1";
const DATASET_VERSION: u16 = 1;
const FLAG_SCALED: u32 = 1;
/// f32 values per record: symbol index, anchor day, target day, window,
/// target_return, target_raw, label.
pub const RECORD_FLOATS: usize = 3 + FLAT_LEN + 3;

fn epoch() -> NaiveDate {
    ymd(1970, 1, 1)
}

/// Writes one partition. See `docs/formats.md` for the byte layout.
pub fn write_dataset(path: &Path, samples: &[Sample], scaler: Option<&MinMaxScaler>) -> Result<()> {
    let mut symbols: Vec<&str> = samples.iter().map(|s| s.symbol.as_str()).collect();
    symbols.sort_unstable();
    symbols.dedup();

    let mut buf = Vec::with_capacity(64 + samples.len() * RECORD_FLOATS * 4);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let flags = if scaler.is_some() { FLAG_SCALED } else { 0 };
    for v in [flags, samples.len() as u32, WINDOW_LEN as u32, NUM_FEATURES as u32, NUM_CHANNELS as u32, symbols.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match scaler {
        Some(sc) => {
            sc.check()?;
            for v in sc.mins().iter().chain(sc.maxs()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => buf.extend(std::iter::repeat_n(0u8, 2 * NUM_CHANNELS * 8)),
    }
    for s in &symbols {
        let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("symbol too long: {s}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    for s in samples {
        let sym = symbols.binary_search(&s.symbol.as_str()).expect("symbol table built from samples") as f32;
        let days = |d: NaiveDate| (d - epoch()).num_days() as f32;
        let mut put = |v: f32| buf.extend_from_slice(&v.to_le_bytes());
        put(sym);
        put(days(s.anchor_date));
        put(days(s.target_date));
        for v in flatten_window(&s.window) {
            put(v as f32);
        }
        put(s.target_return as f32);
        put(s.target_raw as f32);
        put(s.target_label as f32);
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a partition written by [`write_dataset`]. Values come back at f32
/// precision.
pub fn read_dataset(path: &Path) -> Result<(Vec<Sample>, Option<MinMaxScaler>)> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(6)? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let flags = cur.u32()?;
    let n = cur.u32()? as usize;
    let (wl, nf, nc) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    if (wl, nf, nc) != (WINDOW_LEN, NUM_FEATURES, NUM_CHANNELS) {
        return Err(Error::Format(format!("dataset shape {wl}x{nf} ({nc} channels) not supported")));
    }
    let n_symbols = cur.u32()? as usize;
    let mut bounds = Vec::with_capacity(2 * nc);
    for _ in 0..2 * nc {
        bounds.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
    }
    let scaler = if flags & FLAG_SCALED != 0 {
        let maxs = bounds.split_off(nc);
        Some(MinMaxScaler::from_bounds(bounds, maxs)?)
    } else {
        None
    };
    let mut symbols = Vec::with_capacity(n_symbols);
    for _ in 0..n_symbols {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let s = std::str::from_utf8(cur.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
        symbols.push(s.to_string());
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut rec = [0f32; RECORD_FLOATS];
        for v in rec.iter_mut() {
            *v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        }
        let date = |v: f32| epoch() + Days::new(v as u64);
        let symbol = symbols
            .get(rec[0] as usize)
            .ok_or_else(|| Error::Format("symbol index out of range".into()))?
            .clone();
        let flat: Vec<f64> = rec[3..3 + FLAT_LEN].iter().map(|&v| v as f64).collect();
        samples.push(Sample {
            symbol,
            anchor_date: date(rec[1]),
            target_date: date(rec[2]),
            window: unflatten_window(&flat)?,
            target_return: rec[3 + FLAT_LEN] as f64,
            target_raw: rec[4 + FLAT_LEN] as f64,
            target_label: rec[5 + FLAT_LEN] as u8,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after dataset records".into()));
    }
    Ok((samples, scaler))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format("dataset file truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
