//! OHLCV history: acquisition, validation, caching and universe assembly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Days, NaiveDate};
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::error::{Error, Result};

/// Column header of the bar CSV format.
pub const CSV_HEADER: [&str; 6] = ["date", "open", "high", "low", "close", "volume"];

/// One ticker-day of prices and volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: u64,
}

impl DailyBar {
    /// Checks positivity, finiteness and OHLC ordering.
    pub fn validate(&self) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::InvalidBar {
                date: self.date,
                reason: "prices must be finite and positive".into(),
            });
        }
        if self.low > self.open.min(self.close) {
            return Err(Error::InvalidBar { date: self.date, reason: "low above open/close".into() });
        }
        if self.high < self.open.max(self.close) {
            return Err(Error::InvalidBar { date: self.date, reason: "high below open/close".into() });
        }
        if self.low > self.high {
            return Err(Error::InvalidBar { date: self.date, reason: "high < low".into() });
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }
}

/// Inclusive calendar interval. `start > end` denotes the empty interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn overlaps(&self, other: &DateRange) -> bool {
        !self.is_empty() && !other.is_empty() && self.start <= other.end && other.start <= self.end
    }
}

/// Date-ascending bars for one symbol. Dates are strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickerSeries {
    symbol: String,
    bars: Vec<DailyBar>,
}

impl TickerSeries {
    /// Builds a series from bars that already satisfy the ordering invariant.
    pub fn new(symbol: impl Into<String>, bars: Vec<DailyBar>) -> Result<Self> {
        let symbol = symbol.into();
        if let Some(w) = bars.windows(2).find(|w| w[0].date >= w[1].date) {
            return Err(Error::InvalidInput(format!(
                "{symbol}: dates not strictly increasing at {}",
                w[1].date
            )));
        }
        Ok(Self { symbol, bars })
    }

    /// Sorts, deduplicates (last occurrence wins) and drops invalid bars.
    /// Returns the series together with the number of bars dropped.
    pub fn normalized(symbol: impl Into<String>, bars: Vec<DailyBar>) -> (Self, usize) {
        let total = bars.len();
        let mut by_date = BTreeMap::new();
        for bar in bars {
            if bar.is_valid() {
                by_date.insert(bar.date, bar);
            }
        }
        let bars: Vec<DailyBar> = by_date.into_values().collect();
        let dropped = total - bars.len();
        (Self { symbol: symbol.into(), bars }, dropped)
    }

    pub fn empty(symbol: impl Into<String>) -> Self {
        Self { symbol: symbol.into(), bars: Vec::new() }
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn bars(&self) -> &[DailyBar] {
        &self.bars
    }

    pub fn into_bars(self) -> Vec<DailyBar> {
        self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.bars.first().map(|b| b.date)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.bars.last().map(|b| b.date)
    }

    /// Bars dated within `range`.
    pub fn slice(&self, range: DateRange) -> &[DailyBar] {
        let lo = self.bars.partition_point(|b| b.date < range.start);
        let hi = self.bars.partition_point(|b| b.date <= range.end);
        if lo >= hi {
            &[]
        } else {
            &self.bars[lo..hi]
        }
    }

    /// Series restricted to bars dated on or before `date`.
    pub fn truncated(&self, date: NaiveDate) -> Self {
        let hi = self.bars.partition_point(|b| b.date <= date);
        Self { symbol: self.symbol.clone(), bars: self.bars[..hi].to_vec() }
    }

    /// Appends bars strictly newer than the current last date. Returns the
    /// number appended.
    pub fn append_newer(&mut self, newer: &[DailyBar]) -> usize {
        let mut added = 0;
        for bar in newer {
            if self.last_date().is_none_or(|last| bar.date > last) {
                self.bars.push(*bar);
                added += 1;
            }
        }
        added
    }
}

/// The ticker universe. Every member series is non-empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    series: BTreeMap<String, TickerSeries>,
}

impl Universe {
    /// Builds a universe, silently dropping empty series.
    pub fn from_series(series: impl IntoIterator<Item = TickerSeries>) -> Self {
        let mut u = Self::default();
        for s in series {
            u.insert(s);
        }
        u
    }

    /// Inserts a series; empty series are ignored and `false` is returned.
    pub fn insert(&mut self, series: TickerSeries) -> bool {
        if series.is_empty() {
            return false;
        }
        self.series.insert(series.symbol.clone(), series);
        true
    }

    pub fn get(&self, symbol: &str) -> Option<&TickerSeries> {
        self.series.get(symbol)
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TickerSeries> {
        self.series.values()
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Latest bar date across all members.
    pub fn as_of(&self) -> Option<NaiveDate> {
        self.series.values().filter_map(TickerSeries::last_date).max()
    }

    pub fn total_bars(&self) -> usize {
        self.series.values().map(TickerSeries::len).sum()
    }
}

/// Bars with date strictly more than 365 calendar days after the first bar.
pub fn exclude_first_year(series: &TickerSeries) -> TickerSeries {
    let Some(first) = series.first_date() else {
        return series.clone();
    };
    let cutoff = first + Days::new(365);
    let bars = series.bars.iter().filter(|b| b.date > cutoff).copied().collect();
    TickerSeries { symbol: series.symbol.clone(), bars }
}

/// Number of tickers with a bar on each date.
pub fn coverage_histogram(universe: &Universe) -> BTreeMap<NaiveDate, usize> {
    let mut counts = BTreeMap::new();
    for series in universe.iter() {
        for bar in series.bars() {
            *counts.entry(bar.date).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// CSV

/// A rejected CSV row. `row` is the 1-based line number in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    pub row: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub series: TickerSeries,
    /// Rows that could not be parsed.
    pub errors: Vec<RowIssue>,
    /// Rows that parsed but violate bar invariants (or duplicate a date).
    pub warnings: Vec<RowIssue>,
}

/// Loads a `date,open,high,low,close,volume` file. The symbol is taken from
/// the file stem.
pub fn load_csv(path: &Path) -> Result<CsvLoad> {
    let symbol = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("cannot derive symbol from {}", path.display())))?
        .to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_from(symbol, file)
}

pub fn load_csv_from(symbol: impl Into<String>, reader: impl std::io::Read) -> Result<CsvLoad> {
    let symbol = symbol.into();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let mut col = [0usize; 6];
    for (i, name) in CSV_HEADER.iter().enumerate() {
        col[i] = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format(format!("{symbol}: missing column `{name}`")))?;
    }

    let mut bars = Vec::new();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        rows += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let row = e.position().map_or(0, |p| p.line());
                errors.push(RowIssue { row, message: e.to_string() });
                continue;
            }
        };
        let row = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(col[i]).unwrap_or("");
        let parsed = (|| -> std::result::Result<DailyBar, String> {
            let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d")
                .map_err(|e| format!("bad date `{}`: {e}", field(0)))?;
            let num = |i: usize| -> std::result::Result<f64, String> {
                field(i).parse::<f64>().map_err(|e| format!("bad {} `{}`: {e}", CSV_HEADER[i], field(i)))
            };
            let volume = field(5)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0 && v.fract() == 0.0)
                .ok_or_else(|| format!("bad volume `{}`", field(5)))?;
            Ok(DailyBar {
                date,
                open: num(1)?,
                high: num(2)?,
                low: num(3)?,
                close: num(4)?,
                volume: volume as u64,
            })
        })();
        match parsed {
            Ok(bar) => match bar.validate() {
                Ok(()) => bars.push((row, bar)),
                Err(e) => {
                    warn!(%symbol, row, "dropping bar: {e}");
                    warnings.push(RowIssue { row, message: e.to_string() });
                }
            },
            Err(message) => errors.push(RowIssue { row, message }),
        }
    }
    if rows > 0 && errors.len() == rows {
        return Err(Error::Format(format!("{symbol}: all {rows} rows failed to parse")));
    }

    let mut by_date: BTreeMap<NaiveDate, DailyBar> = BTreeMap::new();
    for (row, bar) in bars {
        if by_date.insert(bar.date, bar).is_some() {
            warnings.push(RowIssue { row, message: format!("duplicate date {}", bar.date) });
        }
    }
    let series = TickerSeries { symbol, bars: by_date.into_values().collect() };
    Ok(CsvLoad { series, errors, warnings })
}

pub fn write_csv(series: &TickerSeries, path: &Path) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| {
        Error::Format(format!("cannot create {}: {e}", path.display()))
    })?;
    let io_err = |e: csv::Error| Error::Format(format!("writing {}: {e}", path.display()));
    wtr.write_record(CSV_HEADER).map_err(io_err)?;
    for b in series.bars() {
        wtr.write_record([
            b.date.format("%Y-%m-%d").to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.volume.to_string(),
        ])
        .map_err(io_err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Remote source

/// Result of one history request.
#[derive(Debug, Clone)]
pub struct FetchOutcome {
    pub series: TickerSeries,
    /// Bars dropped because of nulls, invariant violations or duplicates.
    pub dropped: usize,
}

/// Anything that can deliver daily history for a symbol.
pub trait DataSource: Send + Sync {
    fn fetch_history(&self, symbol: &str, range: DateRange) -> Result<FetchOutcome>;
}

/// Client for a Yahoo-Finance-compatible `v8/finance/chart` endpoint.
#[derive(Debug, Clone)]
pub struct ChartClient {
    base_url: String,
    agent: ureq::Agent,
}

pub const DEFAULT_BASE_URL: &str = "https://query1.finance.yahoo.com";
pub const BASE_URL_ENV: &str = "I2E_DATA_URL";

impl ChartClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .user_agent("i2e/0.1")
            .build();
        Self { base_url: base_url.into().trim_end_matches('/').to_string(), agent: config.into() }
    }

    /// Base URL from `I2E_DATA_URL`, then `configured`, then the public default.
    pub fn from_env(configured: Option<&str>) -> Self {
        let url = std::env::var(BASE_URL_ENV)
            .ok()
            .or_else(|| configured.map(str::to_string))
            .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
        Self::new(url)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, symbol: &str, range: DateRange) -> String {
        let p1 = range.start.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
        let p2 = (range.end + Days::new(1)).and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
        format!(
            "{}/v8/finance/chart/{}?period1={p1}&period2={p2}&interval=1d",
            self.base_url,
            encode_symbol(symbol)
        )
    }
}

fn encode_symbol(symbol: &str) -> String {
    symbol
        .bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'.' | b'-' | b'_' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ChartEnvelope {
    chart: ChartBody,
}

#[derive(Debug, Deserialize)]
struct ChartBody {
    result: Option<Vec<ChartResult>>,
    error: Option<ChartError>,
}

#[derive(Debug, Deserialize)]
struct ChartError {
    code: Option<String>,
    description: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChartResult {
    #[serde(default)]
    meta: Option<ChartMeta>,
    #[serde(default)]
    timestamp: Vec<i64>,
    indicators: ChartIndicators,
}

#[derive(Debug, Deserialize)]
struct ChartMeta {
    #[serde(default)]
    gmtoffset: i64,
}

#[derive(Debug, Deserialize)]
struct ChartIndicators {
    quote: Vec<ChartQuote>,
}

#[derive(Debug, Default, Deserialize)]
struct ChartQuote {
    #[serde(default)]
    open: Vec<Option<f64>>,
    #[serde(default)]
    high: Vec<Option<f64>>,
    #[serde(default)]
    low: Vec<Option<f64>>,
    #[serde(default)]
    close: Vec<Option<f64>>,
    #[serde(default)]
    volume: Vec<Option<f64>>,
}

/// Parses a chart response body into bars within `range`.
pub fn parse_chart_json(symbol: &str, body: &str, range: DateRange) -> Result<FetchOutcome> {
    let env: ChartEnvelope =
        serde_json::from_str(body).map_err(|e| Error::Format(format!("{symbol}: bad chart JSON: {e}")))?;
    if let Some(err) = env.chart.error {
        let code = err.code.unwrap_or_default();
        debug!(%symbol, %code, "chart error: {:?}", err.description);
        return Err(Error::Unavailable(symbol.to_string()));
    }
    let Some(result) = env.chart.result.and_then(|r| r.into_iter().next()) else {
        return Err(Error::Unavailable(symbol.to_string()));
    };
    let offset = result.meta.map_or(0, |m| m.gmtoffset);
    let quote = result.indicators.quote.into_iter().next().unwrap_or_default();
    let n = result.timestamp.len();
    let get = |v: &[Option<f64>], i: usize| v.get(i).copied().flatten();

    let mut bars = Vec::with_capacity(n);
    let mut dropped = 0;
    for (i, &ts) in result.timestamp.iter().enumerate() {
        let Some(dt) = DateTime::from_timestamp(ts + offset, 0) else {
            dropped += 1;
            continue;
        };
        let date = dt.date_naive();
        if !range.contains(date) {
            continue;
        }
        match (get(&quote.open, i), get(&quote.high, i), get(&quote.low, i), get(&quote.close, i)) {
            (Some(open), Some(high), Some(low), Some(close)) => {
                let volume = get(&quote.volume, i).filter(|v| *v >= 0.0).unwrap_or(0.0) as u64;
                bars.push(DailyBar { date, open, high, low, close, volume });
            }
            _ => dropped += 1,
        }
    }
    let kept = bars.len();
    let (series, invalid) = TickerSeries::normalized(symbol, bars);
    debug_assert!(invalid <= kept);
    Ok(FetchOutcome { series, dropped: dropped + invalid })
}

impl DataSource for ChartClient {
    fn fetch_history(&self, symbol: &str, range: DateRange) -> Result<FetchOutcome> {
        if symbol.is_empty() {
            return Err(Error::InvalidInput("empty symbol".into()));
        }
        if range.is_empty() {
            return Ok(FetchOutcome { series: TickerSeries::empty(symbol), dropped: 0 });
        }
        let url = self.url(symbol, range);
        let http_err = |message: String, retryable: bool| Error::Http { symbol: symbol.into(), message, retryable };
        let mut resp = self.agent.get(&url).call().map_err(|e| http_err(e.to_string(), true))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| http_err(e.to_string(), true))?;
        match status {
            200..=299 => parse_chart_json(symbol, &body, range),
            404 => Err(Error::Unavailable(symbol.to_string())),
            429 | 500..=599 => Err(http_err(format!("HTTP {status}"), true)),
            _ => Err(http_err(format!("HTTP {status}"), false)),
        }
    }
}

/// Outcome of a multi-symbol fetch.
#[derive(Debug, Default)]
pub struct UniverseFetch {
    pub universe: Universe,
    pub unavailable: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub dropped_bars: usize,
}

/// Fetches every symbol with at most `concurrency` requests in flight.
/// Retryable failures are retried up to `retries` times.
pub fn fetch_universe(
    source: &dyn DataSource,
    symbols: &[String],
    range: DateRange,
    concurrency: usize,
    retries: usize,
) -> UniverseFetch {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<FetchOutcome>)>> = Mutex::new(Vec::with_capacity(symbols.len()));
    let workers = concurrency.clamp(1, symbols.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(symbol) = symbols.get(i) else { break };
                let mut attempt = 0;
                let res = loop {
                    match source.fetch_history(symbol, range) {
                        Err(e) if e.is_retryable() && attempt < retries => {
                            attempt += 1;
                            std::thread::sleep(Duration::from_millis(200 * attempt as u64));
                        }
                        other => break other,
                    }
                };
                results.lock().unwrap().push((i, res));
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut out = UniverseFetch::default();
    for (i, res) in results {
        let symbol = &symbols[i];
        match res {
            Ok(fetch) => {
                out.dropped_bars += fetch.dropped;
                if !out.universe.insert(fetch.series) {
                    out.unavailable.push(symbol.clone());
                }
            }
            Err(Error::Unavailable(_)) => out.unavailable.push(symbol.clone()),
            Err(e) => out.failed.push((symbol.clone(), e.to_string())),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Cache

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub symbol: String,
    pub first: NaiveDate,
    pub last: NaiveDate,
    pub rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub symbols: Vec<ManifestEntry>,
}

/// `<dir>/<SYMBOL>.csv` files plus `manifest.json`.
#[derive(Debug, Clone)]
pub struct BarCache {
    dir: PathBuf,
}

pub const CACHE_DIR_ENV: &str = "I2E_CACHE_DIR";

impl BarCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, symbol: &str) -> PathBuf {
        self.dir.join(format!("{symbol}.csv"))
    }

    pub fn read(&self, symbol: &str) -> Result<Option<TickerSeries>> {
        let path = self.path_for(symbol);
        if !path.exists() {
            return Ok(None);
        }
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(load_csv_from(symbol, file)?.series))
    }

    /// Merges `fetched` into the cached series, appending only strictly
    /// newer dates. Returns the merged series and the number of new bars.
    pub fn merge(&self, fetched: &TickerSeries) -> Result<(TickerSeries, usize)> {
        let mut series = self.read(fetched.symbol())?.unwrap_or_else(|| TickerSeries::empty(fetched.symbol()));
        let added = series.append_newer(fetched.bars());
        if added > 0 {
            self.write(&series)?;
        }
        Ok((series, added))
    }

    pub fn write(&self, series: &TickerSeries) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_csv(series, &self.path_for(series.symbol()))
    }

    pub fn write_universe(&self, universe: &Universe) -> Result<()> {
        for s in universe.iter() {
            self.write(s)?;
        }
        self.write_manifest(universe)
    }

    pub fn write_manifest(&self, universe: &Universe) -> Result<()> {
        let manifest = CacheManifest {
            symbols: universe
                .iter()
                .map(|s| ManifestEntry {
                    symbol: s.symbol().to_string(),
                    first: s.first_date().expect("universe members are non-empty"),
                    last: s.last_date().expect("universe members are non-empty"),
                    rows: s.len(),
                })
                .collect(),
        };
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(&self) -> Result<CacheManifest> {
        let path = self.dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Loads every symbol listed in the manifest.
    pub fn load_universe(&self) -> Result<Universe> {
        let manifest = self.read_manifest()?;
        let mut universe = Universe::default();
        for entry in manifest.symbols {
            if let Some(series) = self.read(&entry.symbol)? {
                universe.insert(series);
            }
        }
        Ok(universe)
    }
}

/// Symbol → number of bars, handy for logging refresh diffs.
pub fn bar_counts(universe: &Universe) -> HashMap<String, usize> {
    universe.iter().map(|s| (s.symbol().to_string(), s.len())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn bar(date: &str, c: f64) -> DailyBar {
        DailyBar { date: d(date), open: c, high: c + 1.0, low: c - 1.0, close: c, volume: 100 }
    }

    #[test]
    fn single_row_csv() {
        let text = "date,open,high,low,close,volume\n2020-01-02,10,11,9,10.5,1000\n";
        let load = load_csv_from("ABC", text.as_bytes()).unwrap();
        assert_eq!(load.series.len(), 1);
        assert!(load.errors.is_empty() && load.warnings.is_empty());
    }

    #[test]
    fn high_below_low_row_is_dropped_with_warning() {
        let text = "date,open,high,low,close,volume\n2020-01-02,10,11,9,10.5,1000\n2020-01-03,10,8,9,10,5\n";
        let load = load_csv_from("ABC", text.as_bytes()).unwrap();
        assert_eq!(load.series.len(), 1);
        assert_eq!(load.warnings.len(), 1);
        assert_eq!(load.warnings[0].row, 3);
    }

    #[test]
    fn five_row_fixture_matches_file_values() {
        let text = "\
date,open,high,low,close,volume
2021-03-01,20.5,21.25,20.0,21.0,1500
2021-03-02,21.0,21.5,20.75,20.8,0
2021-03-03,20.8,22.0,20.8,21.9,2200
2021-03-04,21.9,21.9,21.0,21.1,900
2021-03-05,21.1,21.6,20.9,21.4,1000
";
        let load = load_csv_from("XYZ", text.as_bytes()).unwrap();
        let expected = [
            ("2021-03-01", 20.5, 21.25, 20.0, 21.0, 1500),
            ("2021-03-02", 21.0, 21.5, 20.75, 20.8, 0),
            ("2021-03-03", 20.8, 22.0, 20.8, 21.9, 2200),
            ("2021-03-04", 21.9, 21.9, 21.0, 21.1, 900),
            ("2021-03-05", 21.1, 21.6, 20.9, 21.4, 1000),
        ];
        assert_eq!(load.series.len(), 5);
        for (b, e) in load.series.bars().iter().zip(expected) {
            assert_eq!((b.date, b.open, b.high, b.low, b.close, b.volume), (d(e.0), e.1, e.2, e.3, e.4, e.5));
        }
    }

    #[test]
    fn missing_column_is_format_error() {
        let text = "date,open,high,low,close\n2020-01-02,10,11,9,10.5\n";
        assert!(matches!(load_csv_from("ABC", text.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn unparsable_rows_are_collected_not_fatal() {
        let text = "date,open,high,low,close,volume\n2020-01-02,10,11,9,10.5,1000\n2020-13-40,1,1,1,1,1\n2020-01-06,x,1,1,1,1\n";
        let load = load_csv_from("ABC", text.as_bytes()).unwrap();
        assert_eq!(load.series.len(), 1);
        let rows: Vec<u64> = load.errors.iter().map(|e| e.row).collect();
        assert_eq!(rows, vec![3, 4]);
    }

    #[test]
    fn all_rows_failing_is_fatal() {
        let text = "date,open,high,low,close,volume\nnope,1,1,1,1,1\n";
        assert!(load_csv_from("ABC", text.as_bytes()).is_err());
    }

    #[test]
    fn first_year_boundary_is_strict() {
        let s = TickerSeries::new("A", vec![bar("2010-01-04", 1.0), bar("2011-01-04", 2.0), bar("2011-01-05", 3.0)])
            .unwrap();
        let out = exclude_first_year(&s);
        assert_eq!(out.bars().iter().map(|b| b.date).collect::<Vec<_>>(), vec![d("2011-01-05")]);
    }

    #[test]
    fn six_month_series_becomes_empty() {
        let bars = (0..180).map(|i| bar(&(d("2015-01-01") + Days::new(i)).to_string(), 5.0)).collect();
        let s = TickerSeries::new("A", bars).unwrap();
        assert!(exclude_first_year(&s).is_empty());
    }

    #[test]
    fn coverage_counts_shared_dates() {
        let a = TickerSeries::new("A", vec![bar("2020-01-02", 1.0)]).unwrap();
        let b = TickerSeries::new("B", vec![bar("2020-01-02", 1.0), bar("2020-01-03", 1.0)]).unwrap();
        let u = Universe::from_series([a, b]);
        let h = coverage_histogram(&u);
        assert_eq!(h[&d("2020-01-02")], 2);
        assert_eq!(h[&d("2020-01-03")], 1);
        assert!(coverage_histogram(&Universe::default()).is_empty());
    }

    #[test]
    fn append_only_takes_strictly_newer() {
        let mut s = TickerSeries::new("A", vec![bar("2020-01-02", 1.0), bar("2020-01-03", 1.0)]).unwrap();
        let added = s.append_newer(&[bar("2020-01-03", 9.0), bar("2020-01-06", 2.0)]);
        assert_eq!(added, 1);
        assert_eq!(s.bars()[1].close, 1.0);
        assert_eq!(s.last_date(), Some(d("2020-01-06")));
    }

    #[test]
    fn zero_volume_bars_are_kept() {
        let mut b = bar("2020-01-02", 1.5);
        b.volume = 0;
        assert!(b.is_valid());
    }

    #[test]
    fn chart_json_with_nulls_and_error() {
        let body = r#"{"chart":{"result":[{"meta":{"gmtoffset":0},"timestamp":[1577973600,1578060000,1578319200],
            "indicators":{"quote":[{"open":[10,null,11],"high":[11,12,12],"low":[9,9,10],"close":[10.5,11,10.2],"volume":[5,6,7]}]}}],"error":null}}"#;
        let range = DateRange::new(d("2020-01-01"), d("2020-12-31"));
        let out = parse_chart_json("ABC", body, range).unwrap();
        assert_eq!(out.series.len(), 2);
        assert_eq!(out.dropped, 1);
        let err = r#"{"chart":{"result":null,"error":{"code":"Not Found","description":"No data found"}}}"#;
        assert!(matches!(parse_chart_json("ZZZ", err, range), Err(Error::Unavailable(_))));
    }

    #[test]
    fn cache_round_trip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BarCache::new(dir.path());
        let s = TickerSeries::new("A.TO", vec![bar("2020-01-02", 1.25), bar("2020-01-03", 2.5)]).unwrap();
        let u = Universe::from_series([s.clone()]);
        cache.write_universe(&u).unwrap();
        let back = cache.load_universe().unwrap();
        assert_eq!(back.get("A.TO").unwrap(), &s);
        assert_eq!(cache.read_manifest().unwrap().symbols[0].rows, 2);
    }
}
