//! The pipeline stages behind each subcommand. Every stage reads the
//! previous stage's files under the output directory and finishes by writing
//! `manifests/<command>.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use i2e_core::dataset::{
    build_samples, build_universe_samples, class_weights, flatten_window, read_dataset, series_features, split_by_date,
    synth_market, write_dataset, Partitions,
};
use i2e_core::evaluation::{
    backtest, classification_metrics, regression_metrics, RankedPrediction, RegressionMetrics, DEFAULT_THRESHOLD,
};
use i2e_core::forecasters::{ensemble_predict, load_weights, save_weights, train, unweighted_bce, Backbone, TrainRun};
use i2e_core::gbt::Objective;
use i2e_core::indicators::write_feature_csv;
use i2e_core::market_data::{
    coverage_histogram, fetch_universe, load_csv, BarCache, ChartClient, DataSource, FetchOutcome,
};
use i2e_core::{
    BacktestReport, ClassificationMetrics, DateRange, Forecaster, GbtModel, MinMaxScaler, Sample, SplitSpec, Task,
    TickerSeries, Universe,
};
use i2e_service::{build_predictions, AppState, ModelBundle, PredictionSet, SCALER_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SourceKind, SplitConfig};

pub const PARTS: [&str; 3] = ["train", "validation", "test"];

/// Resolved configuration plus the output root.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self { cfg, out: out.into() }
    }

    pub fn cache(&self) -> BarCache {
        BarCache::new(self.cfg.cache_dir(&self.out))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn ensure_dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }
}

pub fn model_name(b: Backbone) -> &'static str {
    match b {
        Backbone::Transformer => "transformer",
        Backbone::Lstm => "lstm",
    }
}

pub fn dataset_rel(set: &str, part: &str) -> String {
    format!("datasets/{set}_{part}.i2eds")
}

pub fn weights_rel(name: &str) -> String {
    format!("models/{name}.i2ew")
}

pub const GBT_CLASSIFICATION_REL: &str = "models/gbt_classification.json";
pub const GBT_REGRESSION_REL: &str = "models/gbt_regression.json";

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    /// Output name → sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `outputs` pairs a stable name with the file that was written.
fn write_manifest(ctx: &Ctx, command: &str, outputs: &[(String, PathBuf)], summary: impl Serialize) -> Result<PathBuf> {
    let mut digests = BTreeMap::new();
    for (name, path) in outputs {
        digests.insert(name.clone(), sha256_file(path)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config: ctx.cfg.clone(),
        outputs: digests,
        summary: serde_json::to_value(summary)?,
    };
    let dir = ctx.ensure_dir("manifests")?;
    let path = dir.join(format!("{command}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

fn rel_output(ctx: &Ctx, rel: &str) -> (String, PathBuf) {
    (rel.to_string(), ctx.path(rel))
}

fn write_json(ctx: &Ctx, rel: &str, value: &impl Serialize) -> Result<(String, PathBuf)> {
    let path = ctx.path(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok((rel.to_string(), path))
}

// ---------------------------------------------------------------------------
// ingest / stats

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub source: SourceKind,
    pub symbols: Vec<String>,
    pub index_symbol: String,
    pub bars: usize,
    pub first: Option<NaiveDate>,
    pub last: Option<NaiveDate>,
    pub unavailable: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Fills the bar cache for the configured universe and index.
pub fn ingest(ctx: &Ctx) -> Result<IngestSummary> {
    let d = &ctx.cfg.data;
    let cache = ctx.cache();
    let mut unavailable = Vec::new();
    let mut failed = Vec::new();
    let (universe, index) = match d.source {
        SourceKind::Synthetic => {
            let m = synth_market(&d.synthetic)?;
            cache.write(&m.index)?;
            cache.write_universe(&m.universe)?;
            (m.universe, m.index)
        }
        SourceKind::Csv => {
            let dir = d.csv_dir.as_ref().expect("validated");
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            let mut universe = Universe::default();
            let mut index = None;
            for p in paths {
                let load = load_csv(&p)?;
                let symbol = load.series.symbol().to_string();
                if !load.errors.is_empty() || !load.warnings.is_empty() {
                    tracing::warn!(%symbol, errors = load.errors.len(), warnings = load.warnings.len(), "rows skipped");
                }
                if symbol == d.index_symbol {
                    index = Some(load.series);
                } else if (d.symbols.is_empty() || d.symbols.contains(&symbol)) && !universe.insert(load.series) {
                    unavailable.push(symbol);
                }
            }
            for s in &d.symbols {
                if universe.get(s).is_none() && !unavailable.contains(s) {
                    unavailable.push(s.clone());
                }
            }
            let index = index.ok_or_else(|| anyhow!("no {}.csv for the index in {}", d.index_symbol, dir.display()))?;
            cache.write(&index)?;
            cache.write_universe(&universe)?;
            (universe, index)
        }
        SourceKind::Http => {
            let client = ChartClient::from_env(d.base_url.as_deref());
            let mut wanted = d.symbols.clone();
            wanted.push(d.index_symbol.clone());
            let fetched = fetch_universe(&client, &wanted, DateRange::new(d.start, d.end), d.concurrency, d.retries);
            unavailable = fetched.unavailable;
            failed = fetched.failed;
            let mut universe = Universe::default();
            let mut index = None;
            for s in fetched.universe.iter() {
                cache.merge(s)?;
            }
            for s in &wanted {
                let Some(series) = cache.read(s)? else { continue };
                if *s == d.index_symbol {
                    index = Some(series);
                } else {
                    universe.insert(series);
                }
            }
            if universe.is_empty() {
                bail!("no symbol could be fetched: {failed:?}");
            }
            let index = index.ok_or_else(|| anyhow!("index {} could not be fetched", d.index_symbol))?;
            cache.write_manifest(&universe)?;
            (universe, index)
        }
    };

    let mut outputs = vec![("cache/manifest.json".to_string(), cache.dir().join("manifest.json"))];
    for s in universe.iter().chain([&index]) {
        outputs.push((format!("cache/{}.csv", s.symbol()), cache.path_for(s.symbol())));
    }
    let summary = IngestSummary {
        source: d.source,
        symbols: universe.symbols().map(String::from).collect(),
        index_symbol: index.symbol().to_string(),
        bars: universe.total_bars() + index.len(),
        first: universe.iter().chain([&index]).filter_map(|s| s.first_date()).min(),
        last: universe.iter().chain([&index]).filter_map(|s| s.last_date()).max(),
        unavailable,
        failed,
    };
    write_manifest(ctx, "ingest", &outputs, &summary)?;
    Ok(summary)
}

/// Cached stock universe and index series.
pub fn load_market(ctx: &Ctx) -> Result<(Universe, TickerSeries)> {
    let cache = ctx.cache();
    let universe = cache
        .load_universe()
        .with_context(|| format!("no cached universe in {}; run `i2e ingest` first", cache.dir().display()))?;
    let index = cache
        .read(&ctx.cfg.data.index_symbol)?
        .ok_or_else(|| anyhow!("index {} is not cached; run `i2e ingest` first", ctx.cfg.data.index_symbol))?;
    Ok((universe, index))
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsSummary {
    pub symbols: usize,
    pub bars: usize,
    pub first: Option<NaiveDate>,
    pub last: Option<NaiveDate>,
    pub max_coverage: usize,
    pub histogram_csv: String,
}

/// Writes `reports/coverage.csv` (`date,tickers`): the number of tickers
/// with a bar on each date.
pub fn stats(ctx: &Ctx) -> Result<StatsSummary> {
    let (universe, _) = load_market(ctx)?;
    let hist = coverage_histogram(&universe);
    let mut csv = String::from("date,tickers\n");
    for (d, n) in &hist {
        writeln!(csv, "{d},{n}").unwrap();
    }
    let rel = "reports/coverage.csv";
    ctx.ensure_dir("reports")?;
    fs::write(ctx.path(rel), csv)?;
    let summary = StatsSummary {
        symbols: universe.len(),
        bars: universe.total_bars(),
        first: hist.keys().next().copied(),
        last: hist.keys().next_back().copied(),
        max_coverage: hist.values().copied().max().unwrap_or(0),
        histogram_csv: rel.into(),
    };
    write_manifest(ctx, "stats", &[rel_output(ctx, rel)], &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// featurize

#[derive(Debug, Clone, Serialize)]
pub struct PartitionStats {
    pub samples: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeaturizeSummary {
    pub split: SplitSpec,
    pub stocks: BTreeMap<String, PartitionStats>,
    pub index: BTreeMap<String, PartitionStats>,
    pub stock_class_weights: (f64, f64),
}

fn part_stats(p: &Partitions) -> BTreeMap<String, PartitionStats> {
    PARTS
        .iter()
        .zip([&p.train, &p.validation, &p.test])
        .map(|(name, s)| {
            let positives = s.iter().filter(|x| x.target_label == 1).count();
            (name.to_string(), PartitionStats { samples: s.len(), positives })
        })
        .collect()
}

fn resolve_split(split: SplitConfig, stocks: &[Sample]) -> Result<SplitSpec> {
    Ok(match split {
        SplitConfig::Dates(spec) => spec,
        SplitConfig::Fractions { train, validation } => {
            let first = stocks.iter().map(|s| s.target_date).min().ok_or_else(|| anyhow!("no stock samples"))?;
            let last = stocks.iter().map(|s| s.target_date).max().expect("non-empty");
            SplitSpec::by_fractions(first, last, train, validation)?
        }
    })
}

/// Feature CSVs, scaled partitions for stocks and index, and the stock
/// scaler used by the service.
pub fn featurize(ctx: &Ctx) -> Result<FeaturizeSummary> {
    let (universe, index) = load_market(ctx)?;
    let ind = &ctx.cfg.indicators;
    let mut outputs = Vec::new();
    ctx.ensure_dir("features")?;
    for s in universe.iter().chain([&index]) {
        let (_, rows) = series_features(s, ind)?;
        let rel = format!("features/{}.csv", s.symbol());
        write_feature_csv(&rows, &ctx.path(&rel))?;
        outputs.push(rel_output(ctx, &rel));
    }

    let stock_samples = build_universe_samples(&universe, ind)?;
    let index_samples = build_samples(&index, ind)?;
    let split = resolve_split(ctx.cfg.split, &stock_samples)?;
    let stocks = split_by_date(stock_samples, &split)?;
    let idx = split_by_date(index_samples, &split)?;
    for (what, n) in [
        ("stock train", stocks.train.len()),
        ("stock validation", stocks.validation.len()),
        ("stock test", stocks.test.len()),
        ("index train", idx.train.len()),
        ("index validation", idx.validation.len()),
    ] {
        if n == 0 {
            bail!("the {what} partition is empty under split {split:?}");
        }
    }
    let stock_scaler = MinMaxScaler::fit(&stocks.train)?;
    let index_scaler = MinMaxScaler::fit(&idx.train)?;

    ctx.ensure_dir("datasets")?;
    for (set, parts, scaler) in [("stocks", &stocks, &stock_scaler), ("index", &idx, &index_scaler)] {
        for (part, samples) in PARTS.iter().zip([&parts.train, &parts.validation, &parts.test]) {
            let rel = dataset_rel(set, part);
            write_dataset(&ctx.path(&rel), &scaler.transform(samples)?, Some(scaler))?;
            outputs.push(rel_output(ctx, &rel));
        }
    }
    ctx.ensure_dir("models")?;
    outputs.push(write_json(ctx, &format!("models/{SCALER_FILE}"), &stock_scaler)?);

    let labels: Vec<u8> = stocks.train.iter().map(|s| s.target_label).collect();
    let summary = FeaturizeSummary {
        split,
        stocks: part_stats(&stocks),
        index: part_stats(&idx),
        stock_class_weights: class_weights(&labels)?,
    };
    write_manifest(ctx, "featurize", &outputs, &summary)?;
    Ok(summary)
}

/// A scaled partition and the scaler it was written with.
pub fn load_partition(ctx: &Ctx, set: &str, part: &str) -> Result<(Vec<Sample>, MinMaxScaler)> {
    let path = ctx.path(&dataset_rel(set, part));
    let (samples, scaler) = read_dataset(&path)
        .with_context(|| format!("reading {}; run `i2e featurize` first", path.display()))?;
    Ok((samples, scaler.ok_or_else(|| anyhow!("{} is not scaled", path.display()))?))
}

fn labels(s: &[Sample]) -> Vec<u8> {
    s.iter().map(|x| x.target_label).collect()
}

// ---------------------------------------------------------------------------
// pretrain / finetune

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub model: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub val_loss: Option<f64>,
    /// Unweighted validation BCE (classification only).
    pub val_bce: Option<f64>,
    pub weights: String,
    pub digest: String,
}

fn fit_and_save(
    ctx: &Ctx,
    name: &str,
    model: &mut Forecaster,
    set: &str,
    cfg: &i2e_core::forecasters::TrainConfig,
    outputs: &mut Vec<(String, PathBuf)>,
) -> Result<TrainSummary> {
    let (tr, _) = load_partition(ctx, set, "train")?;
    let (va, _) = load_partition(ctx, set, "validation")?;
    let cw = match model.task() {
        Task::Classification => Some(class_weights(&labels(&tr))?),
        Task::Regression => None,
    };
    tracing::info!(name, n_train = tr.len(), n_val = va.len(), "training");
    let mut run: TrainRun = train(model, &tr, &va, cw, cfg)?;
    let rel = weights_rel(name);
    run.partitions = vec![dataset_rel(set, "train"), dataset_rel(set, "validation")];
    run.weights_path = Some(rel.clone());
    ctx.ensure_dir("models")?;
    let weights = model.to_weights();
    save_weights(&ctx.path(&rel), &weights)?;
    outputs.push(rel_output(ctx, &rel));
    outputs.push(write_json(ctx, &format!("reports/train/{name}.json"), &run)?);
    let val_bce = match model.task() {
        Task::Classification => Some(unweighted_bce(model, &va)?),
        Task::Regression => None,
    };
    Ok(TrainSummary {
        model: name.to_string(),
        best_epoch: run.best_epoch,
        epochs_run: run.epochs.len(),
        stopped_early: run.stopped_early,
        val_loss: run.epochs.iter().find(|e| e.epoch == run.best_epoch).and_then(|e| e.val_loss),
        val_bce,
        weights: rel,
        digest: weights.content_digest()?,
    })
}

fn classifier(ctx: &Ctx, b: Backbone) -> Result<Forecaster> {
    let mut mc = ctx.cfg.model(b).clone();
    mc.task = Task::Classification;
    Ok(Forecaster::build(&mc)?)
}

/// Trains each backbone as a classifier on the index series.
pub fn pretrain(ctx: &Ctx, backbones: &[Backbone]) -> Result<Vec<TrainSummary>> {
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    for &b in backbones {
        let mut model = classifier(ctx, b)?;
        let name = format!("{}_pretrained", model_name(b));
        summaries.push(fit_and_save(ctx, &name, &mut model, "index", &ctx.cfg.pretrain, &mut outputs)?);
    }
    write_manifest(ctx, "pretrain", &outputs, &summaries)?;
    Ok(summaries)
}

/// Pretrained weights for `b` given a file or a directory of
/// `<model>_pretrained.i2ew` files.
fn source_weights(from: &Path, b: Backbone) -> Result<i2e_core::ModelWeights> {
    let path = if from.is_dir() { from.join(format!("{}_pretrained.i2ew", model_name(b))) } else { from.to_path_buf() };
    let w = load_weights(&path).with_context(|| format!("loading {}", path.display()))?;
    if w.config.backbone != b {
        bail!("{} holds {} weights, expected {}", path.display(), model_name(w.config.backbone), model_name(b));
    }
    Ok(w)
}

/// From pretrained weights: fine-tune a stock classifier, then swap the
/// output layer and train the regression model. With `baseline`, also
/// trains a classifier from scratch on the same data.
pub fn finetune(ctx: &Ctx, from: &Path, backbones: &[Backbone], baseline: bool) -> Result<Vec<TrainSummary>> {
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    for &b in backbones {
        let m = model_name(b);
        let source = source_weights(from, b)?;
        let mut clf = classifier(ctx, b)?;
        clf.transfer_init(&source)?;
        summaries.push(fit_and_save(ctx, &format!("{m}_classification"), &mut clf, "stocks", &ctx.cfg.finetune, &mut outputs)?);

        let mut reg = clf.clone();
        reg.swap_head(Task::Regression);
        summaries.push(fit_and_save(ctx, &format!("{m}_regression"), &mut reg, "stocks", &ctx.cfg.regression, &mut outputs)?);

        if baseline {
            let mut scratch = classifier(ctx, b)?;
            let name = format!("{m}_baseline_classification");
            summaries.push(fit_and_save(ctx, &name, &mut scratch, "stocks", &ctx.cfg.finetune, &mut outputs)?);
        }
    }
    write_manifest(ctx, "finetune", &outputs, &summaries)?;
    Ok(summaries)
}

// ---------------------------------------------------------------------------
// train-gbt

#[derive(Debug, Clone, Serialize)]
pub struct GbtSummary {
    pub model: String,
    pub trees: usize,
    pub final_train_loss: Option<f64>,
    pub digest: String,
}

pub fn flat_rows(samples: &[Sample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| flatten_window(&s.window).to_vec()).collect()
}

/// Boosted classifier (class-weighted logistic) and regressor (squared loss
/// on the scaled target) over flattened scaled windows.
pub fn train_gbt(ctx: &Ctx) -> Result<Vec<GbtSummary>> {
    let (tr, _) = load_partition(ctx, "stocks", "train")?;
    let x = flat_rows(&tr);
    let (w0, w1) = class_weights(&labels(&tr))?;
    let y_cls: Vec<f64> = tr.iter().map(|s| s.target_label as f64).collect();
    let w_cls: Vec<f64> = tr.iter().map(|s| if s.target_label == 1 { w1 } else { w0 }).collect();
    let y_reg: Vec<f64> = tr.iter().map(|s| s.target_return).collect();

    ctx.ensure_dir("models")?;
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    for (rel, objective, y, w) in [
        (GBT_CLASSIFICATION_REL, Objective::Logistic, &y_cls, Some(w_cls.as_slice())),
        (GBT_REGRESSION_REL, Objective::Squared, &y_reg, None),
    ] {
        let params = i2e_core::GbtParams { objective, ..ctx.cfg.gbt.clone() };
        tracing::info!(?objective, n = x.len(), "fitting boosted trees");
        let model = GbtModel::fit(&x, y, w, &params)?;
        model.save(&ctx.path(rel))?;
        outputs.push(rel_output(ctx, rel));
        summaries.push(GbtSummary {
            model: rel.to_string(),
            trees: model.trees.len(),
            final_train_loss: model.train_loss.last().copied(),
            digest: sha256_file(&ctx.path(rel))?,
        });
    }
    write_manifest(ctx, "train-gbt", &outputs, &summaries)?;
    Ok(summaries)
}

// ---------------------------------------------------------------------------
// evaluate

/// Per-partition predictions of one model, keyed like [`PARTS`].
type Scores = BTreeMap<&'static str, Vec<f64>>;

struct Loaded {
    parts: BTreeMap<&'static str, Vec<Sample>>,
    scaler: MinMaxScaler,
}

fn load_stocks(ctx: &Ctx) -> Result<Loaded> {
    let mut parts = BTreeMap::new();
    let mut scaler = None;
    for p in PARTS {
        let (s, sc) = load_partition(ctx, "stocks", p)?;
        parts.insert(p, s);
        scaler = Some(sc);
    }
    Ok(Loaded { parts, scaler: scaler.expect("three partitions") })
}

fn net_scores(ctx: &Ctx, name: &str, task: Task, data: &Loaded) -> Result<Option<Scores>> {
    let path = ctx.path(&weights_rel(name));
    if !path.exists() {
        return Ok(None);
    }
    let model = Forecaster::from_weights(&load_weights(&path)?)?;
    if model.task() != task {
        bail!("{} is a {:?} model, expected {task:?}", path.display(), model.task());
    }
    data.parts.iter().map(|(p, s)| Ok((*p, model.predict(s)?))).collect::<Result<_>>().map(Some)
}

fn gbt_scores(ctx: &Ctx, rel: &str, data: &Loaded) -> Result<Option<Scores>> {
    let path = ctx.path(rel);
    if !path.exists() {
        return Ok(None);
    }
    let model = GbtModel::load(&path)?;
    data.parts.iter().map(|(p, s)| Ok((*p, model.predict(&flat_rows(s))?))).collect::<Result<_>>().map(Some)
}

fn ensemble_scores(members: &[&Scores]) -> Result<Scores> {
    PARTS
        .iter()
        .map(|p| {
            let cols: Vec<Vec<f64>> = members.iter().map(|m| m[p].clone()).collect();
            Ok((*p, ensemble_predict(&cols)?))
        })
        .collect()
}

/// Named model outputs in display order; the ensemble is added when all
/// three fine-tuned members are present.
fn gather(ctx: &Ctx, task: Task, data: &Loaded) -> Result<Vec<(String, Scores)>> {
    let suffix = match task {
        Task::Classification => "classification",
        Task::Regression => "regression",
    };
    let mut out = Vec::new();
    if task == Task::Classification {
        for (file, label) in [("transformer_baseline_classification", "Transformer Baseline"), ("lstm_baseline_classification", "LSTM Baseline")] {
            if let Some(s) = net_scores(ctx, file, task, data)? {
                out.push((label.to_string(), s));
            }
        }
    }
    let t = net_scores(ctx, &format!("transformer_{suffix}"), task, data)?;
    let l = net_scores(ctx, &format!("lstm_{suffix}"), task, data)?;
    let gbt_rel = match task {
        Task::Classification => GBT_CLASSIFICATION_REL,
        Task::Regression => GBT_REGRESSION_REL,
    };
    let g = gbt_scores(ctx, gbt_rel, data)?;
    let ens = match (&t, &l, &g) {
        (Some(t), Some(l), Some(g)) => Some(ensemble_scores(&[t, l, g])?),
        _ => None,
    };
    for (name, s) in [("Transformer Fine-Tuned", t), ("LSTM Fine-Tuned", l), ("GBT", g), ("Ensemble", ens)] {
        if let Some(s) = s {
            out.push((name.to_string(), s));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub model: String,
    pub train: ClassificationMetrics,
    pub validation: ClassificationMetrics,
    pub test: ClassificationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub model: String,
    pub train: RegressionMetrics,
    pub validation: RegressionMetrics,
    pub test: RegressionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub threshold: f64,
    pub classification: Vec<ClassificationRow>,
    pub regression: Vec<RegressionRow>,
}

fn regression_row(model: String, s: &Scores, data: &Loaded) -> Result<RegressionRow> {
    let m = |p: &'static str| -> Result<RegressionMetrics> {
        let samples = &data.parts[p];
        let targets: Vec<f64> = samples.iter().map(|x| x.target_return).collect();
        let raw_pred = s[p].iter().map(|&v| data.scaler.inverse_target(v)).collect::<i2e_core::Result<Vec<_>>>()?;
        let raw_target: Vec<f64> = samples.iter().map(|x| i2e_core::dataset::clip_target(x.target_raw)).collect();
        Ok(RegressionMetrics {
            mse_scaled: regression_metrics(&s[p], &targets)?,
            mse_raw: regression_metrics(&raw_pred, &raw_target)?,
            n: samples.len(),
        })
    };
    Ok(RegressionRow { model, train: m("train")?, validation: m("validation")?, test: m("test")? })
}

/// Classification and regression metrics for every trained model on the
/// train, validation and test partitions. Writes `reports/evaluation.json`.
pub fn evaluate(ctx: &Ctx) -> Result<EvaluationReport> {
    let data = load_stocks(ctx)?;
    let mut classification = Vec::new();
    for (name, s) in gather(ctx, Task::Classification, &data)? {
        let m = |p: &'static str| {
            let l = labels(&data.parts[p]);
            classification_metrics(&s[p], &l, DEFAULT_THRESHOLD, None)
        };
        classification.push(ClassificationRow { model: name, train: m("train")?, validation: m("validation")?, test: m("test")? });
    }
    let mut regression = Vec::new();
    for (name, s) in gather(ctx, Task::Regression, &data)? {
        regression.push(regression_row(name, &s, &data)?);
    }
    if classification.is_empty() && regression.is_empty() {
        bail!("no trained models under {}; run finetune and train-gbt first", ctx.path("models").display());
    }
    let report = EvaluationReport { threshold: DEFAULT_THRESHOLD, classification, regression };
    let out = write_json(ctx, "reports/evaluation.json", &report)?;
    write_manifest(ctx, "evaluate", &[out], &report)?;
    Ok(report)
}

fn table(header: &[String], rows: &[(String, Vec<String>)]) -> String {
    let first = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r.1[i].len()).max().unwrap_or(0).max(h.len()))
        .collect();
    let mut s = format!("{:first$}", "");
    for (h, w) in header.iter().zip(&widths) {
        write!(s, "  {h:>w$}").unwrap();
    }
    s.push('\n');
    for (label, cells) in rows {
        write!(s, "{label:first$}").unwrap();
        for (c, w) in cells.iter().zip(&widths) {
            write!(s, "  {c:>w$}").unwrap();
        }
        s.push('\n');
    }
    s
}

impl EvaluationReport {
    /// Metric rows by partition, one column per model.
    pub fn render(&self) -> String {
        let mut s = String::new();
        if !self.classification.is_empty() {
            let header: Vec<String> = self.classification.iter().map(|r| r.model.clone()).collect();
            let mut rows = Vec::new();
            for (pname, pick) in [
                ("Test", (|r: &ClassificationRow| r.test) as fn(&ClassificationRow) -> ClassificationMetrics),
                ("Val", |r| r.validation),
                ("Train", |r| r.train),
            ] {
                for (metric, get) in [
                    ("Accuracy", (|m: &ClassificationMetrics| m.accuracy) as fn(&ClassificationMetrics) -> f64),
                    ("Precision", |m| m.precision),
                    ("F1", |m| m.f1),
                    ("BCE", |m| m.bce_loss),
                ] {
                    let cells = self.classification.iter().map(|r| format!("{:.4}", get(&pick(r)))).collect();
                    rows.push((format!("{pname} {metric}"), cells));
                }
            }
            writeln!(s, "Classification (positive when p > {})", self.threshold).unwrap();
            s.push_str(&table(&header, &rows));
        }
        if !self.regression.is_empty() {
            let header: Vec<String> = self.regression.iter().map(|r| r.model.clone()).collect();
            let mut rows = Vec::new();
            for (pname, pick) in [
                ("Test", (|r: &RegressionRow| r.test) as fn(&RegressionRow) -> RegressionMetrics),
                ("Val", |r| r.validation),
                ("Train", |r| r.train),
            ] {
                rows.push((format!("{pname} MSE"), self.regression.iter().map(|r| format!("{:.4e}", pick(r).mse_scaled)).collect()));
                rows.push((format!("{pname} MSE (raw)"), self.regression.iter().map(|r| format!("{:.4e}", pick(r).mse_raw)).collect()));
            }
            if !s.is_empty() {
                s.push('\n');
            }
            s.push_str("Regression (MSE on the scaled target; raw = return space)\n");
            s.push_str(&table(&header, &rows));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// backtest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRow {
    pub model: String,
    pub file_stem: String,
    pub average_daily_return: f64,
    pub days_traded: usize,
    pub days_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub k: usize,
    pub rows: Vec<BacktestRow>,
    pub weekly_csv: String,
}

fn stem_for(model: &str) -> String {
    format!("backtest_{}", model.to_lowercase().replace([' ', '-'], "_"))
}

/// Long/short backtest of every regression model on the test partition.
/// Writes one report per model plus `reports/weekly_returns.csv`, which has
/// one column of weekly mean returns per model.
pub fn run_backtest(ctx: &Ctx, k: usize) -> Result<BacktestSummary> {
    let data = load_stocks(ctx)?;
    let models = gather(ctx, Task::Regression, &data)?;
    if models.is_empty() {
        bail!("no regression models under {}; run finetune and train-gbt first", ctx.path("models").display());
    }
    let test = &data.parts["test"];
    let reports_dir = ctx.ensure_dir("reports")?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let mut reports: Vec<(String, BacktestReport)> = Vec::new();
    for (name, s) in models {
        let preds = test
            .iter()
            .zip(&s["test"])
            .map(|(x, &p)| {
                Ok(RankedPrediction {
                    date: x.target_date,
                    symbol: x.symbol.clone(),
                    predicted: data.scaler.inverse_target(p)?,
                    realized: Some(x.target_raw),
                })
            })
            .collect::<i2e_core::Result<Vec<_>>>()?;
        let report = backtest(&preds, k)?;
        let stem = stem_for(&name);
        report.save(&reports_dir, &stem)?;
        for ext in [".json", ".csv", "_weekly.csv"] {
            outputs.push(rel_output(ctx, &format!("reports/{stem}{ext}")));
        }
        rows.push(BacktestRow {
            model: name.clone(),
            file_stem: stem,
            average_daily_return: report.average_daily_return,
            days_traded: report.days.len(),
            days_skipped: report.skipped.len(),
        });
        reports.push((name, report));
    }

    let mut weeks: BTreeMap<NaiveDate, Vec<String>> = BTreeMap::new();
    for (i, (_, r)) in reports.iter().enumerate() {
        for w in &r.weekly {
            let row = weeks.entry(w.week_start).or_insert_with(|| vec![String::new(); reports.len()]);
            row[i] = w.mean_return.to_string();
        }
    }
    let mut csv = String::from("week_start");
    for (name, _) in &reports {
        write!(csv, ",{name}").unwrap();
    }
    csv.push('\n');
    for (d, cells) in &weeks {
        writeln!(csv, "{d},{}", cells.join(",")).unwrap();
    }
    let weekly_rel = "reports/weekly_returns.csv";
    fs::write(ctx.path(weekly_rel), csv)?;
    outputs.push(rel_output(ctx, weekly_rel));

    let summary = BacktestSummary { k, rows, weekly_csv: weekly_rel.into() };
    write_manifest(ctx, "backtest", &outputs, &summary)?;
    Ok(summary)
}

impl BacktestSummary {
    pub fn render(&self) -> String {
        let header = ["Average Return".to_string(), "Days".to_string(), "Skipped".to_string()];
        let rows: Vec<(String, Vec<String>)> = self
            .rows
            .iter()
            .map(|r| {
                (r.model.clone(), vec![format!("{:.6}", r.average_daily_return), r.days_traded.to_string(), r.days_skipped.to_string()])
            })
            .collect();
        format!("Daily rebalancing with the top {k} and bottom {k} stocks\n{}", table(&header, &rows), k = self.k)
    }
}

// ---------------------------------------------------------------------------
// predict / serve

/// Ranks the cached universe for the next trading day with the regression
/// bundle in `models_dir`. Writes `reports/predictions.json`.
pub fn predict(ctx: &Ctx, models_dir: &Path) -> Result<PredictionSet> {
    let bundle = ModelBundle::load(models_dir).with_context(|| format!("loading models from {}", models_dir.display()))?;
    let (universe, _) = load_market(ctx)?;
    let mut features = BTreeMap::new();
    for s in universe.iter() {
        features.insert(s.symbol().to_string(), series_features(s, &ctx.cfg.indicators)?.1);
    }
    let rows: BTreeMap<String, &[i2e_core::FeatureRow]> = features.iter().map(|(s, f)| (s.clone(), f.as_slice())).collect();
    let set = build_predictions(&rows, &bundle, &ctx.cfg.service.holidays)?
        .ok_or_else(|| anyhow!("no symbol has a full feature window"))?;
    let out = write_json(ctx, "reports/predictions.json", &set)?;
    let summary = serde_json::json!({
        "as_of": set.as_of,
        "target_date": set.target_date,
        "symbols": set.records.len(),
        "model_digests": bundle.digests()?,
    });
    write_manifest(ctx, "predict", &[out], summary)?;
    Ok(set)
}

/// Serves bars straight from the local cache.
#[derive(Debug, Clone)]
pub struct CacheSource {
    cache: BarCache,
}

impl CacheSource {
    pub fn new(cache: BarCache) -> Self {
        Self { cache }
    }
}

impl DataSource for CacheSource {
    fn fetch_history(&self, symbol: &str, range: DateRange) -> i2e_core::Result<FetchOutcome> {
        let series = self.cache.read(symbol)?.ok_or_else(|| i2e_core::Error::Unavailable(symbol.to_string()))?;
        let bars = series.slice(range).to_vec();
        Ok(FetchOutcome { series: TickerSeries::new(symbol, bars)?, dropped: 0 })
    }
}

/// Builds the service state: regression bundle, configured (or cached)
/// symbols, and the chart endpoint or the cache as data source.
pub fn service_state(ctx: &Ctx, models_dir: &Path) -> Result<Arc<AppState>> {
    let bundle = ModelBundle::load(models_dir).with_context(|| format!("loading models from {}", models_dir.display()))?;
    let mut config = ctx.cfg.service.clone();
    config.indicators = ctx.cfg.indicators;
    if config.symbols.is_empty() {
        config.symbols = match ctx.cfg.data.source {
            SourceKind::Http => ctx.cfg.data.symbols.clone(),
            _ => ctx.cache().read_manifest()?.symbols.into_iter().map(|e| e.symbol).collect(),
        };
    }
    let source: Arc<dyn DataSource> = match ctx.cfg.data.source {
        SourceKind::Http => Arc::new(ChartClient::from_env(ctx.cfg.data.base_url.as_deref())),
        _ => Arc::new(CacheSource::new(ctx.cache())),
    };
    Ok(Arc::new(AppState::new(config, bundle, source)))
}
