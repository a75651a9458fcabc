use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use i2e_core::dataset::SynthConfig;
use i2e_core::forecasters::{Backbone, TrainConfig};
use i2e_core::indicators::IndicatorConfig;
use i2e_core::market_data::{ChartClient, CACHE_DIR_ENV};
use i2e_core::{GbtParams, ModelConfig, SplitSpec};
use i2e_service::ServiceConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Deterministic one-factor market generated from `data.synthetic`.
    Synthetic,
    /// Chart endpoint at `data.base_url` (or `I2E_DATA_URL`).
    Http,
    /// `<csv_dir>/<SYMBOL>.csv` files.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SourceKind,
    pub base_url: Option<String>,
    pub symbols: Vec<String>,
    pub index_symbol: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub csv_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub retries: usize,
    /// `seed` and `index_symbol` are taken from the run.
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Synthetic,
            base_url: None,
            symbols: Vec::new(),
            index_symbol: "^GSPTSE".into(),
            start: NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2023, 12, 1).unwrap(),
            csv_dir: None,
            concurrency: 4,
            retries: 2,
            synthetic: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    /// Explicit target-date intervals.
    Dates(SplitSpec),
    /// Calendar fractions of the stock samples' target-date span; the test
    /// partition gets the remainder.
    Fractions { train: f64, validation: f64 },
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self::Dates(SplitSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestConfig {
    pub k: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { k: i2e_core::evaluation::DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Copied into every model, training, boosting and synthetic-market seed.
    pub seed: u64,
    pub data: DataConfig,
    /// Bar cache; `I2E_CACHE_DIR` overrides, `<out>/cache` when unset.
    pub cache_dir: Option<PathBuf>,
    pub split: SplitConfig,
    pub indicators: IndicatorConfig,
    pub transformer: ModelConfig,
    pub lstm: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub regression: TrainConfig,
    pub gbt: GbtParams,
    pub backtest: BacktestConfig,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            cache_dir: None,
            split: SplitConfig::default(),
            indicators: IndicatorConfig::default(),
            transformer: ModelConfig::default(),
            lstm: ModelConfig::lstm(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            regression: TrainConfig::default(),
            gbt: GbtParams::default(),
            backtest: BacktestConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    /// Reads `path` (defaults when `None`). Unknown keys are rejected.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    /// Applies overrides and environment, propagates the seed and validates.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, ConfigError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        let s = self.seed;
        self.transformer.seed = s;
        self.lstm.seed = s;
        self.pretrain.seed = s;
        self.finetune.seed = s;
        self.regression.seed = s;
        self.gbt.seed = s;
        self.data.synthetic.seed = s;
        self.data.synthetic.index_symbol = self.data.index_symbol.clone();
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                self.cache_dir = Some(PathBuf::from(dir));
            }
        }
        if self.data.source == SourceKind::Http {
            self.data.base_url = Some(ChartClient::from_env(self.data.base_url.as_deref()).base_url().to_string());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |what: &str, r: i2e_core::Result<()>| r.map_err(|e| ConfigError(format!("{what}: {e}")));
        if self.transformer.backbone != Backbone::Transformer {
            return Err(ConfigError("transformer.backbone must be \"transformer\"".into()));
        }
        if self.lstm.backbone != Backbone::Lstm {
            return Err(ConfigError("lstm.backbone must be \"lstm\"".into()));
        }
        wrap("transformer", self.transformer.validate())?;
        wrap("lstm", self.lstm.validate())?;
        wrap("pretrain", self.pretrain.validate())?;
        wrap("finetune", self.finetune.validate())?;
        wrap("regression", self.regression.validate())?;
        wrap("gbt", self.gbt.validate())?;
        if self.backtest.k == 0 {
            return Err(ConfigError("backtest.k must be positive".into()));
        }
        match self.split {
            SplitConfig::Dates(spec) => wrap("split", spec.validate())?,
            SplitConfig::Fractions { train, validation } => {
                if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
                    return Err(ConfigError(format!("split fractions {train} / {validation} leave no test data")));
                }
            }
        }
        let d = &self.data;
        if d.index_symbol.is_empty() {
            return Err(ConfigError("data.index_symbol is empty".into()));
        }
        match d.source {
            SourceKind::Http => {
                if d.symbols.is_empty() {
                    return Err(ConfigError("data.symbols is empty".into()));
                }
                if d.start > d.end {
                    return Err(ConfigError(format!("data.start {} is after data.end {}", d.start, d.end)));
                }
            }
            SourceKind::Csv if d.csv_dir.is_none() => {
                return Err(ConfigError("data.csv_dir is required for the csv source".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn model(&self, backbone: Backbone) -> &ModelConfig {
        match backbone {
            Backbone::Transformer => &self.transformer,
            Backbone::Lstm => &self.lstm,
        }
    }

    pub fn cache_dir(&self, out: &Path) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| out.join("cache"))
    }
}
