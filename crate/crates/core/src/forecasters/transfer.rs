//! Pretrained-versus-scratch comparison on the synthetic market.
//!
//! Both arms of a seed share the market, splits, scaler, class weights,
//! model seed and shuffle seed; the only difference is whether the stock
//! model starts from index-pretrained weights.

use serde::{Deserialize, Serialize};

use super::train::{train, unweighted_bce, TrainConfig, TrainRun};
use super::{Forecaster, ModelConfig, Task};
use crate::dataset::{
    build_samples, build_universe_samples, class_weights, split_by_date, synth_market, MinMaxScaler, Partitions,
    Sample, SplitSpec, SynthConfig,
};
use crate::error::{Error, Result};
use crate::indicators::IndicatorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// `seed` is replaced per run.
    pub market: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Calendar fractions of the sample target-date span.
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            market: SynthConfig::default(),
            model: ModelConfig {
                blocks: 1,
                head_widths: vec![32, 16],
                d_model: 16,
                heads: 2,
                ffn_hidden: 32,
                ..ModelConfig::default()
            },
            pretrain: TrainConfig { batch_size: 64, ..TrainConfig::default() },
            finetune: TrainConfig::default(),
            train_fraction: 0.7,
            validation_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub seed: u64,
    pub pretrained_val_bce: f64,
    pub scratch_val_bce: f64,
    pub pretrain: TrainRun,
    pub finetune: TrainRun,
    pub scratch: TrainRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub outcomes: Vec<TransferOutcome>,
    pub median_pretrained_bce: f64,
    pub median_scratch_bce: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn scaled_partitions(samples: Vec<Sample>, fractions: (f64, f64)) -> Result<Partitions> {
    let (Some(first), Some(last)) =
        (samples.iter().map(|s| s.target_date).min(), samples.iter().map(|s| s.target_date).max())
    else {
        return Err(Error::InvalidInput("no samples to split".into()));
    };
    let spec = SplitSpec::by_fractions(first, last, fractions.0, fractions.1)?;
    let parts = split_by_date(samples, &spec)?;
    let scaler = MinMaxScaler::fit(&parts.train)?;
    Ok(Partitions {
        train: scaler.transform(&parts.train)?,
        validation: scaler.transform(&parts.validation)?,
        test: scaler.transform(&parts.test)?,
    })
}

fn labels(s: &[Sample]) -> Vec<u8> {
    s.iter().map(|x| x.target_label).collect()
}

/// Runs both arms for one seed.
pub fn run_transfer_seed(cfg: &TransferConfig, seed: u64) -> Result<TransferOutcome> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.task = Task::Classification;
    model_cfg.seed = seed;
    let pre_cfg = TrainConfig { seed, ..cfg.pretrain.clone() };
    let fine_cfg = TrainConfig { seed, ..cfg.finetune.clone() };
    let fractions = (cfg.train_fraction, cfg.validation_fraction);

    let market = synth_market(&SynthConfig { seed, ..cfg.market.clone() })?;
    let ind = IndicatorConfig::default();
    let index = scaled_partitions(build_samples(&market.index, &ind)?, fractions)?;
    let stocks = scaled_partitions(build_universe_samples(&market.universe, &ind)?, fractions)?;

    let mut source = Forecaster::build(&model_cfg)?;
    let index_cw = class_weights(&labels(&index.train))?;
    let pretrain = train(&mut source, &index.train, &index.validation, Some(index_cw), &pre_cfg)?;

    let stock_cw = class_weights(&labels(&stocks.train))?;
    let mut tuned = Forecaster::build(&model_cfg)?;
    tuned.transfer_init(&source.to_weights())?;
    let finetune = train(&mut tuned, &stocks.train, &stocks.validation, Some(stock_cw), &fine_cfg)?;

    let mut scratch = Forecaster::build(&model_cfg)?;
    let scratch_run = train(&mut scratch, &stocks.train, &stocks.validation, Some(stock_cw), &fine_cfg)?;

    let outcome = TransferOutcome {
        seed,
        pretrained_val_bce: unweighted_bce(&tuned, &stocks.validation)?,
        scratch_val_bce: unweighted_bce(&scratch, &stocks.validation)?,
        pretrain,
        finetune,
        scratch: scratch_run,
    };
    tracing::info!(seed, pretrained = outcome.pretrained_val_bce, scratch = outcome.scratch_val_bce, "transfer seed done");
    Ok(outcome)
}

pub fn run_transfer(cfg: &TransferConfig, seeds: &[u64]) -> Result<TransferSummary> {
    let outcomes = seeds.iter().map(|&s| run_transfer_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    let pre: Vec<f64> = outcomes.iter().map(|o| o.pretrained_val_bce).collect();
    let scr: Vec<f64> = outcomes.iter().map(|o| o.scratch_val_bce).collect();
    let none = || Error::InvalidInput("no transfer seeds".into());
    Ok(TransferSummary {
        median_pretrained_bce: median(&pre).ok_or_else(none)?,
        median_scratch_bce: median(&scr).ok_or_else(none)?,
        outcomes,
    })
}
