//! Transformer and LSTM forecasters over ten-day feature windows.
//!
//! A [`Forecaster`] is an immutable [`Network`] layout plus a mutable
//! [`ParamStore`]. Parameter names are stable dot paths (`input.weight`,
//! `blocks.2.attn.q.bias`, `lstm.0.w_ih`, `head.dense1.weight`, `head.out.bias`)
//! and are what weight files, transfer and head swaps key on.

mod train;
mod transfer;
mod weights;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{MinMaxScaler, Sample, Window, NUM_CHANNELS, NUM_FEATURES, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::tensor_nn::{positional_encoding, Dense, EncoderBlock, Graph, LstmLayer, ParamStore, Scalar, Tensor, Var};

pub use train::{
    batch_loss, evaluate_loss, train, unweighted_bce, EpochLog, LossWeights, TrainConfig, TrainRun,
};
pub use transfer::{median, run_transfer, run_transfer_seed, TransferConfig, TransferOutcome, TransferSummary};
pub use weights::{load_weights, save_weights, ModelWeights, WeightEntry, WEIGHTS_FORMAT_VERSION, WEIGHTS_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn other(self) -> Task {
        match self {
            Task::Classification => Task::Regression,
            Task::Regression => Task::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Transformer,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Encoder blocks or stacked LSTM layers.
    pub blocks: usize,
    pub head_widths: Vec<usize>,
    pub task: Task,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub lstm_hidden: usize,
    pub seq_len: usize,
    pub n_features: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Transformer,
            blocks: 4,
            head_widths: vec![128, 64, 32],
            task: Task::Classification,
            d_model: 64,
            heads: 4,
            ffn_hidden: 128,
            lstm_hidden: 64,
            seq_len: WINDOW_LEN,
            n_features: NUM_FEATURES,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn lstm() -> Self {
        Self { backbone: Backbone::Lstm, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return bad("blocks must be >= 1".into());
        }
        if self.head_widths.contains(&0) {
            return bad(format!("head widths must be positive, got {:?}", self.head_widths));
        }
        if self.seq_len == 0 || self.n_features == 0 {
            return bad("seq_len and n_features must be positive".into());
        }
        match self.backbone {
            Backbone::Transformer => {
                if self.d_model == 0 || self.d_model % 2 != 0 {
                    return bad(format!("d_model must be even and positive, got {}", self.d_model));
                }
                if self.heads == 0 || self.d_model % self.heads != 0 {
                    return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
                }
                if self.ffn_hidden == 0 {
                    return bad("ffn_hidden must be positive".into());
                }
            }
            Backbone::Lstm => {
                if self.lstm_hidden == 0 {
                    return bad("lstm_hidden must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Width of one backbone output step.
    pub fn step_width(&self) -> usize {
        match self.backbone {
            Backbone::Transformer => self.d_model,
            Backbone::Lstm => self.lstm_hidden,
        }
    }

    /// Everything except the head and the task.
    pub fn same_backbone(&self, other: &ModelConfig) -> bool {
        let key = |c: &ModelConfig| match c.backbone {
            Backbone::Transformer => (c.backbone, c.blocks, c.d_model, c.heads, c.ffn_hidden, 0, c.seq_len, c.n_features),
            Backbone::Lstm => (c.backbone, c.blocks, 0, 0, 0, c.lstm_hidden, c.seq_len, c.n_features),
        };
        key(self) == key(other)
    }
}

#[derive(Debug, Clone)]
enum BackboneLayers {
    Transformer { input: Dense, blocks: Vec<EncoderBlock> },
    Lstm(Vec<LstmLayer>),
}

/// Layer layout of a forecaster; parameters live in a separate store so the
/// same layout drives `f32` training and `f64` gradient checks.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    backbone: BackboneLayers,
    head: Vec<Dense>,
    out: Dense,
}

pub const HEAD_OUT: &str = "head.out";

fn head_out_rng(seed: u64, round: u64) -> ChaCha8Rng {
    // Stream 0 belongs to the main initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round + 1);
    rng
}

impl Network {
    /// Lays out the network and initializes its parameters from `config.seed`.
    pub fn build<T: Scalar>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = match config.backbone {
            Backbone::Transformer => {
                let input = Dense::new(&mut store, "input", config.n_features, config.d_model, &mut rng)?;
                let blocks = (0..config.blocks)
                    .map(|i| EncoderBlock::new(&mut store, &format!("blocks.{i}"), config.d_model, config.heads, config.ffn_hidden, &mut rng))
                    .collect::<Result<_>>()?;
                BackboneLayers::Transformer { input, blocks }
            }
            Backbone::Lstm => BackboneLayers::Lstm(
                (0..config.blocks)
                    .map(|i| {
                        let d_in = if i == 0 { config.n_features } else { config.lstm_hidden };
                        LstmLayer::new(&mut store, &format!("lstm.{i}"), d_in, config.lstm_hidden, &mut rng)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let mut width = config.seq_len * config.step_width();
        let mut head = Vec::with_capacity(config.head_widths.len());
        for (j, &w) in config.head_widths.iter().enumerate() {
            head.push(Dense::new(&mut store, &format!("head.dense{j}"), width, w, &mut rng)?);
            width = w;
        }
        // The output layer draws from its own stream so a head swap can
        // re-create it without replaying the rest of the initialization.
        let out = Dense::new(&mut store, HEAD_OUT, width, 1, &mut head_out_rng(config.seed, 0))?;
        Ok((Self { config: config.clone(), backbone, head, out }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Raw outputs (logits for classification) for `x: [batch, seq, features]`, shaped `[batch, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.config.seq_len || s[2] != self.config.n_features {
            return Err(Error::Shape(format!(
                "model expects [batch, {}, {}] input, got {s:?}",
                self.config.seq_len, self.config.n_features
            )));
        }
        let batch = s[0];
        let mut h = match &self.backbone {
            BackboneLayers::Transformer { input, blocks } => {
                let mut h = input.forward(g, p, x)?;
                let pe = g.leaf(positional_encoding(self.config.seq_len, self.config.d_model)?);
                h = g.add_broadcast(h, pe)?;
                for b in blocks {
                    h = b.forward(g, p, h)?;
                }
                h
            }
            BackboneLayers::Lstm(layers) => {
                let mut h = x;
                for l in layers {
                    h = l.forward(g, p, h)?;
                }
                h
            }
        };
        h = g.reshape(h, vec![batch, self.config.seq_len * self.config.step_width()])?;
        for d in &self.head {
            h = d.forward(g, p, h)?;
            h = g.relu(h);
        }
        self.out.forward(g, p, h)
    }
}

/// Packs scaled windows into a `[batch, seq, features]` tensor.
pub fn windows_tensor<T: Scalar>(windows: &[&Window]) -> Tensor<T> {
    let mut data = Vec::with_capacity(windows.len() * WINDOW_LEN * NUM_FEATURES);
    for w in windows {
        for row in w.iter() {
            data.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
        }
    }
    Tensor::new(vec![windows.len(), WINDOW_LEN, NUM_FEATURES], data).expect("window tensor shape")
}

/// Inference result for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Probability (classification) or scaled return (regression).
    pub value: f64,
    /// Regression only: the return mapped back through the target scaler.
    pub raw_return: Option<f64>,
}

const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone)]
pub struct Forecaster {
    network: Network,
    store: ParamStore<f32>,
    head_round: u64,
}

impl Forecaster {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let (network, store) = Network::build(config)?;
        Ok(Self { network, store, head_round: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn task(&self) -> Task {
        self.network.config.task
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Number of times the output layer has been re-initialized.
    pub fn head_round(&self) -> u64 {
        self.head_round
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    /// Raw network outputs for windows that are already scaled.
    pub fn raw_outputs(&self, windows: &[&Window]) -> Result<Vec<f64>> {
        if self.config().seq_len != WINDOW_LEN || self.config().n_features != NUM_FEATURES {
            return Err(Error::Shape(format!(
                "windows are {WINDOW_LEN}x{NUM_FEATURES} but the model expects {}x{}",
                self.config().seq_len,
                self.config().n_features
            )));
        }
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(PREDICT_CHUNK) {
            let mut g = Graph::<f32>::new();
            let p = self.store.bind(&mut g);
            let x = g.leaf(windows_tensor(chunk));
            let y = self.network.forward(&mut g, &p, x)?;
            out.extend(g.value(y).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    /// Probabilities (classification) or scaled returns (regression) for
    /// scaled samples.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let windows: Vec<&Window> = samples.iter().map(|s| &s.window).collect();
        let raw = self.raw_outputs(&windows)?;
        Ok(match self.task() {
            Task::Classification => raw.into_iter().map(crate::tensor_nn::stable_sigmoid).collect(),
            Task::Regression => raw,
        })
    }

    /// Like [`predict`](Self::predict) but also maps regression outputs back
    /// to returns with the training scaler.
    pub fn predict_with_scaler(&self, samples: &[Sample], scaler: &MinMaxScaler) -> Result<Vec<Prediction>> {
        if !scaler.is_fitted() || scaler.mins().len() != NUM_CHANNELS {
            return Err(Error::Scaler(format!(
                "model needs a fitted {NUM_CHANNELS}-channel scaler, got {} channels",
                scaler.mins().len()
            )));
        }
        let values = self.predict(samples)?;
        values
            .into_iter()
            .map(|value| {
                Ok(Prediction {
                    value,
                    raw_return: match self.task() {
                        Task::Regression => Some(scaler.inverse_target(value)?),
                        Task::Classification => None,
                    },
                })
            })
            .collect()
    }

    /// SHA-256 of each parameter's little-endian `f32` bytes, keyed by name.
    pub fn param_digests(&self) -> BTreeMap<String, String> {
        self.store
            .iter()
            .map(|p| {
                let mut h = Sha256::new();
                for v in p.tensor.data() {
                    h.update(v.to_le_bytes());
                }
                (p.name.clone(), hex::encode(h.finalize()))
            })
            .collect()
    }

    /// Copies every parameter from `source`. The backbone configuration must
    /// match and every name and shape must line up; all mismatches are
    /// reported together.
    pub fn transfer_init(&mut self, source: &ModelWeights) -> Result<()> {
        if !self.config().same_backbone(&source.config) {
            return Err(Error::Config(format!(
                "backbone mismatch: source {:?} vs target {:?}",
                source.config.backbone, self.config().backbone
            )));
        }
        let problems = weights::layout_mismatches(&self.store, source);
        if !problems.is_empty() {
            return Err(Error::Config(format!("cannot transfer weights: {}", problems.join("; "))));
        }
        for e in &source.params {
            let id = self.store.id(&e.name).expect("checked above");
            self.store.get_mut(id).tensor.data_mut().copy_from_slice(&e.values);
        }
        Ok(())
    }

    /// Re-initializes `head.out` for `task`. Returns `false` (and leaves the
    /// model untouched) when the model already has that task.
    pub fn swap_head(&mut self, task: Task) -> bool {
        if task == self.task() {
            tracing::warn!(?task, "swap_head to the current task is a no-op");
            return false;
        }
        self.head_round += 1;
        let d_in = self.network.out.d_in;
        let mut fresh = ParamStore::<f32>::new();
        let fresh_out = Dense::new(&mut fresh, HEAD_OUT, d_in, 1, &mut head_out_rng(self.config().seed, self.head_round))
            .expect("output layer dims were valid at build time");
        for (dst, src) in [(self.network.out.weight, fresh_out.weight), (self.network.out.bias, fresh_out.bias)] {
            let v = fresh.get(src).tensor.clone();
            self.store.get_mut(dst).tensor = v;
        }
        self.network.config.task = task;
        true
    }

    /// Freezes everything outside the head when `freeze` is set.
    pub fn freeze_backbone(&mut self, freeze: bool) {
        self.store.set_trainable(|name| !freeze || name.starts_with("head."));
    }

    pub fn to_weights(&self) -> ModelWeights {
        ModelWeights::from_store(self.config().clone(), self.head_round, &self.store)
    }

    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        let mut model = Self::build(&w.config)?;
        let problems = weights::layout_mismatches(&model.store, w);
        if !problems.is_empty() {
            return Err(Error::Weights(format!("weights do not match their config: {}", problems.join("; "))));
        }
        for e in &w.params {
            let id = model.store.id(&e.name).expect("checked above");
            model.store.get_mut(id).tensor.data_mut().copy_from_slice(&e.values);
        }
        model.head_round = w.head_round;
        Ok(model)
    }
}

/// Per-sample arithmetic mean of member predictions.
pub fn ensemble_predict(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = members.first() else {
        return Err(Error::InvalidInput("ensemble of zero models".into()));
    };
    if let Some(bad) = members.iter().find(|m| m.len() != first.len()) {
        return Err(Error::Shape(format!("ensemble members have {} and {} predictions", first.len(), bad.len())));
    }
    let k = members.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m[i]), hi.max(m[i])));
            // rounding of the sum can leave the mean an ulp outside the members
            let mean = members.iter().map(|m| m[i]).sum::<f64>() / k;
            if lo <= hi {
                mean.clamp(lo, hi)
            } else {
                mean
            }
        })
        .collect())
}
