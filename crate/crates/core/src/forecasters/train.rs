use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{windows_tensor, Forecaster, ModelConfig, Network, Task};
use crate::dataset::{Sample, Window};
use crate::error::{Error, Result};
use crate::tensor_nn::{adam_step, softplus, AdamConfig, AdamState, Graph, Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub freeze_backbone: bool,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 256, optimizer: AdamConfig::default(), patience: 5, freeze_backbone: false, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

/// Per-class loss weights `(negative, positive)` for classification.
pub type LossWeights = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub task: Task,
    pub class_weights: Option<LossWeights>,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// sha256 over every epoch's shuffled sample order.
    pub order_digest: String,
    #[serde(default)]
    pub partitions: Vec<String>,
    #[serde(default)]
    pub weights_path: Option<String>,
}

fn sample_weights(samples: &[&Sample], task: Task, cw: Option<LossWeights>) -> Option<Vec<f64>> {
    match (task, cw) {
        (Task::Classification, Some((w0, w1))) => {
            Some(samples.iter().map(|s| if s.target_label == 1 { w1 } else { w0 }).collect())
        }
        _ => None,
    }
}

fn targets(samples: &[&Sample], task: Task) -> Vec<f64> {
    samples
        .iter()
        .map(|s| match task {
            Task::Classification => s.target_label as f64,
            Task::Regression => s.target_return,
        })
        .collect()
}

/// Builds the task loss for `samples` on `g`.
pub fn batch_loss<T: Scalar>(
    network: &Network,
    g: &mut Graph<T>,
    p: &[Var],
    samples: &[&Sample],
    cw: Option<LossWeights>,
) -> Result<Var> {
    let windows: Vec<&Window> = samples.iter().map(|s| &s.window).collect();
    let x = g.leaf(windows_tensor(&windows));
    let out = network.forward(g, p, x)?;
    let task = network.config().task;
    let y: Vec<T> = targets(samples, task).into_iter().map(T::from_f64_lossy).collect();
    match task {
        Task::Classification => {
            let w = sample_weights(samples, task, cw).map(|w| w.into_iter().map(T::from_f64_lossy).collect());
            g.bce_with_logits(out, y, w)
        }
        Task::Regression => g.mse(out, y),
    }
}

/// Task loss of `model` on `samples` (class-weighted BCE or MSE), accumulated in `f64`.
pub fn evaluate_loss(model: &Forecaster, samples: &[Sample], cw: Option<LossWeights>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("loss over an empty sample set".into()));
    }
    let windows: Vec<&Window> = samples.iter().map(|s| &s.window).collect();
    let raw = model.raw_outputs(&windows)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let task = model.task();
    let y = targets(&refs, task);
    let w = sample_weights(&refs, task, cw);
    let total: f64 = match task {
        Task::Classification => raw
            .iter()
            .zip(&y)
            .enumerate()
            .map(|(i, (&z, &t))| w.as_ref().map_or(1.0, |w| w[i]) * (softplus(z) - t * z))
            .sum(),
        Task::Regression => raw.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum(),
    };
    Ok(total / samples.len() as f64)
}

/// Plain binary cross-entropy of a classifier on `samples`.
pub fn unweighted_bce(model: &Forecaster, samples: &[Sample]) -> Result<f64> {
    if model.task() != Task::Classification {
        return Err(Error::InvalidInput("BCE needs a classification model".into()));
    }
    evaluate_loss(model, samples, None)
}

/// Mini-batch Adam with early stopping on validation loss. The weights of the
/// best validation epoch are restored before returning. With an empty
/// validation set every epoch runs and the final weights are kept.
pub fn train(
    model: &mut Forecaster,
    train_set: &[Sample],
    val_set: &[Sample],
    class_weights: Option<LossWeights>,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let task = model.task();
    if task == Task::Classification && class_weights.is_none() {
        return Err(Error::Config("classification training requires class weights".into()));
    }
    model.freeze_backbone(cfg.freeze_backbone);
    let cw = if task == Task::Classification { class_weights } else { None };

    let mut state = AdamState::new(model.store());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::tensor_nn::ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order_hash = Sha256::new();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for &i in &order {
            order_hash.update((i as u64).to_le_bytes());
        }
        let mut weighted_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::<f32>::new();
            let p = model.store().bind(&mut g);
            let loss = batch_loss(model.network(), &mut g, &p, &batch, cw)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss: lv });
            }
            weighted_sum += lv * batch.len() as f64;
            let grads = g.backward(loss)?;
            let per_param: Vec<Option<&[f32]>> = p.iter().map(|&v| grads.get(v)).collect();
            adam_step(model.store_mut(), &per_param, &mut state, &cfg.optimizer)?;
        }
        let train_loss = weighted_sum / train_set.len() as f64;
        let val_loss = if val_set.is_empty() { None } else { Some(evaluate_loss(model, val_set, cw)?) };
        tracing::debug!(epoch, train_loss, ?val_loss, "epoch finished");
        log.push(EpochLog { epoch, train_loss, val_loss });

        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, loss: v });
            }
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                best = Some((v, epoch, model.store().clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = epoch < cfg.epochs;
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, store)) => {
            *model.store_mut() = store;
            epoch
        }
        None => log.len(),
    };
    model.freeze_backbone(false);
    Ok(TrainRun {
        model_config: model.config().clone(),
        train_config: cfg.clone(),
        task,
        class_weights: cw,
        n_train: train_set.len(),
        n_val: val_set.len(),
        epochs: log,
        best_epoch,
        stopped_early,
        order_digest: hex::encode(order_hash.finalize()),
        partitions: Vec::new(),
        weights_path: None,
    })
}
