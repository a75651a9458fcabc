//! Finite-difference gradient cases for every layer and both full models.
#![allow(dead_code)]

use i2e_core::forecasters::{Backbone, ModelConfig, Network, Task};
use i2e_core::tensor_nn::{
    gradient_check, Dense, EncoderBlock, Graph, LayerNorm, LstmLayer, MultiHeadAttention, ParamStore, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

fn input(g: &mut Graph<f64>, shape: Vec<usize>, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let n: usize = shape.iter().product();
    g.leaf(Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
}

fn probe(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    // Move gains/biases off their 1/0 initial values so every term matters.
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    for p in store.iter_mut() {
        if p.name.ends_with(".gain") || p.name.ends_with(".bias") {
            for v in p.tensor.data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
    }
}

/// `(case name, max relative error)` for one seed.
pub fn run_cases(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut s = ParamStore::new();
    let d = Dense::new(&mut s, "dense", 5, 4, &mut rng).unwrap();
    jitter(&mut s, seed);
    let r = gradient_check(&s, |g, p| {
        let x = input(g, vec![3, 5], seed);
        let y = d.forward(g, p, x)?;
        let y = g.tanh(y);
        g.weighted_sum(y, probe(12, seed))
    }, H);
    out.push(("dense", r.unwrap().max_rel_error));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 6).unwrap();
    jitter(&mut s, seed);
    let r = gradient_check(&s, |g, p| {
        let x = input(g, vec![4, 6], seed);
        let y = ln.forward(g, p, x)?;
        g.weighted_sum(y, probe(24, seed))
    }, H);
    out.push(("layer_norm", r.unwrap().max_rel_error));

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "attn", 6, 2, &mut rng).unwrap();
    jitter(&mut s, seed);
    let r = gradient_check(&s, |g, p| {
        let x = input(g, vec![2, 3, 6], seed);
        let y = mha.forward(g, p, x)?;
        g.weighted_sum(y, probe(36, seed))
    }, H);
    out.push(("attention", r.unwrap().max_rel_error));

    let mut s = ParamStore::new();
    let blk = EncoderBlock::new(&mut s, "block", 6, 2, 8, &mut rng).unwrap();
    jitter(&mut s, seed);
    let r = gradient_check(&s, |g, p| {
        let x = input(g, vec![2, 4, 6], seed);
        let y = blk.forward(g, p, x)?;
        g.weighted_sum(y, probe(48, seed))
    }, H);
    out.push(("transformer_block", r.unwrap().max_rel_error));

    let mut s = ParamStore::new();
    let lstm = LstmLayer::new(&mut s, "lstm", 4, 3, &mut rng).unwrap();
    jitter(&mut s, seed);
    let r = gradient_check(&s, |g, p| {
        let x = input(g, vec![2, 5, 4], seed);
        let y = lstm.forward(g, p, x)?;
        g.weighted_sum(y, probe(30, seed))
    }, H);
    out.push(("lstm", r.unwrap().max_rel_error));

    for (name, backbone, task) in [
        ("transformer_model", Backbone::Transformer, Task::Classification),
        ("lstm_model", Backbone::Lstm, Task::Regression),
    ] {
        let cfg = ModelConfig {
            backbone,
            blocks: 2,
            head_widths: vec![6, 4],
            task,
            d_model: 4,
            heads: 2,
            ffn_hidden: 6,
            lstm_hidden: 3,
            seed,
            ..ModelConfig::default()
        };
        let (net, mut s) = Network::build::<f64>(&cfg).unwrap();
        jitter(&mut s, seed);
        let batch = 3;
        let targets: Vec<f64> = match task {
            Task::Classification => (0..batch).map(|i| (i % 2) as f64).collect(),
            Task::Regression => probe(batch, seed + 1),
        };
        let r = gradient_check(&s, |g, p| {
            let x = input(g, vec![batch, cfg.seq_len, cfg.n_features], seed);
            let y = net.forward(g, p, x)?;
            match task {
                Task::Classification => g.bce_with_logits(y, targets.clone(), Some(vec![0.7, 1.4, 0.9])),
                Task::Regression => g.mse(y, targets.clone()),
            }
        }, H);
        out.push((name, r.unwrap().max_rel_error));
    }
    out
}
