//! Head swaps and transfer initialization through the public model API.
#![allow(dead_code)]

use i2e_core::forecasters::{Backbone, ModelConfig};
use i2e_core::{Forecaster, Sample, Task, NUM_FEATURES, WINDOW_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(backbone: Backbone, seed: u64) -> ModelConfig {
    ModelConfig {
        backbone,
        blocks: 2,
        head_widths: vec![8, 4],
        d_model: 8,
        heads: 2,
        ffn_hidden: 12,
        lstm_hidden: 6,
        seed,
        ..ModelConfig::default()
    }
}

pub fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    (0..n)
        .map(|_| {
            let mut w = [[0.0; NUM_FEATURES]; WINDOW_LEN];
            for v in w.iter_mut().flatten() {
                *v = r.random_range(0.0..1.0);
            }
            Sample {
                symbol: "X".into(),
                anchor_date: d,
                target_date: d,
                window: w,
                target_return: 0.5,
                target_raw: 0.0,
                target_label: 0,
            }
        })
        .collect()
}

/// Classification → regression changes the output layer's digests and
/// nothing else.
pub fn swap_changes_only_output_layer(backbone: Backbone, seed: u64) -> Result<usize, String> {
    let mut m = Forecaster::build(&tiny(backbone, seed)).map_err(|e| e.to_string())?;
    let before = m.param_digests();
    if !m.swap_head(Task::Regression) || m.task() != Task::Regression {
        return Err("swap_head did not switch the task".into());
    }
    let after = m.param_digests();
    if before.keys().ne(after.keys()) {
        return Err("parameter names changed".into());
    }
    let mut changed = 0;
    for (name, d) in &before {
        let moved = d != &after[name];
        let is_out = name.starts_with("head.out.");
        if moved && !is_out {
            return Err(format!("{name} changed"));
        }
        changed += usize::from(moved);
    }
    if before["head.out.weight"] == after["head.out.weight"] {
        return Err("output weights were not re-initialized".into());
    }
    Ok(changed)
}

/// A differently seeded model given the source's weights predicts bitwise
/// identically before any training step.
pub fn transfer_reproduces_source(backbone: Backbone, seed: u64) -> Result<(), String> {
    let src = Forecaster::build(&tiny(backbone, seed)).map_err(|e| e.to_string())?;
    let mut dst = Forecaster::build(&tiny(backbone, seed + 1000)).map_err(|e| e.to_string())?;
    let s = random_samples(16, seed);
    if dst.predict(&s).map_err(|e| e.to_string())? == src.predict(&s).map_err(|e| e.to_string())? {
        return Err("differently seeded models already agree".into());
    }
    dst.transfer_init(&src.to_weights()).map_err(|e| e.to_string())?;
    let a: Vec<u64> = src.predict(&s).map_err(|e| e.to_string())?.iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = dst.predict(&s).map_err(|e| e.to_string())?.iter().map(|v| v.to_bits()).collect();
    if a != b {
        return Err("predictions differ after transfer_init".into());
    }
    if src.param_digests() != dst.param_digests() {
        return Err("parameter digests differ after transfer_init".into());
    }
    Ok(())
}
