//! Attention weights against the loop reimplementation.
#![allow(dead_code)]

use i2e_core::tensor_nn::{Graph, MultiHeadAttention, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{attention_loops, Lin};

fn lin_of(store: &ParamStore<f64>, prefix: &str, d: usize) -> Lin {
    let w = store.by_name(&format!("{prefix}.weight")).unwrap().tensor.data().to_vec();
    let b = store.by_name(&format!("{prefix}.bias")).unwrap().tensor.data().to_vec();
    Lin { w: w.chunks(d).map(<[f64]>::to_vec).collect(), b }
}

/// One 3-token, 2-head case with random biases. Returns the largest
/// `|row sum - 1|` and the largest deviation from the loop oracle over
/// outputs and weights.
pub fn three_token_case(seed: u64) -> Result<(f64, f64), String> {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut s, "a", d, 2, &mut rng).map_err(|e| e.to_string())?;
    for p in s.iter_mut().filter(|p| p.name.ends_with("bias")) {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let tokens: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut g = Graph::new();
    let p = s.bind(&mut g);
    let x = g.leaf(Tensor::new(vec![1, 3, d], tokens.concat()).map_err(|e| e.to_string())?);
    let (out, w) = mha.forward_with_weights(&mut g, &p, x).map_err(|e| e.to_string())?;
    let (want, want_w) =
        attention_loops(&tokens, &lin_of(&s, "a.q", d), &lin_of(&s, "a.k", d), &lin_of(&s, "a.v", d), &lin_of(&s, "a.out", d), 2);
    let want_w: Vec<f64> = want_w.into_iter().flatten().flatten().collect();
    let got_out = g.value(out).data();
    let got_w = g.value(w).data();
    if got_out.len() != 3 * d || got_w.len() != want_w.len() {
        return Err(format!("shapes: {} outputs, {} weights", got_out.len(), got_w.len()));
    }
    let mut oracle_err: f64 = 0.0;
    for (a, b) in got_out.iter().zip(want.concat()).chain(got_w.iter().zip(want_w)) {
        oracle_err = oracle_err.max((a - b).abs());
    }
    let mut row_err: f64 = 0.0;
    for row in got_w.chunks(3) {
        if row.iter().any(|&v| v < 0.0) {
            return Err(format!("negative attention weight in {row:?}"));
        }
        row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((row_err, oracle_err))
}
