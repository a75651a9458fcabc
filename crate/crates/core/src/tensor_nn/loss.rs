use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    WeightedBce,
    Mse,
}

const P_FLOOR: f64 = 1e-15;

/// `-mean(w [y ln p + (1 - y) ln(1 - p)])` on probabilities.
pub fn weighted_bce(p: &[f64], y: &[f64], w: Option<&[f64]>) -> Result<f64> {
    if p.len() != y.len() || w.is_some_and(|w| w.len() != p.len()) || p.is_empty() {
        return Err(Error::Shape(format!("bce over {} predictions and {} targets", p.len(), y.len())));
    }
    let mut total = 0.0;
    for (i, (&pi, &yi)) in p.iter().zip(y).enumerate() {
        let mut term = 0.0;
        if yi != 0.0 {
            term -= yi * pi.max(P_FLOOR).ln();
        }
        if yi != 1.0 {
            term -= (1.0 - yi) * (1.0 - pi).max(P_FLOOR).ln();
        }
        total += w.map_or(1.0, |w| w[i]) * term;
    }
    Ok(total / p.len() as f64)
}

pub fn mse(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape(format!("mse over {} predictions and {} targets", p.len(), y.len())));
    }
    Ok(p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}
