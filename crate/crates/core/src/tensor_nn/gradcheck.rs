//! Central-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::{Graph, ParamStore, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let loss = f(&mut g, &p)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar loss, got {:?}", v.shape())));
    }
    let l = v.data()[0];
    if !l.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite loss {l} during gradient check")));
    }
    Ok(l)
}

/// Reverse-mode gradients of every trainable parameter (empty for frozen ones).
pub fn analytic_gradients<F>(store: &ParamStore<f64>, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let loss = f(&mut g, &p)?;
    let l = g.value(loss).data()[0];
    if !l.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite loss {l} during gradient check")));
    }
    let grads = g.backward(loss)?;
    Ok(store
        .iter()
        .zip(&p)
        .map(|(param, &v)| {
            if !param.trainable {
                return Vec::new();
            }
            grads.get(v).map_or_else(|| vec![0.0; param.tensor.numel()], <[f64]>::to_vec)
        })
        .collect())
}

/// Central differences `(f(θ + h) - f(θ - h)) / 2h` per trainable entry.
pub fn numeric_gradients<F>(store: &ParamStore<f64>, f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for i in 0..store.len() {
        let id = super::ParamId(i);
        if !work.get(id).trainable {
            out.push(Vec::new());
            continue;
        }
        let n = work.get(id).tensor.numel();
        let mut g = Vec::with_capacity(n);
        for j in 0..n {
            let orig = work.get(id).tensor.data()[j];
            work.get_mut(id).tensor.data_mut()[j] = orig + h;
            let plus = eval(&work, f)?;
            work.get_mut(id).tensor.data_mut()[j] = orig - h;
            let minus = eval(&work, f)?;
            work.get_mut(id).tensor.data_mut()[j] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare(store: &ParamStore<f64>, analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for ((param, a), n) in store.iter().zip(analytic).zip(numeric) {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = relative_error(av, nv);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e.max(report.max_rel_error);
                report.worst = Some((param.name.clone(), j));
            }
        }
    }
    report
}

/// Checks every trainable parameter of `store` for the scalar loss built by `f`.
pub fn gradient_check<F>(store: &ParamStore<f64>, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(store, &f)?;
    let n = numeric_gradients(store, &f, h)?;
    Ok(compare(store, &a, &n))
}
