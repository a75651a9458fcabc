use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Graph, Scalar, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor, trainable: true });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_f64(shape, &vals)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Marks parameters trainable according to `pred(name)`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    /// Puts every parameter on `g` as a leaf; the result is indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.tensor.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!("{name}: dense widths must be positive ({d_in} -> {d_out})")));
        }
        let weight = store.add_uniform(format!("{name}.weight"), vec![d_in, d_out], d_in, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]))?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.dense(x, p[self.weight.0], p[self.bias.0])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(vec![d], T::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain.0], p[self.bias.0])
    }
}

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding<T: Scalar>(seq_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    let mut out = Vec::with_capacity(seq_len * d_model);
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out.push(T::from_f64_lossy(angle.sin()));
            out.push(T::from_f64_lossy(angle.cos()));
        }
    }
    Tensor::new(vec![seq_len, d_model], out)
}

/// Bidirectional multi-head self-attention over `[batch, seq, d_model]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Dense::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            k: Dense::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            v: Dense::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            out: Dense::new(store, &format!("{name}.out"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x)?.0)
    }

    /// Also returns the attention weights, shaped `[batch * heads, seq, seq]`.
    pub fn forward_with_weights<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::Shape(format!("attention expects [batch, seq, {}], got {s:?}", self.d_model)));
        }
        let dk = self.d_model / self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let scores = g.batch_matmul(q, k, false, true)?;
        let scores = g.scale(scores, T::from_f64_lossy(1.0 / (dk as f64).sqrt()));
        let weights = g.softmax(scores);
        let ctx = g.batch_matmul(weights, v, false, false)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        Ok((self.out.forward(g, p, ctx)?, weights))
    }
}

/// Pre-norm encoder block: `h = x + MHA(LN(x))`, `y = h + FF2(relu(FF1(LN(h))))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
            ff1: Dense::new(store, &format!("{name}.ff1"), d_model, ffn_hidden, rng)?,
            ff2: Dense::new(store, &format!("{name}.ff2"), ffn_hidden, d_model, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let n1 = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n1)?;
        let h = g.add(x, a)?;
        let n2 = self.ln2.forward(g, p, h)?;
        let f = self.ff1.forward(g, p, n2)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, p, f)?;
        g.add(h, f)
    }
}

/// LSTM over `[batch, seq, d_in]` with zero initial state. Gate order in the
/// packed weights is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d_in == 0 || hidden == 0 {
            return Err(Error::Config(format!("{name}: lstm sizes must be positive")));
        }
        let w_ih = store.add_uniform(format!("{name}.w_ih"), vec![d_in, 4 * hidden], hidden, rng)?;
        let w_hh = store.add_uniform(format!("{name}.w_hh"), vec![hidden, 4 * hidden], hidden, rng)?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::from_f64(vec![4 * hidden], &b)?)?;
        Ok(Self { w_ih, w_hh, bias, d_in, hidden })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_in {
            return Err(Error::Shape(format!("lstm expects [batch, seq, {}], got {s:?}", self.d_in)));
        }
        let (batch, seq, hd) = (s[0], s[1], self.hidden);
        // Input projections for all steps at once.
        let xw = g.matmul(x, p[self.w_ih.0])?;
        let xw = g.add_bias(xw, p[self.bias.0])?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outs = Vec::with_capacity(seq);
        for t in 0..seq {
            let mut gates = g.select_step(xw, t)?;
            if let Some(hp) = h {
                let hw = g.matmul(hp, p[self.w_hh.0])?;
                gates = g.add(gates, hw)?;
            }
            let i = g.slice_last(gates, 0, hd)?;
            let f = g.slice_last(gates, hd, hd)?;
            let cc = g.slice_last(gates, 2 * hd, hd)?;
            let o = g.slice_last(gates, 3 * hd, hd)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cc = g.tanh(cc);
            let o = g.sigmoid(o);
            let ic = g.mul(i, cc)?;
            let c_new = match c {
                Some(cp) => {
                    let fc = g.mul(f, cp)?;
                    g.add(fc, ic)?
                }
                None => ic,
            };
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc)?;
            debug_assert_eq!(g.shape(h_new), &[batch, hd]);
            outs.push(h_new);
            h = Some(h_new);
            c = Some(c_new);
        }
        g.stack_steps(&outs)
    }
}
