use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    AddBroadcast { x: Var, y: Var },
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    SelectStep { x: Var, t: usize },
    StackSteps(Vec<Var>),
    WeightedSum { x: Var, weights: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T>, weights: Vec<T> },
    Mse { pred: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of eagerly evaluated operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes the loss does not reach.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adds a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x @ w` over the trailing dimension of `x`; `w` is `[d_in, d_out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(shape_err(format!("matmul of {:?} by {:?}", xv.shape(), wv.shape())));
        }
        let (rows, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, xv.data(), false, wv.data(), false, &mut out, false);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a: x, b: w }))
    }

    /// Adds a bias vector along the trailing dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.last_dim() {
            return Err(shape_err(format!("bias {:?} for input {:?}", bv.shape(), xv.shape())));
        }
        let d = bv.numel();
        let bd = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bd[i % d]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, b }))
    }

    /// Dense layer `x W + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x + y` where `y` repeats over the leading elements of `x` (e.g. a
    /// `[seq, d]` positional table added to a `[batch, seq, d]` input).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let m = yv.numel();
        if m == 0 || xv.numel() % m != 0 || !xv.shape().ends_with(yv.shape()) {
            return Err(shape_err(format!("broadcast {:?} onto {:?}", yv.shape(), xv.shape())));
        }
        let yd = yv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + yd[i % m]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBroadcast { x, y }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect()).unwrap();
        self.push(t, Op::Scale(x, c))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (data, op): (Vec<T>, Op<T>) = match kind {
            Activation::Linear => return x,
            Activation::Relu => (xv.data().iter().map(|&v| v.max(T::zero())).collect(), Op::Relu(x)),
            Activation::Sigmoid => (xv.data().iter().map(|&v| stable_sigmoid(v)).collect(), Op::Sigmoid(x)),
            Activation::Tanh => (xv.data().iter().map(|&v| v.tanh()).collect(), Op::Tanh(x)),
        };
        self.push(Tensor::new(shape, data).unwrap(), op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Normalizes each trailing vector to zero mean and unit variance
    /// (eps = 1e-5), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err(format!("layer_norm params {:?}/{:?} for {:?}", gv.shape(), bv.shape(), xv.shape())));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= sum;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(t, Op::Softmax(x))
    }

    /// Batched `op(a) @ op(b)` over 3-d tensors `[batch, ., .]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("batch_matmul of {sa:?} by {sb:?}")));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err(format!("batch_matmul inner dims {k} vs {k2} ({sa:?}, {sb:?})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                ta,
                &bv.data()[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, ta, tb, batch, m, k, n }))
    }

    /// `[b, s, h*dk]` -> `[b*h, s, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(shape_err(format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, seq, d) = (s[0], s[1], s[2]);
        let dk = d / heads;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (bi * seq + t) * d + h * dk;
                    let to = ((bi * heads + h) * seq + t) * dk;
                    out[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let t = Tensor::new(vec![b * heads, seq, dk], out)?;
        Ok(self.push(t, Op::SplitHeads { x, heads }))
    }

    /// `[b*h, s, dk]` -> `[b, s, h*dk]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(shape_err(format!("cannot merge {s:?} from {heads} heads")));
        }
        let (b, seq, dk) = (s[0] / heads, s[1], s[2]);
        let d = dk * heads;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (bi * seq + t) * d + h * dk;
                    let from = ((bi * heads + h) * seq + t) * dk;
                    out[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let t = Tensor::new(vec![b, seq, d], out)?;
        Ok(self.push(t, Op::MergeHeads { x, heads }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Columns `start..start + len` of the trailing dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start + len > d {
            return Err(shape_err(format!("slice {start}..{} of trailing dim {d}", start + len)));
        }
        let data: Vec<T> = xv.data().chunks(d).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }))
    }

    /// Time step `t` of a `[b, s, d]` tensor, as `[b, d]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || t >= s[1] {
            return Err(shape_err(format!("step {t} of {s:?}")));
        }
        let (b, seq, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * seq + t) * d;
            out.extend_from_slice(&xv.data()[off..off + d]);
        }
        let tn = Tensor::new(vec![b, d], out)?;
        Ok(self.push(tn, Op::SelectStep { x, t }))
    }

    /// Stacks `[b, d]` steps into `[b, s, d]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let Some(&first) = steps.first() else {
            return Err(shape_err("stack of zero steps".into()));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 || steps.iter().any(|&v| self.shape(v) != s0.as_slice()) {
            return Err(shape_err("stack_steps needs equal [b, d] inputs".into()));
        }
        let (b, d, seq) = (s0[0], s0[1], steps.len());
        let mut out = vec![T::zero(); b * seq * d];
        for (t, &v) in steps.iter().enumerate() {
            let src = self.value(v).data();
            for bi in 0..b {
                let to = (bi * seq + t) * d;
                out[to..to + d].copy_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let tn = Tensor::new(vec![b, seq, d], out)?;
        Ok(self.push(tn, Op::StackSteps(steps.to_vec())))
    }

    /// Scalar `sum(x * weights)`; a convenient probe loss for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(shape_err(format!("weighted_sum of {:?} with {} weights", xv.shape(), weights.len())));
        }
        let s = xv.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// `-mean(w [y log p + (1-y) log(1-p)])` with `p = sigmoid(logits)`,
    /// evaluated as `mean(w (softplus(z) - y z))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>, weights: Option<Vec<T>>) -> Result<Var> {
        let n = self.value(logits).numel();
        let weights = weights.unwrap_or_else(|| vec![T::one(); n]);
        if targets.len() != n || weights.len() != n || n == 0 {
            return Err(shape_err(format!("bce over {n} logits with {} targets / {} weights", targets.len(), weights.len())));
        }
        let nn = T::from_usize(n).unwrap();
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&z, &y), &w)| w * (softplus(z) - y * z))
            .sum::<T>()
            / nn;
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets, weights }))
    }

    /// `mean((pred - target)^2)`.
    pub fn mse(&mut self, pred: Var, targets: Vec<T>) -> Result<Var> {
        let n = self.value(pred).numel();
        if targets.len() != n || n == 0 {
            return Err(shape_err(format!("mse over {n} predictions with {} targets", targets.len())));
        }
        let nn = T::from_usize(n).unwrap();
        let loss = self.value(pred).data().iter().zip(&targets).map(|(&p, &y)| (p - y) * (p - y)).sum::<T>() / nn;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, targets }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        let buf = self.grad_buf(grads, v);
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot += f(i);
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (rows, k, n) = (av.rows(), bv.shape()[0], bv.shape()[1]);
                let ga = self.grad_buf(grads, *a);
                T::gemm(rows, n, k, g, false, bv.data(), true, ga, true);
                let gb = self.grad_buf(grads, *b);
                T::gemm(k, rows, n, av.data(), true, g, false, gb, true);
            }
            Op::AddBias { x, b } => {
                self.acc(grads, *x, |j| g[j]);
                let d = self.value(*b).numel();
                let gb = self.grad_buf(grads, *b);
                for row in g.chunks(d) {
                    for (s, &v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| g[j]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |j| g[j] * bd[j]);
                self.acc(grads, *b, |j| g[j] * ad[j]);
            }
            Op::AddBroadcast { x, y: yv } => {
                self.acc(grads, *x, |j| g[j]);
                let m = self.value(*yv).numel();
                let gy = self.grad_buf(grads, *yv);
                for chunk in g.chunks(m) {
                    for (s, &v) in gy.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, |j| g[j] * *c),
            Op::Relu(x) => self.acc(grads, *x, |j| if y[j] > T::zero() { g[j] } else { T::zero() }),
            Op::Sigmoid(x) => self.acc(grads, *x, |j| g[j] * y[j] * (T::one() - y[j])),
            Op::Tanh(x) => self.acc(grads, *x, |j| g[j] * (T::one() - y[j] * y[j])),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gd = self.value(*gain).data();
                let d = gd.len();
                let dn = T::from_usize(d).unwrap();
                {
                    let gg = self.grad_buf(grads, *gain);
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                {
                    let gbias = self.grad_buf(grads, *bias);
                    for row_g in g.chunks(d) {
                        for j in 0..d {
                            gbias[j] += row_g[j];
                        }
                    }
                }
                let gx = self.grad_buf(grads, *x);
                for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = row_g[j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * row_h[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        let dh = row_g[j] * gd[j];
                        gx[r * d + j] += rstd[r] * (dh - mean_dh - row_h[j] * mean_dh_h);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let gx = self.grad_buf(grads, *x);
                for (r, (row_g, row_y)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                    let dot: T = row_g.iter().zip(row_y).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += row_y[j] * (row_g[j] - dot);
                    }
                }
            }
            Op::BatchMatMul { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                {
                    let ga = self.grad_buf(grads, *a);
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // dA (k x m) = op(B) G^T
                            T::gemm(k, n, m, bi, *tb, gi, true, out, true);
                        } else {
                            // dA (m x k) = G op(B)^T
                            T::gemm(m, n, k, gi, false, bi, !*tb, out, true);
                        }
                    }
                }
                let gb = self.grad_buf(grads, *b);
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if *tb {
                        // dB (n x k) = G^T op(A)
                        T::gemm(n, m, k, gi, true, ai, *ta, out, true);
                    } else {
                        // dB (k x n) = op(A)^T G
                        T::gemm(k, m, n, ai, !*ta, gi, false, out, true);
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, seq, d) = (s[0], s[1], s[2]);
                let dk = d / heads;
                let gx = self.grad_buf(grads, *x);
                for bi in 0..b {
                    for t in 0..seq {
                        for h in 0..*heads {
                            let to = (bi * seq + t) * d + h * dk;
                            let from = ((bi * heads + h) * seq + t) * dk;
                            for j in 0..dk {
                                gx[to + j] += g[from + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, seq, dk) = (s[0] / heads, s[1], s[2]);
                let d = dk * heads;
                let gx = self.grad_buf(grads, *x);
                for bi in 0..b {
                    for t in 0..seq {
                        for h in 0..*heads {
                            let from = (bi * seq + t) * d + h * dk;
                            let to = ((bi * heads + h) * seq + t) * dk;
                            for j in 0..dk {
                                gx[to + j] += g[from + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, |j| g[j]),
            Op::SliceLast { x, start } => {
                let d = self.value(*x).last_dim();
                let len = node.value.last_dim();
                let gx = self.grad_buf(grads, *x);
                for (r, row) in g.chunks(len).enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        gx[r * d + start + j] += v;
                    }
                }
            }
            Op::SelectStep { x, t } => {
                let s = self.shape(*x);
                let (b, seq, d) = (s[0], s[1], s[2]);
                let gx = self.grad_buf(grads, *x);
                for bi in 0..b {
                    let off = (bi * seq + t) * d;
                    for j in 0..d {
                        gx[off + j] += g[bi * d + j];
                    }
                }
            }
            Op::StackSteps(steps) => {
                let s = node.value.shape();
                let (b, seq, d) = (s[0], s[1], s[2]);
                for (t, &v) in steps.iter().enumerate() {
                    let gv = self.grad_buf(grads, v);
                    for bi in 0..b {
                        let from = (bi * seq + t) * d;
                        for j in 0..d {
                            gv[bi * d + j] += g[from + j];
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => self.acc(grads, *x, |j| g[0] * weights[j]),
            Op::BceWithLogits { logits, targets, weights } => {
                let zd = self.value(*logits).data();
                let nn = T::from_usize(zd.len()).unwrap();
                self.acc(grads, *logits, |j| g[0] * weights[j] * (stable_sigmoid(zd[j]) - targets[j]) / nn);
            }
            Op::Mse { pred, targets } => {
                let pd = self.value(*pred).data();
                let nn = T::from_usize(pd.len()).unwrap();
                let two = T::one() + T::one();
                self.acc(grads, *pred, |j| g[0] * two * (pd[j] - targets[j]) / nn);
            }
        }
    }
}

/// Sigmoid that never evaluates `exp` of a large positive argument.
pub fn stable_sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}
