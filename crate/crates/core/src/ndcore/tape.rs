//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Nodes are appended in evaluation order, which is a topological order, so
//! the backward pass is a single reverse sweep from the output node.

use super::tensor::Tensor;
use super::{dot, norm, softmax_t_unchecked};
use crate::error::{Error, Result};
use crate::instrument;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x Wᵀ + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    /// Row `k` is the mean of all prompt rows together with class row `k`.
    PoolTokens { prompt: NodeId, classes: NodeId },
    NormalizeRows(NodeId),
    /// `[n, d] x [k, d] -> [n, k]` matrix of row cosine similarities.
    CosineRows { a: NodeId, b: NodeId },
    /// Row-wise `softmax(tau * x)`.
    SoftmaxRows { x: NodeId, tau: f64 },
    Log(NodeId),
    /// Picks `x[i, index[i]]` from each row.
    Gather { x: NodeId, index: Vec<usize> },
    Sum(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(t, true)
    }

    /// A detached input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        if !value.all_finite() {
            return Err(Error::InvalidValue(format!("non-finite result from {op:?}")));
        }
        let needs_grad = inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dense { x, w, b })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(x))
    }

    pub fn pool_tokens(&mut self, prompt: NodeId, classes: NodeId) -> Result<NodeId> {
        self.push(Op::PoolTokens { prompt, classes })
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::NormalizeRows(x))
    }

    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::CosineRows { a, b })
    }

    pub fn softmax_rows(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
        }
        self.push(Op::SoftmaxRows { x, tau })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Log(x))
    }

    pub fn gather(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Gather { x, index })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(x, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        self.eval_with(op, |id| &self.nodes[id.0].value)
    }

    fn eval_with<'a>(&self, op: &Op, get: impl Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
        Ok(match op {
            Op::Leaf => unreachable!("leaves carry their value"),
            Op::Dense { x, w, b } => {
                let (x, w, b) = (get(*x), get(*w), get(*b));
                if x.cols() != w.cols() || b.len() != w.rows() {
                    return Err(Error::Shape(format!(
                        "dense: x {:?}, w {:?}, b {:?}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    )));
                }
                let (n, out) = (x.rows(), w.rows());
                let mut data = Vec::with_capacity(n * out);
                for i in 0..n {
                    let xi = x.row(i);
                    for o in 0..out {
                        data.push(dot(w.row(o), xi) + b.data()[o]);
                    }
                }
                Tensor::from_parts(vec![n, out], data)
            }
            Op::Tanh(x) => get(*x).map(f64::tanh),
            Op::PoolTokens { prompt, classes } => {
                let (p, c) = (get(*prompt), get(*classes));
                if p.cols() != c.cols() {
                    return Err(Error::Shape("pool: token widths differ".into()));
                }
                let d = p.cols();
                let denom = (p.rows() + 1) as f64;
                let mut psum = vec![0.0; d];
                for j in 0..p.rows() {
                    for (s, v) in psum.iter_mut().zip(p.row(j)) {
                        *s += v;
                    }
                }
                let mut data = Vec::with_capacity(c.rows() * d);
                for k in 0..c.rows() {
                    data.extend(psum.iter().zip(c.row(k)).map(|(s, v)| (s + v) / denom));
                }
                Tensor::from_parts(vec![c.rows(), d], data)
            }
            Op::NormalizeRows(x) => {
                let x = get(*x);
                let mut out = x.clone();
                for i in 0..x.rows() {
                    let n = norm(x.row(i));
                    if n < super::NORM_EPS {
                        return Err(Error::DegenerateEmbedding(super::NORM_EPS));
                    }
                    out.row_mut(i).iter_mut().for_each(|v| *v /= n);
                }
                out
            }
            Op::CosineRows { a, b } => {
                let (a, b) = (get(*a), get(*b));
                if a.cols() != b.cols() {
                    return Err(Error::Shape("cosine: widths differ".into()));
                }
                let na: Vec<f64> = (0..a.rows()).map(|i| norm(a.row(i))).collect();
                let nb: Vec<f64> = (0..b.rows()).map(|k| norm(b.row(k))).collect();
                if na.iter().chain(&nb).any(|&n| n < super::NORM_EPS) {
                    return Err(Error::DegenerateVector(super::NORM_EPS));
                }
                let mut data = Vec::with_capacity(a.rows() * b.rows());
                for i in 0..a.rows() {
                    for k in 0..b.rows() {
                        data.push(dot(a.row(i), b.row(k)) / (na[i] * nb[k]));
                    }
                }
                Tensor::from_parts(vec![a.rows(), b.rows()], data)
            }
            Op::SoftmaxRows { x, tau } => {
                let x = get(*x);
                let mut out = x.clone();
                for i in 0..x.rows() {
                    let s = softmax_t_unchecked(x.row(i), *tau);
                    out.row_mut(i).copy_from_slice(&s);
                }
                out
            }
            Op::Log(x) => get(*x).map(f64::ln),
            Op::Gather { x, index } => {
                let x = get(*x);
                if index.len() != x.rows() || index.iter().any(|&k| k >= x.cols()) {
                    return Err(Error::Shape("gather: bad index".into()));
                }
                let data = index.iter().enumerate().map(|(i, &k)| x.row(i)[k]).collect();
                Tensor::from_parts(vec![index.len()], data)
            }
            Op::Sum(x) => Tensor::scalar(get(*x).data().iter().sum()),
            Op::Scale(x, s) => get(*x).scale(*s),
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (get(*a), get(*b));
                if a.shape() != b.shape() {
                    return Err(Error::Shape("elementwise: shapes differ".into()));
                }
                if matches!(op, Op::Add(..)) {
                    a.add(b)
                } else {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_parts(a.shape().to_vec(), data)
                }
            }
        })
    }

    /// Recomputes every non-leaf node from the recorded leaves and returns
    /// the value of `output`.
    pub fn replay(&self, output: NodeId) -> Result<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes[..=output.0] {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    // Values are only read from already-replayed slots.
                    let vals = &values;
                    self.eval_with(op, |id| &vals[id.0])?
                }
            };
            values.push(v);
        }
        Ok(values.pop().expect("output exists"))
    }

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    pub fn backward(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidTape("output node not on tape".into()));
        }
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::InvalidTape(format!(
                "output has shape {:?}, expected a scalar",
                self.nodes[output.0].value.shape()
            )));
        }
        instrument::backward_pass();

        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::from_parts(
            self.nodes[output.0].value.shape().to_vec(),
            vec![1.0],
        ));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Keep the gradient around in case it was requested.
            grads[idx] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|id| {
                grads
                    .get(id.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()))
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, out, inp) = (xv.rows(), wv.rows(), wv.cols());
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; n * inp];
                    for i in 0..n {
                        for o in 0..out {
                            let go = g.data()[i * out + o];
                            for (gxi, wv) in gx[i * inp..(i + 1) * inp].iter_mut().zip(wv.row(o)) {
                                *gxi += go * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut gw = vec![0.0; out * inp];
                    for i in 0..n {
                        for o in 0..out {
                            let go = g.data()[i * out + o];
                            for (gwv, xv) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xv.row(i)) {
                                *gwv += go * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; out];
                    for i in 0..n {
                        for o in 0..out {
                            gb[o] += g.data()[i * out + o];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
            }
            Op::Tanh(x) => {
                let data = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::PoolTokens { prompt, classes } => {
                let (pv, cv) = (val(*prompt), val(*classes));
                let denom = (pv.rows() + 1) as f64;
                let d = cv.cols();
                if self.nodes[prompt.0].needs_grad {
                    let mut col = vec![0.0; d];
                    for k in 0..cv.rows() {
                        for (c, gv) in col.iter_mut().zip(g.row(k)) {
                            *c += gv;
                        }
                    }
                    let mut gp = Vec::with_capacity(pv.len());
                    for _ in 0..pv.rows() {
                        gp.extend(col.iter().map(|c| c / denom));
                    }
                    self.accumulate(grads, *prompt, Tensor::from_parts(pv.shape().to_vec(), gp));
                }
                if self.nodes[classes.0].needs_grad {
                    self.accumulate(grads, *classes, g.scale(1.0 / denom));
                }
            }
            Op::NormalizeRows(x) => {
                let xv = val(*x);
                let mut gx = g.clone();
                for i in 0..xv.rows() {
                    let n = norm(xv.row(i));
                    let yi = y.row(i);
                    let proj = dot(yi, g.row(i));
                    for (gxv, yv) in gx.row_mut(i).iter_mut().zip(yi) {
                        *gxv = (*gxv - yv * proj) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CosineRows { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let d = av.cols();
                let na: Vec<f64> = (0..av.rows()).map(|i| norm(av.row(i))).collect();
                let nb: Vec<f64> = (0..bv.rows()).map(|k| norm(bv.row(k))).collect();
                let kk = bv.rows();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..av.rows() {
                    for k in 0..kk {
                        let gik = g.data()[i * kk + k];
                        let s = y.data()[i * kk + k];
                        for t in 0..d {
                            let ah = av.row(i)[t] / na[i];
                            let bh = bv.row(k)[t] / nb[k];
                            ga[i * d + t] += gik * (bh - s * ah) / na[i];
                            gb[k * d + t] += gik * (ah - s * bh) / nb[k];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::SoftmaxRows { x, tau } => {
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let yi = y.row(i);
                    let inner = dot(yi, g.row(i));
                    for (gxv, yv) in gx.row_mut(i).iter_mut().zip(yi) {
                        *gxv = tau * yv * (*gxv - inner);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let data = g.data().iter().zip(val(*x).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::Gather { x, index } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for (i, &k) in index.iter().enumerate() {
                    gx.row_mut(i)[k] += g.data()[i];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), vec![gv; xv.len()]));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                let gb = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Dense { x, w, b } => vec![*x, *w, *b],
        Op::PoolTokens { prompt, classes } => vec![*prompt, *classes],
        Op::CosineRows { a, b } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Tanh(x)
        | Op::NormalizeRows(x)
        | Op::SoftmaxRows { x, .. }
        | Op::Log(x)
        | Op::Gather { x, .. }
        | Op::Sum(x)
        | Op::Scale(x, _) => vec![*x],
    }
}
