use std::collections::BTreeMap;

use super::conv::{conv2d_backward, conv2d_forward_cols, gemm, ConvGeom};
use super::{
    broadcast_binary, reduce_to_shape, ParamId, ParamStore, Result, Tensor, TensorError, EPS_STAT,
};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    IndexSelect(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    LogSoftmax(Var),
    Concat(Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | Minimum(a, b)
            | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Relu(a) | Tanh(a) | Exp(a) | Log(a)
            | Softplus(a) | Sqrt(a) | Square(a) | Clamp(a, _, _) | Sum(a) | Mean(a)
            | SumAxis(a, _) | Reshape(a) | IndexSelect(a, _) | Gather(a, _) | LogSoftmax(a) => {
                vec![*a]
            }
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so the index order is a valid
/// topological order and the reverse pass visits each node once. A tape
/// supports exactly one backward call; afterwards it is cleared and every
/// further use returns [`TensorError::TapeConsumed`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    version: Option<u64>,
}

/// Leaf gradients produced by one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
    version: Option<u64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Parameter-store version the forward pass was recorded against.
    pub fn version(&self) -> Option<u64> {
        self.version
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.values_mut().chain(self.leaves.values_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.nodes
            .get(v.0)
            .ok_or_else(|| TensorError::Invalid(format!("variable {} not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.version = Some(store.version());
        let v = self.leaf(store.get(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.node(v)?.value.clone();
        Ok(self.constant(t))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let out = broadcast_binary(op, &self.node(a)?.value, &self.node(b)?.value, f)?;
        Ok(self.push(out, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise maximum of equally shaped tensors; ties route to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let out = elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, f64::max);
        Ok(self.push(out, Op::Maximum(a, b)))
    }

    /// Elementwise minimum of equally shaped tensors; ties route to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let out = elementwise(&self.nodes[a.0].value, &self.nodes[b.0].value, f64::min);
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.node(a)?.value.map(f);
        Ok(self.push(out, op))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.node(a)?.value.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.node(a)?.value.data().iter().find(|&&x| x < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                value: bad,
            });
        }
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.node(a)?.value;
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid(format!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &t.data()[(o * n + j) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node(a)?.value.shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(a)?.value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.node(a)?.value.shape().to_vec();
        let rest = shape[1..].iter().product();
        self.reshape(a, &[shape[0], rest])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x · w + b` with `x: B×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(&self.node(b)?.value),
            None => None,
        };
        let (out, cols, geom) =
            conv2d_forward_cols(&self.node(x)?.value, &self.node(w)?.value, bias, stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                geom,
            },
        ))
    }

    /// Selects rows of the leading axis, `out[i] = a[idx[i]]`.
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.node(a)?.value;
        let rows = t.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!(
                "index_select: index {bad} out of range for {rows} rows"
            )));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::IndexSelect(a, idx.to_vec())))
    }

    /// Picks `a[b, idx[b]]` from a `B×A` matrix.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.node(a)?.value;
        let s = t.shape();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: s.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(b, &i)| t.data()[b * s[1] + i])
            .collect();
        Ok(self.push(Tensor::from_vec(data), Op::Gather(a, idx.to_vec())))
    }

    /// Row-wise log-softmax over the last axis of a `B×A` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let cols = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Row-wise probabilities from logits, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let l = self.log_softmax(a)?;
        self.exp(l)
    }

    /// Concatenates `B×k_i` matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.node(parts[0])?.value.shape().to_vec();
        let rows = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Per-sample, per-channel spatial mean and standard deviation of a
    /// `B×C×H×W` map: `σ = sqrt(mean((z−μ)²) + EPS_STAT)`, population
    /// divisor `H·W`. Both outputs are `B×C`.
    pub fn channel_stats(&mut self, z: Var) -> Result<(Var, Var)> {
        let shape = self.node(z)?.value.shape().to_vec();
        if shape.len() != 4 || shape[2] * shape[3] == 0 {
            return Err(TensorError::Invalid(format!(
                "channel_stats expects a non-empty B×C×H×W map, got {shape:?}"
            )));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let flat = self.reshape(z, &[b, c, hw])?;
        let mu = self.mean_axis(flat, 2)?;
        let mu3 = self.reshape(mu, &[b, c, 1])?;
        let centered = self.sub(flat, mu3)?;
        let sq = self.square(centered)?;
        let var = self.mean_axis(sq, 2)?;
        let var = self.add_scalar(var, EPS_STAT)?;
        let sigma = self.sqrt(var)?;
        Ok((mu, sigma))
    }

    /// Reverse pass from a scalar loss over every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let mut out = self.backward_multi(&[(loss, &|_| true)])?;
        Ok(out.pop().expect("one target"))
    }

    /// Several reverse passes over one recorded forward, each restricted to
    /// the parameters accepted by its filter (non-parameter leaves are always
    /// included). Nodes with no path to a selected leaf are skipped. The tape
    /// is cleared afterwards.
    #[allow(clippy::type_complexity)]
    pub fn backward_multi(
        &mut self,
        targets: &[(Var, &dyn Fn(ParamId) -> bool)],
    ) -> Result<Vec<Gradients>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        for &(loss, _) in targets {
            let t = &self.node(loss)?.value;
            if t.numel() != 1 {
                return Err(TensorError::NotScalar(t.shape().to_vec()));
            }
        }
        let result = targets
            .iter()
            .map(|&(loss, filter)| self.reverse(loss, filter))
            .collect();
        self.nodes.clear();
        self.consumed = true;
        Ok(result)
    }

    fn reverse(&self, loss: Var, filter: &dyn Fn(ParamId) -> bool) -> Gradients {
        let n = loss.0 + 1;
        let mut needed = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            needed[i] = match node.op {
                Op::Leaf => node.requires_grad && node.param.is_none_or(filter),
                ref op => op.inputs().iter().any(|v| needed[v.0]),
            };
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut leaves = BTreeMap::new();
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        if needed[loss.0] {
            grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        }
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if let Some(pid) = node.param {
                    match params.get_mut(&pid) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        None => {
                            params.insert(pid, g.clone());
                        }
                    }
                }
                leaves.insert(i, g);
                continue;
            }
            for (input, gi) in self.local_grads(i, &g, &needed) {
                accumulate(&mut grads[input.0], gi);
            }
        }
        Gradients {
            leaves,
            params,
            version: self.version,
        }
    }

    /// Vector-Jacobian products of node `i` for each of its needed inputs.
    fn local_grads(&self, i: usize, g: &Tensor, needed: &[bool]) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| needed[v.0];
        let y = &node.value;
        let mut out = Vec::with_capacity(2);
        let map_g = |f: &dyn Fn(f64, f64) -> f64, other: &Tensor| elementwise(g, other, f);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, reduce_to_shape(g, val(*a).shape())));
                }
                if need(*b) {
                    out.push((*b, reduce_to_shape(g, val(*b).shape())));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, reduce_to_shape(g, val(*a).shape())));
                }
                if need(*b) {
                    out.push((*b, reduce_to_shape(&g.map(|v| -v), val(*b).shape())));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let t = broadcast_binary("mul", g, val(*b), |x, y| x * y).expect("bcast");
                    out.push((*a, reduce_to_shape(&t, val(*a).shape())));
                }
                if need(*b) {
                    let t = broadcast_binary("mul", g, val(*a), |x, y| x * y).expect("bcast");
                    out.push((*b, reduce_to_shape(&t, val(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                if need(*a) {
                    let t = broadcast_binary("div", g, val(*b), |x, y| x / y).expect("bcast");
                    out.push((*a, reduce_to_shape(&t, val(*a).shape())));
                }
                if need(*b) {
                    // d(a/b)/db = -y/b
                    let gy = elementwise(g, y, |x, yv| -x * yv);
                    let t = broadcast_binary("div", &gy, val(*b), |x, y| x / y).expect("bcast");
                    out.push((*b, reduce_to_shape(&t, val(*b).shape())));
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let is_max = matches!(node.op, Op::Maximum(..));
                let pick_a: Vec<bool> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                let routed = |to_a: bool| {
                    let data = g
                        .data()
                        .iter()
                        .zip(&pick_a)
                        .map(|(&gv, &pa)| if pa == to_a { gv } else { 0.0 })
                        .collect();
                    Tensor::new(g.shape(), data).expect("same shape")
                };
                if need(*a) {
                    out.push((*a, routed(true)));
                }
                if need(*b) {
                    out.push((*b, routed(false)));
                }
            }
            Op::Neg(a) => out.push((*a, g.map(|v| -v))),
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * c))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Relu(a) => out.push((*a, map_g(&|gv, x| if x > 0.0 { gv } else { 0.0 }, val(*a)))),
            Op::Tanh(a) => out.push((*a, map_g(&|gv, t| gv * (1.0 - t * t), y))),
            Op::Exp(a) => out.push((*a, map_g(&|gv, e| gv * e, y))),
            Op::Log(a) => out.push((*a, map_g(&|gv, x| gv / x, val(*a)))),
            Op::Softplus(a) => out.push((*a, map_g(&|gv, x| gv * sigmoid(x), val(*a)))),
            Op::Sqrt(a) => out.push((*a, map_g(&|gv, s| gv / (2.0 * s), y))),
            Op::Square(a) => out.push((*a, map_g(&|gv, x| 2.0 * gv * x, val(*a)))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                out.push((
                    *a,
                    map_g(&|gv, x| if x >= lo && x <= hi { gv } else { 0.0 }, val(*a)),
                ))
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::Mean(a) => {
                let t = val(*a);
                out.push((*a, Tensor::full(t.shape(), g.item() / t.numel() as f64)))
            }
            Op::SumAxis(a, axis) => {
                let shape = val(*a).shape();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..][..inner];
                    for j in 0..n {
                        data[(o * n + j) * inner..][..inner].copy_from_slice(src);
                    }
                }
                out.push((*a, Tensor::new(shape, data).expect("shape")));
            }
            Op::Reshape(a) => out.push((*a, g.reshape(val(*a).shape()).expect("numel"))),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut ga, false);
                    out.push((*a, Tensor::new(&[m, k], ga).expect("shape")));
                }
                if need(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, false);
                    out.push((*b, Tensor::new(&[k, n], gb).expect("shape")));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                geom,
            } => {
                let (dx, dw, db) = conv2d_backward(g.data(), val(*w).data(), cols, geom, need(*x));
                if let Some(dx) = dx {
                    out.push((*x, Tensor::new(val(*x).shape(), dx).expect("shape")));
                }
                if need(*w) {
                    out.push((*w, Tensor::new(val(*w).shape(), dw).expect("shape")));
                }
                if let Some(b) = b {
                    if need(*b) {
                        out.push((*b, Tensor::from_vec(db)));
                    }
                }
            }
            Op::IndexSelect(a, idx) => {
                let t = val(*a);
                let inner: usize = t.shape()[1..].iter().product();
                let mut data = vec![0.0; t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, s) in data[i * inner..][..inner]
                        .iter_mut()
                        .zip(&g.data()[r * inner..][..inner])
                    {
                        *d += s;
                    }
                }
                out.push((*a, Tensor::new(t.shape(), data).expect("shape")));
            }
            Op::Gather(a, idx) => {
                let t = val(*a);
                let cols = t.shape()[1];
                let mut data = vec![0.0; t.numel()];
                for (b, &i) in idx.iter().enumerate() {
                    data[b * cols + i] = g.data()[b];
                }
                out.push((*a, Tensor::new(t.shape(), data).expect("shape")));
            }
            Op::LogSoftmax(a) => {
                let cols = *y.shape().last().unwrap_or(&1);
                let mut data = g.data().to_vec();
                for (row, ly) in data.chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let s: f64 = row.iter().sum();
                    for (d, l) in row.iter_mut().zip(ly) {
                        *d -= l.exp() * s;
                    }
                }
                out.push((*a, Tensor::new(y.shape(), data).expect("shape")));
            }
            Op::Concat(parts) => {
                let rows = y.shape()[0];
                let total = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if need(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..][..w]);
                        }
                        out.push((p, Tensor::new(&[rows, w], data).expect("shape")));
                    }
                    offset += w;
                }
            }
        }
        out.retain(|(v, _)| need(*v));
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1., 2.]));
        let b = tape.constant(Tensor::from_vec(vec![3., 4.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4., 6.]);
        let one = tape.constant(Tensor::from_vec(vec![1.]));
        let row = tape.constant(Tensor::from_vec(vec![1., 2., 3.]));
        let d = tape.add(one, row).unwrap();
        assert_eq!(tape.value(d).data(), &[2., 3., 4.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = tape.mul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "mul",
                lhs: vec![2],
                rhs: vec![3]
            }
        );
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[2, 3], vec![0.5, -1., 2., 3., -4., 7.]).unwrap();
        let a = tape.constant(x.clone());
        let o = tape.constant(Tensor::ones_like(&x));
        let y = tape.mul(a, o).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn matmul_values_and_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let mv = tape.constant(m.clone());
        let r = tape.matmul(eye, mv).unwrap();
        assert_eq!(tape.value(r), &m);
        assert!(matches!(
            tape.matmul(a, a),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn nonlinearities() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1., 0., 2.]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
        let z = tape.constant(Tensor::scalar(0.0));
        let th = tape.tanh(z).unwrap();
        assert_eq!(tape.value(th).item(), 0.0);
        let sp = tape.softplus(z).unwrap();
        assert!((tape.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(tape.log(x), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[2, 2], &[0., 0., 1f64.ln(), 3f64.ln()]));
        let p = tape.softmax(l).unwrap();
        let pv = tape.value(p).data().to_vec();
        assert!((pv[0] - 0.5).abs() < 1e-15 && (pv[1] - 0.5).abs() < 1e-15);
        assert!((pv[2] - 0.25).abs() < 1e-12 && (pv[3] - 0.75).abs() < 1e-12);
        let shifted = tape.constant(t(&[2, 2], &[5., 5., 1f64.ln() + 100., 3f64.ln() + 100.]));
        let q = tape.softmax(shifted).unwrap();
        assert!(tape.value(q).max_abs_diff(tape.value(p)) < 1e-12);
        let bad = tape.constant(t(&[1, 2], &[f64::NAN, 0.]));
        assert!(matches!(tape.softmax(bad), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn channel_stats_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let (mu, sigma) = tape.channel_stats(z).unwrap();
        assert_eq!(tape.value(mu).data(), &[2.5]);
        assert!((tape.value(sigma).item() - (1.25f64 + EPS_STAT).sqrt()).abs() < 1e-15);
        assert!((tape.value(sigma).item() - 1.118034).abs() < 1e-5);
        let c = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.0));
        let (mu, sigma) = tape.channel_stats(c).unwrap();
        assert_eq!(tape.value(mu).data(), &[3.0, 3.0]);
        assert!((tape.value(sigma).data()[0] - EPS_STAT.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![0.3; 6]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Tensor::ones(&[2, 3]));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.is_empty() && tape.is_consumed());
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed);
        assert_eq!(tape.relu(x).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn filtered_reverse_skips_unselected_params() {
        use crate::tensor::ParamGroup;
        let mut store = ParamStore::new();
        let pa = store.add("a", ParamGroup::Actor, Tensor::scalar(2.0));
        let pb = store.add("b", ParamGroup::Generator, Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, pa);
        let b = tape.param(&store, pb);
        let y = tape.mul(a, b).unwrap();
        let ny = tape.neg(y).unwrap();
        let grads = tape
            .backward_multi(&[(y, &|p| p == pa), (ny, &|p| p == pb)])
            .unwrap();
        assert_eq!(grads[0].param(pa).unwrap().item(), 5.0);
        assert!(grads[0].param(pb).is_none());
        assert_eq!(grads[1].param(pb).unwrap().item(), -2.0);
        assert!(grads[1].param(pa).is_none());
        assert_eq!(grads[0].version(), Some(store.version()));
    }
}
