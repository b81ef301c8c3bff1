use super::conv::{self, ConvGeometry};
use super::{dot, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Input or parameter; nothing upstream.
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[R×C] + [C]`
    AddBias(Var, Var),
    Relu(Var),
    Softmax(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    /// Multiplies row `i` by a constant factor.
    RowScale { x: Var, factors: Vec<f64> },
    /// Elementwise product with a constant (already rescaled) dropout mask.
    Dropout { x: Var, mask: Vec<f64> },
    RowMax { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Scalars gathered into a `[1×N]` row.
    Stack(Vec<Var>),
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry, cols: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Arena of recorded operations. Nodes are appended in execution order, so
/// every input precedes its consumers and a single reverse sweep suffices.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate(buf: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    buf.get_or_insert_with(|| vec![0.0; len])
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

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` when any input needs a gradient; otherwise stores the
    /// value as a constant so no backward state is retained.
    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.value(a).require_matrix("transpose")?;
        let out = self.value(a).transpose();
        Ok(self.record(out, Op::Transpose(a), &[a]))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.record(out, Op::Scale(a, s), &[a])
    }

    /// Adds a length-C bias vector to every row of an `R×C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = tx.require_matrix("add_bias")?;
        if tb.len() != c {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.record(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::Relu(x), &[x])
    }

    /// Softmax over the trailing dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if t.rank() == 0 || c == 0 {
            return Err(Error::dim("softmax_lastdim", t.shape(), &[]));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Softmax(x), &[x]))
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = t.require_matrix("l2_normalize_rows")?;
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c.max(1)) {
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.record(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Multiplies row `i` by `factors[i]`; the factors are constants.
    pub fn row_scale(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.require_matrix("row_scale")?;
        if factors.len() != r {
            return Err(Error::dim("row_scale", t.shape(), &[factors.len()]));
        }
        let mut data = t.data().to_vec();
        for (row, f) in data.chunks_mut(c.max(1)).zip(factors) {
            for v in row.iter_mut() {
                *v *= f;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let op = Op::RowScale {
            x,
            factors: factors.to_vec(),
        };
        Ok(self.record(out, op, &[x]))
    }

    /// Inverted dropout. `keep[i]` decides whether element `i` survives;
    /// survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(Error::dim("dropout", t.shape(), &[keep.len()]));
        }
        let s = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Row maxima as an `R×1` column. The gradient flows only to the
    /// lowest-index maximal entry of each row.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let argmax = super::rowwise_argmax(self.value(x))?;
        let t = self.value(x);
        let data: Vec<f64> = argmax.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let out = Tensor::new(vec![data.len(), 1], data)?;
        Ok(self.record(out, Op::RowMax { x, argmax }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.record(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = t.require_matrix("slice_rows")?;
        if start + len > r {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let out = t.slice_rows(start, len);
        Ok(self.record(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::vstack(&tensors)?;
        Ok(self.record(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).require_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.record(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Gathers one-element tensors into a `[1×N]` row vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for s in scalars {
            let t = self.value(*s);
            if t.len() != 1 {
                return Err(Error::dim("stack", t.shape(), &[1]));
            }
            data.push(t.data()[0]);
        }
        let out = Tensor::new(vec![1, data.len()], data)?;
        Ok(self.record(out, Op::Stack(scalars.to_vec()), scalars))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape(x), &[x]))
    }

    /// Mean softmax cross-entropy of `[B×N]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, n) = t.require_matrix("cross_entropy")?;
        if targets.len() != b || n == 0 {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= n) {
            return Err(Error::Contract(format!("target {bad} out of range for {n} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(n).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / b as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.record(out, op, &[logits]))
    }

    /// Square-kernel convolution with stride 1 and zero "same" padding.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, cin, h, wd], &[cout, cin2, k, k2]) = (tx.shape(), tw.shape()) else {
            return Err(Error::dim("conv2d", tx.shape(), tw.shape()));
        };
        if cin != cin2 || k != k2 || k % 2 == 0 || tb.len() != cout {
            return Err(Error::dim("conv2d", tx.shape(), tw.shape()));
        }
        let geom = ConvGeometry {
            batch,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: wd,
            kernel: k,
        };
        let keep = [x, w, b].iter().any(|v| self.nodes[v.0].requires_grad);
        let (out, cols) = conv::conv2d_forward(tx.data(), tw.data(), tb.data(), &geom, keep);
        let out = Tensor::new(vec![batch, cout, h, wd], out)?;
        Ok(self.record(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// 2×2 max pooling, stride 2, over `[B, C, H, W]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[b, c, h, w] = t.shape() else {
            return Err(Error::dim("max_pool2", t.shape(), &[]));
        };
        if h < 2 || w < 2 {
            return Err(Error::dim("max_pool2", t.shape(), &[2, 2]));
        }
        let (out, argmax) = conv::maxpool2_forward(t.data(), b * c, h, w);
        let out = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        Ok(self.record(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Spatial mean of `[B, C, H, W]`, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[b, c, h, w] = t.shape() else {
            return Err(Error::dim("global_avg_pool", t.shape(), &[]));
        };
        let hw = (h * w) as f64;
        let data = t.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let out = Tensor::new(vec![b, c], data)?;
        Ok(self.record(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Reverse sweep from a one-element `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(g) => g.data_mut().iter_mut().zip(&dy).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), dy)?),
                }
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let len = |v: &Var| nodes[v.0].value.len();
        let val = |v: &Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = (val(a).rows(), val(a).cols());
                let r = val(b).cols();
                if wants(a) {
                    let g = accumulate(&mut grads[a.0], p * q);
                    matmul_nt_acc(dy, val(b).data(), p, r, q, g);
                }
                if wants(b) {
                    let g = accumulate(&mut grads[b.0], q * r);
                    matmul_tn_acc(val(a).data(), dy, p, q, r, g);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(a).rows(), val(a).cols());
                let g = accumulate(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += dy[j * r + i];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    let g = accumulate(&mut grads[a.0], dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if wants(b) {
                    let g = accumulate(&mut grads[b.0], dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let other = val(b).data();
                    let g = accumulate(&mut grads[a.0], dy.len());
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(other) {
                        *g += d * o;
                    }
                }
                if wants(b) {
                    let other = val(a).data();
                    let g = accumulate(&mut grads[b.0], dy.len());
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(other) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                let g = accumulate(&mut grads[a.0], dy.len());
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d);
            }
            Op::AddBias(x, b) => {
                let c = val(b).len();
                if wants(x) {
                    let g = accumulate(&mut grads[x.0], dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if wants(b) {
                    let g = accumulate(&mut grads[b.0], c);
                    for row in dy.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Relu(x) => {
                let g = accumulate(&mut grads[x.0], dy.len());
                for ((g, d), o) in g.iter_mut().zip(dy).zip(y.data()) {
                    if *o > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let g = accumulate(&mut grads[x.0], dy.len());
                for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.data().chunks(c)) {
                    let s = dot(dr, yr);
                    for ((g, d), yv) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += yv * (d - s);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = y.cols();
                let g = accumulate(&mut grads[x.0], dy.len());
                for (((gr, dr), yr), n) in g
                    .chunks_mut(c)
                    .zip(dy.chunks(c))
                    .zip(y.data().chunks(c))
                    .zip(norms)
                {
                    if *n == 0.0 {
                        continue;
                    }
                    let s = dot(dr, yr);
                    for ((g, d), yv) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += (d - yv * s) / n;
                    }
                }
            }
            Op::RowScale { x, factors } => {
                let c = y.cols();
                let g = accumulate(&mut grads[x.0], dy.len());
                for ((gr, dr), f) in g.chunks_mut(c).zip(dy.chunks(c)).zip(factors) {
                    gr.iter_mut().zip(dr).for_each(|(g, d)| *g += f * d);
                }
            }
            Op::Dropout { x, mask } => {
                let g = accumulate(&mut grads[x.0], dy.len());
                for ((g, d), m) in g.iter_mut().zip(dy).zip(mask) {
                    *g += d * m;
                }
            }
            Op::RowMax { x, argmax } => {
                let c = val(x).cols();
                let g = accumulate(&mut grads[x.0], len(x));
                for (i, &j) in argmax.iter().enumerate() {
                    g[i * c + j] += dy[i];
                }
            }
            Op::Sum(x) => {
                let g = accumulate(&mut grads[x.0], len(x));
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::Mean(x) => {
                let n = len(x);
                let g = accumulate(&mut grads[x.0], n);
                let d = dy[0] / n as f64;
                g.iter_mut().for_each(|g| *g += d);
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                let g = accumulate(&mut grads[x.0], len(x));
                g[start * c..start * c + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(p);
                    if wants(p) {
                        let g = accumulate(&mut grads[p.0], n);
                        g.iter_mut()
                            .zip(&dy[offset..offset + n])
                            .for_each(|(g, d)| *g += d);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                for p in parts {
                    let (r, c) = (val(p).rows(), val(p).cols());
                    if wants(p) {
                        let g = accumulate(&mut grads[p.0], r * c);
                        for i in 0..r {
                            let src = &dy[i * total + col..i * total + col + c];
                            g[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    col += c;
                }
            }
            Op::Stack(parts) => {
                for (p, d) in parts.iter().zip(dy) {
                    if wants(p) {
                        accumulate(&mut grads[p.0], 1)[0] += d;
                    }
                }
            }
            Op::Reshape(x) => {
                let g = accumulate(&mut grads[x.0], dy.len());
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = val(logits).cols();
                let scale = dy[0] / targets.len() as f64;
                let g = accumulate(&mut grads[logits.0], probs.len());
                for (b, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        g[b * n + j] += scale * (probs[b * n + j] - onehot);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let mut gx = wants(x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len(x)]));
                let mut gw = wants(w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; len(w)]));
                let mut gb = wants(b).then(|| grads[b.0].take().unwrap_or_else(|| vec![0.0; len(b)]));
                conv::conv2d_backward(
                    dy,
                    val(w).data(),
                    cols,
                    geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                grads[x.0] = gx.or(grads[x.0].take());
                grads[w.0] = gw.or(grads[w.0].take());
                grads[b.0] = gb.or(grads[b.0].take());
            }
            Op::MaxPool2 { x, argmax } => {
                let g = accumulate(&mut grads[x.0], len(x));
                for (&src, d) in argmax.iter().zip(dy) {
                    g[src] += d;
                }
            }
            Op::GlobalAvgPool(x) => {
                let t = val(x);
                let hw = t.shape()[2] * t.shape()[3];
                let g = accumulate(&mut grads[x.0], t.len());
                for (plane, d) in g.chunks_mut(hw).zip(dy) {
                    let v = d / hw as f64;
                    plane.iter_mut().for_each(|g| *g += v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]));
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out), tape.value(b));

        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]));
        let c = tape.constant(Tensor::from_rows(&[[3.0], [4.0]]));
        let out = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);

        let z = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]));
        let ones = tape.constant(Tensor::from_rows(&[[1.0], [1.0]]));
        let out = tape.matmul(z, ones).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        for (input, expected) in [
            ([0.0, 0.0], [0.5, 0.5]),
            ([1000.0, 1000.0], [0.5, 0.5]),
            ([0.0, 3f64.ln()], [0.25, 0.75]),
        ] {
            let x = tape.constant(Tensor::from_rows(&[input]));
            let y = tape.softmax_lastdim(x).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(expected) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_rejects_empty_last_dim() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(tape.softmax_lastdim(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[3.0, 4.0]]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert!(tape.value(y).max_abs_diff(&Tensor::from_rows(&[[0.6, 0.8]])) < 1e-15);

        let x = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y), &Tensor::identity(2));
    }

    #[test]
    fn rowwise_argmax_examples() {
        use crate::tensor::rowwise_argmax;
        assert_eq!(rowwise_argmax(&Tensor::from_rows(&[[0.1, 0.9]])).unwrap(), vec![1]);
        assert_eq!(rowwise_argmax(&Tensor::from_rows(&[[0.5, 0.5]])).unwrap(), vec![0]);
        assert_eq!(rowwise_argmax(&Tensor::from_rows(&[[7.0]])).unwrap(), vec![0]);
    }

    #[test]
    fn backward_linear_map() {
        // loss = sum(W·x), x = [1, 2]ᵀ  ⇒  dW = [1, 2]
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[[0.3, -0.7]]));
        let x = tape.constant(Tensor::from_rows(&[[1.0], [2.0]]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_softmax_pick() {
        // d softmax(x)_0 / dx at x = [0, 0] is [0.25, -0.25].
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[[0.0, 0.0]]));
        let y = tape.softmax_lastdim(x).unwrap();
        let pick = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]));
        let picked = tape.mul(y, pick).unwrap();
        let loss = tape.sum(picked);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_constant_loss_is_a_no_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[[1.0, 2.0]]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn constants_do_not_retain_backward_state() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::identity(3));
        let b = tape.matmul(a, a).unwrap();
        assert!(!tape.requires_grad(b));
        let p = tape.param(Tensor::identity(3));
        let c = tape.matmul(b, p).unwrap();
        assert!(tape.requires_grad(c));
    }
}
