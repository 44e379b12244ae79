use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{col2im_add, conv_from_cols, gemm, im2col};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, cols: Vec<f64>, batch: usize, dims: [usize; 4] },
    ChannelMax { input: Var, argmax: Vec<u32> },
    Linear { input: Var, weight: Var, bias: Var, rows: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Reshape(Var),
    Attend { input: Var, offset: usize, stride: usize },
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    RowCrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Sum(Var),
    AddN(Vec<Var>),
    Gather { input: Var, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Single owner; build one per
/// independent forward pass.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    /// Drops every recorded node. Vars from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        &self.nodes[v.index as usize]
    }

    fn owns(&self, v: Var) -> bool {
        v.tape == self.id && (v.index as usize) < self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let v = Var { tape: self.id, index: self.nodes.len() as u32 };
        self.nodes.push(Node { value, op, requires_grad });
        v
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Same-size 2-D cross-correlation with odd kernel `k`.
    ///
    /// `input` is `C×H×W` or `N×C×H×W`, `kernel` is `O×C×k×k`, `bias` is `O`.
    /// Outside the image, channel `c` reads as `pad[c]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let kt = self.value(kernel);
        let (batch, c, h, w) = match x.shape()[..] {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Shape(format!("conv2d input {:?}", x.shape()))),
        };
        let [o, kc, k, k2] = kt.shape()[..] else {
            return Err(Error::Shape(format!("conv2d kernel {:?}", kt.shape())));
        };
        if kc != c || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!("kernel {:?} for input {:?}", kt.shape(), x.shape())));
        }
        if self.value(bias).len() != o || pad.len() != c {
            return Err(Error::Shape("conv2d bias or pad length".into()));
        }
        let hw = h * w;
        let keep_cols = self.node(kernel).requires_grad;
        let mut cols = Vec::new();
        let mut out = vec![0.0; batch * o * hw];
        let b = self.value(bias).data();
        for n in 0..batch {
            let sample = im2col(&x.data()[n * c * hw..(n + 1) * c * hw], c, h, w, k, pad);
            conv_from_cols(&sample, kt.data(), b, hw, &mut out[n * o * hw..(n + 1) * o * hw]);
            if keep_cols {
                cols.extend_from_slice(&sample);
            }
        }
        let shape = if x.shape().len() == 3 { vec![o, h, w] } else { vec![batch, o, h, w] };
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::Conv2d { input, kernel, bias, cols, batch, dims: [c, h, w, k] },
            rg,
        ))
    }

    /// Per-pixel maximum over channels of a `C×H×W` tensor, giving `1×H×W`.
    /// Ties go to the lowest channel.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::Shape(format!("channel_max input {:?}", x.shape())));
        };
        let hw = h * w;
        let d = x.data();
        let mut values = d[..hw].to_vec();
        let mut argmax = vec![0u32; hw];
        for ch in 1..c {
            let plane = &d[ch * hw..(ch + 1) * hw];
            for ((v, a), &q) in values.iter_mut().zip(argmax.iter_mut()).zip(plane) {
                if q > *v {
                    *v = q;
                    *a = ch as u32;
                }
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::from_vec(vec![1, h, w], values), Op::ChannelMax { input, argmax }, rg))
    }

    /// `y = W x + b` for `x` of shape `[in]` or `[N, in]`, `W` of `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let [out_dim, in_dim] = wt.shape()[..] else {
            return Err(Error::Shape(format!("linear weight {:?}", wt.shape())));
        };
        let (rows, shape) = match x.shape()[..] {
            [n] if n == in_dim => (1, vec![out_dim]),
            [r, n] if n == in_dim => (r, vec![r, out_dim]),
            _ => return Err(Error::Shape(format!("linear input {:?} for weight {:?}", x.shape(), wt.shape()))),
        };
        let b = self.value(bias);
        if b.len() != out_dim {
            return Err(Error::Shape(format!("linear bias {:?}", b.shape())));
        }
        let mut y: Vec<f64> = (0..rows).flat_map(|_| b.data().iter().copied()).collect();
        gemm(
            rows,
            in_dim,
            out_dim,
            x.data(),
            (in_dim as isize, 1),
            wt.data(),
            (1, in_dim as isize),
            1.0,
            &mut y,
            (out_dim as isize, 1),
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(Tensor::from_vec(shape, y), Op::Linear { input, weight, bias, rows }, rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(input).map(f);
        let rg = self.needs(&[input]);
        self.push(y, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.unary(x, |v| a * v, Op::Scale(x, a))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(Error::Shape(format!("elementwise {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::from_vec(x.shape().to_vec(), data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Flattens and concatenates into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    /// `len` consecutive elements of the flattened input, as a vector.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if len == 0 || start + len > x.len() {
            return Err(Error::Shape(format!("slice {start}..{} of {}", start + len, x.len())));
        }
        let t = Tensor::vector(x.data()[start..start + len].to_vec());
        let rg = self.needs(&[input]);
        Ok(self.push(t, Op::Slice { input, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    /// The channel vector of a `C×H×W` tensor at one cell.
    pub fn attend(&mut self, input: Var, row: usize, col: usize) -> Result<Var> {
        let x = self.value(input);
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::Shape(format!("attend input {:?}", x.shape())));
        };
        if row >= h || col >= w {
            return Err(Error::OutOfBounds(format!("attention at ({row}, {col}) in {h}×{w}")));
        }
        let offset = row * w + col;
        let stride = h * w;
        let t = Tensor::vector((0..c).map(|ch| x.data()[ch * stride + offset]).collect());
        let rg = self.needs(&[input]);
        Ok(self.push(t, Op::Attend { input, offset, stride }, rg))
    }

    /// `-log softmax(logits)[label]` as a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::OutOfBounds(format!("label {label} for {} logits", z.len())));
        }
        let probs = softmax(z.data());
        let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[label];
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, label, probs }, rg))
    }

    /// `Σ_n weights[n] · CE(logits[n], labels[n])` over the rows of an `N×C`
    /// tensor.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        let [n, c] = z.shape()[..] else {
            return Err(Error::Shape(format!("row cross-entropy input {:?}", z.shape())));
        };
        if labels.len() != n || weights.len() != n {
            return Err(Error::Shape(format!("{n} rows, {} labels, {} weights", labels.len(), weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::OutOfBounds(format!("label {bad} for {c} logits")));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for ((row, &label), &w) in z.data().chunks(c).zip(labels).zip(weights) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += w * (lse - row[label]);
            probs.extend(softmax(row));
        }
        let rg = self.needs(&[logits]);
        let op = Op::RowCrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Elementwise sum of equally sized tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("add_n of nothing"))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            if v.len() != acc.len() {
                return Err(Error::Shape(format!("add_n {:?} vs {:?}", acc.shape(), v.shape())));
            }
            acc.add_assign(v);
        }
        let rg = self.needs(parts);
        Ok(self.push(acc, Op::AddN(parts.to_vec()), rg))
    }

    /// One LSTM step over `[x, h]`. `weight` is `4H × (X+H)` with gate blocks
    /// ordered input, forget, cell, output. Returns `(h', c')`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
        let hs = self.value(h).len();
        let xs = self.value(x).len();
        if self.value(c).len() != hs || self.value(weight).shape() != [4 * hs, xs + hs] {
            return Err(Error::Shape(format!(
                "lstm_cell x {xs}, h {hs}, c {}, weight {:?}",
                self.value(c).len(),
                self.value(weight).shape()
            )));
        }
        let xh = self.concat(&[x, h]);
        let z = self.linear(xh, weight, bias)?;
        let zi = self.slice(z, 0, hs)?;
        let zf = self.slice(z, hs, hs)?;
        let zg = self.slice(z, 2 * hs, hs)?;
        let zo = self.slice(z, 3 * hs, hs)?;
        let i = self.sigmoid(zi);
        let f = self.sigmoid(zf);
        let g = self.tanh(zg);
        let o = self.sigmoid(zo);
        let keep = self.mul(f, c)?;
        let write = self.mul(i, g)?;
        let c2 = self.add(keep, write)?;
        let squashed = self.tanh(c2);
        let h2 = self.mul(o, squashed)?;
        Ok((h2, c2))
    }

    /// Picks `input[n, indices[n]]` from an `N×C` tensor.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let [n, c] = x.shape()[..] else {
            return Err(Error::Shape(format!("gather input {:?}", x.shape())));
        };
        if indices.len() != n || indices.iter().any(|&i| i >= c) {
            return Err(Error::Shape("gather indices".into()));
        }
        let t = Tensor::vector(indices.iter().enumerate().map(|(r, &i)| x.data()[r * c + i]).collect());
        let rg = self.needs(&[input]);
        Ok(self.push(t, Op::Gather { input, indices: indices.to_vec() }, rg))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to each var
    /// in `wrt`. Vars the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if !self.owns(loss) {
            return Err(Error::Incompatible("loss is not recorded on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        if let Some(v) = wrt.iter().find(|v| !self.owns(**v)) {
            return Err(Error::Incompatible(format!("{v:?} is not recorded on this tape")));
        }
        let last = loss.index as usize;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(last + 1);
        grads.resize_with(last + 1, || None);
        grads[last] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|&v| {
                grads
                    .get(v.index as usize)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
            })
            .collect())
    }

    /// Gradient slot for `v`, created zeroed on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        let node = &self.nodes[v.index as usize];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.index as usize].get_or_insert_with(|| Tensor::zeros(node.value.shape())))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, cols, batch, dims: [c, h, w, k] } => {
                let (c, h, w, k) = (*c, *h, *w, *k);
                let hw = h * w;
                let ckk = c * k * k;
                let kt = self.value(*kernel);
                let o = kt.shape()[0];
                if let Some(db) = self.slot(grads, *bias) {
                    for n in 0..*batch {
                        for (oc, row) in gd[n * o * hw..(n + 1) * o * hw].chunks(hw).enumerate() {
                            db.data_mut()[oc] += row.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(dk) = self.slot(grads, *kernel) {
                    for n in 0..*batch {
                        let dy = &gd[n * o * hw..(n + 1) * o * hw];
                        let sample = &cols[n * ckk * hw..(n + 1) * ckk * hw];
                        gemm(
                            o,
                            hw,
                            ckk,
                            dy,
                            (hw as isize, 1),
                            sample,
                            (1, hw as isize),
                            1.0,
                            dk.data_mut(),
                            (ckk as isize, 1),
                        );
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    let mut dcols = vec![0.0; ckk * hw];
                    for n in 0..*batch {
                        let dy = &gd[n * o * hw..(n + 1) * o * hw];
                        gemm(
                            ckk,
                            o,
                            hw,
                            kt.data(),
                            (1, ckk as isize),
                            dy,
                            (hw as isize, 1),
                            0.0,
                            &mut dcols,
                            (hw as isize, 1),
                        );
                        col2im_add(&dcols, c, h, w, k, &mut dx.data_mut()[n * c * hw..(n + 1) * c * hw]);
                    }
                }
            }
            Op::ChannelMax { input, argmax } => {
                if let Some(dx) = self.slot(grads, *input) {
                    let hw = argmax.len();
                    for (p, (&a, &gv)) in argmax.iter().zip(gd).enumerate() {
                        dx.data_mut()[a as usize * hw + p] += gv;
                    }
                }
            }
            Op::Linear { input, weight, bias, rows } => {
                let wt = self.value(*weight);
                let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
                if let Some(db) = self.slot(grads, *bias) {
                    for row in gd.chunks(out_dim) {
                        for (d, &gv) in db.data_mut().iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    let x = self.value(*input);
                    gemm(
                        out_dim,
                        *rows,
                        in_dim,
                        gd,
                        (1, out_dim as isize),
                        x.data(),
                        (in_dim as isize, 1),
                        1.0,
                        dw.data_mut(),
                        (in_dim as isize, 1),
                    );
                }
                if let Some(dx) = self.slot(grads, *input) {
                    gemm(
                        *rows,
                        out_dim,
                        in_dim,
                        gd,
                        (out_dim as isize, 1),
                        wt.data(),
                        (in_dim as isize, 1),
                        1.0,
                        dx.data_mut(),
                        (in_dim as isize, 1),
                    );
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &yv) in dx.data_mut().iter_mut().zip(gd).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &yv) in dx.data_mut().iter_mut().zip(gd).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &yv) in dx.data_mut().iter_mut().zip(gd).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Scale(x, a) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.add_scaled(g, *a);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.add_scaled(g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &q) in da.data_mut().iter_mut().zip(gd).zip(bv.data()) {
                        *d += gv * q;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &p) in db.data_mut().iter_mut().zip(gd).zip(av.data()) {
                        *d += gv * p;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        for (d, &gv) in dp.data_mut().iter_mut().zip(&gd[offset..offset + n]) {
                            *d += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { input, start } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, &gv) in dx.data_mut()[*start..].iter_mut().zip(gd) {
                        *d += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.add_assign(g);
                }
            }
            Op::Attend { input, offset, stride } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (ch, &gv) in gd.iter().enumerate() {
                        dx.data_mut()[ch * stride + offset] += gv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                if let Some(dz) = self.slot(grads, *logits) {
                    for (i, (d, &p)) in dz.data_mut().iter_mut().zip(probs).enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        *d += gd[0] * (p - target);
                    }
                }
            }
            Op::RowCrossEntropy { logits, labels, weights, probs } => {
                if let Some(dz) = self.slot(grads, *logits) {
                    let c = probs.len() / labels.len();
                    for (n, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                        for j in 0..c {
                            let target = if j == label { 1.0 } else { 0.0 };
                            dz.data_mut()[n * c + j] += gd[0] * w * (probs[n * c + j] - target);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.data_mut().iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    if let Some(dp) = self.slot(grads, p) {
                        dp.add_assign(g);
                    }
                }
            }
            Op::Gather { input, indices } => {
                if let Some(dx) = self.slot(grads, *input) {
                    let c = dx.shape()[1];
                    for (r, (&i, &gv)) in indices.iter().zip(gd).enumerate() {
                        dx.data_mut()[r * c + i] += gv;
                    }
                }
            }
        }
    }
}

/// Parameter gradients indexed like the `wrt` slice passed to
/// [`Tape::backward`].
pub type Gradients = Vec<Tensor>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstm_zero_params_give_zero_hidden() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let h = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let c = tape.constant(Tensor::zeros(&[2]));
        let w = tape.param(Tensor::zeros(&[8, 5]));
        let b = tape.param(Tensor::zeros(&[8]));
        let (h2, _) = tape.lstm_cell(x, h, c, w, b).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_saturated_gates_retain_memory() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.7]));
        let h = tape.constant(Tensor::vector(vec![0.1, 0.2]));
        let c = tape.constant(Tensor::vector(vec![0.9, -0.4]));
        let w = tape.param(Tensor::zeros(&[8, 3]));
        let mut bias = vec![0.0; 8];
        bias[..2].fill(-10.0);
        bias[2..4].fill(10.0);
        let b = tape.param(Tensor::vector(bias));
        let (_, c2) = tape.lstm_cell(x, h, c, w, b).unwrap();
        for (a, e) in tape.value(c2).data().iter().zip([0.9, -0.4]) {
            assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn lstm_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let h = tape.constant(Tensor::vector(vec![0.0; 2]));
        let w = tape.param(Tensor::zeros(&[8, 4]));
        let b = tape.param(Tensor::zeros(&[8]));
        assert!(tape.lstm_cell(x, h, h, w, b).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::vector(vec![0.0; 4]));
        let l = tape.softmax_cross_entropy(z, 2).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(l, &[z]).unwrap();
        assert_eq!(g[0].data(), &[0.25, 0.25, -0.75, 0.25]);

        let big = tape.param(Tensor::vector(vec![1000.0, 0.0, 0.0, 0.0]));
        let l = tape.softmax_cross_entropy(big, 0).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
    }

    #[test]
    fn unused_param_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::vector(vec![3.0]));
        let s = tape.sum(a);
        let g = tape.backward(s, &[a, unused]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert_eq!(g[1].data(), &[0.0]);
    }

    #[test]
    fn foreign_loss_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.param(Tensor::scalar(1.0));
        let b = t2.param(Tensor::scalar(1.0));
        assert!(t2.backward(a, &[b]).is_err());
        let v = t1.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t1.backward(v, &[v]).is_err());
    }

    #[test]
    fn channel_max_ties_to_lowest() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![3, 1, 1], vec![0.0, 5.0, 5.0]));
        let m = tape.channel_max(x).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        let s = tape.sum(m);
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_counts() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.param(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, &[0.0]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[0, 1, 1]), 9.0);
        assert_eq!(v.at(&[0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 1]), 6.0);

        let id = tape.param(Tensor::full(&[1, 1, 1, 1], 1.0));
        let z = tape.conv2d(x, id, b, &[0.0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn reset_invalidates_and_reproduces() {
        let mut tape = Tape::new();
        let run = |tape: &mut Tape| {
            let w = tape.param(Tensor::from_vec(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
            let b = tape.param(Tensor::vector(vec![0.01, -0.02]));
            let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
            let y = tape.linear(x, w, b).unwrap();
            let t = tape.tanh(y);
            let l = tape.sum(t);
            tape.backward(l, &[w, b]).unwrap()
        };
        let first = run(&mut tape);
        tape.reset();
        assert!(tape.is_empty());
        let second = run(&mut tape);
        assert_eq!(first, second);
    }
}
