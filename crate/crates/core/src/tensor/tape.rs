use super::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Offset added under the square root of pairwise distances so the gradient
/// stays finite at coincident points.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    /// Row-wise softmax of a rank-2 tensor.
    SoftmaxRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Mean over H x W, giving N x C x 1 x 1.
    Gap,
    /// Max over H x W, giving N x C x 1 x 1.
    Gmp,
    /// Mean over C, giving N x 1 x H x W.
    ChannelAvg,
    /// Max over C, giving N x 1 x H x W.
    ChannelMax,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Activation(Var, Activation),
    Softplus(Var),
    Pool {
        input: Var,
        kind: PoolKind,
        /// For max pools: input offset that produced each output element.
        argmax: Vec<usize>,
    },
    BroadcastMul {
        feature: Var,
        map: Var,
    },
    Reshape(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    PairwiseDistances(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::BroadcastMul { feature, map } => vec![*feature, *map],
            Op::Scale(a, _)
            | Op::Activation(a, _)
            | Op::Softplus(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::PairwiseDistances(a) => vec![*a],
            Op::Pool { input, .. } | Op::Gather { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, leaves only.
    grad: Option<Vec<f64>>,
}

/// Append-only record of a computation. Node order is a topological order,
/// so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Decisions taken outside the recorded ops, such as drop masks.
    external: Vec<u64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank(op: &str, t: &Tensor, expected: usize) -> Result<()> {
    if t.rank() != expected {
        return Err(Error::dim(format!(
            "{op}: expected rank {expected}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
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

    /// Records discrete choices made off the tape so they show up in
    /// [`Tape::decisions`].
    pub fn note_decisions(&mut self, choices: impl IntoIterator<Item = u64>) {
        self.external.extend(choices);
    }

    /// Every piecewise choice of the recorded computation: relu input signs,
    /// max-pool argmaxes, gather indices and noted external decisions. Two
    /// evaluations with equal decisions lie on the same smooth piece.
    pub fn decisions(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation(x, Activation::Relu) => {
                    out.extend(self.nodes[x.0].value.data().iter().map(|&v| u64::from(v > 0.0)));
                }
                Op::Pool { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
                Op::Gather { indices, .. } => out.extend(indices.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        out.extend_from_slice(&self.external);
        out
    }

    /// Records an input; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        rank("conv2d input", x, 4)?;
        rank("conv2d weight", w, 4)?;
        let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c_in {
            return Err(Error::dim(format!(
                "conv2d: input has {c_in} channels, weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be positive"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::dim(format!(
                    "conv2d: bias shape {:?}, expected [{c_out}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        let (plen, olen) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![0.0; n * plen * olen];
        let mut out = vec![0.0; n * c_out * olen];
        let wmat = MatRef::new(w.data(), c_out, plen);
        for s in 0..n {
            let sample = &x.data()[s * c_in * h * wd..(s + 1) * c_in * h * wd];
            let col = &mut cols[s * plen * olen..(s + 1) * plen * olen];
            im2col(sample, &geom, col);
            let dst = &mut out[s * c_out * olen..(s + 1) * c_out * olen];
            gemm(wmat, MatRef::new(col, plen, olen), 0.0, dst);
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (co, row) in dst.chunks_mut(olen).enumerate() {
                    row.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let value = Tensor::new(&[n, c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        rank("linear input", x, 2)?;
        rank("linear weight", w, 2)?;
        let (n, d_in) = (x.shape()[0], x.shape()[1]);
        let d_out = w.shape()[0];
        if w.shape()[1] != d_in {
            return Err(Error::dim(format!(
                "linear: input width {d_in}, weight expects {}",
                w.shape()[1]
            )));
        }
        let mut out = vec![0.0; n * d_out];
        gemm(
            MatRef::new(x.data(), n, d_in),
            MatRef::new(w.data(), d_out, d_in).t(),
            0.0,
            &mut out,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            if bd.len() != d_out || self.value(b).rank() != 1 {
                return Err(Error::dim(format!(
                    "linear: bias shape {:?}, expected [{d_out}]",
                    self.value(b).shape()
                )));
            }
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor::new(&[n, d_out], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data).expect("shape preserved");
        self.push(value, Op::Scale(a, factor))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let t = self.value(x);
        let data: Vec<f64> = match kind {
            Activation::Sigmoid => t.data().iter().map(|&v| sigmoid(v)).collect(),
            Activation::Relu => t.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::SoftmaxRows => {
                rank("softmax_rows", t, 2)?;
                let cols = t.shape()[1];
                let mut out = Vec::with_capacity(t.numel());
                for row in t.data().chunks(cols) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    out.extend(e.iter().map(|v| v / z));
                }
                out
            }
        };
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(value, Op::Activation(x, kind)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid).expect("sigmoid is shape-agnostic")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu).expect("relu is shape-agnostic")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::SoftmaxRows)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| softplus(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("shape preserved");
        self.push(value, Op::Softplus(x))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let t = self.value(x);
        rank("pool", t, 4)?;
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let hw = h * w;
        let d = t.data();
        let mut argmax = Vec::new();
        let (shape, data) = match kind {
            PoolKind::Gap => {
                let data = d.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
                (vec![n, c, 1, 1], data)
            }
            PoolKind::Gmp => {
                let mut data = Vec::with_capacity(n * c);
                for (plane_idx, p) in d.chunks(hw).enumerate() {
                    let mut best = 0;
                    for (i, v) in p.iter().enumerate() {
                        if *v > p[best] {
                            best = i;
                        }
                    }
                    argmax.push(plane_idx * hw + best);
                    data.push(p[best]);
                }
                (vec![n, c, 1, 1], data)
            }
            PoolKind::ChannelAvg => {
                let mut data = vec![0.0; n * hw];
                for s in 0..n {
                    for ch in 0..c {
                        let p = &d[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        data[s * hw..(s + 1) * hw]
                            .iter_mut()
                            .zip(p)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                data.iter_mut().for_each(|v| *v /= c as f64);
                (vec![n, 1, h, w], data)
            }
            PoolKind::ChannelMax => {
                let mut data = Vec::with_capacity(n * hw);
                for s in 0..n {
                    for pos in 0..hw {
                        let mut best = s * c * hw + pos;
                        for ch in 1..c {
                            let idx = (s * c + ch) * hw + pos;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        argmax.push(best);
                        data.push(d[best]);
                    }
                }
                (vec![n, 1, h, w], data)
            }
        };
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Pool {
            input: x,
            kind,
            argmax,
        }))
    }

    /// Multiplies a feature map by a channel map (N x C x 1 x 1) or a spatial
    /// map (N x 1 x H x W), copying the map along its singleton axes.
    pub fn broadcast_mul(&mut self, feature: Var, map: Var) -> Result<Var> {
        let f = self.value(feature);
        let m = self.value(map);
        rank("broadcast_mul feature", f, 4)?;
        let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        let hw = h * w;
        let mut out = f.data().to_vec();
        if m.shape() == [n, c, 1, 1] {
            for (plane, s) in out.chunks_mut(hw).zip(m.data()) {
                plane.iter_mut().for_each(|v| *v *= s);
            }
        } else if m.shape() == [n, 1, h, w] {
            for (i, plane) in out.chunks_mut(hw).enumerate() {
                let s = i / c;
                plane
                    .iter_mut()
                    .zip(&m.data()[s * hw..(s + 1) * hw])
                    .for_each(|(v, g)| *v *= g);
            }
        } else {
            return Err(Error::dim(format!(
                "broadcast_mul: map {:?} is neither [{n}, {c}, 1, 1] nor [{n}, 1, {h}, {w}]",
                m.shape()
            )));
        }
        let value = Tensor::new(f.shape(), out)?;
        Ok(self.push(value, Op::BroadcastMul { feature, map }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapses all trailing axes: N x ... -> N x D.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// Concatenates two rank-2 tensors along their second axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        rank("concat", ta, 2)?;
        rank("concat", tb, 2)?;
        if ta.shape()[0] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "concat: leading extents {} and {}",
                ta.shape()[0],
                tb.shape()[0]
            )));
        }
        let (n, da, db) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * da..(i + 1) * da]);
            data.extend_from_slice(&tb.data()[i * db..(i + 1) * db]);
        }
        let value = Tensor::new(&[n, da + db], data)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Records `build` and sums its output; shorthand for scalar test losses.
    pub fn sum_of(&mut self, build: impl FnOnce(&mut Self) -> Var) -> Var {
        let y = build(self);
        self.sum(y)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Picks elements by flat row-major index into a rank-1 result.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() {
            return Err(Error::dim("gather: no indices"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::dim(format!("gather: index {bad} of {}", t.numel())));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(&[indices.len()], data)?;
        Ok(self.push(value, Op::Gather {
            input: x,
            indices: indices.to_vec(),
        }))
    }

    /// Euclidean distances between the rows of an N x D tensor. The diagonal
    /// is exactly zero; off-diagonal entries carry [`DISTANCE_EPS`].
    pub fn pairwise_distances(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        rank("pairwise_distances", t, 2)?;
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let rows: Vec<&[f64]> = t.data().chunks(d).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let sq: f64 = rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let dist = (sq + DISTANCE_EPS).sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        let value = Tensor::new(&[n, n], out)?;
        Ok(self.push(value, Op::PairwiseDistances(x)))
    }

    /// Mean over the batch of `-log softmax(logits)[n, label_n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        rank("cross_entropy", t, 2)?;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if labels.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} outside [0, {k})"
            )));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_z = m + z.ln();
            total += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(value, Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        }))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient buffer of `v`, or `None` when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let n = self.value(*input).shape()[0];
                let w = self.value(*weight);
                let c_out = w.shape()[0];
                let (plen, olen) = (geom.patch_len(), geom.out_len());
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        for (idx, row) in g.chunks(olen).enumerate() {
                            gb[idx % c_out] += row.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *weight) {
                    for s in 0..n {
                        let gs = MatRef::new(&g[s * c_out * olen..(s + 1) * c_out * olen], c_out, olen);
                        let col = MatRef::new(&cols[s * plen * olen..(s + 1) * plen * olen], plen, olen);
                        gemm(gs, col.t(), 1.0, gw);
                    }
                }
                if let Some(gx) = self.slot(grads, *input) {
                    let sample_len = geom.c_in * geom.h * geom.w;
                    let mut dcol = vec![0.0; plen * olen];
                    let wmat = MatRef::new(w.data(), c_out, plen);
                    for s in 0..n {
                        let gs = MatRef::new(&g[s * c_out * olen..(s + 1) * c_out * olen], c_out, olen);
                        gemm(wmat.t(), gs, 0.0, &mut dcol);
                        col2im(&dcol, geom, &mut gx[s * sample_len..(s + 1) * sample_len]);
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d_in) = (x.shape()[0], x.shape()[1]);
                let d_out = w.shape()[0];
                let gmat = MatRef::new(g, n, d_out);
                if let Some(gx) = self.slot(grads, *input) {
                    gemm(gmat, MatRef::new(w.data(), d_out, d_in), 1.0, gx);
                }
                if let Some(gw) = self.slot(grads, *weight) {
                    gemm(gmat.t(), MatRef::new(x.data(), n, d_in), 1.0, gw);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks(d_out) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
                }
            }
            Op::Activation(a, kind) => {
                let Some(ga) = self.slot(grads, *a) else { return };
                match kind {
                    Activation::Sigmoid => {
                        for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                            *x += gy * y * (1.0 - y);
                        }
                    }
                    Activation::Relu => {
                        for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                            if *y > 0.0 {
                                *x += gy;
                            }
                        }
                    }
                    Activation::SoftmaxRows => {
                        let cols = node.value.shape()[1];
                        for ((gx, gy), y) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                            let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                gx[j] += y[j] * (gy[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let xs = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gy), v) in ga.iter_mut().zip(g).zip(xs) {
                        *x += gy * sigmoid(*v);
                    }
                }
            }
            Op::Pool {
                input,
                kind,
                argmax,
            } => {
                let s = self.value(*input).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let Some(gx) = self.slot(grads, *input) else { return };
                match kind {
                    PoolKind::Gap => {
                        for (plane, gy) in gx.chunks_mut(hw).zip(g) {
                            plane.iter_mut().for_each(|v| *v += gy / hw as f64);
                        }
                    }
                    PoolKind::Gmp | PoolKind::ChannelMax => {
                        for (&idx, gy) in argmax.iter().zip(g) {
                            gx[idx] += gy;
                        }
                    }
                    PoolKind::ChannelAvg => {
                        for (plane_idx, plane) in gx.chunks_mut(hw).enumerate() {
                            let s = plane_idx / c;
                            let gs = &g[s * hw..(s + 1) * hw];
                            plane.iter_mut().zip(gs).for_each(|(v, gy)| *v += gy / c as f64);
                        }
                    }
                }
            }
            Op::BroadcastMul { feature, map } => {
                let f = self.value(*feature);
                let m = self.value(*map);
                let (c, hw) = (f.shape()[1], f.shape()[2] * f.shape()[3]);
                let channel_map = m.shape()[1] == c && m.shape()[2] * m.shape()[3] == 1;
                if let Some(gf) = self.slot(grads, *feature) {
                    for (p, (plane, gp)) in gf.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        if channel_map {
                            let s = m.data()[p];
                            plane.iter_mut().zip(gp).for_each(|(v, gy)| *v += gy * s);
                        } else {
                            let n = p / c;
                            let mp = &m.data()[n * hw..(n + 1) * hw];
                            for ((v, gy), s) in plane.iter_mut().zip(gp).zip(mp) {
                                *v += gy * s;
                            }
                        }
                    }
                }
                if let Some(gm) = self.slot(grads, *map) {
                    for (p, (fp, gp)) in f.data().chunks(hw).zip(g.chunks(hw)).enumerate() {
                        if channel_map {
                            gm[p] += fp.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            let n = p / c;
                            let dst = &mut gm[n * hw..(n + 1) * hw];
                            for ((d, a), b) in dst.iter_mut().zip(fp).zip(gp) {
                                *d += a * b;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Concat(a, b) => {
                let da = self.value(*a).shape()[1];
                let db = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (dst, src) in ga.chunks_mut(da).zip(g.chunks(da + db)) {
                        dst.iter_mut().zip(&src[..da]).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (dst, src) in gb.chunks_mut(db).zip(g.chunks(da + db)) {
                        dst.iter_mut().zip(&src[da..]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let scale = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += scale);
                }
            }
            Op::Gather { input, indices } => {
                if let Some(gx) = self.slot(grads, *input) {
                    for (&idx, gy) in indices.iter().zip(g) {
                        gx[idx] += gy;
                    }
                }
            }
            Op::PairwiseDistances(a) => {
                let x = self.value(*a);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let Some(gx) = self.slot(grads, *a) else { return };
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let coeff = (g[i * n + j] + g[j * n + i]) / out[i * n + j];
                        if coeff == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            gx[i * d + k] += coeff * (x.data()[i * d + k] - x.data()[j * d + k]);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * k + j] += g[0] * (probs[r * k + j] - onehot) / n;
                        }
                    }
                }
            }
        }
    }
}
