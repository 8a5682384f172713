//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive in execution order, so the node list is
//! already topologically sorted and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{DvaError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Square(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Swish(Var),
    SwishPrime(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddAxis1(Var, Var),
    MulAxis1(Var, Var),
    Conv1d { x: Var, w: Var, groups: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Tensor,
        train: bool,
    },
    MeanTime(Var),
    ChannelScale(Var, Var),
    Concat1(Var, Var),
    AvgPool2(Var),
    Upsample(Var),
    Reshape(Var),
    Slice1 { x: Var, start: usize },
    BroadcastBatch(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch normalization mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one train-mode batch-norm application.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

/// Recorded computation. Single-writer; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn max_abs(&self) -> f64 {
        self.by_name.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

fn shape_err(op: &str, detail: String) -> DvaError {
    DvaError::contract(format!("{op}: {detail}"))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn swish_prime(v: f64) -> f64 {
    let s = sigmoid(v);
    s + v * s * (1.0 - s)
}

fn swish_second(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 - s) * (2.0 + v * (1.0 - 2.0 * s))
}

/// `[outer, axis, inner]` factorization of a shape around dimension 1.
fn axis1_split(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let axis = if shape.len() > 1 { shape[1] } else { 1 };
    let inner = shape.iter().skip(2).product::<usize>();
    (outer, axis, inner.max(1))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient under `name`.
    pub fn leaf(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Register a parameter from the store; repeated requests share one leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&(_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| DvaError::contract(format!("unknown parameter {name}")))?
            .clone();
        Ok(self.leaf(name, value))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!(
                    "shapes {:?} and {:?} differ",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let needs = self.needs(a);
        self.push(value, Op::Mean(a), needs)
    }

    /// Sum over every axis but the first: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let b = t.shape()[0];
        let per = t.len() / b;
        let data = t.data().chunks(per).map(|c| c.iter().sum()).collect();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![b], data), Op::SumPerSample(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, Op::Swish(a), |x| x * sigmoid(x))
    }

    /// Derivative of swish, itself differentiable.
    pub fn swish_prime(&mut self, a: Var) -> Var {
        self.unary(a, Op::SwishPrime(a), swish_prime)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &bd[p * n..(p + 1) * n];
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`; dense layers store weights as `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(w).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_t", format!("inner dims {k} vs {k2}")));
        }
        let (ad, wd) = (self.value(a).data(), self.value(w).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let wrow = &wd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(wrow).map(|(x, y)| x * y).sum();
            }
        }
        let needs = self.needs(a) || self.needs(w);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, w), needs))
    }

    fn axis1_check(&self, op: &str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let (outer, axis, inner) = axis1_split(self.value(x).shape());
        if self.value(x).rank() < 2 || self.value(v).len() != axis {
            return Err(shape_err(
                op,
                format!(
                    "vector of length {} does not match axis 1 of {:?}",
                    self.value(v).len(),
                    self.value(x).shape()
                ),
            ));
        }
        Ok((outer, axis, inner))
    }

    /// `x + v` with `v` broadcast along axis 1 (bias per channel / per unit).
    pub fn add_axis1(&mut self, x: Var, v: Var) -> Result<Var> {
        let (outer, axis, inner) = self.axis1_check("add_axis1", x, v)?;
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for c in 0..axis {
                let base = (o * axis + c) * inner;
                for e in &mut out[base..base + inner] {
                    *e += vd[c];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddAxis1(x, v), needs))
    }

    /// `x * v` with `v` broadcast along axis 1.
    pub fn mul_axis1(&mut self, x: Var, v: Var) -> Result<Var> {
        let (outer, axis, inner) = self.axis1_check("mul_axis1", x, v)?;
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for c in 0..axis {
                let base = (o * axis + c) * inner;
                for e in &mut out[base..base + inner] {
                    *e *= vd[c];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulAxis1(x, v), needs))
    }

    /// Stride-1, same-padded cross-correlation. `x: [B, C_in, T]`,
    /// `w: [C_out, C_in / groups, k]` with `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let (b, cin, t) = self.value(x).dims3()?;
        let (cout, cpg, k) = self.value(w).dims3()?;
        if k % 2 == 0 {
            return Err(shape_err("conv1d", format!("kernel width {k} is not odd")));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cpg {
            return Err(shape_err(
                "conv1d",
                format!("input channels {cin}, kernel {:?}, groups {groups}", [cout, cpg, k]),
            ));
        }
        let pad = k / 2;
        let opg = cout / groups;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * cout * t];
        for bi in 0..b {
            for oc in 0..cout {
                let g = oc / opg;
                let orow = &mut out[(bi * cout + oc) * t..(bi * cout + oc + 1) * t];
                for ci in 0..cpg {
                    let ic = g * cpg + ci;
                    let xrow = &xd[(bi * cin + ic) * t..(bi * cin + ic + 1) * t];
                    let wrow = &wd[(oc * cpg + ci) * k..(oc * cpg + ci + 1) * k];
                    for (j, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        // output index tt reads input tt + j - pad
                        let lo = pad.saturating_sub(j);
                        let hi = (t + pad).saturating_sub(j).min(t);
                        for tt in lo..hi {
                            orow[tt] += wv * xrow[tt + j - pad];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor::from_parts(vec![b, cout, t], out),
            Op::Conv1d { x, w, groups },
            needs,
        ))
    }

    /// Per-channel normalization over batch and time followed by `gamma * xhat + beta`.
    /// Returns the batch statistics in train mode so the caller can update running stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, t) = self.value(x).dims3()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("batch_norm", format!("affine params must have {c} entries")));
        }
        let xd = self.value(x).data();
        let m = (b * t) as f64;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += xd[(bi * c + ch) * t..(bi * c + ch + 1) * t]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                (mean, var, true)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running stats width mismatch".into()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * t;
                for i in base..base + t {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_parts(vec![b, c, t], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat: Tensor::from_parts(vec![b, c, t], xhat),
                train,
            },
            needs,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// `[B, C, T] -> [B, C]` mean over time.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        let data = self
            .value(x)
            .data()
            .chunks(t)
            .map(|r| r.iter().sum::<f64>() / t as f64)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c], data), Op::MeanTime(x), needs))
    }

    /// Scale each `[b, c, :]` row of `x` by `g[b, c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        if self.value(g).shape() != [b, c] {
            return Err(shape_err(
                "channel_scale",
                format!("gate shape {:?} vs [{b}, {c}]", self.value(g).shape()),
            ));
        }
        let gd = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &gv) in out.chunks_mut(t).zip(gd) {
            for e in row {
                *e *= gv;
            }
        }
        let needs = self.needs(x) || self.needs(g);
        Ok(self.push(Tensor::from_parts(vec![b, c, t], out), Op::ChannelScale(x, g), needs))
    }

    /// Concatenate two `[B, *, T]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ta) = self.value(a).dims3()?;
        let (bb, cb, tb) = self.value(b).dims3()?;
        if ba != bb || ta != tb {
            return Err(shape_err("concat_channels", format!("[{ba},_,{ta}] vs [{bb},_,{tb}]")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for bi in 0..ba {
            out.extend_from_slice(&ad[bi * ca * ta..(bi + 1) * ca * ta]);
            out.extend_from_slice(&bd[bi * cb * tb..(bi + 1) * cb * tb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![ba, ca + cb, ta], out),
            Op::Concat1(a, b),
            needs,
        ))
    }

    /// Channels `start..start + len` of a `[B, C, T]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_channels", format!("{start}+{len} > {c}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * len * t);
        for bi in 0..b {
            out.extend_from_slice(&xd[(bi * c + start) * t..(bi * c + start + len) * t]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, len, t], out),
            Op::Slice1 { x, start },
            needs,
        ))
    }

    /// Average adjacent time steps: `T -> ceil(T / 2)`; a trailing odd step passes through.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        let to = t.div_ceil(2);
        let mut out = Vec::with_capacity(b * c * to);
        for row in self.value(x).data().chunks(t) {
            for j in 0..to {
                if 2 * j + 1 < t {
                    out.push(0.5 * (row[2 * j] + row[2 * j + 1]));
                } else {
                    out.push(row[2 * j]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c, to], out), Op::AvgPool2(x), needs))
    }

    /// Nearest-neighbour upsampling along time to `len` steps.
    pub fn upsample(&mut self, x: Var, len: usize) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        if len < t {
            return Err(shape_err("upsample", format!("target {len} shorter than {t}")));
        }
        let mut out = Vec::with_capacity(b * c * len);
        for row in self.value(x).data().chunks(t) {
            for j in 0..len {
                out.push(row[j * t / len]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c, len], out), Op::Upsample(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Repeat an unbatched tensor `batch` times along a new leading axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(batch * src.len());
        for _ in 0..batch {
            data.extend_from_slice(src.data());
        }
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::BroadcastBatch(x), needs)
    }

    /// Gradients of a scalar `loss` for every registered leaf. Leaves the loss
    /// does not reach get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(DvaError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            // keep leaf gradients for collection below
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, gout.zip_map(bv, |g, y| g * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gout.zip_map(av, |g, x| g * x));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gout.map(|g| g * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.clone()),
            Op::Sum(a) => {
                let g = gd[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gd[0] / n));
            }
            Op::SumPerSample(a) => {
                let src = self.value(*a);
                let per = src.len() / src.shape()[0];
                let data = gd.iter().flat_map(|&g| std::iter::repeat_n(g, per)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), data));
            }
            Op::Square(a) => {
                self.accumulate(grads, *a, gout.zip_map(self.value(*a), |g, x| 2.0 * g * x))
            }
            Op::Exp(a) => self.accumulate(grads, *a, gout.zip_map(&node.value, |g, y| g * y)),
            Op::Sigmoid(a) => self.accumulate(
                grads,
                *a,
                gout.zip_map(&node.value, |g, s| g * s * (1.0 - s)),
            ),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Swish(a) => self.accumulate(
                grads,
                *a,
                gout.zip_map(self.value(*a), |g, x| g * swish_prime(x)),
            ),
            Op::SwishPrime(a) => self.accumulate(
                grads,
                *a,
                gout.zip_map(self.value(*a), |g, x| g * swish_second(x)),
            ),
            Op::Clamp(a, lo, hi) => self.accumulate(
                grads,
                *a,
                gout.zip_map(self.value(*a), |g, x| {
                    if x < *lo || x > *hi {
                        0.0
                    } else {
                        g
                    }
                }),
            ),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    // dA = dY B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n)
                                .map(|j| gd[i * n + j] * bv.data()[p * n + j])
                                .sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    // dB = A^T dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av_ip = av.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av_ip * gd[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulT(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = wv.shape()[0];
                if self.needs(*a) {
                    // dA = dY W
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gd[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += g * wv.data()[j * k + p];
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*w) {
                    // dW = dY^T A
                    let mut dw = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gd[i * n + j];
                            for p in 0..k {
                                dw[j * k + p] += g * av.data()[i * k + p];
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::from_parts(vec![n, k], dw));
                }
            }
            Op::AddAxis1(x, v) => {
                self.accumulate(grads, *x, gout.clone());
                if self.needs(*v) {
                    let (outer, axis, inner) = axis1_split(gout.shape());
                    let mut dv = vec![0.0; axis];
                    for o in 0..outer {
                        for (c, d) in dv.iter_mut().enumerate() {
                            let base = (o * axis + c) * inner;
                            *d += gd[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *v, Tensor::from_parts(self.value(*v).shape().to_vec(), dv));
                }
            }
            Op::MulAxis1(x, v) => {
                let (outer, axis, inner) = axis1_split(gout.shape());
                let (xd, vd) = (self.value(*x).data(), self.value(*v).data());
                if self.needs(*x) {
                    let mut dx = gd.to_vec();
                    for o in 0..outer {
                        for c in 0..axis {
                            let base = (o * axis + c) * inner;
                            for e in &mut dx[base..base + inner] {
                                *e *= vd[c];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(gout.shape().to_vec(), dx));
                }
                if self.needs(*v) {
                    let mut dv = vec![0.0; axis];
                    for o in 0..outer {
                        for (c, d) in dv.iter_mut().enumerate() {
                            let base = (o * axis + c) * inner;
                            *d += (base..base + inner).map(|i| gd[i] * xd[i]).sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *v, Tensor::from_parts(self.value(*v).shape().to_vec(), dv));
                }
            }
            Op::Conv1d { x, w, groups } => self.conv1d_backward(*x, *w, *groups, gd, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                train,
            } => {
                let (b, c, t) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
                let xh = xhat.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * t;
                        for i in base..base + t {
                            dgamma[ch] += gd[i] * xh[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let m = (b * t) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for ch in 0..c {
                        for bi in 0..b {
                            let base = (bi * c + ch) * t;
                            for i in base..base + t {
                                let dxhat = gd[i] * gam[ch];
                                dx[i] = if *train {
                                    // dbeta/dgamma double as sum(dy) and sum(dy * xhat)
                                    inv_std[ch] / m
                                        * (m * dxhat
                                            - gam[ch] * dbeta[ch]
                                            - xh[i] * gam[ch] * dgamma[ch])
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![b, c, t], dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::MeanTime(x) => {
                let src = self.value(*x);
                let t = src.shape()[2];
                let data = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / t as f64, t))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(src.shape().to_vec(), data));
            }
            Op::ChannelScale(x, g) => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let t = xv.shape()[2];
                if self.needs(*x) {
                    let mut dx = gd.to_vec();
                    for (row, &s) in dx.chunks_mut(t).zip(gv.data()) {
                        for e in row {
                            *e *= s;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.needs(*g) {
                    let dg = gd
                        .chunks(t)
                        .zip(xv.data().chunks(t))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *g, Tensor::from_parts(gv.shape().to_vec(), dg));
                }
            }
            Op::Concat1(a, b) => {
                let (ba, ca, t) = (
                    self.value(*a).shape()[0],
                    self.value(*a).shape()[1],
                    self.value(*a).shape()[2],
                );
                let cb = self.value(*b).shape()[1];
                let mut da = Vec::with_capacity(ba * ca * t);
                let mut db = Vec::with_capacity(ba * cb * t);
                for bi in 0..ba {
                    let base = bi * (ca + cb) * t;
                    da.extend_from_slice(&gd[base..base + ca * t]);
                    db.extend_from_slice(&gd[base + ca * t..base + (ca + cb) * t]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![ba, ca, t], da));
                self.accumulate(grads, *b, Tensor::from_parts(vec![ba, cb, t], db));
            }
            Op::Slice1 { x, start } => {
                let src = self.value(*x);
                let (b, c, t) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let len = gout.shape()[1];
                let mut dx = vec![0.0; src.len()];
                for bi in 0..b {
                    let dst = (bi * c + start) * t;
                    dx[dst..dst + len * t].copy_from_slice(&gd[bi * len * t..(bi + 1) * len * t]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(src.shape().to_vec(), dx));
            }
            Op::AvgPool2(x) => {
                let src = self.value(*x);
                let t = src.shape()[2];
                let to = gout.shape()[2];
                let mut dx = vec![0.0; src.len()];
                for (drow, grow) in dx.chunks_mut(t).zip(gd.chunks(to)) {
                    for (j, &g) in grow.iter().enumerate() {
                        if 2 * j + 1 < t {
                            drow[2 * j] += 0.5 * g;
                            drow[2 * j + 1] += 0.5 * g;
                        } else {
                            drow[2 * j] += g;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(src.shape().to_vec(), dx));
            }
            Op::Upsample(x) => {
                let src = self.value(*x);
                let t = src.shape()[2];
                let len = gout.shape()[2];
                let mut dx = vec![0.0; src.len()];
                for (drow, grow) in dx.chunks_mut(t).zip(gd.chunks(len)) {
                    for (j, &g) in grow.iter().enumerate() {
                        drow[j * t / len] += g;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(src.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::BroadcastBatch(x) => {
                let src = self.value(*x);
                let mut dx = vec![0.0; src.len()];
                for chunk in gd.chunks(src.len()) {
                    for (d, g) in dx.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(src.shape().to_vec(), dx));
            }
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        groups: usize,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, cin, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, cpg, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let pad = k / 2;
        let opg = cout / groups;
        let (xd, wd) = (xv.data(), wv.data());
        let want_x = self.needs(x);
        let want_w = self.needs(w);
        let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wd.len()] } else { Vec::new() };
        for bi in 0..b {
            for oc in 0..cout {
                let g = oc / opg;
                let grow = &gd[(bi * cout + oc) * t..(bi * cout + oc + 1) * t];
                for ci in 0..cpg {
                    let ic = g * cpg + ci;
                    let xoff = (bi * cin + ic) * t;
                    let woff = (oc * cpg + ci) * k;
                    for j in 0..k {
                        let lo = pad.saturating_sub(j);
                        let hi = (t + pad).saturating_sub(j).min(t);
                        if want_w {
                            let mut acc = 0.0;
                            for tt in lo..hi {
                                acc += grow[tt] * xd[xoff + tt + j - pad];
                            }
                            dw[woff + j] += acc;
                        }
                        if want_x {
                            let wv = wd[woff + j];
                            for tt in lo..hi {
                                dx[xoff + tt + j - pad] += grow[tt] * wv;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_parts(wv.shape().to_vec(), dw));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let w = g.leaf("w", Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0, 0.0]);
        let _ = w;
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut g = Graph::new();
        let w = g.leaf("w", Tensor::from_vec(vec![0.3, -1.0, 2.0]));
        let x = g.constant(Tensor::from_vec(vec![4.0, 5.0, -6.0]));
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[4.0, 5.0, -6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf("w", Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(DvaError::Contract(_))));
    }

    #[test]
    fn shared_operand_accumulates() {
        // d/dw sum(w * w) = 2w
        let mut g = Graph::new();
        let w = g.leaf("w", Tensor::from_vec(vec![1.5, -2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let w = g.leaf("w", Tensor::from_vec(vec![1.0]));
        let d = g.detach(w);
        let sq = g.square(d);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        let x = g.constant(Tensor::zeros(&[1, 2, 5]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(g.conv1d(x, w, 1).is_err());
        let w_even = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(g.conv1d(x, w_even, 1).is_err());
    }

    #[test]
    fn pooling_and_upsampling_lengths() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 5], vec![1.0, 3.0, 5.0, 7.0, 9.0]).unwrap());
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 6.0, 9.0]);
        let u = g.upsample(p, 5).unwrap();
        assert_eq!(g.value(u).data(), &[2.0, 2.0, 6.0, 6.0, 9.0]);
    }
}
