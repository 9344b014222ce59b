use std::collections::BTreeMap;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MeanPoolSpatial(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    Gather(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanPoolSpatial(..) => "mean_pool_spatial",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::Gather(..) => "gather",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Added to row norms in [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

/// Ordered record of primitive applications. Every record has exactly one
/// output, and records are appended in evaluation order, so the node list is
/// a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(op, t.shape(), &[])),
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(shape_err(op, t.shape(), &[])),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[m, k] x [k, n]` into `out` (overwritten).
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
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

    /// Clears all records and parameter bindings.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
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

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a gradient-tracking leaf; repeated calls with the
    /// same name return the same variable.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value.clone(), true);
        self.params.insert(p.name.clone(), v);
        v
    }

    /// Binds a parameter without gradient tracking.
    pub fn frozen(&mut self, p: &Param) -> Var {
        self.constant(p.value.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(a))?;
        let value = Tensor::new([c, r], transpose_data(self.value(a).data(), r, c))?;
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// `a[N, D] + b[D]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = rank2("add_bias", self.value(a))?;
        if self.shape(b) != [d] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let t = self.value(a);
        let data = t
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bias).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::AddBias(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map_value(a, |x| x * c);
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.map_value(a, |x| x + c);
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map_value(a, |x| x.max(0.0));
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map_value(a, sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    /// 2-D cross-correlation: `x[N, C, H, W]`, `w[O, C, KH, KW]`,
    /// optional `b[O]`, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = rank4("conv2d", self.value(x))?;
        let [o, c2, kh, kw] = rank4("conv2d", self.value(w))?;
        if c != c2 {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let (Some(ho), Some(wo)) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad))
        else {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                if let Some(b) = b {
                    plane.fill(self.nodes[b.0].value.data()[oi]);
                }
                for ci in 0..c {
                    let xplane = &xs[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = ws[((oi * c + ci) * kh + ky) * kw + kx];
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        *ov += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, o, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn mean_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4("mean_pool_spatial", self.value(x))?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new([n, c], data)?;
        Ok(self.push_op(value, Op::MeanPoolSpatial(x), &[x]))
    }

    /// Rows divided by `(||row|| + L2_EPS)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, d) = rank2("l2_normalize", self.value(x))?;
        let t = self.value(x);
        let norms: Vec<f64> = t
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let data = t
            .data()
            .chunks(d)
            .zip(&norms)
            .flat_map(|(row, &nrm)| row.iter().map(move |v| v / (nrm + L2_EPS)))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Concatenation along the last axis of two rank-2 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = rank2("concat", self.value(a))?;
        let (rb, cb) = rank2("concat", self.value(b))?;
        if ra != rb {
            return Err(shape_err("concat", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&ta[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new([ra, ca + cb], data)?;
        Ok(self.push_op(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push_op(value, Op::Mean(a), &[a])
    }

    /// Row-wise `log(sum(exp(row)))` of `[N, M] -> [N]`, max-shifted.
    /// Entries equal to `-inf` contribute nothing.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let (_, m) = rank2("log_sum_exp", self.value(a))?;
        if m == 0 {
            return Err(shape_err("log_sum_exp", self.shape(a), &[]));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(m)
            .map(|row| {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return mx;
                }
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let n = data.len();
        let value = Tensor::new([n], data)?;
        Ok(self.push_op(value, Op::LogSumExp(a), &[a]))
    }

    /// Picks `a[i, idx[i]]` from each row: `[N, M] -> [N]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = rank2("gather", self.value(a))?;
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(shape_err("gather", self.shape(a), &[idx.len()]));
        }
        let t = self.value(a).data();
        let data = idx.iter().enumerate().map(|(i, &j)| t[i * m + j]).collect();
        let value = Tensor::new([n], data)?;
        Ok(self.push_op(value, Op::Gather(a, idx.to_vec()), &[a]))
    }

    // ---- reverse pass ----

    /// Accumulates `d loss / d v` into every gradient-tracking node. Leaves
    /// that do not influence the loss receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.vjp(i, &g, &mut grads);
            }
            self.nodes[i].grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() && matches!(node.op, Op::Leaf) {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &mut |da| {
                    // da += g * b^T
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * tb.data()[p * n + j];
                            }
                            da[r * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    // db += a^T * g
                    for r in 0..m {
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let gt = transpose_data(g, c, r);
                acc(*a, &mut |da| add_into(da, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv)
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(tb) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ta) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddBias(a, b) => {
                let d = self.shape(*b)[0];
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |da| {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv)
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::Relu(a) => {
                let ta = self.value(*a).data();
                acc(*a, &mut |da| {
                    for ((d, gv), x) in da.iter_mut().zip(g).zip(ta) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |da| {
                for ((d, gv), s) in da.iter_mut().zip(g).zip(out) {
                    *d += gv * s * (1.0 - s);
                }
            }),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let [n, c, h, wd] = rank4("conv2d", self.value(*x)).expect("checked");
                let [o, _, kh, kw] = rank4("conv2d", self.value(*w)).expect("checked");
                let [_, _, ho, wo] = rank4("conv2d", &node.value).expect("checked");
                let (stride, pad) = (*stride, *pad);
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let visit = |f: &mut dyn FnMut(usize, usize, f64)| {
                    // f(x index, w index, upstream grad)
                    for ni in 0..n {
                        for oi in 0..o {
                            let gplane = &g[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                            for ci in 0..c {
                                let xbase = (ni * c + ci) * h * wd;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let widx = ((oi * c + ci) * kh + ky) * kw + kx;
                                        for oy in 0..ho {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for ox in 0..wo {
                                                let ix = (ox * stride + kx) as isize - pad as isize;
                                                if ix >= 0 && ix < wd as isize {
                                                    f(
                                                        xbase + iy as usize * wd + ix as usize,
                                                        widx,
                                                        gplane[oy * wo + ox],
                                                    );
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |dx| visit(&mut |xi, wi, gv| dx[xi] += gv * ws[wi]));
                acc(*w, &mut |dw| visit(&mut |xi, wi, gv| dw[wi] += gv * xs[xi]));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for ni in 0..n {
                            for (oi, d) in db.iter_mut().enumerate() {
                                let gplane =
                                    &g[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                                *d += gplane.iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::MeanPoolSpatial(x) => {
                let [_, _, h, w] = rank4("mean_pool_spatial", self.value(*x)).expect("checked");
                let hw = h * w;
                acc(*x, &mut |dx| {
                    for (plane, gv) in dx.chunks_mut(hw).zip(g) {
                        let share = gv / hw as f64;
                        plane.iter_mut().for_each(|d| *d += share);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = self.shape(*x)[1];
                let xs = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let s = nrm + L2_EPS;
                        let row = &xs[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let coef = if nrm > 0.0 { dot / (s * s * nrm) } else { 0.0 };
                        for j in 0..d {
                            dx[r * d + j] += grow[j] / s - row[j] * coef;
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                acc(*a, &mut |da| {
                    for (row, grow) in da.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        add_into(row, &grow[..ca]);
                    }
                });
                acc(*b, &mut |db| {
                    for (row, grow) in db.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        add_into(row, &grow[ca..]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let share = g[0] / self.value(*a).numel() as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += share));
            }
            Op::LogSumExp(a) => {
                let m = self.shape(*a)[1];
                let xs = self.value(*a).data();
                acc(*a, &mut |da| {
                    for (r, (&lse, gv)) in out.iter().zip(g).enumerate() {
                        if lse == f64::NEG_INFINITY {
                            continue;
                        }
                        for j in 0..m {
                            da[r * m + j] += gv * (xs[r * m + j] - lse).exp();
                        }
                    }
                });
            }
            Op::Gather(a, idx) => {
                let m = self.shape(*a)[1];
                acc(*a, &mut |da| {
                    for (r, (&j, gv)) in idx.iter().zip(g).enumerate() {
                        da[r * m + j] += gv;
                    }
                });
            }
        }
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), Some(0.5));
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn relu_gradient_gate() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 1.0]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        // 1x1 kernel mapping each channel onto itself.
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = tape.constant(t(&[3, 3, 1, 1], &w));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        // Single-channel all-ones 1x1 kernel.
        let x1 = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y1 = tape.conv2d(x1, ones, None, 1, 0).unwrap();
        assert_eq!(tape.value(y1).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_stride_and_padding_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 7, 7]));
        let w = tape.constant(Tensor::zeros([4, 2, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 4]);
        let w_bad = tape.constant(Tensor::zeros([4, 3, 3, 3]));
        let err = tape.conv2d(x, w_bad, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let mut tape = Tape::new();
        let xv = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, -0.25, 0.0]);
        let x = tape.leaf(xv.clone(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

        tape.reset();
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), xv);
    }

    #[test]
    fn non_scalar_loss_and_disconnected_leaf() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([3]), true);
        let unused = tape.leaf(Tensor::full([2], 4.0), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        match tape.matmul(a, b).unwrap_err() {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("{e}"),
        }
        let c = tape.constant(Tensor::zeros([3]));
        assert!(tape.add(a, c).is_err());
        let d = tape.constant(Tensor::zeros([2]));
        assert!(tape.add_bias(a, d).is_err());
        assert!(tape.add_bias(a, c).is_ok());
        assert!(tape.gather(a, &[0, 3]).is_err());
        assert!(tape.mean_pool_spatial(a).is_err());
    }

    #[test]
    fn forward_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, -1.0]));
        let m = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[-1.0, -1.0]);
        let tr = tape.transpose(a).unwrap();
        assert_eq!(tape.value(tr).data(), &[1.0, 3.0, 2.0, 4.0]);
        let cat = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 1.0, 3.0, 4.0, -1.0]);
        let lse = tape.log_sum_exp(a).unwrap();
        let want = (1f64.exp() + 2f64.exp()).ln();
        assert!((tape.value(lse).data()[0] - want).abs() < 1e-15);
        let g = tape.gather(a, &[1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, 3.0]);
        let z = tape.constant(Tensor::zeros([1, 3]));
        let zn = tape.l2_normalize(z).unwrap();
        assert_eq!(tape.value(zn).data(), &[0.0, 0.0, 0.0]);
        let masked = tape.constant(t(&[1, 2], &[f64::NEG_INFINITY, 0.5]));
        let l = tape.log_sum_exp(masked).unwrap();
        assert_eq!(tape.value(l).data(), &[0.5]);
    }

    #[test]
    fn param_binding_is_memoised() {
        let p = Param::new("w", Tensor::full([2], 1.5));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let s = tape.mul(a, b).unwrap();
        let s = tape.sum(s);
        tape.backward(s).unwrap();
        assert_eq!(tape.param_grad("w").unwrap().data(), &[3.0, 3.0]);
        assert!(tape.param_grad("missing").is_none());
        let f = tape.frozen(&p);
        assert!(!tape.requires_grad(f));
    }
}
