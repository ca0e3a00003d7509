//! The recording tape and its reverse sweep.
//!
//! Every operation evaluates eagerly and appends one node. Parents always
//! have smaller ids than their children, so a single pass over the nodes in
//! descending id order is a valid reverse topological order.

use std::sync::Arc;

use crate::kernels::{gemm, ConvGeometry, SamplePlan};
use crate::{AdError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone)]
pub enum Op {
    /// A differentiable input (a parameter).
    Leaf,
    /// A fixed input; never receives an adjoint.
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Power(f64),
    Clamp { lo: f64, hi: f64 },
    Logistic,
    /// `scale * x + shift` with constant coefficients.
    Affine { scale: f64, shift: f64 },
    /// Softmax over the last axis.
    Softmax,
    Sum,
    Mean,
    /// Maximum over all elements; the adjoint goes to the first maximum.
    MaxReduce { argmax: usize },
    /// `[C,H,W] (*) [O,C,kh,kw] (+ [O])`; keeps the im2col buffer.
    Conv2d {
        geometry: ConvGeometry,
        has_bias: bool,
        cols: Arc<Vec<f64>>,
    },
    LeakyRelu(f64),
    BilinearSample(Arc<SamplePlan>),
    MatMul,
    Reshape,
    Transpose2d,
    /// `out[i] = in[index[i]]`.
    Gather(Arc<Vec<usize>>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Power(_) => "power",
            Op::Clamp { .. } => "clamp",
            Op::Logistic => "logistic",
            Op::Affine { .. } => "affine",
            Op::Softmax => "softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MaxReduce { .. } => "max",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::BilinearSample(_) => "bilinear_sample",
            Op::MatMul => "matmul",
            Op::Reshape => "reshape",
            Op::Transpose2d => "transpose2d",
            Op::Gather(_) => "gather",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<usize>,
    pub value: Tensor,
    /// Whether any leaf reaches this node; adjoints are only kept for these.
    pub needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    /// Takes ownership of an adjoint, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.adjoints.get_mut(var.0).and_then(Option::take)
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

    pub fn node(&self, var: Var) -> &Node {
        &self.nodes[var.0]
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Appends a node. Parent ids must already be on the tape.
    pub fn record(&mut self, op: Op, parents: &[Var], value: Tensor) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            parents: parents.iter().map(|p| p.0).collect(),
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.record(Op::Leaf, &[], value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.record(Op::Constant, &[], value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var, AdError> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.record(op, &[a, b], value))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.record(op, &[a], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_map(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_map(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_map(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_map(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(Op::Power(p), a, |x| x.powf(p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(Op::Logistic, a, logistic)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(Op::Affine { scale, shift }, a, |x| scale * x + shift)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Op::LeakyRelu(slope), a, |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, AdError> {
        let v = self.value(a);
        let n = *v.shape().last().ok_or_else(|| AdError::InvalidArgument {
            op: "softmax",
            msg: "rank-0 input has no last axis".into(),
        })?;
        let mut data = v.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
        }
        let value = Tensor::new(v.shape(), data)?;
        Ok(self.record(Op::Softmax, &[a], value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(Op::Sum, &[a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.record(Op::Mean, &[a], Tensor::scalar(s))
    }

    pub fn max(&mut self, a: Var) -> Result<Var, AdError> {
        let v = self.value(a);
        let mut best: Option<(usize, f64)> = None;
        for (i, &x) in v.data().iter().enumerate() {
            if best.is_none_or(|(_, b)| x > b) {
                best = Some((i, x));
            }
        }
        let (argmax, m) = best.ok_or_else(|| AdError::InvalidArgument {
            op: "max",
            msg: "cannot reduce an empty tensor".into(),
        })?;
        Ok(self.record(Op::MaxReduce { argmax }, &[a], Tensor::scalar(m)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.record(Op::Reshape, &[a], value))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var, AdError> {
        let v = self.value(a);
        let &[r, c] = v.shape() else {
            return Err(AdError::InvalidArgument {
                op: "transpose2d",
                msg: format!("expected a rank-2 tensor, got shape {:?}", v.shape()),
            });
        };
        let mut data = vec![0.0; r * c];
        transpose_into(v.data(), r, c, &mut data);
        let value = Tensor::new(&[c, r], data)?;
        Ok(self.record(Op::Transpose2d, &[a], value))
    }

    /// Selects elements by flat index into a tensor of shape `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var, AdError> {
        let v = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(AdError::InvalidArgument {
                op: "gather",
                msg: format!("index {} out of range for shape {:?}", bad, v.shape()),
            });
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(Op::Gather(index), &[a], value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.record(Op::MatMul, &[a, b], value))
    }

    /// 2-D convolution of a `[C,H,W]` input with an `[O,C,kh,kw]` kernel and
    /// optional `[O]` bias, zero padding on all sides.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AdError> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let mismatch = || AdError::ShapeMismatch {
            op: "conv2d",
            lhs: si.clone(),
            rhs: sk.clone(),
        };
        let (&[c, h, w], &[o, kc, kh, kw]) = (si.as_slice(), sk.as_slice()) else {
            return Err(mismatch());
        };
        if c != kc || kh > h + 2 * padding || kw > w + 2 * padding || stride == 0 {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(AdError::ShapeMismatch {
                    op: "conv2d(bias)",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![o],
                });
            }
        }
        let geometry = ConvGeometry {
            in_channels: c,
            in_h: h,
            in_w: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (oh, ow, p) = (geometry.out_h(), geometry.out_w(), geometry.positions());
        let cols = geometry.im2col(self.value(input).data());
        let mut out = vec![0.0; o * p];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(p).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        gemm(
            o,
            geometry.patch_len(),
            p,
            self.value(kernel).data(),
            false,
            &cols,
            false,
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let value = Tensor::new(&[o, oh, ow], out)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.record(
            Op::Conv2d {
                geometry,
                has_bias: bias.is_some(),
                cols: Arc::new(cols),
            },
            &parents,
            value,
        ))
    }

    /// Resamples a `[C,Hs,Ws]` tensor through a precomputed plan.
    pub fn bilinear_sample(&mut self, src: Var, plan: Arc<SamplePlan>) -> Result<Var, AdError> {
        let shape = self.shape(src);
        let (ph, pw) = plan.src_dims();
        let &[c, h, w] = shape else {
            return Err(AdError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: shape.to_vec(),
                rhs: vec![0, ph, pw],
            });
        };
        if (h, w) != (ph, pw) {
            return Err(AdError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: shape.to_vec(),
                rhs: vec![c, ph, pw],
            });
        }
        let (oh, ow) = plan.out_dims();
        let out = plan.forward(c, self.value(src).data());
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.record(Op::BilinearSample(plan), &[src], value))
    }

    /// Reverse sweep from a scalar root. Adjoints are returned for every
    /// node that depends on a leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients, AdError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AdError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = adjoints[id].take() else { continue };
            self.propagate(node, &g, &mut adjoints);
            adjoints[id] = Some(g);
        }
        Ok(Gradients { adjoints })
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Tensor>], pid: usize) -> &'a mut [f64] {
        adj[pid]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[pid].value.shape()))
            .data_mut()
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |i: usize| self.nodes[node.parents[i]].value.data();
        let out = node.value.data();
        let wants = |i: usize| self.nodes[node.parents[i]].needs_grad;

        // Accumulates an elementwise contribution `f(k)` into parent `i`.
        let acc = |adj: &mut [Option<Tensor>], i: usize, f: &dyn Fn(usize) -> f64| {
            if wants(i) {
                for (k, a) in self.slot(adj, node.parents[i]).iter_mut().enumerate() {
                    *a += f(k);
                }
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add => {
                acc(adj, 0, &|k| gd[k]);
                acc(adj, 1, &|k| gd[k]);
            }
            Op::Sub => {
                acc(adj, 0, &|k| gd[k]);
                acc(adj, 1, &|k| -gd[k]);
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                acc(adj, 0, &|k| gd[k] * b[k]);
                acc(adj, 1, &|k| gd[k] * a[k]);
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                acc(adj, 0, &|k| gd[k] / b[k]);
                acc(adj, 1, &|k| -gd[k] * a[k] / (b[k] * b[k]));
            }
            Op::Neg => acc(adj, 0, &|k| -gd[k]),
            Op::Exp => acc(adj, 0, &|k| gd[k] * out[k]),
            Op::Log => {
                let a = val(0);
                acc(adj, 0, &|k| gd[k] / a[k]);
            }
            Op::Power(p) => {
                let a = val(0);
                acc(adj, 0, &|k| gd[k] * p * a[k].powf(p - 1.0));
            }
            Op::Clamp { lo, hi } => {
                let a = val(0);
                acc(adj, 0, &|k| if a[k] > *lo && a[k] < *hi { gd[k] } else { 0.0 });
            }
            Op::Logistic => acc(adj, 0, &|k| gd[k] * out[k] * (1.0 - out[k])),
            Op::Affine { scale, .. } => acc(adj, 0, &|k| gd[k] * scale),
            Op::LeakyRelu(slope) => {
                let a = val(0);
                acc(adj, 0, &|k| if a[k] > 0.0 { gd[k] } else { gd[k] * slope });
            }
            Op::Softmax => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dots = vec![0.0; out.len() / n.max(1)];
                for (r, d) in dots.iter_mut().enumerate() {
                    *d = (0..n).map(|j| gd[r * n + j] * out[r * n + j]).sum();
                }
                acc(adj, 0, &|k| out[k] * (gd[k] - dots[k / n]));
            }
            Op::Sum => {
                let g0 = gd[0];
                acc(adj, 0, &|_| g0);
            }
            Op::Mean => {
                let g0 = gd[0] / val(0).len().max(1) as f64;
                acc(adj, 0, &|_| g0);
            }
            Op::MaxReduce { argmax } => {
                let (g0, am) = (gd[0], *argmax);
                acc(adj, 0, &|k| if k == am { g0 } else { 0.0 });
            }
            Op::Reshape => acc(adj, 0, &|k| gd[k]),
            Op::Transpose2d => {
                let &[r, c] = node.value.shape() else { unreachable!() };
                let mut t = vec![0.0; r * c];
                transpose_into(gd, r, c, &mut t);
                acc(adj, 0, &|k| t[k]);
            }
            Op::Gather(index) => {
                if wants(0) {
                    let s = self.slot(adj, node.parents[0]);
                    for (&i, &gv) in index.iter().zip(gd) {
                        s[i] += gv;
                    }
                }
            }
            Op::MatMul => {
                let (sa, sb) = (self.nodes[node.parents[0]].value.shape(), self.nodes[node.parents[1]].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(0) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(1), true, 0.0, &mut da);
                    acc(adj, 0, &|i| da[i]);
                }
                if wants(1) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(0), true, gd, false, 0.0, &mut db);
                    acc(adj, 1, &|i| db[i]);
                }
            }
            Op::Conv2d {
                geometry,
                has_bias,
                cols,
            } => {
                let o = node.value.shape()[0];
                let (p, pl) = (geometry.positions(), geometry.patch_len());
                if wants(0) {
                    let mut dcols = vec![0.0; pl * p];
                    gemm(pl, o, p, val(1), true, gd, false, 0.0, &mut dcols);
                    geometry.col2im(&dcols, self.slot(adj, node.parents[0]));
                }
                if wants(1) {
                    let mut dk = vec![0.0; o * pl];
                    gemm(o, p, pl, gd, false, cols, true, 0.0, &mut dk);
                    acc(adj, 1, &|i| dk[i]);
                }
                if *has_bias && wants(2) {
                    let db: Vec<f64> = gd.chunks(p).map(|row| row.iter().sum()).collect();
                    acc(adj, 2, &|i| db[i]);
                }
            }
            Op::BilinearSample(plan) => {
                if wants(0) {
                    let c = node.value.shape()[0];
                    plan.backward(c, gd, self.slot(adj, node.parents[0]));
                }
            }
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
