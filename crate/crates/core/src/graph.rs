//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and the operand handles needed by its backward rule. [`Graph::backward`]
//! walks the tape in reverse execution order and returns [`Gradients`] for
//! every node that (transitively) depends on a gradient-tracking leaf.
//!
//! Only the operations the recognizer needs are provided; there is no
//! general broadcasting.

use crate::exec::Exec;
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{shape_err, split_axis, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Upsample2x {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddColumn {
        m: Var,
        v: Var,
        cols: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        id: usize,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recorded computation. Confined to the thread that builds it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `d loss / d var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. It tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
    }

    /// Records a leaf that never tracks gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-D input and kernel, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input has {} channels but kernel {:?} expects {}",
                    xs[1], ws, ws[1]
                ),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::Param {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        if geom.kh == 0 || geom.kw == 0 || geom.kh > geom.h + 2 * pad.0 || geom.kw > geom.w + 2 * pad.1 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit padded input {}x{}",
                    geom.kh,
                    geom.kw,
                    geom.h + 2 * pad.0,
                    geom.w + 2 * pad.1
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} for {} output channels", self.shape(b), geom.cout),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.exec,
            &geom,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
        );
        let (oh, ow) = geom.out_hw();
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(vec![geom.n, geom.cout, oh, ow], out, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn pool_geom(
        &self,
        op: &'static str,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<PoolGeom, TensorError> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(shape_err(op, format!("expected 4-D input, got {xs:?}")));
        }
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::Param {
                op,
                detail: format!("window {window:?} and stride {stride:?} must be nonzero"),
            });
        }
        if window.0 > xs[2] || window.1 > xs[3] {
            return Err(shape_err(
                op,
                format!("window {window:?} larger than input {}x{}", xs[2], xs[3]),
            ));
        }
        Ok(PoolGeom {
            planes: xs[0] * xs[1],
            h: xs[2],
            w: xs[3],
            window,
            stride,
        })
    }

    pub fn max_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let geom = self.pool_geom("max_pool2d", x, window, stride)?;
        let (out, arg) = kernels::max_pool_forward(&geom, self.data(x));
        let (oh, ow) = geom.out_hw();
        let xs = self.shape(x);
        let shape = vec![xs[0], xs[1], oh, ow];
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::MaxPool { x, arg }, rg))
    }

    pub fn avg_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let geom = self.pool_geom("avg_pool2d", x, window, stride)?;
        let out = kernels::avg_pool_forward(&geom, self.data(x));
        let (oh, ow) = geom.out_hw();
        let xs = self.shape(x);
        let shape = vec![xs[0], xs[1], oh, ow];
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::AvgPool { x, geom }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("upsample2x", format!("expected 4-D input, got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let out = kernels::upsample2x_forward(planes, h, w, self.data(x));
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            vec![xs[0], xs[1], 2 * h, 2 * w],
            out,
            Op::Upsample2x { x, planes, h, w },
            rg,
        ))
    }

    /// Matrix product of `[m×k]` with `[k×n]`, or with a `[k]` vector
    /// (giving `[m]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = match as_[..] {
            [m, k] => (m, k),
            _ => return Err(shape_err("matmul", format!("left operand must be 2-D, got {as_:?}"))),
        };
        let (k2, n, out_shape) = match bs[..] {
            [k2, n] => (k2, n, vec![m, n]),
            [k2] => (k2, 1, vec![m]),
            _ => return Err(shape_err("matmul", format!("right operand must be 1-D or 2-D, got {bs:?}"))),
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner extents differ: {as_:?} x {bs:?}")));
        }
        let out = kernels::matmul(self.exec, self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out_shape, out, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, data, Op::Scale(a, s), rg)
    }

    /// Adds vector `v[r]` to every column of matrix `m[r×c]`.
    pub fn add_column(&mut self, m: Var, v: Var) -> Result<Var, TensorError> {
        let (ms, vs) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        let (r, c) = match ms[..] {
            [r, c] if vs == [r] => (r, c),
            _ => return Err(shape_err("add_column", format!("{ms:?} + column {vs:?}"))),
        };
        let (md, vd) = (self.data(m), self.data(v));
        let data = (0..r * c).map(|i| md[i] + vd[i / c]).collect();
        let rg = self.any_grad(&[m, v]);
        Ok(self.push(ms, data, Op::AddColumn { m, v, cols: c }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..][..len]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, data, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Row `id` of a `[V×m]` table.
    pub fn embedding(&mut self, table: Var, id: usize) -> Result<Var, TensorError> {
        let ts = self.shape(table).to_vec();
        let [v, m] = ts[..] else {
            return Err(shape_err("embedding", format!("table must be 2-D, got {ts:?}")));
        };
        if id >= v {
            return Err(TensorError::Index {
                op: "embedding",
                index: id,
                extent: v,
            });
        }
        let data = self.data(table)[id * m..][..m].to_vec();
        let rg = self.any_grad(&[table]);
        Ok(self.push(vec![m], data, Op::Embedding { table, id }, rg))
    }

    /// `−log softmax(logits)[target]` for a 1-D logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 1 {
            return Err(shape_err("cross_entropy", format!("logits must be 1-D, got {ls:?}")));
        }
        if target >= ls[0] {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: target,
                extent: ls[0],
            });
        }
        let z = self.data(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        let probs = z.iter().map(|v| (v - log_norm).exp()).collect();
        let loss = log_norm - z[target];
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out_shape, out, Op::SumAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(a), shape),
            ));
        }
        let data = self.data(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        if let Op::MatMul { a, b, m, k, n: 1 } = node.op {
            // Matrix-vector product: accumulate the outer-product gradient in
            // place instead of materializing it.
            if self.nodes[a.0].requires_grad {
                match &mut grads[a.0] {
                    Some(existing) => kernels::outer_accumulate(self.exec, existing, g, self.data(b), m, k),
                    slot @ None => *slot = Some(kernels::matmul_nt(self.exec, g, self.data(b), m, 1, k)),
                }
            }
            if self.nodes[b.0].requires_grad {
                let delta = kernels::matmul_tn(self.exec, self.data(a), g, m, k, 1);
                match &mut grads[b.0] {
                    Some(existing) => existing.iter_mut().zip(&delta).for_each(|(x, d)| *x += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            return;
        }
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if rg(*x) {
                    acc(*x, kernels::conv2d_backward_input(self.exec, geom, g, self.data(*w)));
                }
                if rg(*w) {
                    acc(*w, kernels::conv2d_backward_weight(self.exec, geom, g, self.data(*x)));
                }
                if let Some(b) = b {
                    acc(*b, kernels::conv2d_backward_bias(geom, g));
                }
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &d) in arg.iter().zip(g) {
                    dx[src] += d;
                }
                acc(*x, dx);
            }
            Op::AvgPool { x, geom } => acc(*x, kernels::avg_pool_backward(geom, g)),
            Op::Upsample2x { x, planes, h, w } => {
                acc(*x, kernels::upsample2x_backward(*planes, *h, *w, g))
            }
            Op::MatMul { a, b, m, k, n } => {
                if rg(*a) {
                    acc(*a, kernels::matmul_nt(self.exec, g, self.data(*b), *m, *n, *k));
                }
                if rg(*b) {
                    acc(*b, kernels::matmul_tn(self.exec, self.data(*a), g, *m, *k, *n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    acc(*a, g.iter().zip(bd).map(|(d, y)| d * y).collect());
                }
                if rg(*b) {
                    acc(*b, g.iter().zip(ad).map(|(d, x)| d * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|d| d * s).collect()),
            Op::AddColumn { m, v, cols } => {
                acc(*m, g.to_vec());
                if rg(*v) {
                    acc(*v, g.chunks(*cols).map(|row| row.iter().sum()).collect());
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if rg(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total * inner + offset..][..len]);
                        }
                        acc(p, d);
                    }
                    offset += len;
                }
            }
            Op::Tanh(a) => acc(*a, g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect()),
            Op::Sigmoid(a) => acc(*a, g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect()),
            Op::Exp(a) => acc(*a, g.iter().zip(out).map(|(d, y)| d * y).collect()),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Embedding { table, id } => {
                let ts = self.shape(*table);
                let m = ts[1];
                let mut d = vec![0.0; ts[0] * m];
                d[id * m..][..m].copy_from_slice(g);
                acc(*table, d);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*target] -= g[0];
                acc(*logits, d);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let input = Tensor::from_fn(&[1, 2, 4, 5], |i| (i as f64 * 0.37).sin());
        let mut kernel = Tensor::zeros(&[2, 2, 3, 3]);
        kernel.data_mut()[4] = 1.0; // out 0 <- in 0 center
        kernel.data_mut()[9 + 9 + 9 + 4] = 1.0; // out 1 <- in 1 center
        let x = g.constant(input.clone());
        let k = g.constant(kernel);
        let y = g.conv2d(x, k, None, (1, 1), (1, 1)).unwrap();
        assert_eq!(g.data(y), input.data());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let k = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, k, None, (1, 1), (0, 0)).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_zero_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, k, None, (1, 1), (0, 0)).is_err());
        assert!(g.conv2d(x, k, None, (0, 1), (1, 1)).is_err());
        assert!(g.conv2d(x, k, None, (1, 1), (1, 1)).is_ok());
    }

    #[test]
    fn pooling_single_window() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mx = g.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        let av = g.avg_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(g.data(mx), &[4.0]);
        assert_eq!(g.data(av), &[2.5]);
    }

    #[test]
    fn pooling_constant_input_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 6, 4], 0.75));
        let mx = g.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        let av = g.avg_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert!(g.data(mx).iter().all(|&v| v == 0.75));
        assert!(g.data(av).iter().all(|&v| v == 0.75));
        assert_eq!(g.shape(mx), &[1, 2, 3, 2]);
    }

    #[test]
    fn pooling_rejects_zero_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.max_pool2d(x, (0, 2), (2, 2)).is_err());
        assert!(g.avg_pool2d(x, (2, 0), (2, 2)).is_err());
    }

    #[test]
    fn upsample_replicates_and_inverts() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let y = g.upsample2x(x).unwrap();
        assert_eq!(
            g.data(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let out = g.data(y);
        let picked: Vec<f64> = (0..2).flat_map(|r| (0..2).map(move |c| (r, c))).map(|(r, c)| out[(2 * r) * 4 + 2 * c]).collect();
        assert_eq!(picked, vec![1.0, 2.0, 3.0, 4.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[4.0; 4]);
    }

    #[test]
    fn softmax_and_cross_entropy_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let p = g.softmax(x, 0).unwrap();
        for &v in g.data(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = g.constant(t(&[3], &[0.0, 0.0, 2f64.ln()]));
        let ce = g.cross_entropy(z, 2).unwrap();
        assert!((g.data(ce)[0] - 2f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(z, 3).is_err());
        assert!(g.softmax(z, 1).is_err());
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1]));
        let th = g.tanh(x);
        let sg = g.sigmoid(x);
        assert_eq!(g.data(th), &[0.0]);
        assert_eq!(g.data(sg), &[0.5]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let b = g.leaf(&t(&[2], &[5.0, 6.0]).with_grad());
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut g = Graph::new();
        let w = g.leaf(&t(&[1], &[3.0]).with_grad());
        let a = g.scale(w, 2.0);
        let b = g.add(a, w).unwrap();
        let loss = g.sum(b);
        assert_eq!(g.backward(loss).unwrap().get(w).data(), &[3.0]);
    }

    #[test]
    fn independent_graphs_do_not_interfere() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let w1 = g1.leaf(&t(&[2], &[1.0, -1.0]).with_grad());
        let w2 = g2.leaf(&t(&[2], &[4.0, 5.0]).with_grad());
        let s1 = g1.mul(w1, w1).unwrap();
        let l1 = g1.sum(s1);
        let l2 = g2.sum(w2);
        let gr1 = g1.backward(l1).unwrap();
        let gr2 = g2.backward(l2).unwrap();
        assert_eq!(gr1.get(w1).data(), &[2.0, -2.0]);
        assert_eq!(gr2.get(w2).data(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_and_sum_axis_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.data(c), &[0.0, 1.0, 10.0, 11.0, 12.0, 2.0, 3.0, 13.0, 14.0, 15.0]);
        assert!(g.concat(&[a, b], 0).is_err());
        assert!(g.concat(&[a, b], 2).is_err());
        let s = g.sum_axis(c, 1).unwrap();
        assert_eq!(g.data(s), &[34.0, 47.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let row = g.embedding(e, 1).unwrap();
        assert_eq!(g.data(row), &[2.0, 3.0]);
        assert!(matches!(g.embedding(e, 3), Err(TensorError::Index { .. })));
    }
}
