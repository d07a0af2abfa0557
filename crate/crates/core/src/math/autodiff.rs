//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order of the op graph. [`Graph::backward`] walks the
//! nodes once in reverse and accumulates vector-Jacobian products.
//!
//! Only the operations the BEV detector and its losses need are provided.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::math::linalg::{
    chol_factor_from_raw, chol_param_count, cholesky_lower, cholesky_solve, inverse_from_factor, logdet_from_factor,
    lower_times_transpose, RAW_DIAG_CLAMP,
};

/// A dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Usage(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Tanh(Var),
    Sum(Var),
    MaxStack { inputs: Vec<Var>, argmax: Vec<u32> },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Gather { x: Var, idx: Vec<usize> },
    Reshape(Var),
    CholCov { raw: Var, dim: usize },
    DiagCov { raw: Var, dim: usize },
    LogDet { cov: Var, dim: usize },
    QuadForm { e: Var, cov: Var, dim: usize },
    Focal { logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
    SmoothL1 { x: Var, beta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn usage<T>(msg: String) -> Result<T> {
    Err(Error::Usage(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    /// Copy of the current value of `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// A trainable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape != y.shape {
            return usage(format!("{name}: shape mismatch {:?} vs {:?}", x.shape, y.shape));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        Ok(Tensor { shape: x.shape.clone(), data })
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let x = &nodes[a.0].value;
        Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |v| v * s);
        self.push(t, Op::Scale(a, s), self.needs(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.unary(a, |v| v.max(0.0));
        self.push(t, Op::Relu(a), self.needs(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a), self.needs(&[a]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        self.push(t, Op::Exp(a), self.needs(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(t, Op::Tanh(a), self.needs(&[a]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.with_value(a, |t| t.data.iter().sum());
        self.push(Tensor::scalar(s), Op::Sum(a), self.needs(&[a]))
    }

    /// Elementwise maximum across same-shaped tensors (ties go to the first input).
    pub fn max_stack(&self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return usage("max_stack: no inputs".into());
        };
        let shape = self.shape_of(first);
        let nodes = self.nodes.borrow();
        let mut out = nodes[first.0].value.data.clone();
        let mut argmax = vec![0u32; out.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            let t = &nodes[v.0].value;
            if t.shape != shape {
                return usage(format!("max_stack: shape mismatch {:?} vs {shape:?}", t.shape));
            }
            for (i, x) in t.data.iter().enumerate() {
                if *x > out[i] {
                    out[i] = *x;
                    argmax[i] = k as u32;
                }
            }
        }
        drop(nodes);
        let rg = self.needs(inputs);
        Ok(self.push(Tensor { shape, data: out }, Op::MaxStack { inputs: inputs.to_vec(), argmax }, rg))
    }

    /// Dense affine map: `x [n, k] · wᵀ [k, m] + b [m]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xt, wt, bt) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
        if xt.shape.len() != 2 || wt.shape.len() != 2 || xt.shape[1] != wt.shape[1] {
            return usage(format!("linear: incompatible shapes {:?} and {:?}", xt.shape, wt.shape));
        }
        let (n, k, m) = (xt.shape[0], xt.shape[1], wt.shape[0]);
        if bt.shape != [m] {
            return usage(format!("linear: bias shape {:?}, expected [{m}]", bt.shape));
        }
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let xr = &xt.data[r * k..(r + 1) * k];
            for c in 0..m {
                let wc = &wt.data[c * k..(c + 1) * k];
                out[r * m + c] = bt.data[c] + xr.iter().zip(wc).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        drop(nodes);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Linear { x, w, b }, rg))
    }

    /// 2-D cross-correlation of `x [C, H, W]` with `w [O, C, K, K]`, bias `b [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xt, wt, bt) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
        let geom = ConvGeom::new(&xt.shape, &wt.shape, stride, pad)?;
        if bt.shape != [geom.out_c] {
            return usage(format!("conv2d: bias shape {:?}, expected [{}]", bt.shape, geom.out_c));
        }
        let out = geom.forward(&xt.data, &wt.data, &bt.data);
        drop(nodes);
        let rg = self.needs(&[x, w, b]);
        let shape = vec![geom.out_c, geom.out_h, geom.out_w];
        Ok(self.push(Tensor { shape, data: out }, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`.
    pub fn gather(&self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let xt = &nodes[x.0].value;
        if let Some(bad) = idx.iter().find(|i| **i >= xt.numel()) {
            return usage(format!("gather: index {bad} out of range for {} values", xt.numel()));
        }
        let data: Vec<f64> = idx.iter().map(|i| xt.data[*i]).collect();
        drop(nodes);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(data), Op::Gather { x, idx }, rg))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let mut t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return usage(format!("reshape: {:?} -> {shape:?} changes size", t.shape));
        }
        t.shape = shape;
        Ok(self.push(t, Op::Reshape(x), self.needs(&[x])))
    }

    /// Batched Cholesky parameterization: `raw [n, D(D+1)/2] -> Σ [n, D, D]`.
    pub fn chol_cov(&self, raw: Var, dim: usize) -> Result<Var> {
        let p = chol_param_count(dim);
        let (n, data) = {
            let nodes = self.nodes.borrow();
            let rt = &nodes[raw.0].value;
            if rt.shape.len() != 2 || rt.shape[1] != p {
                return usage(format!("chol_cov: raw shape {:?}, expected [n, {p}]", rt.shape));
            }
            if rt.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("chol_cov: non-finite raw value".into()));
            }
            let n = rt.shape[0];
            let mut out = vec![0.0; n * dim * dim];
            let mut l = vec![0.0; dim * dim];
            for s in 0..n {
                chol_factor_from_raw(&rt.data[s * p..(s + 1) * p], dim, &mut l);
                lower_times_transpose(&l, dim, &mut out[s * dim * dim..(s + 1) * dim * dim]);
            }
            (n, out)
        };
        let rg = self.needs(&[raw]);
        Ok(self.push(Tensor { shape: vec![n, dim, dim], data }, Op::CholCov { raw, dim }, rg))
    }

    /// Batched diagonal covariance: `raw [n, D] -> Σ [n, D, D]` with `Σ_dd = exp(2·raw_d)`.
    pub fn diag_cov(&self, raw: Var) -> Result<Var> {
        let shape = self.shape_of(raw);
        if shape.len() != 2 {
            return usage(format!("diag_cov: raw shape {shape:?}, expected [n, D]"));
        }
        let (n, dim) = (shape[0], shape[1]);
        let mut out = vec![0.0; n * dim * dim];
        self.with_value(raw, |rt| {
            for s in 0..n {
                for d in 0..dim {
                    let r = rt.data[s * dim + d].clamp(-RAW_DIAG_CLAMP, RAW_DIAG_CLAMP);
                    out[s * dim * dim + d * dim + d] = (2.0 * r).exp();
                }
            }
        });
        let rg = self.needs(&[raw]);
        Ok(self.push(Tensor { shape: vec![n, dim, dim], data: out }, Op::DiagCov { raw, dim }, rg))
    }

    /// Batched log-determinant: `Σ [n, D, D] -> [n]`.
    pub fn logdet(&self, cov: Var) -> Result<Var> {
        let (n, dim) = self.batch_dims(cov, "logdet")?;
        let mut out = vec![0.0; n];
        self.with_value(cov, |ct| -> Result<()> {
            for (s, o) in out.iter_mut().enumerate() {
                let l = cholesky_lower(&ct.data[s * dim * dim..(s + 1) * dim * dim], dim)
                    .ok_or_else(|| Error::NotPositiveDefinite(format!("logdet: batch {s}")))?;
                *o = logdet_from_factor(&l, dim);
            }
            Ok(())
        })?;
        let rg = self.needs(&[cov]);
        Ok(self.push(Tensor::from_vec(out), Op::LogDet { cov, dim }, rg))
    }

    /// Batched quadratic form `eᵀ Σ⁻¹ e`: `e [n, D]`, `Σ [n, D, D]` -> `[n]`.
    pub fn quad_form(&self, e: Var, cov: Var) -> Result<Var> {
        let (n, dim) = self.batch_dims(cov, "quad_form")?;
        let es = self.shape_of(e);
        if es != [n, dim] {
            return usage(format!("quad_form: residual shape {es:?}, expected [{n}, {dim}]"));
        }
        let mut out = vec![0.0; n];
        {
            let nodes = self.nodes.borrow();
            let (et, ct) = (&nodes[e.0].value, &nodes[cov.0].value);
            let mut u = vec![0.0; dim];
            for (s, o) in out.iter_mut().enumerate() {
                let l = cholesky_lower(&ct.data[s * dim * dim..(s + 1) * dim * dim], dim)
                    .ok_or_else(|| Error::NotPositiveDefinite(format!("quad_form: batch {s}")))?;
                let ev = &et.data[s * dim..(s + 1) * dim];
                u.copy_from_slice(ev);
                cholesky_solve(&l, dim, &mut u);
                *o = ev.iter().zip(&u).map(|(p, q)| p * q).sum();
            }
        }
        let rg = self.needs(&[e, cov]);
        Ok(self.push(Tensor::from_vec(out), Op::QuadForm { e, cov, dim }, rg))
    }

    fn batch_dims(&self, cov: Var, name: &str) -> Result<(usize, usize)> {
        let s = self.shape_of(cov);
        if s.len() != 3 || s[1] != s[2] {
            return usage(format!("{name}: covariance shape {s:?}, expected [n, D, D]"));
        }
        Ok((s[0], s[1]))
    }

    /// Summed sigmoid focal loss over all elements. `targets` are 0 or 1.
    pub fn focal_loss(&self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var> {
        let total = self.with_value(logits, |t| -> Result<f64> {
            if t.numel() != targets.len() {
                return usage(format!("focal_loss: {} logits but {} targets", t.numel(), targets.len()));
            }
            Ok(t.data.iter().zip(&targets).map(|(x, y)| focal_term(*x, *y, alpha, gamma).0).sum())
        })?;
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(total), Op::Focal { logits, targets, alpha, gamma }, rg))
    }

    /// Summed smooth-L1 penalty of every element (target zero).
    pub fn smooth_l1(&self, x: Var, beta: f64) -> Var {
        let total = self.with_value(x, |t| t.data.iter().map(|v| smooth_l1_term(*v, beta).0).sum());
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::SmoothL1 { x, beta }, rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[root.0].value.is_scalar() {
            return usage(format!("backward: root must be scalar, got shape {:?}", nodes[root.0].value.shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value.data;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            acc(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            acc(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            acc(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, s) => {
            acc(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += s * q));
        }
        Op::Relu(a) => {
            let av = val(*a);
            acc(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    if av[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value.data;
            acc(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = &node.value.data;
            acc(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            });
        }
        Op::Tanh(a) => {
            let y = &node.value.data;
            acc(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Sum(a) => {
            acc(nodes, grads, *a, |d| d.iter_mut().for_each(|p| *p += g[0]));
        }
        Op::MaxStack { inputs, argmax } => {
            for (k, v) in inputs.iter().enumerate() {
                acc(nodes, grads, *v, |d| {
                    for i in 0..d.len() {
                        if argmax[i] as usize == k {
                            d[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Linear { x, w, b } => {
            let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
            let (n, k, m) = (xt.shape[0], xt.shape[1], wt.shape[0]);
            acc(nodes, grads, *x, |d| {
                for r in 0..n {
                    for c in 0..m {
                        let gv = g[r * m + c];
                        for j in 0..k {
                            d[r * k + j] += gv * wt.data[c * k + j];
                        }
                    }
                }
            });
            acc(nodes, grads, *w, |d| {
                for r in 0..n {
                    for c in 0..m {
                        let gv = g[r * m + c];
                        for j in 0..k {
                            d[c * k + j] += gv * xt.data[r * k + j];
                        }
                    }
                }
            });
            acc(nodes, grads, *b, |d| {
                for r in 0..n {
                    for c in 0..m {
                        d[c] += g[r * m + c];
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = ConvGeom::new(&xt.shape, &wt.shape, *stride, *pad).expect("shapes validated in forward");
            acc(nodes, grads, *x, |d| geom.backward_input(g, &wt.data, d));
            acc(nodes, grads, *w, |d| geom.backward_weight(g, &xt.data, d));
            acc(nodes, grads, *b, |d| {
                let hw = geom.out_h * geom.out_w;
                for (o, db) in d.iter_mut().enumerate() {
                    *db += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            });
        }
        Op::Gather { x, idx } => {
            acc(nodes, grads, *x, |d| {
                for (i, j) in idx.iter().enumerate() {
                    d[*j] += g[i];
                }
            });
        }
        Op::Reshape(x) => {
            acc(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
        }
        Op::CholCov { raw, dim } => {
            let dim = *dim;
            let p = chol_param_count(dim);
            let rv = val(*raw);
            acc(nodes, grads, *raw, |d| {
                let mut l = vec![0.0; dim * dim];
                for s in 0..rv.len() / p {
                    let r = &rv[s * p..(s + 1) * p];
                    chol_factor_from_raw(r, dim, &mut l);
                    let gs = &g[s * dim * dim..(s + 1) * dim * dim];
                    // dLoss/dL = (G + Gᵀ)·L, restricted to the lower triangle.
                    let gl = |rr: usize, cc: usize| -> f64 {
                        (0..dim).map(|k| (gs[rr * dim + k] + gs[k * dim + rr]) * l[k * dim + cc]).sum()
                    };
                    let ds = &mut d[s * p..(s + 1) * p];
                    for dd in 0..dim {
                        if r[dd].abs() <= RAW_DIAG_CLAMP {
                            ds[dd] += gl(dd, dd) * l[dd * dim + dd];
                        }
                    }
                    let mut kk = dim;
                    for rr in 1..dim {
                        for cc in 0..rr {
                            ds[kk] += gl(rr, cc);
                            kk += 1;
                        }
                    }
                }
            });
        }
        Op::DiagCov { raw, dim } => {
            let dim = *dim;
            let rv = val(*raw);
            let y = &node.value.data;
            acc(nodes, grads, *raw, |d| {
                for (i, dv) in d.iter_mut().enumerate() {
                    if rv[i].abs() <= RAW_DIAG_CLAMP {
                        let (s, dd) = (i / dim, i % dim);
                        let j = s * dim * dim + dd * dim + dd;
                        *dv += g[j] * 2.0 * y[j];
                    }
                }
            });
        }
        Op::LogDet { cov, dim } => {
            let dim = *dim;
            let cv = val(*cov);
            acc(nodes, grads, *cov, |d| {
                for (s, gs) in g.iter().enumerate() {
                    let block = &cv[s * dim * dim..(s + 1) * dim * dim];
                    let l = cholesky_lower(block, dim).expect("validated in forward");
                    let inv = inverse_from_factor(&l, dim);
                    for (j, iv) in inv.iter().enumerate() {
                        d[s * dim * dim + j] += gs * iv;
                    }
                }
            });
        }
        Op::QuadForm { e, cov, dim } => {
            let dim = *dim;
            let (ev, cv) = (val(*e), val(*cov));
            let n = g.len();
            let mut us = vec![0.0; n * dim];
            for s in 0..n {
                let l = cholesky_lower(&cv[s * dim * dim..(s + 1) * dim * dim], dim).expect("validated in forward");
                let u = &mut us[s * dim..(s + 1) * dim];
                u.copy_from_slice(&ev[s * dim..(s + 1) * dim]);
                cholesky_solve(&l, dim, u);
            }
            acc(nodes, grads, *e, |d| {
                for s in 0..n {
                    for k in 0..dim {
                        d[s * dim + k] += 2.0 * g[s] * us[s * dim + k];
                    }
                }
            });
            acc(nodes, grads, *cov, |d| {
                for s in 0..n {
                    let u = &us[s * dim..(s + 1) * dim];
                    for r in 0..dim {
                        for c in 0..dim {
                            d[s * dim * dim + r * dim + c] -= g[s] * u[r] * u[c];
                        }
                    }
                }
            });
        }
        Op::Focal { logits, targets, alpha, gamma } => {
            let xv = val(*logits);
            acc(nodes, grads, *logits, |d| {
                for i in 0..d.len() {
                    d[i] += g[0] * focal_term(xv[i], targets[i], *alpha, *gamma).1;
                }
            });
        }
        Op::SmoothL1 { x, beta } => {
            let xv = val(*x);
            acc(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[0] * smooth_l1_term(xv[i], *beta).1;
                }
            });
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss value and derivative w.r.t. the logit for one element.
fn focal_term(x: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let positive = target >= 0.5;
    let s = if positive { 1.0 } else { -1.0 };
    let alpha_t = if positive { alpha } else { 1.0 - alpha };
    let log_pt = -softplus(-s * x);
    let pt = sigmoid(s * x);
    let q = 1.0 - pt;
    let loss = -alpha_t * q.powf(gamma) * log_pt;
    // d/dx = s·α_t·[γ·q^γ·p_t·log p_t − q^(γ+1)]
    let grad = s * alpha_t * (gamma * q.powf(gamma) * pt * log_pt - q.powf(gamma + 1.0));
    (loss, grad)
}

fn smooth_l1_term(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Index arithmetic for a single-sample convolution.
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 || w[1] != x[0] || w[2] != w[3] || stride == 0 {
            return usage(format!("conv2d: incompatible input {x:?} / kernel {w:?} / stride {stride}"));
        }
        let k = w[2];
        if x[1] + 2 * pad < k || x[2] + 2 * pad < k {
            return usage(format!("conv2d: kernel {k} larger than padded input {x:?}"));
        }
        Ok(Self {
            in_c: x[0],
            in_h: x[1],
            in_w: x[2],
            out_c: w[0],
            out_h: (x[1] + 2 * pad - k) / stride + 1,
            out_w: (x[2] + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        })
    }

    /// Output positions `o` whose input coordinate `o·stride + kk − pad` lies in `[0, n)`.
    fn valid(&self, kk: usize, n: usize, out_n: usize) -> (usize, usize) {
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        let hi = if n + self.pad > kk { ((n + self.pad - kk - 1) / self.stride + 1).min(out_n) } else { 0 };
        (lo, hi.max(lo))
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h, self.out_w, self.k);
        let mut out = vec![0.0; self.out_c * oh * ow];
        for o in 0..self.out_c {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..self.in_c {
                let xin = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, self.in_h, oh);
                    for kx in 0..k {
                        let wv = w[((o * self.in_c + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = self.valid(kx, self.in_w, ow);
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let row = &xin[iy * self.in_w..(iy + 1) * self.in_w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                orow[ox] += wv * row[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, g: &[f64], w: &[f64], dx: &mut [f64]) {
        let (oh, ow, k) = (self.out_h, self.out_w, self.k);
        for o in 0..self.out_c {
            let gp = &g[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..self.in_c {
                let dplane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, self.in_h, oh);
                    for kx in 0..k {
                        let wv = w[((o * self.in_c + c) * k + ky) * k + kx];
                        let (x0, x1) = self.valid(kx, self.in_w, ow);
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            for ox in x0..x1 {
                                dplane[iy * self.in_w + ox * self.stride + kx - self.pad] += wv * gp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], dw: &mut [f64]) {
        let (oh, ow, k) = (self.out_h, self.out_w, self.k);
        for o in 0..self.out_c {
            let gp = &g[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..self.in_c {
                let xin = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, self.in_h, oh);
                    for kx in 0..k {
                        let (x0, x1) = self.valid(kx, self.in_w, ow);
                        let mut s = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let row = &xin[iy * self.in_w..(iy + 1) * self.in_w];
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                s += grow[ox] * row[ox * self.stride + kx - self.pad];
                            }
                        }
                        dw[((o * self.in_c + c) * k + ky) * k + kx] += s;
                    }
                }
            }
        }
    }
}
