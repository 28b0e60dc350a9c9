use std::collections::BTreeMap;

use super::kernels;
use super::{ParamStore, Scalar, Shape, Tensor, TensorError, TensorMap};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator identity, used for diagnostics and gradient fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    Deconv2d,
    MaxPool2,
    Relu,
    BatchNorm,
    Concat,
    Add,
    Mul,
    Scale,
    Pow,
    Sum,
    RelMse,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Conv2d => "conv2d",
            OpKind::Deconv2d => "deconv2d",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Relu => "relu",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Concat => "concat_channels",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Pow => "pow",
            OpKind::Sum => "sum",
            OpKind::RelMse => "relmse",
        }
    }
}

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    /// Batch statistics; running stats updated as `(1-m)·old + m·batch`.
    Train { momentum: f64, eps: f64 },
    /// Running statistics.
    Infer { eps: f64 },
}

/// Running mean/variance of one batch-norm layer, each shaped `[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

enum Op<T: Scalar> {
    Input,
    Param(String),
    Conv2d { stride: usize, pad: usize },
    Deconv2d,
    MaxPool2 { argmax: Vec<usize> },
    Relu,
    BatchNormTrain { xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormInfer { mean: Vec<T>, inv_std: Vec<T> },
    Concat,
    Add,
    Mul,
    Scale(T),
    Pow(T),
    Sum,
    RelMse { reference: Tensor<T>, eps: T },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Deconv2d => OpKind::Deconv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Relu => OpKind::Relu,
            Op::BatchNormTrain { .. } | Op::BatchNormInfer { .. } => OpKind::BatchNorm,
            Op::Concat => OpKind::Concat,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Pow(_) => OpKind::Pow,
            Op::Sum => OpKind::Sum,
            Op::RelMse { .. } => OpKind::RelMse,
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes only reference earlier nodes, so the graph is
/// acyclic by construction; `backward` still verifies it.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn invalid(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidArgument { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: scales every input gradient produced by `kind`'s backward
    /// by 1.5 so gradient checks can be shown to catch broken kernels.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient is propagated into it).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, Vec::new(), value)
    }

    /// Trainable leaf bound to `name` in `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, TensorError> {
        let value = store.param(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), Vec::new(), value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient cached by the last [`Graph::backward`], if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if ws.c != xs.c {
            return Err(mismatch(
                "conv2d",
                format!("input has {} channels, weight {ws} expects {}", xs.c, ws.c),
            ));
        }
        if bs.numel() != ws.n {
            return Err(mismatch("conv2d", format!("bias {bs} for {} outputs", ws.n)));
        }
        let square4 = ws.h == 4 && ws.w == 4;
        if !(ws.h % 2 == 1 && ws.w % 2 == 1 || square4) {
            return Err(invalid(
                "conv2d",
                format!("kernel {}x{} must be odd or 4x4", ws.h, ws.w),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive".into()));
        }
        for (dim, k, axis) in [(xs.h, ws.h, "height"), (xs.w, ws.w, "width")] {
            let span = dim + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(invalid(
                    "conv2d",
                    format!(
                        "{axis} {dim} with pad {pad}, kernel {k}, stride {stride} gives a non-integral output size"
                    ),
                ));
            }
        }
        let (out, os) = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(weight).data(),
            ws,
            self.value(bias).data(),
            stride,
            pad,
        );
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, weight, bias], value))
    }

    /// Transposed convolution (4×4 kernel, stride 2, pad 1) doubling `h` and `w`.
    /// `weight` is `[ci, co, 4, 4]`; this is the adjoint of `conv2d` with the
    /// same weight tensor, stride 2 and pad 1.
    pub fn deconv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if ws.h != 4 || ws.w != 4 {
            return Err(invalid(
                "deconv2d",
                format!("kernel must be 4x4, got {}x{}", ws.h, ws.w),
            ));
        }
        if ws.n != xs.c {
            return Err(mismatch(
                "deconv2d",
                format!("input has {} channels, weight {ws} expects {}", xs.c, ws.n),
            ));
        }
        if bs.numel() != ws.c {
            return Err(mismatch("deconv2d", format!("bias {bs} for {} outputs", ws.c)));
        }
        let (out, os) = kernels::deconv2d_forward(
            self.value(x).data(),
            xs,
            self.value(weight).data(),
            ws,
            self.value(bias).data(),
        );
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(Op::Deconv2d, vec![x, weight, bias], value))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(invalid(
                "maxpool2",
                format!("spatial size {}x{} must be even", xs.h, xs.w),
            ));
        }
        let (out, argmax, os) = kernels::maxpool2_forward(self.value(x).data(), xs);
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v < T::zero() { T::zero() } else { v });
        self.push(Op::Relu, vec![x], value)
    }

    /// Batch normalisation followed by `γ·x̂ + β`. In train mode the returned
    /// stats are the updated running statistics the caller should keep.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&BnStats<T>>,
        mode: BnMode,
    ) -> Result<(Var, Option<BnStats<T>>), TensorError> {
        let xs = self.shape(x);
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v).numel() != xs.c {
                return Err(mismatch(
                    "batch_norm",
                    format!("{what} {} for {} channels", self.shape(v), xs.c),
                ));
            }
        }
        match mode {
            BnMode::Train { momentum, eps } => {
                let count = xs.n * xs.plane();
                if count < 2 {
                    return Err(invalid(
                        "batch_norm",
                        format!("train mode needs n·h·w >= 2, got {count}"),
                    ));
                }
                let f = kernels::batch_norm_train(
                    self.value(x).data(),
                    xs,
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    T::from_f64_lossy(eps),
                );
                let m = T::from_f64_lossy(momentum);
                let unbias = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                let batch_var: Vec<T> = f.var.iter().map(|&v| v * unbias).collect();
                let (old_mean, old_var) = match running {
                    Some(r) => (r.mean.data().to_vec(), r.var.data().to_vec()),
                    None => (vec![T::zero(); xs.c], vec![T::one(); xs.c]),
                };
                let ema = |old: &[T], new: &[T]| -> Vec<T> {
                    old.iter()
                        .zip(new)
                        .map(|(&o, &n)| (T::one() - m) * o + m * n)
                        .collect()
                };
                let stats = BnStats {
                    mean: Tensor::from_vec(Shape::vector(xs.c), ema(&old_mean, &f.mean))?,
                    var: Tensor::from_vec(Shape::vector(xs.c), ema(&old_var, &batch_var))?,
                };
                let value = Tensor::from_vec(xs, f.out)?;
                let v = self.push(
                    Op::BatchNormTrain {
                        xhat: f.xhat,
                        inv_std: f.inv_std,
                    },
                    vec![x, gamma, beta],
                    value,
                );
                Ok((v, Some(stats)))
            }
            BnMode::Infer { eps } => {
                let r = running.ok_or(TensorError::UninitialisedRunningStats)?;
                if r.mean.len() != xs.c || r.var.len() != xs.c {
                    return Err(mismatch(
                        "batch_norm",
                        format!("running stats of length {} for {} channels", r.mean.len(), xs.c),
                    ));
                }
                let eps = T::from_f64_lossy(eps);
                let mean = r.mean.data().to_vec();
                let inv_std: Vec<T> = r
                    .var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                let g = self.value(gamma).data();
                let b = self.value(beta).data();
                let xv = self.value(x).data();
                let p = xs.plane();
                let out: Vec<T> = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = (i / p) % xs.c;
                        g[c] * (v - mean[c]) * inv_std[c] + b[c]
                    })
                    .collect();
                let value = Tensor::from_vec(xs, out)?;
                let v = self.push(
                    Op::BatchNormInfer { mean, inv_std },
                    vec![x, gamma, beta],
                    value,
                );
                Ok((v, None))
            }
        }
    }

    /// Stacks inputs along the channel axis, preserving order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| invalid("concat_channels", "no inputs".into()))?;
        let s0 = self.shape(*first);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(mismatch("concat_channels", format!("{s} vs {s0}")));
            }
            channels += s.c;
        }
        let os = Shape::new(s0.n, channels, s0.h, s0.w);
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..s0.n {
            for &v in xs {
                let t = self.value(v);
                let img = t.shape().c * t.shape().plane();
                out.extend_from_slice(&t.data()[n * img..(n + 1) * img]);
            }
        }
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(Op::Concat, xs.to_vec(), value))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{} vs {}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![x], value)
    }

    /// Elementwise `x^exponent`; intended for non-negative inputs.
    pub fn pow(&mut self, x: Var, exponent: T) -> Var {
        let value = self.value(x).map(|v| v.powf(exponent));
        self.push(Op::Pow(exponent), vec![x], value)
    }

    /// Sum of all elements as a 1×1×1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value)
    }

    /// `(1/N)·Σ (ref − pred)² / (ref² + eps)` with `N = n·h·w` (channels summed).
    pub fn relmse(&mut self, pred: Var, reference: &Tensor<T>, eps: T) -> Result<Var, TensorError> {
        let s = self.shape(pred);
        if s != reference.shape() {
            return Err(mismatch("relmse", format!("{} vs {}", s, reference.shape())));
        }
        let value = Tensor::scalar(relmse_value(self.value(pred).data(), reference, eps));
        Ok(self.push(
            Op::RelMse {
                reference: reference.clone(),
                eps,
            },
            vec![pred],
            value,
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss`. Returns the gradient of
    /// every parameter leaf on the tape (zeros when the loss does not depend
    /// on it); per-node gradients stay cached for [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<TensorMap<T>, TensorError> {
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(TensorError::NonScalarLoss(ls));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.inputs.iter().find(|v| v.0 >= i) {
                return Err(TensorError::Cycle {
                    node: i,
                    input: bad.0,
                });
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                let mut contributions = self.local_backward(i, &g)?;
                if self.fault == Some(self.nodes[i].op.kind()) {
                    let k = T::from_f64_lossy(1.5);
                    for (_, d) in contributions.iter_mut() {
                        d.iter_mut().for_each(|v| *v = *v * k);
                    }
                }
                for (input, d) in contributions {
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
                        slot @ None => *slot = Some(d),
                    }
                }
            }
            let shape = self.nodes[i].value.shape();
            self.nodes[i].grad = Some(Tensor::from_vec(shape, g)?);
        }
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(name) {
                    // a parameter bound twice accumulates both uses
                    Some(acc) => {
                        let acc: &mut Tensor<T> = acc;
                        acc.make_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input that needs them.
    fn local_backward(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>, TensorError> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let val = |k: usize| self.value(ins[k]);
        let mut out = Vec::new();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(0).data(),
                    val(0).shape(),
                    val(1).data(),
                    val(1).shape(),
                    g,
                    *stride,
                    *pad,
                    self.needs(ins[0]),
                );
                if let Some(dx) = dx {
                    out.push((ins[0], dx));
                }
                if self.needs(ins[1]) {
                    out.push((ins[1], dw));
                }
                if self.needs(ins[2]) {
                    out.push((ins[2], db));
                }
            }
            Op::Deconv2d => {
                let (dx, dw, db) = kernels::deconv2d_backward(
                    val(0).data(),
                    val(0).shape(),
                    val(1).data(),
                    val(1).shape(),
                    g,
                    self.needs(ins[0]),
                );
                if let Some(dx) = dx {
                    out.push((ins[0], dx));
                }
                if self.needs(ins[1]) {
                    out.push((ins[1], dw));
                }
                if self.needs(ins[2]) {
                    out.push((ins[2], db));
                }
            }
            Op::MaxPool2 { argmax } => {
                let mut dx = vec![T::zero(); val(0).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + d;
                }
                out.push((ins[0], dx));
            }
            Op::Relu => {
                let dx = val(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((ins[0], dx));
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                let (dx, dgamma, dbeta) = kernels::batch_norm_train_backward(
                    g,
                    val(0).shape(),
                    xhat,
                    inv_std,
                    val(1).data(),
                );
                out.push((ins[0], dx));
                out.push((ins[1], dgamma));
                out.push((ins[2], dbeta));
            }
            Op::BatchNormInfer { mean, inv_std } => {
                let xs = val(0).shape();
                let p = xs.plane();
                let gamma = val(1).data();
                let x = val(0).data();
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); xs.c];
                let mut dbeta = vec![T::zero(); xs.c];
                for (idx, (&xv, &d)) in x.iter().zip(g).enumerate() {
                    let c = (idx / p) % xs.c;
                    dx[idx] = d * gamma[c] * inv_std[c];
                    dgamma[c] = dgamma[c] + d * (xv - mean[c]) * inv_std[c];
                    dbeta[c] = dbeta[c] + d;
                }
                out.push((ins[0], dx));
                out.push((ins[1], dgamma));
                out.push((ins[2], dbeta));
            }
            Op::Concat => {
                let os = node.value.shape();
                let mut offset = 0;
                for &v in ins {
                    let s = self.shape(v);
                    let img = s.c * s.plane();
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(s.numel());
                        for n in 0..s.n {
                            let base = n * os.c * os.plane() + offset;
                            d.extend_from_slice(&g[base..base + img]);
                        }
                        out.push((v, d));
                    }
                    offset += img;
                }
            }
            Op::Add => {
                out.push((ins[0], g.to_vec()));
                out.push((ins[1], g.to_vec()));
            }
            Op::Mul => {
                let a = val(0).data();
                let b = val(1).data();
                out.push((ins[0], g.iter().zip(b).map(|(&d, &y)| d * y).collect()));
                out.push((ins[1], g.iter().zip(a).map(|(&d, &x)| d * x).collect()));
            }
            Op::Scale(k) => out.push((ins[0], g.iter().map(|&d| d * *k).collect())),
            Op::Pow(e) => {
                let e = *e;
                let em1 = e - T::one();
                let dx = val(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| {
                        if x == T::zero() && em1 > T::zero() {
                            T::zero()
                        } else {
                            d * e * x.powf(em1)
                        }
                    })
                    .collect();
                out.push((ins[0], dx));
            }
            Op::Sum => out.push((ins[0], vec![g[0]; val(0).len()])),
            Op::RelMse { reference, eps } => {
                let s = reference.shape();
                let n = T::from_usize(s.n * s.plane()).unwrap();
                let two = T::one() + T::one();
                let dx = val(0)
                    .data()
                    .iter()
                    .zip(reference.data())
                    .map(|(&p, &r)| g[0] * two * (p - r) / ((r * r + *eps) * n))
                    .collect();
                out.push((ins[0], dx));
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        Ok(out)
    }
}

/// Shared RelMSE formula, also used by the gradient-free metric.
pub(crate) fn relmse_value<T: Scalar>(pred: &[T], reference: &Tensor<T>, eps: T) -> T {
    let s = reference.shape();
    let n = T::from_usize(s.n * s.plane()).unwrap();
    let total = pred
        .iter()
        .zip(reference.data())
        .fold(T::zero(), |acc, (&p, &r)| {
            let d = r - p;
            acc + d * d / (r * r + eps)
        });
    total / n
}
