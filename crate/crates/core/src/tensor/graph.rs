use super::kernels::{self, Conv3dSpec, ConvGeometry, Dims5, InstanceNormCache};
use super::{split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scalar(BinaryOp, Var, T),
    Exp(Var),
    Log(Var),
    ClampMin(Var, T),
    Reduce {
        input: Var,
        /// Output offset of every input element.
        map: Vec<usize>,
        scale: T,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        dims: Dims5,
        factor: usize,
    },
    LeakyRelu(Var, T),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: Dims5,
        cache: InstanceNormCache<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradient tape: an append-only record of executed operations.
///
/// Node order is execution order, so every node's inputs precede it and a
/// reverse scan is a valid reverse topological traversal. A node requires a
/// gradient when any of its inputs does.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Records a trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = self.tracked(inputs);
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!(
                "{op:?}: operand shapes differ ({sa:?} vs {sb:?})"
            )));
        }
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.emit(shape, data, &[a, b], Op::Binary(op, a, b)))
    }

    /// `a <op> s` for a scalar `s`.
    pub fn binary_scalar(&mut self, op: BinaryOp, a: Var, s: T) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| match op {
                BinaryOp::Add => x + s,
                BinaryOp::Sub => x - s,
                BinaryOp::Mul => x * s,
                BinaryOp::Div => x / s,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, data, &[a], Op::Scalar(op, a, s))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        match op {
            UnaryOp::Exp => {
                let data = self.data(a).iter().map(|x| x.exp()).collect();
                self.emit(shape, data, &[a], Op::Exp(a))
            }
            UnaryOp::Log => {
                let data = self.data(a).iter().map(|x| x.ln()).collect();
                self.emit(shape, data, &[a], Op::Log(a))
            }
            UnaryOp::ClampMin(m) => {
                let m = T::of(m);
                let data = self.data(a).iter().map(|&x| x.max(m)).collect();
                self.emit(shape, data, &[a], Op::ClampMin(a, m))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.binary_scalar(BinaryOp::Add, a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        self.binary_scalar(BinaryOp::Mul, a, s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(UnaryOp::ClampMin(min), a)
    }

    // ---- reductions --------------------------------------------------------

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut drop = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Axis(format!(
                    "axis {ax} out of range for shape {shape:?}"
                )));
            }
            if drop[ax] {
                return Err(Error::Axis(format!("axis {ax} listed twice")));
            }
            drop[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&drop)
            .filter(|(_, &d)| !d)
            .map(|(&s, _)| s)
            .collect();
        // output stride per input axis, zero for reduced axes
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for ax in (0..shape.len()).rev() {
            if !drop[ax] {
                out_strides[ax] = stride;
                stride *= shape[ax];
            }
        }
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                off += out_strides[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                off -= out_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let out_n: usize = out_shape.iter().product();
        let count = n.checked_div(out_n).unwrap_or(0);
        let scale = match op {
            ReduceOp::Sum => T::one(),
            ReduceOp::Mean => T::one() / T::of(count.max(1) as f64),
        };
        let mut data = vec![T::zero(); out_n];
        for (&m, &v) in map.iter().zip(self.data(a)) {
            data[m] += v;
        }
        if op == ReduceOp::Mean {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(self.emit(out_shape, data, &[a], Op::Reduce { input: a, map, scale }))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(ReduceOp::Sum, a, &axes).expect("all axes valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(ReduceOp::Mean, a, &axes).expect("all axes valid")
    }

    // ---- volumetric layers -------------------------------------------------

    /// 3-D cross-correlation of `x: [N, Cin, D, H, W]` with `w: [Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let bias_len = b.map(|b| self.value(b).numel());
        let geom = kernels::conv3d_geometry(self.shape(x), self.shape(w), bias_len, spec)?;
        let data = kernels::conv3d_forward(
            &geom,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.emit(geom.out.to_vec(), data, &inputs, Op::Conv3d { x, w, b, geom }))
    }

    pub fn maxpool3d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let dims = Dims5::from_shape(self.shape(x), "maxpool3d")?;
        let (out, data, argmax) = kernels::maxpool3d_forward(dims, self.data(x), window, stride)?;
        Ok(self.emit(out.to_vec(), data, &[x], Op::MaxPool { x, argmax }))
    }

    /// Trilinear upsampling by an integer factor (align-corners = false).
    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Contract("upsample factor must be positive".into()));
        }
        let dims = Dims5::from_shape(self.shape(x), "upsample_trilinear")?;
        if dims.spatial() == 0 {
            return Err(Error::Shape("upsample of empty spatial extent".into()));
        }
        let (out, data) = kernels::upsample_trilinear_forward(dims, self.data(x), factor);
        Ok(self.emit(out.to_vec(), data, &[x], Op::Upsample { x, dims, factor }))
    }

    /// Per-sample, per-channel standardization over the spatial axes followed
    /// by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = Dims5::from_shape(self.shape(x), "instance_norm")?;
        if dims.spatial() < 2 {
            return Err(Error::Shape(format!(
                "instance_norm needs more than one voxel per channel, got {:?}",
                self.shape(x)
            )));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [dims.c] {
                return Err(Error::Shape(format!(
                    "instance_norm {name} must have shape [{}], got {:?}",
                    dims.c,
                    self.shape(v)
                )));
            }
        }
        let (data, cache) = kernels::instance_norm_forward(
            dims,
            self.data(x),
            self.data(gamma),
            self.data(beta),
            T::of(eps),
        );
        Ok(self.emit(
            dims.to_vec(),
            data,
            &[x, gamma, beta],
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                dims,
                cache,
            },
        ))
    }

    // ---- activations -------------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, leakiness: f64) -> Var {
        let slope = T::of(leakiness);
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v >= T::zero() { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.emit(shape, data, &[x], Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(shape, data, &[x], Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let data = softmax_along(self.data(x), &shape, axis);
        Ok(self.emit(shape, data, &[x], Op::Softmax { x, axis }))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        Ok(self.emit(
            out_shape,
            data,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis(format!(
                "narrow axis {axis} out of range for shape {shape:?}"
            )));
        }
        if start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.emit(out_shape, data, &[x], Op::Narrow { x, axis, start }))
    }

    // ---- fused losses ------------------------------------------------------

    /// Mean over voxels of `-log softmax(logits)[label]` with the class axis at 1.
    ///
    /// `labels` holds one class index per (sample, voxel) in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [N, K, ...] logits, got {shape:?}"
            )));
        }
        let (n, k, inner) = split_axis(&shape, 1);
        if labels.len() != n * inner {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for {} voxels",
                labels.len(),
                n * inner
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Value(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = softmax_along(self.data(logits), &shape, 1);
        let z = self.data(logits);
        let mut total = 0.0f64;
        for s in 0..n {
            for i in 0..inner {
                let base = s * k * inner + i;
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(z[base + c * inner]);
                }
                let mut se = T::zero();
                for c in 0..k {
                    se += (z[base + c * inner] - mx).exp();
                }
                let lse = mx + se.ln();
                total += (lse - z[base + labels[s * inner + i] * inner]).as_f64();
            }
        }
        let loss = T::of(total / (n * inner) as f64);
        Ok(self.emit(
            Vec::new(),
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over all elements of the binary cross-entropy between
    /// `sigmoid(logits)` and `targets`, evaluated in the stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        if targets.len() != self.value(logits).numel() {
            return Err(Error::Shape(format!(
                "bce_with_logits: {} targets for {} logits",
                targets.len(),
                self.value(logits).numel()
            )));
        }
        let z = self.data(logits);
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| {
                let z = z.as_f64();
                z.max(0.0) - z * t.as_f64() + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = T::of(total / z.len() as f64);
        Ok(self.emit(
            Vec::new(),
            vec![loss],
            &[logits],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Gradients add onto whatever a previous call left in place; call
    /// [`Graph::zero_grad`] to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad(&g);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].value.requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &self.nodes[i].value.data;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                match op {
                    BinaryOp::Add => {
                        send(*a, g.to_vec());
                        send(*b, g.to_vec());
                    }
                    BinaryOp::Sub => {
                        send(*a, g.to_vec());
                        send(*b, g.iter().map(|&x| -x).collect());
                    }
                    BinaryOp::Mul => {
                        send(*a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                        send(*b, g.iter().zip(av).map(|(&g, &x)| g * x).collect());
                    }
                    BinaryOp::Div => {
                        send(*a, g.iter().zip(bv).map(|(&g, &y)| g / y).collect());
                        send(
                            *b,
                            g.iter()
                                .zip(av)
                                .zip(bv)
                                .map(|((&g, &x), &y)| -g * x / (y * y))
                                .collect(),
                        );
                    }
                }
            }
            Op::Scalar(op, a, s) => {
                let s = *s;
                let contrib = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g.iter().map(|&g| g * s).collect(),
                    BinaryOp::Div => g.iter().map(|&g| g / s).collect(),
                };
                send(*a, contrib);
            }
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(&g, &y)| g * y).collect()),
            Op::Log(a) => {
                let x = self.data(*a);
                send(*a, g.iter().zip(x).map(|(&g, &x)| g / x).collect());
            }
            Op::ClampMin(a, m) => {
                let x = self.data(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > *m { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Reduce { input, map, scale } => {
                send(*input, map.iter().map(|&m| g[m] * *scale).collect());
            }
            Op::Conv3d { x, w, b, geom } => {
                if self.nodes[x.0].value.requires_grad {
                    send(*x, kernels::conv3d_backward_input(geom, g, self.data(*w)));
                }
                if self.nodes[w.0].value.requires_grad {
                    send(*w, kernels::conv3d_backward_weight(geom, g, self.data(*x)));
                }
                if let Some(b) = b {
                    send(*b, kernels::conv3d_backward_bias(geom.out, g));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                send(*x, dx);
            }
            Op::Upsample { x, dims, factor } => {
                send(*x, kernels::upsample_trilinear_backward(*dims, g, *factor));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.data(*x);
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v >= T::zero() { g } else { g * *slope })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => send(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
            ),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for k in 0..n {
                            let j = base + k * inner;
                            dot += g[j] * out[j];
                        }
                        for k in 0..n {
                            let j = base + k * inner;
                            dx[j] = out[j] * (g[j] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                dims,
                cache,
            } => {
                let (dx, dgamma, dbeta) =
                    kernels::instance_norm_backward(*dims, g, self.data(*gamma), cache);
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    send(v, part);
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = self.nodes[i].value.shape()[*axis];
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k, inner) = split_axis(self.shape(*logits), 1);
                let scale = g[0] / T::of((n * inner) as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for s in 0..n {
                    for v in 0..inner {
                        let c = labels[s * inner + v];
                        dz[s * k * inner + c * inner + v] -= scale;
                    }
                }
                send(*logits, dz);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.data(*logits);
                let scale = g[0] / T::of(z.len() as f64);
                send(
                    *logits,
                    z.iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                        .collect(),
                );
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Max-shifted softmax along `axis` of a row-major buffer.
pub(crate) fn softmax_along<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..n {
                mx = mx.max(x[base + k * inner]);
            }
            let mut s = T::zero();
            for k in 0..n {
                let e = (x[base + k * inner] - mx).exp();
                y[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                y[base + k * inner] = y[base + k * inner] / s;
            }
        }
    }
    y
}
