use std::rc::Rc;

use super::conv::{conv_forward, conv_input_adjoint, conv_kernel_adjoint, ConvGeom, Padding};
use super::{Real, Tensor, TensorError};

/// Whether backward passes are themselves recorded on the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients are plain values.
    FirstOrder,
    /// Gradients are graph nodes and can be differentiated again.
    Differentiable,
}

/// Handle to a node of a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    LeakyRelu(Var, f64),
    /// Multiply by a scalar-valued node.
    MulScalar(Var, Var),
    Sum(Var),
    Broadcast(Var),
    SumLeading(Var),
    BroadcastLast(Var),
    Conv(Var, Var, ConvGeom),
    ConvInputAdj(Var, Var, ConvGeom),
    ConvKernelAdj(Var, Var, ConvGeom),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Embed { src: Var, axis: usize, start: usize },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::Conv(a, b, _)
            | Op::ConvInputAdj(a, b, _)
            | Op::ConvKernelAdj(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Powf(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sum(a)
            | Op::Broadcast(a)
            | Op::SumLeading(a)
            | Op::BroadcastLast(a)
            | Op::Reshape(a) => vec![*a],
            Op::Slice { src, .. } | Op::Embed { src, .. } => vec![*src],
            Op::Concat(vs, _) => vs.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so node indices are a
/// topological order. Parameters and inputs enter as leaves; every
/// operation returns a [`Var`] whose value is computed eagerly.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: GradMode,
    recording: bool,
}

impl<T: Real> Graph<T> {
    pub fn new(mode: GradMode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            recording: true,
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient can be requested.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad =
            self.recording && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(TensorError::RankMismatch {
                op,
                expected: sa.len(),
                found: sb.len(),
            });
        }
        for (axis, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(TensorError::DimMismatch {
                    op,
                    axis,
                    expected: x,
                    found: y,
                });
            }
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c_t = T::from_f64_lossy(c);
        let v = self.value(a).map(|x| x * c_t);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c_t = T::from_f64_lossy(c);
        let v = self.value(a).map(|x| x + c_t);
        self.push(v, Op::AddScalar(a))
    }

    /// Elementwise `a^p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let p_t = T::from_f64_lossy(p);
        let v = if p == 2.0 {
            self.value(a).map(|x| x * x)
        } else {
            self.value(a).map(|x| x.powf(p_t))
        };
        self.push(v, Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.powf(a, 0.5)
    }

    /// Elementwise `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let v = self
            .value(a)
            .map(|x| if x >= T::zero() { x } else { s * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// `a · s` for a single-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "mul_scalar expects a single-element factor, got shape {:?}",
                self.shape(s)
            )));
        }
        let factor = self.value(s).item();
        let v = self.value(a).map(|x| x * factor);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    // ---- reductions and broadcasts ---------------------------------

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcast a single-element node to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if self.value(a).len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "broadcast expects a single-element source, got shape {:?}",
                self.shape(a)
            )));
        }
        let v = Tensor::full(shape, self.value(a).item());
        Ok(self.push(v, Op::Broadcast(a)))
    }

    /// Sum over every axis but the last: `[..., C] → [C]`.
    pub fn sum_leading(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let c = *src.shape().last().expect("rank ≥ 1");
        let mut out = vec![T::zero(); c];
        if c > 0 {
            for chunk in src.data().chunks_exact(c) {
                for (o, &x) in out.iter_mut().zip(chunk) {
                    *o = *o + x;
                }
            }
        }
        let v = Tensor::new(vec![c], out).expect("consistent shape");
        self.push(v, Op::SumLeading(a))
    }

    /// Broadcast `[C]` along leading axes to `shape` (whose last axis is `C`).
    pub fn broadcast_last(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let src = self.value(a);
        let c = src.len();
        if src.rank() != 1 || shape.last() != Some(&c) {
            return Err(TensorError::DimMismatch {
                op: "broadcast_last",
                axis: shape.len().saturating_sub(1),
                expected: c,
                found: shape.last().copied().unwrap_or(0),
            });
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|i| src.data()[i % c]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::BroadcastLast(a)))
    }

    // ---- shape ops ----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() {
                return Err(TensorError::RankMismatch {
                    op: "concat",
                    expected: base.len(),
                    found: s.len(),
                });
            }
            for (ax, (&x, &y)) in base.iter().zip(s).enumerate() {
                if ax != axis && x != y {
                    return Err(TensorError::DimMismatch {
                        op: "concat",
                        axis: ax,
                        expected: x,
                        found: y,
                    });
                }
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let src = self.value(a);
        let shape = src.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::DimMismatch {
                op: "slice",
                axis,
                expected: shape[axis],
                found: start + len,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Slice { src: a, axis, start }))
    }

    /// Zero tensor of `shape` with `a` written at `start` along `axis`.
    pub fn embed(&mut self, a: Var, shape: &[usize], axis: usize, start: usize) -> Result<Var, TensorError> {
        let src = self.value(a);
        let s = src.shape();
        if s.len() != shape.len() || axis >= shape.len() || start + s[axis] > shape[axis] {
            return Err(TensorError::DimMismatch {
                op: "embed",
                axis,
                expected: shape.get(axis).copied().unwrap_or(0),
                found: start + s.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = s[axis];
        let mut data = vec![T::zero(); shape.iter().product()];
        for o in 0..outer {
            let dst = (o * shape[axis] + start) * inner;
            data[dst..dst + len * inner]
                .copy_from_slice(&src.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::Embed { src: a, axis, start }))
    }

    // ---- convolution primitives -------------------------------------

    fn check_geom(&self, op: &'static str, v: Var, expected: &[usize]) -> Result<(), TensorError> {
        let s = self.shape(v);
        if s.len() != expected.len() {
            return Err(TensorError::RankMismatch {
                op,
                expected: expected.len(),
                found: s.len(),
            });
        }
        for (axis, (&e, &f)) in expected.iter().zip(s).enumerate() {
            if e != f {
                return Err(TensorError::DimMismatch {
                    op,
                    axis,
                    expected: e,
                    found: f,
                });
            }
        }
        Ok(())
    }

    /// Raw correlation `conv(x, k)` for a resolved geometry.
    pub fn conv_raw(&mut self, x: Var, k: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        self.check_geom("conv input", x, &geom.input_shape())?;
        self.check_geom("conv kernel", k, &geom.kernel_shape())?;
        let data = conv_forward(&geom, self.value(x).data(), self.value(k).data());
        let v = Tensor::new(geom.output_shape().to_vec(), data)?;
        Ok(self.push(v, Op::Conv(x, k, geom)))
    }

    /// Input adjoint of `conv(·, k)` applied to `y`.
    pub fn conv_input_adj(&mut self, y: Var, k: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        self.check_geom("conv adjoint input", y, &geom.output_shape())?;
        self.check_geom("conv adjoint kernel", k, &geom.kernel_shape())?;
        let data = conv_input_adjoint(&geom, self.value(y).data(), self.value(k).data());
        let v = Tensor::new(geom.input_shape().to_vec(), data)?;
        Ok(self.push(v, Op::ConvInputAdj(y, k, geom)))
    }

    /// Kernel adjoint of `conv(x, ·)` applied to `y`.
    pub fn conv_kernel_adj(&mut self, x: Var, y: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        self.check_geom("conv adjoint input", x, &geom.input_shape())?;
        self.check_geom("conv adjoint output", y, &geom.output_shape())?;
        let data = conv_kernel_adjoint(&geom, self.value(x).data(), self.value(y).data());
        let v = Tensor::new(geom.kernel_shape().to_vec(), data)?;
        Ok(self.push(v, Op::ConvKernelAdj(x, y, geom)))
    }

    // ---- layers -------------------------------------------------------

    /// 2-D convolution of `x: [H, W, Cin]` with `kernel: [kh, kw, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernel), stride, padding)?;
        let y = self.conv_raw(x, kernel, geom)?;
        self.add_bias(y, bias)
    }

    /// Transposed convolution of `x: [H, W, Cin]` with `kernel: [kh, kw, Cout, Cin]`;
    /// the adjoint of [`Graph::conv2d`] with the same kernel and geometry.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::for_transpose(self.shape(x), self.shape(kernel), stride, padding)?;
        let y = self.conv_input_adj(x, kernel, geom)?;
        self.add_bias(y, bias)
    }

    fn add_bias(&mut self, y: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        match bias {
            None => Ok(y),
            Some(b) => {
                let shape = self.shape(y).to_vec();
                let bb = self.broadcast_last(b, &shape)?;
                self.add(y, bb)
            }
        }
    }

    /// Normalizes over all entries of `x`, then applies per-channel
    /// `gain` and `offset` (shape `[C]`, `C` the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if self.value(x).is_empty() {
            return Err(TensorError::EmptyNormalization);
        }
        let mean = self.mean(x);
        let mean_b = self.broadcast(mean, &shape)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.square(centered);
        let var = self.mean(sq);
        let var_eps = self.add_scalar(var, eps);
        let inv_std = self.powf(var_eps, -0.5);
        let normed = self.mul_scalar(centered, inv_std)?;
        let g = self.broadcast_last(gain, &shape)?;
        let o = self.broadcast_last(offset, &shape)?;
        let scaled = self.mul(normed, g)?;
        self.add(scaled, o)
    }

    // ---- differentiation ---------------------------------------------

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// In [`GradMode::Differentiable`] the returned nodes are recorded and
    /// may be used in further computation and differentiated again.
    /// Variables that `output` does not depend on receive an exact zero.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, TensorError> {
        if self.value(output).len() != 1 {
            return Err(TensorError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let end = output.0;
        let mut needed = vec![false; end + 1];
        for v in wrt {
            if v.0 <= end {
                needed[v.0] = true;
            }
        }
        for i in 0..=end {
            if !needed[i] && self.nodes[i].requires_grad {
                needed[i] = self.nodes[i].op.inputs().iter().any(|v| needed[v.0]);
            }
        }

        let saved = self.recording;
        self.recording = self.mode == GradMode::Differentiable;
        let result = self.backprop(output, &needed);
        self.recording = saved;
        let mut grads = result?;

        Ok(wrt
            .iter()
            .map(|&v| match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(v));
                    self.constant(zeros)
                }
            })
            .collect())
    }

    fn backprop(&mut self, output: Var, needed: &[bool]) -> Result<Vec<Option<Var>>, TensorError> {
        let end = output.0;
        let mut grads: Vec<Option<Var>> = vec![None; end + 1];
        if !needed[end] {
            return Ok(grads);
        }
        let seed = Tensor::ones(self.shape(output));
        grads[end] = Some(self.constant(seed));

        for i in (0..=end).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.vjp(&op, g, needed)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }
        Ok(grads)
    }

    fn vjp(&mut self, op: &Op, g: Var, needed: &[bool]) -> Result<Vec<(Var, Var)>, TensorError> {
        let need = |v: &Var| needed[v.0];
        let mut res = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if need(&a) {
                    res.push((a, self.mul(g, b)?));
                }
                if need(&b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => {
                if need(&a) {
                    res.push((a, self.scale(g, c)));
                }
            }
            Op::Powf(a, p) => {
                if need(&a) {
                    let d = if p == 2.0 {
                        self.scale(a, 2.0)
                    } else {
                        let pm = self.powf(a, p - 1.0);
                        self.scale(pm, p)
                    };
                    res.push((a, self.mul(g, d)?));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if need(&a) {
                    let s = T::from_f64_lossy(slope);
                    let mask = self
                        .value(a)
                        .map(|x| if x >= T::zero() { T::one() } else { s });
                    let m = self.constant(mask);
                    res.push((a, self.mul(g, m)?));
                }
            }
            Op::MulScalar(a, s) => {
                if need(&a) {
                    res.push((a, self.mul_scalar(g, s)?));
                }
                if need(&s) {
                    let ga = self.mul(g, a)?;
                    let total = self.sum(ga);
                    let shape = self.shape(s).to_vec();
                    res.push((s, self.reshape(total, &shape)?));
                }
            }
            Op::Sum(a) => {
                if need(&a) {
                    let shape = self.shape(a).to_vec();
                    res.push((a, self.broadcast(g, &shape)?));
                }
            }
            Op::Broadcast(a) => {
                if need(&a) {
                    let total = self.sum(g);
                    let shape = self.shape(a).to_vec();
                    res.push((a, self.reshape(total, &shape)?));
                }
            }
            Op::SumLeading(a) => {
                if need(&a) {
                    let shape = self.shape(a).to_vec();
                    res.push((a, self.broadcast_last(g, &shape)?));
                }
            }
            Op::BroadcastLast(a) => {
                if need(&a) {
                    res.push((a, self.sum_leading(g)));
                }
            }
            Op::Conv(x, k, geom) => {
                if need(&x) {
                    res.push((x, self.conv_input_adj(g, k, geom)?));
                }
                if need(&k) {
                    res.push((k, self.conv_kernel_adj(x, g, geom)?));
                }
            }
            Op::ConvInputAdj(y, k, geom) => {
                if need(&y) {
                    res.push((y, self.conv_raw(g, k, geom)?));
                }
                if need(&k) {
                    res.push((k, self.conv_kernel_adj(g, y, geom)?));
                }
            }
            Op::ConvKernelAdj(x, y, geom) => {
                if need(&x) {
                    res.push((x, self.conv_input_adj(y, g, geom)?));
                }
                if need(&y) {
                    res.push((y, self.conv_raw(x, g, geom)?));
                }
            }
            Op::Concat(ref parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if need(&p) {
                        res.push((p, self.slice(g, axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                if need(&src) {
                    let shape = self.shape(src).to_vec();
                    res.push((src, self.embed(g, &shape, axis, start)?));
                }
            }
            Op::Embed { src, axis, start } => {
                if need(&src) {
                    let len = self.shape(src)[axis];
                    res.push((src, self.slice(g, axis, start, len)?));
                }
            }
            Op::AddScalar(..) | Op::Reshape(_) => {
                let a = op.inputs()[0];
                if need(&a) {
                    let shape = self.shape(a).to_vec();
                    let r = if self.shape(g) == shape.as_slice() {
                        g
                    } else {
                        self.reshape(g, &shape)?
                    };
                    res.push((a, r));
                }
            }
        }
        Ok(res)
    }

    /// Gradients of the scalar `output` for every leaf created with
    /// `requires_grad`, in creation order.
    pub fn backward(&mut self, output: Var) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let leaves: Vec<Var> = (0..=output.0)
            .filter(|&i| self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect();
        let grads = self.grad(output, &leaves)?;
        Ok(leaves
            .into_iter()
            .zip(grads)
            .map(|(v, g)| (v, self.value(g).clone()))
            .collect())
    }

    /// `∇_wrt output` as a differentiable node.
    pub fn input_gradient(&mut self, output: Var, wrt: Var) -> Result<Var, TensorError> {
        if self.mode != GradMode::Differentiable {
            return Err(TensorError::NotDifferentiable);
        }
        Ok(self.grad(output, &[wrt])?[0])
    }
}
