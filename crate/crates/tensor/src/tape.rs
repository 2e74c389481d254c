//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. Node order is
//! therefore a topological order, and [`Tape::backward`] walks it once in
//! reverse. There is no broadcasting; shapes are aligned explicitly with
//! [`Tape::tile_rows`], [`Tape::reshape`] and friends.

use crate::conv::{self, conv_out_len, ConvGeom};
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Square,
    Log,
    Negate,
    Scale,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Square(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    Sigmoid(Var),
    Relu(Var),
    ClampMax(Var, f64),
    Sum(Var),
    SumLast(Var),
    MinLast { input: Var, argmin: Vec<usize> },
    MinKMean { input: Var, selected: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Select { input: Var, indices: Vec<usize> },
    TileRows(Var),
    Stack(Vec<Var>),
    MatMul(Var, Var),
    Conv2d { input: Var, kernels: Var, geom: ConvGeom },
    BiasAdd { input: Var, bias: Var },
    SqDist { latent: Var, prototypes: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if the node required a gradient
    /// and was reached from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Dispatches one of the named elementwise kinds. `b` is required for
    /// binary kinds; `factor` is the multiplier for [`ElementwiseKind::Scale`].
    pub fn elementwise(
        &mut self,
        kind: ElementwiseKind,
        a: Var,
        b: Option<Var>,
        factor: f64,
    ) -> Result<Var> {
        let need_b = || {
            b.ok_or(TensorError::Invalid {
                op: "elementwise",
                detail: format!("{kind:?} needs a second operand"),
            })
        };
        match kind {
            ElementwiseKind::Add => self.add(a, need_b()?),
            ElementwiseKind::Sub => self.sub(a, need_b()?),
            ElementwiseKind::Mul => self.mul(a, need_b()?),
            ElementwiseKind::Div => self.div(a, need_b()?),
            ElementwiseKind::Square => Ok(self.square(a)),
            ElementwiseKind::Log => self.log(a),
            ElementwiseKind::Negate => Ok(self.neg(a)),
            ElementwiseKind::Scale => Ok(self.scale(a, factor)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: format!("zero divisor at flat index {i}"),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive argument {v}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "recip",
                detail: "zero argument".into(),
            });
        }
        Ok(self.unary(a, |x| 1.0 / x, Op::Recip(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `min(x, cap)`; gradient passes where `x <= cap`.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Var {
        self.unary(a, |x| x.min(cap), Op::ClampMax(a, cap))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Empty { op: "mean" });
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    fn split_last(&self, op: &'static str, a: Var) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(a);
        match shape.split_last() {
            Some((&last, lead)) if last > 0 => Ok((lead.to_vec(), last)),
            _ => Err(TensorError::Empty { op }),
        }
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (lead, len) = self.split_last("sum_last", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(len)
            .map(|c| c.iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(lead, data)?, Op::SumLast(a), rg))
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let (_, len) = self.split_last("mean_last", a)?;
        let s = self.sum_last(a)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Minimum over the last axis. Ties resolve to the earliest index, which
    /// is also where the gradient is routed.
    pub fn min_last(&mut self, a: Var) -> Result<Var> {
        let (lead, len) = self.split_last("min_last", a)?;
        let mut argmin = Vec::with_capacity(numel(&lead));
        let mut data = Vec::with_capacity(numel(&lead));
        for chunk in self.value(a).data().chunks(len) {
            let (i, v) = argmin_first(chunk);
            argmin.push(i);
            data.push(v);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(lead, data)?, Op::MinLast { input: a, argmin }, rg))
    }

    /// Positions (within the last axis) picked by a [`min_last`](Self::min_last) node.
    pub fn argmin_of(&self, var: Var) -> Option<&[usize]> {
        match &self.nodes[var.0].op {
            Op::MinLast { argmin, .. } => Some(argmin),
            _ => None,
        }
    }

    /// Mean of the `k` smallest entries of a 1-D tensor. When `k` exceeds the
    /// length, all entries are averaged. Ties prefer earlier indices.
    pub fn min_k_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(TensorError::Invalid {
                op: "min_k_mean",
                detail: "k must be at least 1".into(),
            });
        }
        let t = self.value(a);
        if t.ndim() != 1 {
            return Err(TensorError::Invalid {
                op: "min_k_mean",
                detail: format!("expected a 1-D tensor, got shape {:?}", t.shape()),
            });
        }
        if t.is_empty() {
            return Err(TensorError::Empty { op: "min_k_mean" });
        }
        let selected = smallest_k(t.data(), k);
        let mean = selected.iter().map(|&i| t.data()[i]).sum::<f64>() / selected.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(mean), Op::MinKMean { input: a, selected }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[r, c] = t.shape() else {
            return Err(TensorError::Invalid {
                op: "transpose",
                detail: format!("expected 2-D, got {:?}", t.shape()),
            });
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    /// Gathers flat indices into a 1-D tensor.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(TensorError::Invalid {
                op: "select",
                detail: format!("index {bad} out of range for {} values", t.len()),
            });
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_vec(data),
            Op::Select {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats a 1-D tensor of length `m` into an `rows x m` matrix.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 1 {
            return Err(TensorError::Invalid {
                op: "tile_rows",
                detail: format!("expected 1-D, got {:?}", t.shape()),
            });
        }
        let m = t.len();
        let data = t.data().repeat(rows);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![rows, m], data)?, Op::TileRows(a), rg))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars.first().ok_or(TensorError::Empty { op: "stack" })?;
        let shape = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(vars.len() * numel(&shape));
        for &v in vars {
            same_shape("stack", self.value(*first), self.value(v))?;
            data.extend_from_slice(self.value(v).data());
        }
        let mut out_shape = vec![vars.len()];
        out_shape.extend(shape);
        let rg = self.rg(vars);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Stack(vars.to_vec()), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[r, k], &[k2, c]) = (ta.shape(), tb.shape()) else {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let out = &mut data[i * c..(i + 1) * c];
            for q in 0..k {
                let av = ta.data()[i * k + q];
                for (o, &bv) in out.iter_mut().zip(&tb.data()[q * c..(q + 1) * c]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::MatMul(a, b), rg))
    }

    /// Valid (unpadded) 2-D convolution.
    ///
    /// `input` is `C x H x W` or batched `N x C x H x W`; `kernels` is
    /// `K x C x kh x kw`. The output keeps the input's rank.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernels));
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: ti.shape().to_vec(),
            right: tk.shape().to_vec(),
        };
        let (batch, c, h, w, batched) = match *ti.shape() {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(mismatch()),
        };
        let &[k, kc, kh, kw] = tk.shape() else {
            return Err(mismatch());
        };
        if kc != c {
            return Err(mismatch());
        }
        let (Some(out_h), Some(out_w)) = (conv_out_len(h, kh, stride), conv_out_len(w, kw, stride))
        else {
            return Err(mismatch());
        };
        let geom = ConvGeom {
            batch,
            in_ch: c,
            height: h,
            width: w,
            out_ch: k,
            kh,
            kw,
            stride,
            out_h,
            out_w,
        };
        let data = conv::forward(ti.data(), tk.data(), &geom);
        let shape = if batched {
            vec![batch, k, out_h, out_w]
        } else {
            vec![k, out_h, out_w]
        };
        let rg = self.rg(&[input, kernels]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Conv2d {
                input,
                kernels,
                geom,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias to a `C x H x W` or `N x C x H x W` tensor.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (ti, tb) = (self.value(input), self.value(bias));
        let c = match *ti.shape() {
            [c, _, _] | [_, c, _, _] => c,
            _ => 0,
        };
        if tb.shape() != [c] || c == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                left: ti.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let plane = ti.shape()[ti.ndim() - 2] * ti.shape()[ti.ndim() - 1];
        let mut data = ti.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let b = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(ti.shape().to_vec(), data)?;
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::BiasAdd { input, bias }, rg))
    }

    /// Squared L2 distance between every spatial patch of `latent`
    /// (`N x C x H x W`) and every row of `prototypes` (`m x C`), giving an
    /// `N x m x H x W` map. This is a convolution with the inner product
    /// replaced by the squared L2 norm.
    pub fn sq_l2_distance_map(&mut self, latent: Var, prototypes: Var) -> Result<Var> {
        let (tz, tp) = (self.value(latent), self.value(prototypes));
        let (&[n, c, h, w], &[m, pc]) = (tz.shape(), tp.shape()) else {
            return Err(TensorError::ShapeMismatch {
                op: "sq_l2_distance_map",
                left: tz.shape().to_vec(),
                right: tp.shape().to_vec(),
            });
        };
        if c != pc {
            return Err(TensorError::ShapeMismatch {
                op: "sq_l2_distance_map",
                left: tz.shape().to_vec(),
                right: tp.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = vec![0.0; n * m * hw];
        for s in 0..n {
            let z = &tz.data()[s * c * hw..(s + 1) * c * hw];
            for j in 0..m {
                let out = &mut data[(s * m + j) * hw..(s * m + j + 1) * hw];
                for ch in 0..c {
                    let p = tp.data()[j * c + ch];
                    for (o, &zv) in out.iter_mut().zip(&z[ch * hw..(ch + 1) * hw]) {
                        let d = zv - p;
                        *o += d * d;
                    }
                }
            }
        }
        let rg = self.rg(&[latent, prototypes]);
        Ok(self.push(
            Tensor::new(vec![n, m, h, w], data)?,
            Op::SqDist { latent, prototypes },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulates into an input's gradient buffer, skipping constants.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, vb, |gi, y| gi * y));
                acc(*b, &mut |d| zip3(d, g, va, |gi, x| gi * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, vb, |gi, y| gi / y));
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |d| zip3(d, g, va, |gi, x| 2.0 * x * gi));
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |d| zip3(d, g, va, |gi, x| gi / x));
            }
            Op::Neg(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi)),
            Op::Scale(a, f) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * f)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Recip(a) => acc(*a, &mut |d| zip3(d, g, out, |gi, y| -gi * y * y)),
            Op::Sigmoid(a) => acc(*a, &mut |d| zip3(d, g, out, |gi, y| gi * y * (1.0 - y))),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    zip3(d, g, va, |gi, x| if x > 0.0 { gi } else { 0.0 })
                });
            }
            Op::ClampMax(a, cap) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    zip3(d, g, va, |gi, x| if x <= *cap { gi } else { 0.0 })
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::SumLast(a) => {
                let len = self.nodes[a.0].value.shape().last().copied().unwrap_or(1);
                acc(*a, &mut |d| {
                    for (chunk, gi) in d.chunks_mut(len).zip(g) {
                        chunk.iter_mut().for_each(|x| *x += gi);
                    }
                });
            }
            Op::MinLast { input, argmin } => {
                let len = self.nodes[input.0].value.shape().last().copied().unwrap_or(1);
                acc(*input, &mut |d| {
                    for (row, (&pos, gi)) in argmin.iter().zip(g).enumerate() {
                        d[row * len + pos] += gi;
                    }
                });
            }
            Op::MinKMean { input, selected } => {
                let share = g[0] / selected.len() as f64;
                acc(*input, &mut |d| selected.iter().for_each(|&i| d[i] += share));
            }
            Op::Transpose(a) => {
                let shape = self.nodes[a.0].value.shape();
                let (r, c) = (shape[0], shape[1]);
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Select { input, indices } => acc(*input, &mut |d| {
                indices.iter().zip(g).for_each(|(&i, gi)| d[i] += gi)
            }),
            Op::TileRows(a) => {
                let m = self.nodes[a.0].value.len();
                acc(*a, &mut |d| {
                    for row in g.chunks(m) {
                        add_into(d, row);
                    }
                });
            }
            Op::Stack(vars) => {
                let each = g.len() / vars.len();
                for (i, v) in vars.iter().enumerate() {
                    acc(*v, &mut |d| add_into(d, &g[i * each..(i + 1) * each]));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for q in 0..k {
                            let brow = &vb[q * c..(q + 1) * c];
                            let grow = &g[i * c..(i + 1) * c];
                            d[i * k + q] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..r {
                        for q in 0..k {
                            let av = va[i * k + q];
                            let grow = &g[i * c..(i + 1) * c];
                            for (x, gi) in d[q * c..(q + 1) * c].iter_mut().zip(grow) {
                                *x += av * gi;
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernels,
                geom,
            } => {
                let need_x = self.nodes[input.0].requires_grad;
                let need_k = self.nodes[kernels.0].requires_grad;
                let (xi, ki) = (input.0, kernels.0);
                let mut dx = need_x.then(|| {
                    grads[xi]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.nodes[xi].value.len()])
                });
                let mut dk = need_k.then(|| {
                    grads[ki]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.nodes[ki].value.len()])
                });
                conv::backward(
                    val(*input),
                    val(*kernels),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    grads[xi] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[ki] = Some(dk);
                }
            }
            Op::BiasAdd { input, bias } => {
                let shape = self.nodes[input.0].value.shape();
                let nd = shape.len();
                let c = shape[nd - 3];
                let plane = shape[nd - 2] * shape[nd - 1];
                acc(*input, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        d[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::SqDist { latent, prototypes } => {
                let zs = self.nodes[latent.0].value.shape();
                let (n, c, hw) = (zs[0], zs[1], zs[2] * zs[3]);
                let m = self.nodes[prototypes.0].value.shape()[0];
                let (vz, vp) = (val(*latent), val(*prototypes));
                acc(*latent, &mut |d| {
                    for s in 0..n {
                        for j in 0..m {
                            let gm = &g[(s * m + j) * hw..(s * m + j + 1) * hw];
                            for ch in 0..c {
                                let p = vp[j * c + ch];
                                let base = (s * c + ch) * hw;
                                for q in 0..hw {
                                    d[base + q] += 2.0 * (vz[base + q] - p) * gm[q];
                                }
                            }
                        }
                    }
                });
                acc(*prototypes, &mut |d| {
                    for s in 0..n {
                        for j in 0..m {
                            let gm = &g[(s * m + j) * hw..(s * m + j + 1) * hw];
                            for ch in 0..c {
                                let p = vp[j * c + ch];
                                let base = (s * c + ch) * hw;
                                let mut t = 0.0;
                                for q in 0..hw {
                                    t += (vz[base + q] - p) * gm[q];
                                }
                                d[j * c + ch] -= 2.0 * t;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
}

fn zip3(d: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((x, &gi), &vi) in d.iter_mut().zip(g).zip(v) {
        *x += f(gi, vi);
    }
}

/// First position of the minimum value.
pub fn argmin_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Indices of the `k` smallest values (all of them if `k >= len`), ties by index.
pub fn smallest_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(k.min(values.len()));
    order
}
