//! Reverse-mode tape.
//!
//! Every op evaluates eagerly and appends a node; nodes are therefore in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::kernels::{grid_sample, grid_sample_backward, ConvGeom};
use crate::param::{ParamId, ParamStore, Parameter};
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// An op whose forward pass is computed outside the tape and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum { x: Var, axes: Vec<usize> },
    Exp(Var),
    Softplus(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Pointwise { x: Var, w: Var, b: Option<Var> },
    GridSample { feat: Var, pos: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-writer record of one forward pass.
pub struct Tape<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar(v.idx));
        }
        Ok(&self.nodes[v.idx])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        check_finite("constant", &t)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        check_finite("input", &t)?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&mut self, id: ParamId, p: &Parameter<T>) -> Result<Var> {
        check_finite("param", &p.value)?;
        Ok(self.push(p.value.clone(), Op::Param(id), true))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        na.value.zip_map(&nb.value, op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.node(x)?.value.map(|a| a * s);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Scale(x, s), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors = parts.iter().map(|&p| self.node(p).map(|n| &n.value)).collect::<Result<Vec<_>>>()?;
        let v = Tensor::concat(&tensors, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.node(x)?.value.slice_axis(axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.node(x)?.value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= xs.len()) {
            return Err(invalid("sum_axes", format!("axes {axes:?} for shape {xs:?}")));
        }
        let map = ReduceMap::new(&xs, &axes);
        let mut out = Tensor::zeros(map.out_shape.clone());
        let src = self.nodes[x.idx].value.data();
        map.for_each(|i, o| out[o] += src[i]);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sum { x, axes }, rg))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let count: usize = axes.iter().filter_map(|&a| xs.get(a)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, T::one() / T::of(count.max(1) as f64))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.node(x)?.value.ndim()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.node(x)?.value.ndim()).collect();
        self.mean_axes(x, &axes)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.node(x)?.value.map(|a| a.exp());
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Exp(x), rg))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.node(x)?.value.map(softplus);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softplus(x), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let v = self.node(x)?.value.map(|a| if a > T::zero() { a } else { a * slope });
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::LeakyRelu(x, slope), rg))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("empty range [{lo}, {hi}]")));
        }
        let v = self.node(x)?.value.map(|a| a.max(lo).min(hi));
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Clamp(x, lo, hi), rg))
    }

    /// Stride-1 "same" 3-D convolution. `x: [H, W, D, Cin]`,
    /// `w: [kh, kw, kd, Cin, Cout]`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(w)?.value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[3] != xs[3] {
            return Err(shape_err("conv3d", format!("x [H,W,D,Cin] with w [kh,kw,kd,Cin,Cout], Cin={:?}", xs.get(3)), (xs, ws)));
        }
        if ws[..3].iter().any(|k| k % 2 == 0) {
            return Err(invalid("conv3d", format!("kernel extents must be odd, got {:?}", &ws[..3])));
        }
        let geom = ConvGeom {
            h: xs[0],
            w: xs[1],
            d: xs[2],
            cin: xs[3],
            cout: ws[4],
            kh: ws[0],
            kw: ws[1],
            kd: ws[2],
        };
        self.conv_with(x, w, b, geom, vec![xs[0], xs[1], xs[2], ws[4]])
    }

    /// Stride-1 "same" 2-D convolution. `x: [H, W, Cin]`, `w: [kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(w)?.value.shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] {
            return Err(shape_err("conv2d", format!("x [H,W,Cin] with w [kh,kw,Cin,Cout], Cin={:?}", xs.get(2)), (xs, ws)));
        }
        if ws[..2].iter().any(|k| k % 2 == 0) {
            return Err(invalid("conv2d", format!("kernel extents must be odd, got {:?}", &ws[..2])));
        }
        let geom = ConvGeom {
            h: xs[0],
            w: xs[1],
            d: 1,
            cin: xs[2],
            cout: ws[3],
            kh: ws[0],
            kw: ws[1],
            kd: 1,
        };
        self.conv_with(x, w, b, geom, vec![xs[0], xs[1], ws[3]])
    }

    fn conv_with(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        let bias = match b {
            Some(bv) => {
                let bt = &self.node(bv)?.value;
                if bt.shape() != [geom.cout] {
                    return Err(shape_err("conv bias", [geom.cout], bt.shape()));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = geom.forward(self.nodes[x.idx].value.data(), self.nodes[w.idx].value.data(), bias);
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        let v = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(v, Op::Conv { x, w, b, geom }, rg))
    }

    /// Per-position linear map over the last axis (a 1×1×1 convolution).
    /// `x: [..., Cin]`, `w: [Cin, Cout]`, `b: [Cout]`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(w)?.value.shape().to_vec();
        if xs.is_empty() || ws.len() != 2 || ws[0] != *xs.last().unwrap() {
            return Err(shape_err("pointwise", "x [..., Cin] with w [Cin, Cout]", (xs, ws)));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let m = numel(&xs) / cin.max(1);
        let mut out = vec![T::zero(); m * cout];
        T::gemm(
            m,
            cin,
            cout,
            T::one(),
            self.nodes[x.idx].value.data(),
            (cin, 1),
            self.nodes[w.idx].value.data(),
            (cout, 1),
            T::zero(),
            &mut out,
            (cout, 1),
        );
        if let Some(bv) = b {
            let bt = self.node(bv)?.value.data();
            if bt.len() != cout {
                return Err(shape_err("pointwise bias", [cout], self.nodes[bv.idx].value.shape()));
            }
            for row in out.chunks_exact_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bt) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Pointwise { x, w, b }, rg))
    }

    /// Bilinear sampling of `feat: [H, W, C]` at fractional `(row, col)`
    /// positions `pos: [..., 2]`; positions are clamped to the grid.
    pub fn grid_sample(&mut self, feat: Var, pos: Var) -> Result<Var> {
        let fs = self.node(feat)?.value.shape().to_vec();
        let ps = self.node(pos)?.value.shape().to_vec();
        if fs.len() != 3 || ps.last() != Some(&2) {
            return Err(shape_err("grid_sample", "feat [H,W,C], pos [...,2]", (fs, ps)));
        }
        let out = grid_sample(
            self.nodes[feat.idx].value.data(),
            fs[0],
            fs[1],
            fs[2],
            self.nodes[pos.idx].value.data(),
        );
        let mut shape = ps;
        *shape.last_mut().unwrap() = fs[2];
        let rg = self.rg(&[feat, pos]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::GridSample { feat, pos }, rg))
    }

    /// Record an externally computed op.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        for &v in inputs {
            self.node(v)?;
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss)?;
        if !ln.value.shape().is_empty() {
            return Err(TensorError::NotScalar(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.idx).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param(_));
            let g = if keep {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backward_node(node, g, &mut grads)?;
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    /// Backward, then add every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.idx].requires_grad {
            return Ok(());
        }
        match &mut grads[v.idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx].value
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone())?;
                self.acc(grads, *a, g)?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|x| -x))?;
                self.acc(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.val(*b), "mul backward", |x, y| x * y)?;
                let gb = g.zip_map(self.val(*a), "mul backward", |x, y| x * y)?;
                self.acc(grads, *a, ga)?;
                self.acc(grads, *b, gb)?;
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s))?;
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.val(p).shape()[*axis];
                    if self.nodes[p.idx].requires_grad {
                        self.acc(grads, p, g.slice_axis(*axis, start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.val(*x).shape();
                let (axis, start) = (*axis, *start);
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let n = xs[axis];
                let len = g.shape()[axis];
                let mut full = Tensor::zeros(xs.to_vec());
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    full.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, full)?;
            }
            Op::Reshape(x) => {
                let shape = self.val(*x).shape().to_vec();
                self.acc(grads, *x, g.reshape(shape)?)?;
            }
            Op::Sum { x, axes } => {
                let xs = self.val(*x).shape().to_vec();
                let map = ReduceMap::new(&xs, axes);
                let mut full = Tensor::zeros(xs);
                map.for_each(|i, o| full[i] = g[o]);
                self.acc(grads, *x, full)?;
            }
            Op::Exp(x) => {
                let gx = g.zip_map(&node.value, "exp backward", |a, y| a * y)?;
                self.acc(grads, *x, gx)?;
            }
            Op::Softplus(x) => {
                let gx = g.zip_map(self.val(*x), "softplus backward", |a, v| a * sigmoid(v))?;
                self.acc(grads, *x, gx)?;
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let gx = g.zip_map(self.val(*x), "leaky_relu backward", |a, v| if v > T::zero() { a } else { a * slope })?;
                self.acc(grads, *x, gx)?;
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = g.zip_map(self.val(*x), "clamp backward", |a, v| if v >= lo && v <= hi { a } else { T::zero() })?;
                self.acc(grads, *x, gx)?;
            }
            Op::Conv { x, w, b, geom } => {
                let need_dx = self.nodes[x.idx].requires_grad;
                let (dx, dw, db) = geom.backward(self.val(*x).data(), self.val(*w).data(), g.data(), need_dx);
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(self.val(*x).shape().to_vec(), dx)?)?;
                }
                self.acc(grads, *w, Tensor::from_vec(self.val(*w).shape().to_vec(), dw)?)?;
                if let Some(b) = b {
                    self.acc(grads, *b, Tensor::from_vec(vec![geom.cout], db)?)?;
                }
            }
            Op::Pointwise { x, w, b } => {
                let ws = self.val(*w).shape();
                let (cin, cout) = (ws[0], ws[1]);
                let m = g.len() / cout.max(1);
                if self.nodes[x.idx].requires_grad {
                    let mut dx = vec![T::zero(); m * cin];
                    T::gemm(m, cout, cin, T::one(), g.data(), (cout, 1), self.val(*w).data(), (1, cout), T::zero(), &mut dx, (cin, 1));
                    self.acc(grads, *x, Tensor::from_vec(self.val(*x).shape().to_vec(), dx)?)?;
                }
                let mut dw = vec![T::zero(); cin * cout];
                T::gemm(cin, m, cout, T::one(), self.val(*x).data(), (1, cin), g.data(), (cout, 1), T::zero(), &mut dw, (cout, 1));
                self.acc(grads, *w, Tensor::from_vec(vec![cin, cout], dw)?)?;
                if let Some(b) = b {
                    let mut db = vec![T::zero(); cout];
                    for row in g.data().chunks_exact(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(vec![cout], db)?)?;
                }
            }
            Op::GridSample { feat, pos } => {
                let f = self.val(*feat);
                let fs = f.shape();
                let (df, dp) = grid_sample_backward(f.data(), fs[0], fs[1], fs[2], self.val(*pos).data(), g.data());
                self.acc(grads, *feat, Tensor::from_vec(fs.to_vec(), df)?)?;
                self.acc(grads, *pos, Tensor::from_vec(self.val(*pos).shape().to_vec(), dp)?)?;
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| self.val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.idx].requires_grad).collect();
                let gs = op.backward(&ins, &node.value, &g, &needs)?;
                if gs.len() != inputs.len() {
                    return Err(invalid(op.name(), "backward returned wrong number of gradients"));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.val(v).shape() {
                            return Err(shape_err(op.name(), self.val(v).shape(), gi.shape()));
                        }
                        self.acc(grads, v, gi)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Maps each input flat index to its flat index in the reduced output.
struct ReduceMap {
    in_shape: Vec<usize>,
    out_stride_of_axis: Vec<usize>,
    out_shape: Vec<usize>,
}

impl ReduceMap {
    fn new(in_shape: &[usize], axes: &[usize]) -> Self {
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &n)| n)
            .collect();
        let os = strides(&out_shape);
        let mut k = 0;
        let out_stride_of_axis = (0..in_shape.len())
            .map(|i| {
                if axes.contains(&i) {
                    0
                } else {
                    k += 1;
                    os[k - 1]
                }
            })
            .collect();
        Self {
            in_shape: in_shape.to_vec(),
            out_stride_of_axis,
            out_shape,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n = numel(&self.in_shape);
        let nd = self.in_shape.len();
        let mut idx = vec![0usize; nd];
        let mut o = 0usize;
        for i in 0..n {
            f(i, o);
            for a in (0..nd).rev() {
                idx[a] += 1;
                o += self.out_stride_of_axis[a];
                if idx[a] < self.in_shape[a] {
                    break;
                }
                o -= self.out_stride_of_axis[a] * idx[a];
                idx[a] = 0;
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of an input or parameter leaf, `None` when unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.get_mut(id).grad.add_assign(g)?;
        }
        Ok(())
    }
}
