use std::collections::{BTreeMap, HashMap};

use super::kernels::{matmul_into, matmul_nt, matmul_tn, split_axis};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{KfsError, Result};

/// Smallest denominator magnitude `div` accepts.
pub const DIV_GUARD: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Deliberate corruption of one backward rule, used to prove that gradient
/// checking catches broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the numerator-coefficient gradient of rational activations.
    RationalNumer,
    /// Drops the bias gradient of affine maps.
    AffineBias,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Abs(Var),
    PowInt(Var, i32),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Affine(Var, Var, Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Rational {
        x: Var,
        numer: Var,
        denom: Var,
    },
    Gelu(Var),
    Hypot(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: BackwardFault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KfsError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(KfsError::shape(name, sa, sb));
        }
        Ok((sa.to_vec(), self.rg(a) || self.rg(b)))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary("add", a, b)?;
        let out = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary("sub", a, b)?;
        let out = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary("div", a, b)?;
        if let Some(&d) = self
            .value(b)
            .data()
            .iter()
            .find(|d| d.abs() < DIV_GUARD)
        {
            return Err(KfsError::NumericGuard { op: "div", value: d });
        }
        let out = self.zip_values(a, b, |x, y| x / y);
        Ok(self.push(Tensor::new(shape, out)?, Op::Div(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s.abs() < DIV_GUARD {
            return Err(KfsError::NumericGuard { op: "div", value: s });
        }
        Ok(self.mul_scalar(a, 1.0 / s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn pow_int(&mut self, a: Var, n: i32) -> Var {
        let value = self.value(a).map(|x| x.powi(n));
        let rg = self.rg(a);
        self.push(value, Op::PowInt(a, n), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(KfsError::invalid("mean", "empty tensor"));
        }
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), rg))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(KfsError::invalid(
                "reduce",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(KfsError::invalid("reduce", "empty axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, op, rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| KfsError::invalid("mean_of", "no inputs"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.mul_scalar(acc, 1.0 / vars.len() as f64))
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| KfsError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(KfsError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(KfsError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(vars.to_vec(), axis), rg))
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(KfsError::invalid(
                "slice",
                format!("range {start}..{} out of bounds for {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * alen + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice(a, axis, start), rg))
    }

    /// `x · W + b` over the trailing dimension of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let d_in = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != d_in {
            return Err(KfsError::shape("affine", sx, sw));
        }
        let d_out = sw[1];
        if sb.iter().product::<usize>() != d_out {
            return Err(KfsError::shape("affine", sw, sb));
        }
        let rows = self.value(x).rows();
        let mut out = Vec::with_capacity(rows * d_out);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        matmul_into(self.value(x).data(), self.value(w).data(), &mut out, rows, d_in, d_out);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine(x, w, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(KfsError::invalid("transpose", "expects a 2-D tensor"));
        }
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Row `i` of the result is row `indices[i]` of `a` (2-D).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(KfsError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], out)?,
            Op::GatherRows(a, indices.to_vec()),
            rg,
        ))
    }

    /// Group-rational activation applied over the trailing dimension of `x`.
    ///
    /// `numer` is `[g × (m_num + 1)]` holding `a_0..a_m`, `denom` is
    /// `[g × m_den]` holding `b_1..b_m'`. Channel `i` uses group
    /// `i / (d_in / g)`.
    pub fn rational(&mut self, x: Var, numer: Var, denom: Var) -> Result<Var> {
        let d_in = self.value(x).cols();
        let sn = self.shape(numer).to_vec();
        let sd = self.shape(denom).to_vec();
        if sn.len() != 2 || sd.len() != 2 || sn[0] != sd[0] || sn[1] == 0 {
            return Err(KfsError::shape("rational", &sn, &sd));
        }
        let groups = sn[0];
        if groups == 0 || !d_in.is_multiple_of(groups) {
            return Err(KfsError::Config(format!(
                "rational: width {d_in} not divisible by {groups} groups"
            )));
        }
        let dg = d_in / groups;
        let (a, b) = (self.value(numer).data(), self.value(denom).data());
        let (na, nb) = (sn[1], sd[1]);
        let value = self.value(x);
        let mut out = Vec::with_capacity(value.numel());
        for (idx, &xv) in value.data().iter().enumerate() {
            let g = (idx % d_in) / dg;
            let t = RationalTerms::eval(xv, &a[g * na..(g + 1) * na], &b[g * nb..(g + 1) * nb]);
            out.push(t.p / t.den);
        }
        let shape = value.shape().to_vec();
        let rg = self.rg(x) || self.rg(numer) || self.rg(denom);
        Ok(self.push(Tensor::new(shape, out)?, Op::Rational { x, numer, denom }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// `sqrt(re² + im²)` elementwise; the gradient at the origin is zero.
    pub fn hypot(&mut self, re: Var, im: Var) -> Result<Var> {
        let (shape, rg) = self.binary("hypot", re, im)?;
        let out = self.zip_values(re, im, f64::hypot);
        Ok(self.push(Tensor::new(shape, out)?, Op::Hypot(re, im), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter placed on this tape gets an entry in the result, zero
    /// when `loss` does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(KfsError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = grads
                .get(idx)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; node.value.numel()]);
            match node.op {
                Op::Param(id) => {
                    out.params.insert(id, g);
                }
                Op::Leaf if node.requires_grad => {
                    out.leaves.insert(idx, g);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |ga| matmul_nt(g, val(*b), ga, m, k, n));
                acc(*b, &mut |gb| matmul_tn(val(*a), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulScalar(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v * s));
            }
            Op::Neg(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o -= v)),
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sign(av[i]);
                    }
                });
            }
            Op::PowInt(a, n) => {
                let av = val(*a);
                let n = *n;
                acc(*a, &mut |ga| {
                    if n == 0 {
                        return;
                    }
                    for i in 0..ga.len() {
                        ga[i] += g[i] * n as f64 * av[i].powi(n - 1);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                acc(*a, &mut |ga| {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                });
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                ga[(o * len + k) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Concat(vars, axis) => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in vars {
                    let len = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gv[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, alen, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut ga[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Affine(x, w, b) => {
                let sw = self.shape(*w);
                let (d_in, d_out) = (sw[0], sw[1]);
                let rows = self.nodes[x.0].value.rows();
                acc(*x, &mut |gx| matmul_nt(g, val(*w), gx, rows, d_in, d_out));
                acc(*w, &mut |gw| matmul_tn(val(*x), g, gw, rows, d_in, d_out));
                if self.fault != Some(BackwardFault::AffineBias) {
                    acc(*b, &mut |gb| {
                        for r in 0..rows {
                            add_into(gb, &g[r * d_out..(r + 1) * d_out]);
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.as_matrix_dims();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::GatherRows(a, indices) => {
                let cols = self.nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Rational { x, numer, denom } => {
                self.backprop_rational(*x, *numer, *denom, g, grads);
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad(av[i]);
                    }
                });
            }
            Op::Hypot(re, im) => {
                let out = node.value.data();
                let (rv, iv) = (val(*re), val(*im));
                acc(*re, &mut |gr| {
                    for i in 0..gr.len() {
                        if out[i] > 0.0 {
                            gr[i] += g[i] * rv[i] / out[i];
                        }
                    }
                });
                acc(*im, &mut |gi| {
                    for i in 0..gi.len() {
                        if out[i] > 0.0 {
                            gi[i] += g[i] * iv[i] / out[i];
                        }
                    }
                });
            }
        }
    }

    fn backprop_rational(
        &self,
        x: Var,
        numer: Var,
        denom: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xv = &self.nodes[x.0].value;
        let d_in = xv.cols();
        let (sn, sd) = (self.shape(numer), self.shape(denom));
        let (groups, na, nb) = (sn[0], sn[1], sd[1]);
        let dg = d_in / groups;
        let a = self.nodes[numer.0].value.data();
        let b = self.nodes[denom.0].value.data();

        let mut gx = vec![0.0; xv.numel()];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        for (idx, &x0) in xv.data().iter().enumerate() {
            let grp = (idx % d_in) / dg;
            let (ac, bc) = (&a[grp * na..(grp + 1) * na], &b[grp * nb..(grp + 1) * nb]);
            let t = RationalTerms::eval(x0, ac, bc);
            let s = sign(t.q);
            let gi = g[idx];
            gx[idx] = gi * (t.dp / t.den - t.p * s * t.dq / (t.den * t.den));
            let mut pw = 1.0;
            for i in 0..na {
                ga[grp * na + i] += gi * pw / t.den;
                pw *= x0;
            }
            let mut pw = x0;
            for j in 0..nb {
                gb[grp * nb + j] -= gi * t.p * s * pw / (t.den * t.den);
                pw *= x0;
            }
        }
        if self.fault == Some(BackwardFault::RationalNumer) {
            ga.iter_mut().for_each(|v| *v *= 1.5);
        }
        for (v, local) in [(x, gx), (numer, ga), (denom, gb)] {
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; local.len()]);
                add_into(slot, &local);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sign with `sign(0) == 0`, the subgradient used for `|·|`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerator/denominator pieces of `P(x) / (1 + |Q(x)|)` with derivatives.
struct RationalTerms {
    p: f64,
    dp: f64,
    q: f64,
    dq: f64,
    den: f64,
}

impl RationalTerms {
    fn eval(x: f64, a: &[f64], b: &[f64]) -> Self {
        // Horner for the value and derivative together.
        let (mut p, mut dp) = (0.0, 0.0);
        for &c in a.iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        // Q(x) = x * (b1 + b2 x + ...)
        let (mut r, mut dr) = (0.0, 0.0);
        for &c in b.iter().rev() {
            dr = dr * x + r;
            r = r * x + c;
        }
        let q = x * r;
        let dq = r + x * dr;
        RationalTerms {
            p,
            dp,
            q,
            dq,
            den: 1.0 + q.abs(),
        }
    }
}
