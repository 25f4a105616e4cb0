//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every forward op in execution order. Because ops can
//! only reference earlier nodes, the node index order is a topological order
//! and `backward` simply walks it in reverse. Trainable state lives outside
//! the tape in a [`ParamStore`]; parameters enter a tape as leaves and their
//! gradients are handed back as a [`Gradients`] value that the store
//! accumulates.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Real, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Whether decoupled weight decay applies. True only for linear-layer
    /// weight matrices (names ending in `.weight`).
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
    fresh_grads: bool,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
            fresh_grads: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        let decay = name.ends_with(".weight");
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            decay,
        });
        Ok(id)
    }

    /// Replace the value of an existing parameter, keeping its id.
    pub fn replace(&mut self, id: ParamId, value: Tensor<T>) {
        let p = &mut self.params[id.0];
        p.value = value;
        p.grad = None;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when a backward pass has been accumulated since the last [`Self::zero_grad`].
    pub fn has_fresh_grads(&self) -> bool {
        self.fresh_grads
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
        self.fresh_grads = false;
    }

    /// Add the gradients that belong to this store. Returns how many
    /// parameters received a contribution.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> usize {
        let mut touched = 0;
        for (key, g) in &grads.params {
            if key.0 != self.uid {
                continue;
            }
            let p = &mut self.params[key.1];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
            touched += 1;
        }
        self.fresh_grads = true;
        touched
    }

    /// Element-type conversion. The copy keeps names and decay flags but gets
    /// a fresh identity, so gradients never cross between the two.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::<U>::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Derivative<T> = Box<dyn Fn(T) -> T>;

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Gelu(Var),
    Map(Var, Derivative<T>),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax(Var, AxisSplit),
    LogSoftmax(Var, AxisSplit),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Expand(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Pick(Var, Vec<usize>),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        floor: T,
    },
}

#[derive(Clone, Copy)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn lanes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.outer).flat_map(move |o| (0..self.inner).map(move |i| (o * self.len * self.inner + i, self.inner)))
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<(u64, usize)>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    params: Vec<((u64, usize), Tensor<T>)>,
    inputs: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a grad-requiring input leaf.
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.0)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    track_params: bool,
    param_cache: HashMap<(u64, usize), Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-form GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_CUBIC);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_CUBIC);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
            param_cache: HashMap::new(),
        }
    }

    /// A tape whose parameters are recorded as constants: nothing requires a
    /// gradient and no backward bookkeeping is kept alive for them.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], v: T) -> Var {
        self.input(Tensor::full(shape, v))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid, id.0);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let value = store.get(id).value.clone();
        let track = self.track_params;
        let v = self.push(value, if track { Op::Param } else { Op::Leaf }, track);
        if track {
            self.nodes[v.0].param = Some(key);
        }
        self.param_cache.insert(key, v);
        v
    }

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return shape_err("add", format!("{xs:?} + {ys:?}"));
        }
        let inner = y.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| p + y.data()[i % inner])
            .collect();
        let out = Tensor::from_vec(xs, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("mul_scalar", format!("scale has shape {:?}", self.shape(s)));
        }
        let k = self.scalar(s);
        let out = self.value(a).map(|v| v * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.ln());
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.abs());
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Elementwise op with a caller-supplied derivative.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        derivative: impl Fn(T) -> T + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, Op::Map(a, Box::new(derivative)), rg)
    }

    /// Batched product `op(a) . op(b)` over shared leading dimensions, where
    /// `op` optionally transposes the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (xs, ys) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if xs.len() < 2 || xs.len() != ys.len() || xs[..xs.len() - 2] != ys[..ys.len() - 2] {
            return shape_err("matmul", format!("{xs:?} . {ys:?}"));
        }
        let r = xs.len();
        let (m, k) = if ta { (xs[r - 1], xs[r - 2]) } else { (xs[r - 2], xs[r - 1]) };
        let (k2, n) = if tb { (ys[r - 1], ys[r - 2]) } else { (ys[r - 2], ys[r - 1]) };
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} vs {k2} for {xs:?} . {ys:?}"));
        }
        let batch: usize = xs[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            let (rsa, csa) = op_strides(ta, m, k);
            let (rsb, csb) = op_strides(tb, k, n);
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &x[bi * m * k..(bi + 1) * m * k],
                    rsa,
                    csa,
                    &y[bi * k * n..(bi + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = xs[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x . w + b` applied over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let Some((&d_in, lead)) = xs.split_last() else {
            return shape_err("linear", "scalar input");
        };
        if ws.len() != 2 || ws[0] != d_in {
            return shape_err("linear", format!("input {xs:?} with weight {ws:?}"));
        }
        let rows: usize = lead.iter().product();
        let flat = self.reshape(x, &[rows, d_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(ws[1]);
        self.reshape(y, &out_shape)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<AxisSplit> {
        let s = self.shape(x);
        if axis >= s.len() {
            return shape_err(op, format!("axis {axis} of {s:?}"));
        }
        Ok(AxisSplit::new(s, axis))
    }

    /// Softmax along `axis`, stabilised by subtracting the lane maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.check_axis("softmax", x, axis)?;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for (base, stride) in split.lanes() {
            let idx = |j: usize| base + j * stride;
            let mx = (0..split.len).map(|j| d[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..split.len {
                let e = (d[idx(j)] - mx).exp();
                d[idx(j)] = e;
                sum = sum + e;
            }
            for j in 0..split.len {
                d[idx(j)] = d[idx(j)] / sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, split), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.check_axis("log_softmax", x, axis)?;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for (base, stride) in split.lanes() {
            let idx = |j: usize| base + j * stride;
            let mx = (0..split.len).map(|j| d[idx(j)]).fold(T::neg_infinity(), T::max);
            let lse = mx + (0..split.len).map(|j| (d[idx(j)] - mx).exp()).sum::<T>().ln();
            for j in 0..split.len {
                d[idx(j)] = d[idx(j)] - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x, split), rg))
    }

    /// Normalise each vector along the last axis to zero mean and unit
    /// variance (biased estimate, `eps` inside the square root), then apply
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(
                "layer_norm",
                format!("input {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            );
        }
        let rows = numel(&xs) / d;
        let dt = T::from_usize(d).unwrap();
        let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_vec(&xs, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} of {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Repeat `x` `n` times along a new leading axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return shape_err("expand", "zero repeats");
        }
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.len());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Expand(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("non-empty shape");
        let data: Vec<T> = self.value(x).data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let shape = if xs.len() > 1 { xs[..xs.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::SumLast(x), rg))
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != idx.len() || idx.iter().any(|&j| j >= xs[1]) {
            return shape_err("pick", format!("indices {idx:?} into {xs:?}"));
        }
        let v = self.value(x).data();
        let data = idx.iter().enumerate().map(|(i, &j)| v[i * xs[1] + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[xs[0]], data)?, Op::Pick(x, idx.to_vec()), rg))
    }

    /// Scale each vector along the last axis to unit Euclidean norm, with the
    /// norm floored at `floor`.
    pub fn l2_normalize(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().expect("non-empty shape");
        let mut norms = Vec::with_capacity(v.len() / d);
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt().max(floor);
            norms.push(n);
            for a in row.iter_mut() {
                *a = *a / n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms, floor }, rg)
    }

    /// Reverse pass from a single-element `loss`. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Gradients {
            params: Vec::new(),
            inputs: HashMap::new(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param);
            if !is_leaf {
                continue;
            }
            let g = grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            let t = Tensor::from_vec(node.value.shape(), g)?;
            match node.param {
                Some(key) => out.params.push((key, t)),
                None => {
                    out.inputs.insert(i, t);
                }
            }
        }
        self.nodes.clear();
        self.param_cache.clear();
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                let inner = self.value(*b).len();
                self.acc(grads, *b, |gb| {
                    for (j, &v) in g.iter().enumerate() {
                        gb[j % inner] = gb[j % inner] + v;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d = *d - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * bv[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..g.len() {
                        gb[j] = gb[j] + g[j] * av[j];
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let k = self.scalar(*s);
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * k;
                    }
                });
                self.acc(grads, *s, |gs| {
                    gs[0] = gs[0] + g.iter().zip(av).map(|(&p, &q)| p * q).sum::<T>();
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |ga| {
                for j in 0..g.len() {
                    ga[j] = ga[j] + g[j] * *c;
                }
            }),
            Op::Offset(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for j in 0..g.len() {
                    ga[j] = ga[j] + g[j] * y[j];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] / av[j];
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        let s = if av[j] > T::zero() {
                            T::one()
                        } else if av[j] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        ga[j] = ga[j] + g[j] * s;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * gelu_grad_scalar(av[j]);
                    }
                });
            }
            Op::Map(a, deriv) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * deriv(av[j]);
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (rsa, csa) = op_strides(*ta, m, k);
                let (rsb, csb) = op_strides(*tb, k, n);
                // d op(A) = dC . op(B)^T, written through op(A)'s strides.
                self.acc(grads, *a, |ga| {
                    for bi in 0..*batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bv[bi * k * n..(bi + 1) * k * n],
                            csb,
                            rsb,
                            T::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            rsa,
                            csa,
                        );
                    }
                });
                // d op(B) = op(A)^T . dC
                self.acc(grads, *b, |gb| {
                    for bi in 0..*batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[bi * m * k..(bi + 1) * m * k],
                            csa,
                            rsa,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            T::one(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            rsb,
                            csb,
                        );
                    }
                });
            }
            Op::Softmax(a, split) => self.acc(grads, *a, |ga| {
                for (base, stride) in split.lanes() {
                    let idx = |j: usize| base + j * stride;
                    let dot = (0..split.len).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>();
                    for j in 0..split.len {
                        ga[idx(j)] = ga[idx(j)] + y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }),
            Op::LogSoftmax(a, split) => self.acc(grads, *a, |ga| {
                for (base, stride) in split.lanes() {
                    let idx = |j: usize| base + j * stride;
                    let gs = (0..split.len).map(|j| g[idx(j)]).sum::<T>();
                    for j in 0..split.len {
                        ga[idx(j)] = ga[idx(j)] + g[idx(j)] - y[idx(j)].exp() * gs;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let dt = T::from_usize(d).unwrap();
                self.acc(grads, *gamma, |gg| {
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] = gg[j] + row[j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
                self.acc(grads, *x, |gx| {
                    for (r, row) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = row[j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * h[j];
                        }
                        for j in 0..d {
                            let dh = row[j] * gv[j];
                            gx[r * d + j] = gx[r * d + j] + rstd[r] / dt * (dt * dh - s1 - h[j] * s2);
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec())
                    .and_then(|t| t.permute(&inv))
                    .expect("inverse permutation of a valid permute");
                self.acc(grads, *a, |ga| add_into(ga, gt.data()));
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.shape(*x);
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let extent = src_shape[*axis];
                let len = node.value.shape()[*axis];
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut off = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    self.acc(grads, p, |gp| {
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            add_into(&mut gp[o * ext * inner..(o + 1) * ext * inner], &g[src..src + ext * inner]);
                        }
                    });
                    off += ext;
                }
            }
            Op::Expand(a) => {
                let inner = self.value(*a).len();
                self.acc(grads, *a, |ga| {
                    for chunk in g.chunks(inner) {
                        add_into(ga, chunk);
                    }
                });
            }
            Op::SumAll(a) => self.acc(grads, *a, |ga| {
                for v in ga.iter_mut() {
                    *v = *v + g[0];
                }
            }),
            Op::MeanAll(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                self.acc(grads, *a, |ga| {
                    for v in ga.iter_mut() {
                        *v = *v + g[0] / n;
                    }
                });
            }
            Op::SumLast(a) => {
                let d = *self.shape(*a).last().unwrap();
                self.acc(grads, *a, |ga| {
                    for (r, row) in ga.chunks_mut(d).enumerate() {
                        for v in row.iter_mut() {
                            *v = *v + g[r];
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let cols = self.shape(*a)[1];
                self.acc(grads, *a, |ga| {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * cols + j] = ga[r * cols + j] + g[r];
                    }
                });
            }
            Op::L2Normalize { x, norms, floor } => {
                let d = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |gx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot = if nrm > *floor {
                            yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>()
                        } else {
                            T::zero()
                        };
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn op_strides(transposed: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Strides of the logical `rows x cols` operand; a transposed operand is
    // stored as `cols x rows` row-major.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input_with_grad(t64(&[3], &[1., -2., 5.]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.input(x).unwrap().data(), &[1., 1., 1.]);
        assert!(tape.is_empty());
    }

    #[test]
    fn product_gradient_is_other_factor() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input_with_grad(t64(&[3], &[1., 2., 3.]));
        let y = tape.input(t64(&[3], &[4., -5., 6.]));
        let p = tape.mul(x, y).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.input(x).unwrap().data(), &[4., -5., 6.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input_with_grad(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::<f64>::new();
        let c = tape.input(t64(&[4], &[0.7; 4]));
        let s = tape.softmax(c, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = tape.input(t64(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_over_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(&[2], &[1.0, -1.0]));
        let g = tape.input(t64(&[2], &[1.0, 1.0]));
        let b0 = tape.input(t64(&[2], &[0.0, 0.0]));
        let b1 = tape.input(t64(&[2], &[0.5, -2.0]));
        let y0 = tape.layer_norm(x, g, b0, 1e-5).unwrap();
        let y1 = tape.layer_norm(x, g, b1, 1e-5).unwrap();
        // var = 1, so out = +-1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v0 = tape.value(y0).data().to_vec();
        assert!((v0[0] - expect).abs() < 1e-12 && (v0[1] + expect).abs() < 1e-12);
        let v1 = tape.value(y1).data();
        assert_eq!(v1[0], v0[0] + 0.5);
        assert_eq!(v1[1], v0[1] - 2.0);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::full(&[3, 8], 4.25));
        let g = tape.input(Tensor::full(&[8], 1.0));
        let b = tape.input(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= 1e-5f32.sqrt()));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-4);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), evaluated with mpmath at 30 digits.
        assert!((gelu_scalar(1.0f64) - 0.841_191_990_608_276_7).abs() < 1e-6);
    }

    #[test]
    fn parameters_accumulate_across_uses_and_tapes() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w.weight", t64(&[2], &[1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let a = tape.param(&store, w);
            let b = tape.param(&store, w);
            let p = tape.mul(a, b).unwrap();
            let l = tape.sum(p);
            let g = tape.backward(l).unwrap();
            store.accumulate(&g);
        }
        // d/dw sum(w*w) = 2w per pass, two passes.
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[4.0, 8.0]);
        assert!(store.get(w).decay);
        store.zero_grad();
        assert!(store.get(w).grad.is_none() && !store.has_fresh_grads());
    }

    #[test]
    fn foreign_store_gradients_ignored() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let pa = a.add("x", t64(&[1], &[3.0])).unwrap();
        b.add("x", t64(&[1], &[3.0])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&a, pa);
        let l = tape.sum(v);
        let g = tape.backward(l).unwrap();
        assert_eq!(b.accumulate(&g), 0);
        assert_eq!(a.accumulate(&g), 1);
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::full(&[2], 1.0)).unwrap();
        let mut tape = Tape::inference();
        let v = tape.param(&store, w);
        let l = tape.sum(v);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.num_params(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1])).is_err());
    }
}
