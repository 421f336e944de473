use std::collections::BTreeMap;

use super::attention::{self, AttnShape};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

impl Axis {
    pub fn from_index(i: usize) -> Result<Axis> {
        match i {
            0 => Ok(Axis::Rows),
            1 => Ok(Axis::Cols),
            _ => Err(Error::InvalidArgument(format!("axis {i} out of range for a matrix"))),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, alpha: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, Axis),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    MaxPool { x: Var, arg: Vec<usize> },
    Mse(Var, Var),
    Sum(Var),
    Concat(Vec<Var>, Axis),
    Slice { x: Var, axis: Axis, start: usize },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass. Nodes are appended after their inputs, so the
/// node list is already in topological order and backward walks it in reverse.
pub struct Graph<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// The parameter as a leaf; repeated calls return the same node. Frozen
    /// parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was created without a parameter store");
        let frozen = store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, !frozen);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false, 1.0)
    }

    /// `alpha · op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, ka) = dims(av, ta);
        let (kb, n) = dims(bv, tb);
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?}{} x {:?}{}",
                    av.shape(),
                    if ta { "ᵀ" } else { "" },
                    bv.shape(),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let alpha = T::from_f64(alpha);
        let mut out = vec![T::zero(); m * n];
        gemm(alpha, av.data(), av.cols(), ta, bv.data(), bv.cols(), tb, m, ka, n, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul { a, b, ta, tb, alpha },
            ng,
        ))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector (`[c]` or `[1, c]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v = *v + *b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    fn map_op(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        match axis {
            Axis::Cols => {
                for row in out.chunks_exact_mut(c.max(1)) {
                    softmax_in_place(row);
                }
            }
            Axis::Rows => {
                let mut col = vec![T::zero(); r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = out[i * c + j];
                    }
                    softmax_in_place(&mut col);
                    for i in 0..r {
                        out[i * c + j] = col[i];
                    }
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x, axis), ng)
    }

    /// Normalizes each row to zero mean and unit variance (`eps` added to the
    /// variance), then applies the optional per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).len() != c {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} for {:?}", self.value(p).shape(), xv.shape()),
                ));
            }
        }
        let eps = T::from_f64(eps);
        let cf = T::from_f64(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gv) = gamma {
            let g = self.value(gv).data();
            for row in out.chunks_exact_mut(c) {
                for (v, s) in row.iter_mut().zip(g) {
                    *v = *v * *s;
                }
            }
        }
        if let Some(bv) = beta {
            let b = self.value(bv).data();
            for row in out.chunks_exact_mut(c) {
                for (v, s) in row.iter_mut().zip(b) {
                    *v = *v + *s;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || gamma.is_some_and(|g| self.ng(g)) || beta.is_some_and(|b| self.ng(b));
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Maximum along `axis`; `Rows` pools over rows giving `[1, c]`, `Cols`
    /// gives `[r, 1]`. Ties resolve to the first maximal element.
    pub fn max_pool(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 || c == 0 {
            return Err(Error::shape("max_pool", format!("empty input {:?}", xv.shape())));
        }
        let d = xv.data();
        let (shape, arg): (Vec<usize>, Vec<usize>) = match axis {
            Axis::Rows => (
                vec![1, c],
                (0..c)
                    .map(|j| {
                        let mut best = j;
                        for i in 1..r {
                            if d[i * c + j] > d[best] {
                                best = i * c + j;
                            }
                        }
                        best
                    })
                    .collect(),
            ),
            Axis::Cols => (
                vec![r, 1],
                (0..r)
                    .map(|i| {
                        let mut best = i * c;
                        for j in 1..c {
                            if d[i * c + j] > d[best] {
                                best = i * c + j;
                            }
                        }
                        best
                    })
                    .collect(),
            ),
        };
        let t = Tensor::new(shape, arg.iter().map(|&k| d[k]).collect())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaxPool { x, arg }, ng))
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len().max(1);
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::Mse(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(xs[0]);
        let (r0, c0) = (first.rows(), first.cols());
        let t = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &x in xs {
                    let v = self.value(x);
                    if v.cols() != c0 {
                        return Err(Error::shape(
                            "concat",
                            format!("column counts {c0} vs {} along rows", v.cols()),
                        ));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &x in xs {
                    let v = self.value(x);
                    if v.rows() != r0 {
                        return Err(Error::shape(
                            "concat",
                            format!("row counts {r0} vs {} along cols", v.rows()),
                        ));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &x in xs {
                        let v = self.value(x);
                        let c = v.cols();
                        data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// `len` rows (or columns) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let t = match axis {
            Axis::Rows => {
                if start + len > r {
                    return Err(Error::shape("slice", format!("rows {start}..{} of {r}", start + len)));
                }
                Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())?
            }
            Axis::Cols => {
                if start + len > c {
                    return Err(Error::shape("slice", format!("cols {start}..{} of {c}", start + len)));
                }
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
                }
                Tensor::matrix(r, len, data)?
            }
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Multi-head `softmax(scale · q_h k_hᵀ) v_h` with the heads laid out as
    /// equal column blocks of `q: [nq, dim]` and `k, v: [nk, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape("attention", format!("dim {dim} with {heads} heads")));
        }
        if kv.cols() != dim || kv.shape() != vv.shape() || kv.rows() == 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let s = AttnShape {
            nq: qv.rows(),
            nk: kv.rows(),
            dim,
            heads,
            scale,
        };
        let out = attention::forward(&s, qv.data(), kv.data(), vv.data());
        let t = Tensor::matrix(s.nq, dim, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape().to_vec(), g.clone()).ok()
    }

    /// Gradients of every non-frozen parameter that took part in the pass.
    pub fn param_grads(&self) -> Gradients<T> {
        let mut out = Gradients::new();
        for (&id, &v) in &self.params {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = self
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(id, g);
        }
        out
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, alpha } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims(av, *ta);
                let n = dims(bv, *tb).1;
                if self.ng(*a) {
                    // dA (as stored): !ta → gy·op(B)ᵀ  [m×k];  ta → op(B)·gyᵀ  [k×m]
                    let g = acc(grads, *a, av.len());
                    if !*ta {
                        gemm(*alpha, gy, n, false, bv.data(), bv.cols(), !*tb, m, n, k, T::one(), g);
                    } else {
                        gemm(*alpha, bv.data(), bv.cols(), *tb, gy, n, true, k, n, m, T::one(), g);
                    }
                }
                if self.ng(*b) {
                    // dB: !tb → op(A)ᵀ·gy  [k×n];  tb → gyᵀ·op(A)  [n×k]
                    let g = acc(grads, *b, bv.len());
                    if !*tb {
                        gemm(*alpha, av.data(), av.cols(), !*ta, gy, n, false, k, m, n, T::one(), g);
                    } else {
                        gemm(*alpha, gy, n, true, av.data(), av.cols(), *ta, n, m, k, T::one(), g);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, T::one()), (*b, T::one())] {
                    if self.ng(v) {
                        axpy(acc(grads, v, gy.len()), s, gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, T::one()), (*b, -T::one())] {
                    if self.ng(v) {
                        axpy(acc(grads, v, gy.len()), s, gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let g = acc(grads, *a, gy.len());
                    for ((g, &y), &o) in g.iter_mut().zip(gy).zip(bd) {
                        *g = *g + y * o;
                    }
                }
                if self.ng(*b) {
                    let g = acc(grads, *b, gy.len());
                    for ((g, &y), &o) in g.iter_mut().zip(gy).zip(ad) {
                        *g = *g + y * o;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.ng(*x) {
                    axpy(acc(grads, *x, gy.len()), T::one(), gy);
                }
                if self.ng(*bias) {
                    let c = self.value(*bias).len();
                    let g = acc(grads, *bias, c);
                    for row in gy.chunks_exact(c.max(1)) {
                        for (g, &y) in g.iter_mut().zip(row) {
                            *g = *g + y;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    axpy(acc(grads, *x, gy.len()), *s, gy);
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let xd = self.value(*x).data();
                    let g = acc(grads, *x, gy.len());
                    for ((g, &y), &v) in g.iter_mut().zip(gy).zip(xd) {
                        if v > T::zero() {
                            *g = *g + y;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.ng(*x) {
                    let yd = node.value.data();
                    let g = acc(grads, *x, gy.len());
                    for ((g, &d), &s) in g.iter_mut().zip(gy).zip(yd) {
                        *g = *g + d * s * (T::one() - s);
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if self.ng(*x) {
                    let y = node.value.data();
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let g = acc(grads, *x, gy.len());
                    match axis {
                        Axis::Cols => {
                            for i in 0..r {
                                let (ys, gs) = (&y[i * c..(i + 1) * c], &gy[i * c..(i + 1) * c]);
                                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                                for j in 0..c {
                                    g[i * c + j] = g[i * c + j] + ys[j] * (gs[j] - dot);
                                }
                            }
                        }
                        Axis::Rows => {
                            for j in 0..c {
                                let dot: T = (0..r).map(|i| y[i * c + j] * gy[i * c + j]).sum();
                                for i in 0..r {
                                    let k = i * c + j;
                                    g[k] = g[k] + y[k] * (gy[k] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let r = node.value.rows();
                if let Some(gv) = gamma {
                    if self.ng(*gv) {
                        let g = acc(grads, *gv, c);
                        for i in 0..r {
                            for j in 0..c {
                                g[j] = g[j] + gy[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                }
                if let Some(bv) = beta {
                    if self.ng(*bv) {
                        let g = acc(grads, *bv, c);
                        for row in gy.chunks_exact(c) {
                            for (g, &y) in g.iter_mut().zip(row) {
                                *g = *g + y;
                            }
                        }
                    }
                }
                if self.ng(*x) {
                    let gam = gamma.map(|gv| self.value(gv).data());
                    let cf = T::from_f64(c as f64);
                    let g = acc(grads, *x, gy.len());
                    let mut dxh = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            let s = gam.map_or(T::one(), |gm| gm[j]);
                            dxh[j] = gy[i * c + j] * s;
                        }
                        let xh = &xhat[i * c..(i + 1) * c];
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let k = rstd[i] / cf;
                        for j in 0..c {
                            let v = k * (cf * dxh[j] - s1 - xh[j] * s2);
                            g[i * c + j] = g[i * c + j] + v;
                        }
                    }
                }
            }
            Op::MaxPool { x, arg, .. } => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let g = acc(grads, *x, n);
                    for (&k, &y) in arg.iter().zip(gy) {
                        g[k] = g[k] + y;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let s = gy[0] * T::from_f64(2.0 / ad.len().max(1) as f64);
                if self.ng(*a) {
                    let g = acc(grads, *a, ad.len());
                    for ((g, &x), &y) in g.iter_mut().zip(ad).zip(bd) {
                        *g = *g + s * (x - y);
                    }
                }
                if self.ng(*b) {
                    let g = acc(grads, *b, bd.len());
                    for ((g, &x), &y) in g.iter_mut().zip(ad).zip(bd) {
                        *g = *g - s * (x - y);
                    }
                }
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let g = acc(grads, *x, n);
                    for v in g.iter_mut() {
                        *v = *v + gy[0];
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let total_c = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let (r, c) = (xv.rows(), xv.cols());
                    if self.ng(x) {
                        let g = acc(grads, x, xv.len());
                        match axis {
                            Axis::Rows => axpy(g, T::one(), &gy[offset..offset + xv.len()]),
                            Axis::Cols => {
                                for i in 0..r {
                                    let src = &gy[i * total_c + offset..i * total_c + offset + c];
                                    axpy(&mut g[i * c..(i + 1) * c], T::one(), src);
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => xv.len(),
                        Axis::Cols => c,
                    };
                }
            }
            Op::Slice { x, axis, start } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let g = acc(grads, *x, xv.len());
                    match axis {
                        Axis::Rows => axpy(&mut g[start * c..start * c + gy.len()], T::one(), gy),
                        Axis::Cols => {
                            let len = node.value.cols();
                            for (i, src) in gy.chunks_exact(len.max(1)).enumerate() {
                                axpy(&mut g[i * c + start..i * c + start + len], T::one(), src);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    axpy(acc(grads, *x, gy.len()), T::one(), gy);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let s = AttnShape {
                    nq: qv.rows(),
                    nk: kv.rows(),
                    dim: qv.cols(),
                    heads: *heads,
                    scale: *scale,
                };
                // Inputs may alias (self-attention), so gradients go to scratch first.
                let mut dq = self.ng(*q).then(|| vec![T::zero(); qv.len()]);
                let mut dk = self.ng(*k).then(|| vec![T::zero(); kv.len()]);
                let mut dv = self.ng(*v).then(|| vec![T::zero(); vv.len()]);
                attention::backward(
                    &s,
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    node.value.data(),
                    gy,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        axpy(acc(grads, var, d.len()), T::one(), &d);
                    }
                }
            }
        }
    }
}

fn dims<T: Real>(t: &Tensor<T>, transposed: bool) -> (usize, usize) {
    let (r, c) = (t.rows(), t.cols());
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
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

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    for v in row.iter_mut() {
        *v = *v - max;
    }
    T::exp_in_place(row);
    let sum: T = row.iter().copied().sum();
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// `C = alpha · op(A) · op(B) + beta · C` where `A`, `B` are stored row-major
/// with `lda`/`ldb` columns and `op` transposes when the flag is set. `C` is a
/// dense `m×n` row-major buffer.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    alpha: T,
    a: &[T],
    lda: usize,
    ta: bool,
    b: &[T],
    ldb: usize,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if tb { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: slice lengths were checked against m, k, n above and the strides
    // describe row-major storage of those slices.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
