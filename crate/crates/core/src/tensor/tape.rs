use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, Slices),
    LogSoftmax(Var, Slices),
    Sigmoid(Var),
    Relu(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
}

/// Decomposition of a tensor around one axis: `outer × len × inner`.
#[derive(Debug, Clone, Copy)]
struct Slices {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Slices {
    fn around(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("axis", shape, &[axis]));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        // f(base, stride): slice elements are base + k*stride, k in 0..len
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i, self.inner);
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records primitive operations of one forward pass.
///
/// A tape is confined to a single thread; parameters are read through a shared
/// [`ParamStore`] and copied onto the tape the first time they are bound.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<Option<Var>>,
    trace: Option<Vec<(&'static str, Var)>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            trace: None,
            dropout: None,
        }
    }

    /// Enables inverted dropout for [`Tape::dropout`] calls on this tape.
    pub fn set_dropout(&mut self, rate: f64, seed: u64) {
        self.dropout = (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed)));
    }

    /// Zeroes each element with the configured rate and rescales survivors;
    /// identity when dropout is off.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = T::of_f64(1.0 / (1.0 - *rate));
        let rate = *rate;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let shape = self.shape(x).to_vec();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Starts recording tagged intermediates (attention weights, gates).
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn record(&mut self, tag: &'static str, v: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((tag, v));
        }
    }

    pub fn traced(&self, tag: &str) -> Vec<Var> {
        self.trace
            .iter()
            .flatten()
            .filter(|(t, _)| *t == tag)
            .map(|&(_, v)| v)
            .collect()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    /// Copies a tensor onto the tape; tracked iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// An untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Binds a parameter, reusing the same leaf for repeated uses.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let ix = id.index();
        if ix >= self.bindings.len() {
            self.bindings.resize(ix + 1, None);
        }
        if let Some(v) = self.bindings[ix] {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.bindings[ix] = Some(v);
        v
    }

    fn binary_same(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a vector of length `cols` to every row of a 2-D tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims2(x, "add_row_bias")?;
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let tracked = self.is_tracked(x) || self.is_tracked(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddRowBias(x, bias), tracked))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a);
        self.push(shape, value, Op::Scale(a, k), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let value = matmul_forward(self.value(a), self.value(b), m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let value = transpose(self.value(a), r, c);
        let tracked = self.is_tracked(a);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let tracked = self.is_tracked(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), tracked))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = Slices::around(self.shape(a), axis)?;
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        s.for_each(|base, stride| {
            let idx = |k: usize| base + k * stride;
            let max = (0..s.len).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..s.len {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..s.len {
                out[idx(k)] /= total;
            }
        });
        let tracked = self.is_tracked(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax(a, s), tracked))
    }

    /// `x - logsumexp(x)` along `axis`, computed without forming probabilities first.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = Slices::around(self.shape(a), axis)?;
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        s.for_each(|base, stride| {
            let idx = |k: usize| base + k * stride;
            let max = (0..s.len).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let lse = max + (0..s.len).map(|k| (x[idx(k)] - max).exp()).sum::<T>().ln();
            for k in 0..s.len {
                out[idx(k)] = x[idx(k)] - lse;
            }
        });
        let tracked = self.is_tracked(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(a, s), tracked))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a);
        self.push(shape, value, Op::Sigmoid(a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a);
        self.push(shape, value, Op::Relu(a), tracked)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let block = len * inner;
                value.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
            tracked,
        ))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let value = self
            .value(x)
            .chunks(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let tracked = self.is_tracked(x);
        Ok(self.push(vec![rows, len], value, Op::SliceCols { x, start }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum();
        let tracked = self.is_tracked(a);
        self.push(vec![1], vec![total], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of_f64(self.value(a).len() as f64);
        let total: T = self.value(a).iter().copied().sum();
        let tracked = self.is_tracked(a);
        self.push(vec![1], vec![total / n], Op::Mean(a), tracked)
    }

    /// Embedding lookup: rows `ids` of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row id {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            value.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let tracked = self.is_tracked(table);
        Ok(self.push(
            vec![ids.len(), cols],
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "pick")?;
        if idx.len() != rows || idx.iter().any(|&j| j >= cols) {
            return Err(Error::shape("pick", self.shape(x), &[idx.len()]));
        }
        let v = self.value(x);
        let value = idx.iter().enumerate().map(|(i, &j)| v[i * cols + j]).collect();
        let tracked = self.is_tracked(x);
        Ok(self.push(vec![rows], value, Op::Pick { x, idx: idx.to_vec() }, tracked))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (_, cols) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let n = T::of_f64(cols as f64);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (k, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[k] + b[k]);
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(gain) || self.is_tracked(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.propagate(node, g, before);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let cols = self.value(*b).len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *k));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = G · Bᵀ
                acc(*a, &mut |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            d[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va[i * k + p];
                            if aip == T::zero() {
                                continue;
                            }
                            let drow = &mut d[p * n..(p + 1) * n];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                // g is c×r
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Softmax(a, s) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    s.for_each(|base, stride| {
                        let dot: T = (0..s.len).map(|k| g[base + k * stride] * y[base + k * stride]).sum();
                        for k in 0..s.len {
                            let ix = base + k * stride;
                            d[ix] += y[ix] * (g[ix] - dot);
                        }
                    })
                });
            }
            Op::LogSoftmax(a, s) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    s.for_each(|base, stride| {
                        let total: T = (0..s.len).map(|k| g[base + k * stride]).sum();
                        for k in 0..s.len {
                            let ix = base + k * stride;
                            d[ix] += g[ix] - y[ix].exp() * total;
                        }
                    })
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (T::one() - y);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    let block = len * inner;
                    acc(p, &mut |d| {
                        for o in 0..*outer {
                            let src = o * total * inner + offset;
                            add_into(&mut d[o * block..(o + 1) * block], &g[src..src + block]);
                        }
                    });
                    offset += block;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let len = node.shape[1];
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = T::of_f64(self.value(*a).len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::GatherRows { table, ids } => {
                let cols = self.shape(*table)[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Pick { x, idx } => {
                let cols = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * cols + j] += g[i];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.shape(*x)[1];
                let n = T::of_f64(cols as f64);
                let gv = self.value(*gain);
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for k in 0..cols {
                            let dh = grow[k] * gv[k];
                            sum_dh += dh;
                            sum_dh_h += dh * h[k];
                        }
                        let scale = inv_std[r] / n;
                        for k in 0..cols {
                            let dh = grow[k] * gv[k];
                            drow[k] += scale * (n * dh - sum_dh - h[k] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for k in 0..cols {
                            d[k] += grow[k] * h[k];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(cols) {
                        add_into(d, grow);
                    }
                });
            }
        }
    }

    /// Parameter bindings made through [`Tape::param`].
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the variable is not tracked or not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sums the gradients of every bound parameter into the store.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (id, var) in tape.bound_params() {
            if let Some(g) = self.get(var) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn matmul_forward<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
