use super::ops::{self, gelu, gelu_grad};
use super::{Real, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key columns a softmax row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowMask {
    None,
    /// Row `i` sees the first `prefix` columns plus columns `prefix..=prefix + i`.
    Causal { prefix: usize },
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    Reshape(Var),
    Kron(Var, Var),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations in construction order; gradients flow in reverse.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `b` broadcasts onto `a` when it equals `a` or a trailing block of `a`'s shape
/// (leading ones in `b` ignored).
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let b_trim: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    if b_trim.is_empty() {
        return b.iter().product::<usize>() == 1;
    }
    a.len() >= b_trim.len() && a[a.len() - b_trim.len()..] == b_trim[..]
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.set_grad(None);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a 32-bit parameter as a leaf of this graph's precision.
    pub fn param(&mut self, value: &Tensor<f32>, requires_grad: bool) -> Var {
        let mut t: Tensor<T> = Tensor {
            shape: value.shape().to_vec(),
            data: value.data().iter().map(|&x| T::of_f32(x)).collect(),
            grad: None,
            requires_grad,
        };
        t.requires_grad = requires_grad;
        self.leaf(t)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        ops::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch("add", sa, sb));
        }
        let shape = sa.to_vec();
        let bd = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bd.len()])
            .collect();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch("mul", sa, sb));
        }
        let shape = sa.to_vec();
        let bd = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % bd.len()])
            .collect();
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).data().iter().map(|&x| x * s).collect();
        self.push(shape, out, Op::Scale(a, s), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(shape, out, op, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Row-wise softmax of a rank-2 tensor with an optional causal mask.
    pub fn softmax(&mut self, a: Var, mask: RowMask) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "softmax")?;
        let mut out = self.value(a).data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let valid = match mask {
                RowMask::None => c,
                RowMask::Causal { prefix } => (prefix + i + 1).min(c),
            };
            ops::softmax_in_place(row, valid);
        }
        Ok(self.push(vec![r, c], out, Op::Softmax(a), &[a]))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let n = T::of_f64(c as f64);
        let eps = T::of_f64(LN_EPS);
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gd[j] + bd[j];
            }
        }
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table` (vocab × d) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::EmptyTensor);
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfVocab {
                    index: id,
                    vocab: v,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks `a` on top of `b` (same column count).
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(mismatch("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(vec![ra + rb, ca], out, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(mismatch("slice_cols", self.shape(x), &[start, len]));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyTensor)?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(mismatch("select", &shape, &[index]));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        Ok(self.push(shape[1..].to_vec(), out, Op::Select { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let out = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// Kronecker product of two rank-2 tensors.
    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (p, q) = self.dims2(a, "kronecker")?;
        let (r, s) = self.dims2(b, "kronecker")?;
        let mut out = vec![T::zero(); p * q * r * s];
        ops::kron_into(self.value(a).data(), self.value(b).data(), p, q, r, s, &mut out);
        Ok(self.push(vec![p * r, q * s], out, Op::Kron(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Mean token-level cross-entropy of `logits` (n × vocab) against `targets`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (n, v) = self.dims2(logits, "softmax_ce")?;
        if targets.len() != n {
            return Err(mismatch("softmax_ce", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfVocab {
                index: bad,
                vocab: v,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            ops::softmax_in_place(row, v);
            // clamp keeps underflow finite but lets NaN through
            let p = row[t];
            let p = if p.is_nan() { p } else { p.max(T::min_positive_value()) };
            loss = loss - p.ln();
        }
        loss = loss / T::of_f64(n as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar output. Clears any previous gradients.
    pub fn backward(&mut self, output: Var) -> Result<(), TensorError> {
        if self.value(output).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(output).to_vec()));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.nodes[output.0].value.requires_grad {
            return Ok(());
        }
        self.nodes[output.0].value.grad = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.value.requires_grad {
                continue;
            }
            let Some(grad) = node.value.grad.as_deref() else {
                continue;
            };
            backprop(before, &node.op, &node.value, grad);
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient of `v` when it tracks gradients.
fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, delta: &[T]) {
    let t = &mut nodes[v.0].value;
    if !t.requires_grad {
        return;
    }
    let n = t.data.len();
    let g = t.grad.get_or_insert_with(|| vec![T::zero(); n]);
    for (gi, &d) in g.iter_mut().zip(delta) {
        *gi = *gi + d;
    }
}

/// Adds `delta` (shaped like the broadcast result) into a possibly-broadcast `v`.
fn accumulate_broadcast<T: Real>(nodes: &mut [Node<T>], v: Var, delta: &[T]) {
    let len = nodes[v.0].value.data.len();
    if len == delta.len() {
        accumulate(nodes, v, delta);
        return;
    }
    let mut folded = vec![T::zero(); len];
    for (i, &d) in delta.iter().enumerate() {
        folded[i % len] = folded[i % len] + d;
    }
    accumulate(nodes, v, &folded);
}

fn tracks<T: Real>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].value.requires_grad
}

fn backprop<T: Real>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, grad: &[T]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let n = nodes[b.0].value.shape[1];
            if tracks(nodes, *a) {
                let mut da = vec![T::zero(); m * k];
                ops::matmul_nt_acc(grad, &nodes[b.0].value.data, m, n, k, &mut da);
                accumulate(nodes, *a, &da);
            }
            if tracks(nodes, *b) {
                let mut db = vec![T::zero(); k * n];
                ops::matmul_tn_acc(&nodes[a.0].value.data, grad, m, k, n, &mut db);
                accumulate(nodes, *b, &db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape[0], out.shape[1]);
            let mut da = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    da[j * r + i] = grad[i * c + j];
                }
            }
            accumulate(nodes, *a, &da);
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, grad);
            if tracks(nodes, *b) {
                accumulate_broadcast(nodes, *b, grad);
            }
        }
        Op::Mul(a, b) => {
            if tracks(nodes, *a) {
                let bd = &nodes[b.0].value.data;
                let da: Vec<T> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * bd[i % bd.len()])
                    .collect();
                accumulate(nodes, *a, &da);
            }
            if tracks(nodes, *b) {
                let ad = &nodes[a.0].value.data;
                let db: Vec<T> = grad.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                accumulate_broadcast(nodes, *b, &db);
            }
        }
        Op::Scale(a, s) => {
            let da: Vec<T> = grad.iter().map(|&g| g * *s).collect();
            accumulate(nodes, *a, &da);
        }
        Op::Gelu(a) => {
            let xd = &nodes[a.0].value.data;
            let da: Vec<T> = grad
                .iter()
                .zip(xd)
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect();
            accumulate(nodes, *a, &da);
        }
        Op::Tanh(a) => {
            let da: Vec<T> = grad
                .iter()
                .zip(&out.data)
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect();
            accumulate(nodes, *a, &da);
        }
        Op::Relu(a) => {
            let xd = &nodes[a.0].value.data;
            let da: Vec<T> = grad
                .iter()
                .zip(xd)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, *a, &da);
        }
        Op::Softmax(a) => {
            let c = out.shape[1];
            let mut da = vec![T::zero(); out.data.len()];
            for ((y, g), d) in out
                .data
                .chunks(c)
                .zip(grad.chunks(c))
                .zip(da.chunks_mut(c))
            {
                let dot: T = y.iter().zip(g).map(|(&yi, &gi)| yi * gi).sum();
                for j in 0..c {
                    d[j] = y[j] * (g[j] - dot);
                }
            }
            accumulate(nodes, *a, &da);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = out.shape[1];
            let gd = nodes[gain.0].value.data.clone();
            if tracks(nodes, *gain) {
                let mut dg = vec![T::zero(); c];
                for (i, &g) in grad.iter().enumerate() {
                    dg[i % c] = dg[i % c] + g * xhat[i];
                }
                accumulate(nodes, *gain, &dg);
            }
            if tracks(nodes, *bias) {
                let mut db = vec![T::zero(); c];
                for (i, &g) in grad.iter().enumerate() {
                    db[i % c] = db[i % c] + g;
                }
                accumulate(nodes, *bias, &db);
            }
            if tracks(nodes, *x) {
                let n = T::of_f64(c as f64);
                let mut dx = vec![T::zero(); grad.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let rows = r * c..(r + 1) * c;
                    let dxhat: Vec<T> = grad[rows.clone()]
                        .iter()
                        .zip(&gd)
                        .map(|(&g, &w)| g * w)
                        .collect();
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dx: T = dxhat
                        .iter()
                        .zip(&xhat[rows.clone()])
                        .map(|(&d, &h)| d * h)
                        .sum();
                    for j in 0..c {
                        dx[r * c + j] =
                            *is / n * (n * dxhat[j] - sum_d - xhat[r * c + j] * sum_dx);
                    }
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::Embedding { table, ids } => {
            let t = &nodes[table.0].value;
            let d = t.shape[1];
            let mut dt = vec![T::zero(); t.data.len()];
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] = dt[id * d + j] + grad[row * d + j];
                }
            }
            accumulate(nodes, *table, &dt);
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[a.0].value.data.len();
            accumulate(nodes, *a, &grad[..split]);
            accumulate(nodes, *b, &grad[split..]);
        }
        Op::SliceCols { x, start } => {
            let c = nodes[x.0].value.shape[1];
            let (r, len) = (out.shape[0], out.shape[1]);
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                dx[i * c + start..i * c + start + len]
                    .copy_from_slice(&grad[i * len..(i + 1) * len]);
            }
            accumulate(nodes, *x, &dx);
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (out.shape[0], out.shape[1]);
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.shape[1];
                if tracks(nodes, p) {
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&grad[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(nodes, p, &dp);
                }
                offset += w;
            }
        }
        Op::Select { x, index } => {
            let len = nodes[x.0].value.data.len();
            let inner = grad.len();
            let mut dx = vec![T::zero(); len];
            dx[index * inner..(index + 1) * inner].copy_from_slice(grad);
            accumulate(nodes, *x, &dx);
        }
        Op::Reshape(x) => accumulate(nodes, *x, grad),
        Op::Kron(a, b) => {
            let (p, q) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let (r, s) = (nodes[b.0].value.shape[0], nodes[b.0].value.shape[1]);
            let cols = q * s;
            let ad = nodes[a.0].value.data.clone();
            let bd = nodes[b.0].value.data.clone();
            let mut da = vec![T::zero(); p * q];
            let mut db = vec![T::zero(); r * s];
            for i in 0..p {
                for j in 0..q {
                    for k in 0..r {
                        for l in 0..s {
                            let g = grad[(i * r + k) * cols + j * s + l];
                            da[i * q + j] = da[i * q + j] + g * bd[k * s + l];
                            db[k * s + l] = db[k * s + l] + g * ad[i * q + j];
                        }
                    }
                }
            }
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::Sum(a) => {
            let len = nodes[a.0].value.data.len();
            accumulate(nodes, *a, &vec![grad[0]; len]);
        }
        Op::SoftmaxCe {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[logits.0].value.shape[1];
            let scale = grad[0] / T::of_f64(targets.len() as f64);
            let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (row, &t) in targets.iter().enumerate() {
                dl[row * v + t] = dl[row * v + t] - scale;
            }
            accumulate(nodes, *logits, &dl);
        }
    }
}
