use rand::Rng;

use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    GatherRows { src: Var, index: Vec<usize> },
    SoftmaxRows { x: Var },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        norm: T,
    },
    LstmCell { gates: Var, c_prev: Var, acts: Vec<T> },
    LstmHidden { gates: Var, c: Var, o: Vec<T>, tanh_c: Vec<T> },
    ConvMaxPool {
        input: Var,
        kernel: Var,
        bias: Var,
        width: usize,
        segments: Vec<(usize, usize)>,
        argmax: Vec<usize>,
    },
    Dropout { x: Var, mask: Vec<T> },
    StackSteps { parts: Vec<Var> },
    AttnScores { q: Var, keys: Var },
    AttnContext { weights: Var, values: Var },
    SumAll { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Summary of one backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    pub ops_visited: usize,
}

/// Ordered record of executed operations. Values are computed eagerly; the
/// tape keeps whatever each operation needs for its vector-Jacobian product.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Accumulate into the gradient of `v`, reading other nodes through `nodes`.
fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let mut g = nodes[v.0].grad.take().unwrap_or_else(|| vec![T::zero(); len]);
    f(&mut g, nodes);
    nodes[v.0].grad = Some(g);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &av.data, false, &bv.data, false, &mut out, T::zero());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::MatMul { a, b }))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(name, av, bv));
        }
        Ok(av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Sub { a, b }))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul { a, b }))
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(cols) {
            for (d, &b) in row.iter_mut().zip(&bv.data) {
                *d += b;
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor { shape, data }, rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v * factor).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale { x, factor })
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.shape.len() != 2 || pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), pv));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, total], data },
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if xv.shape.len() != 2 || start + len > cols || len == 0 {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![rows, len], data }, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), pv));
            }
            rows += pv.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, cols], data },
            rg,
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() || len == 0 {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                bound: xv.rows(),
            });
        }
        let cols = xv.cols();
        let data = xv.data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![len, cols], data }, rg, Op::SliceRows { x, start }))
    }

    /// Row lookup; used for embeddings.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = (sv.rows(), sv.cols());
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(sv.row(i));
        }
        if index.is_empty() {
            return Err(TensorError::Precondition {
                op: "gather_rows",
                msg: "empty index".into(),
            });
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor { shape: vec![index.len(), cols], data },
            rg,
            Op::GatherRows { src, index: index.to_vec() },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = xv.shape.clone();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, rg, Op::SoftmaxRows { x })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Optional per-row `weights` (e.g. a padding mask) turn the
    /// mean into `sum(w * nll) / sum(w)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                left: lv.shape.clone(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let weights: Vec<T> = weights.map(|w| w.to_vec()).unwrap_or_else(|| vec![T::one(); rows]);
        let norm: T = weights.iter().copied().sum();
        let mut probs = lv.data.clone();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let log_z = z.ln() + max;
            if weights[r] != T::zero() {
                total += weights[r] * (log_z - lv.data[r * classes + targets[r]]);
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let loss = if norm > T::zero() { total / norm } else { T::zero() };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
                weights,
                norm,
            },
        ))
    }

    /// Memory update of an LSTM cell. `gates` holds pre-activations laid out
    /// as `[input | forget | candidate | output]`, each `hidden` wide.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (gv, cv) = (self.value(gates), self.value(c_prev));
        let h = cv.cols();
        if gv.cols() != 4 * h || gv.rows() != cv.rows() {
            return Err(shape_err("lstm_cell", gv, cv));
        }
        let rows = cv.rows();
        let mut acts = vec![T::zero(); rows * 3 * h];
        let mut c = vec![T::zero(); rows * h];
        for r in 0..rows {
            let g = gv.row(r);
            let cp = cv.row(r);
            let a = &mut acts[r * 3 * h..(r + 1) * 3 * h];
            for j in 0..h {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[h + j]);
                let cand = g[2 * h + j].tanh();
                a[j] = i_g;
                a[h + j] = f_g;
                a[2 * h + j] = cand;
                c[r * h + j] = f_g * cp[j] + i_g * cand;
            }
        }
        let rg = self.rg(&[gates, c_prev]);
        Ok(self.push(
            Tensor { shape: vec![rows, h], data: c },
            rg,
            Op::LstmCell { gates, c_prev, acts },
        ))
    }

    /// Hidden output of an LSTM cell: `sigmoid(output gate) * tanh(c)`.
    pub fn lstm_hidden(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (gv, cv) = (self.value(gates), self.value(c));
        let h = cv.cols();
        if gv.cols() != 4 * h || gv.rows() != cv.rows() {
            return Err(shape_err("lstm_hidden", gv, cv));
        }
        let rows = cv.rows();
        let mut o = vec![T::zero(); rows * h];
        let mut tanh_c = vec![T::zero(); rows * h];
        let mut out = vec![T::zero(); rows * h];
        for r in 0..rows {
            let g = gv.row(r);
            for j in 0..h {
                let k = r * h + j;
                o[k] = sigmoid(g[3 * h + j]);
                tanh_c[k] = cv.data[k].tanh();
                out[k] = o[k] * tanh_c[k];
            }
        }
        let rg = self.rg(&[gates, c]);
        Ok(self.push(
            Tensor { shape: vec![rows, h], data: out },
            rg,
            Op::LstmHidden { gates, c, o, tanh_c },
        ))
    }

    /// 1-D convolution over the rows of `input` followed by max-over-time
    /// pooling, independently for each `(start, len)` segment. `kernel` is
    /// `(width * d) x features`; the result is `segments x features`.
    pub fn conv_maxpool(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        width: usize,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let (iv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        let d = iv.cols();
        if kv.shape.len() != 2 || kv.rows() != width * d {
            return Err(shape_err("conv_maxpool", iv, kv));
        }
        let f = kv.cols();
        if bv.len() != f {
            return Err(shape_err("conv_maxpool", kv, bv));
        }
        let wd = width * d;
        let mut out = vec![T::zero(); segments.len() * f];
        let mut argmax = vec![0usize; segments.len() * f];
        let mut conv = Vec::new();
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len < width {
                return Err(TensorError::Precondition {
                    op: "conv_maxpool",
                    msg: format!("segment {s} has length {len} < kernel width {width}"),
                });
            }
            if start + len > iv.rows() {
                return Err(TensorError::Index {
                    op: "conv_maxpool",
                    index: start + len,
                    bound: iv.rows(),
                });
            }
            let npos = len - width + 1;
            // windows of consecutive rows are contiguous in row-major storage
            let mut cols = Vec::with_capacity(npos * wd);
            for p in 0..npos {
                let off = (start + p) * d;
                cols.extend_from_slice(&iv.data[off..off + wd]);
            }
            conv.clear();
            conv.resize(npos * f, T::zero());
            T::gemm(npos, wd, f, &cols, false, &kv.data, false, &mut conv, T::zero());
            for j in 0..f {
                let mut best = 0;
                for p in 1..npos {
                    if conv[p * f + j] > conv[best * f + j] {
                        best = p;
                    }
                }
                out[s * f + j] = conv[best * f + j] + bv.data[j];
                argmax[s * f + j] = best;
            }
        }
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![segments.len(), f],
                data: out,
            },
            rg,
            Op::ConvMaxPool {
                input,
                kernel,
                bias,
                width,
                segments: segments.to_vec(),
                argmax,
            },
        ))
    }

    /// Inverted dropout: zeroes each unit with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, rg, Op::Dropout { x, mask })
    }

    /// Stacks `N` step matrices of shape `B x d` into a `B x N x d` tensor.
    pub fn stack_steps(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (b, d) = (first.rows(), first.cols());
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != b || pv.cols() != d {
                return Err(shape_err("stack_steps", self.value(parts[0]), pv));
            }
        }
        let n = parts.len();
        let mut data = vec![T::zero(); b * n * d];
        for (i, &p) in parts.iter().enumerate() {
            let pv = &self.nodes[p.0].value;
            for r in 0..b {
                data[(r * n + i) * d..(r * n + i + 1) * d].copy_from_slice(pv.row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape: vec![b, n, d], data },
            rg,
            Op::StackSteps { parts: parts.to_vec() },
        ))
    }

    /// `scores[r, i] = q[r] . keys[r % B, i]` for `keys` of shape `B x N x d`.
    pub fn attn_scores(&mut self, q: Var, keys: Var) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(keys));
        if kv.shape.len() != 3 || qv.cols() != kv.shape[2] || qv.rows() % kv.shape[0] != 0 {
            return Err(shape_err("attn_scores", qv, kv));
        }
        let (b, n, d) = (kv.shape[0], kv.shape[1], kv.shape[2]);
        let rows = qv.rows();
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let qr = qv.row(r);
            let base = (r % b) * n * d;
            for i in 0..n {
                let k = &kv.data[base + i * d..base + (i + 1) * d];
                out[r * n + i] = qr.iter().zip(k).map(|(&x, &y)| x * y).sum();
            }
        }
        let rg = self.rg(&[q, keys]);
        Ok(self.push(Tensor { shape: vec![rows, n], data: out }, rg, Op::AttnScores { q, keys }))
    }

    /// `ctx[r] = sum_i weights[r, i] * values[r % B, i]`.
    pub fn attn_context(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if vv.shape.len() != 3 || wv.cols() != vv.shape[1] || wv.rows() % vv.shape[0] != 0 {
            return Err(shape_err("attn_context", wv, vv));
        }
        let (b, n, d) = (vv.shape[0], vv.shape[1], vv.shape[2]);
        let rows = wv.rows();
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let base = (r % b) * n * d;
            let o = &mut out[r * d..(r + 1) * d];
            for i in 0..n {
                let w = wv.data[r * n + i];
                let v = &vv.data[base + i * d..base + (i + 1) * d];
                for (acc, &x) in o.iter_mut().zip(v) {
                    *acc += w * x;
                }
            }
        }
        let rg = self.rg(&[weights, values]);
        Ok(self.push(
            Tensor { shape: vec![rows, d], data: out },
            rg,
            Op::AttnContext { weights, values },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll { x })
    }

    /// Reverse sweep from a scalar `loss`. Each recorded operation reachable
    /// from `loss` is visited exactly once, latest first.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Precondition {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape),
            });
        }
        let mut stats = BackwardStats { ops_visited: 0 };
        if !self.nodes[loss.0].requires_grad {
            return Ok(stats);
        }
        match &mut self.nodes[loss.0].grad {
            Some(g) => g[0] += T::one(),
            slot => *slot = Some(vec![T::one()]),
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else { continue };
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            stats.ops_visited += 1;
            backprop(before, node, g);
        }
        Ok(stats)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn backprop<T: Real>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let y = &node.value.data;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, n) = (node.value.shape[0], node.value.shape[1]);
            let k = nodes[a.0].value.shape[1];
            accumulate(nodes, *a, |ga, ns| T::gemm(m, n, k, g, false, &ns[b.0].value.data, true, ga, T::one()));
            accumulate(nodes, *b, |gb, ns| T::gemm(k, m, n, &ns[a.0].value.data, true, g, false, gb, T::one()));
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                accumulate(nodes, v, |gv, _| gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            }
        }
        Op::Sub { a, b } => {
            accumulate(nodes, *a, |ga, _| ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            accumulate(nodes, *b, |gb, _| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
        }
        Op::Mul { a, b } => {
            accumulate(nodes, *a, |ga, ns| {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(&ns[b.0].value.data) {
                    *d += s * o;
                }
            });
            accumulate(nodes, *b, |gb, ns| {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(&ns[a.0].value.data) {
                    *d += s * o;
                }
            });
        }
        Op::AddBias { x, bias } => {
            accumulate(nodes, *x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            accumulate(nodes, *bias, |gb, _| {
                let cols = gb.len();
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, *x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *factor));
        }
        Op::Sigmoid { x } => accumulate(nodes, *x, |gx, _| {
            for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                *d += s * o * (T::one() - o);
            }
        }),
        Op::Tanh { x } => accumulate(nodes, *x, |gx, _| {
            for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                *d += s * (T::one() - o * o);
            }
        }),
        Op::Relu { x } => accumulate(nodes, *x, |gx, _| {
            for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                if o > T::zero() {
                    *d += s;
                }
            }
        }),
        Op::ConcatCols { parts } => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.cols();
                accumulate(nodes, p, |gp, _| {
                    for (r, row) in gp.chunks_mut(w).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        row.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let w = node.value.cols();
            let cols = nodes[x.0].value.cols();
            accumulate(nodes, *x, |gx, _| {
                for (r, row) in g.chunks(w).enumerate() {
                    let dst = &mut gx[r * cols + start..r * cols + start + w];
                    dst.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                accumulate(nodes, p, |gp, _| {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &s)| *d += s);
                });
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = node.value.cols();
            accumulate(nodes, *x, |gx, _| {
                let dst = &mut gx[start * cols..start * cols + g.len()];
                dst.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            });
        }
        Op::GatherRows { src, index } => {
            let cols = node.value.cols();
            accumulate(nodes, *src, |gs, _| {
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut gs[i * cols..(i + 1) * cols];
                    dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, &s)| *d += s);
                }
            });
        }
        Op::SoftmaxRows { x } => {
            let cols = node.value.cols();
            accumulate(nodes, *x, |gx, _| {
                for ((dx, dy), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: T = dy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &s), &o) in dx.iter_mut().zip(dy).zip(yr) {
                        *d += o * (s - dot);
                    }
                }
            });
        }
        Op::SoftmaxXent {
            logits,
            probs,
            targets,
            weights,
            norm,
        } => {
            if *norm <= T::zero() {
                return;
            }
            let classes = nodes[logits.0].value.cols();
            let upstream = g[0];
            accumulate(nodes, *logits, |gl, _| {
                for (r, (row, p)) in gl.chunks_mut(classes).zip(probs.chunks(classes)).enumerate() {
                    let w = upstream * weights[r] / *norm;
                    if w == T::zero() {
                        continue;
                    }
                    for (d, &pv) in row.iter_mut().zip(p) {
                        *d += w * pv;
                    }
                    row[targets[r]] -= w;
                }
            });
        }
        Op::LstmCell { gates, c_prev, acts } => {
            let h = node.value.cols();
            accumulate(nodes, *c_prev, |gc, _| {
                for (r, (dc, dy)) in gc.chunks_mut(h).zip(g.chunks(h)).enumerate() {
                    let f_g = &acts[r * 3 * h + h..r * 3 * h + 2 * h];
                    for j in 0..h {
                        dc[j] += dy[j] * f_g[j];
                    }
                }
            });
            accumulate(nodes, *gates, |gg, ns| {
                let cp = &ns[c_prev.0].value.data;
                for r in 0..node.value.rows() {
                    let a = &acts[r * 3 * h..(r + 1) * 3 * h];
                    let dg = &mut gg[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let dy = g[r * h + j];
                        let (i_g, f_g, cand) = (a[j], a[h + j], a[2 * h + j]);
                        dg[j] += dy * cand * i_g * (T::one() - i_g);
                        dg[h + j] += dy * cp[r * h + j] * f_g * (T::one() - f_g);
                        dg[2 * h + j] += dy * i_g * (T::one() - cand * cand);
                    }
                }
            });
        }
        Op::LstmHidden { gates, c, o, tanh_c } => {
            let h = node.value.cols();
            accumulate(nodes, *c, |gc, _| {
                for k in 0..gc.len() {
                    gc[k] += g[k] * o[k] * (T::one() - tanh_c[k] * tanh_c[k]);
                }
            });
            accumulate(nodes, *gates, |gg, _| {
                for r in 0..node.value.rows() {
                    for j in 0..h {
                        let k = r * h + j;
                        gg[r * 4 * h + 3 * h + j] += g[k] * tanh_c[k] * o[k] * (T::one() - o[k]);
                    }
                }
            });
        }
        Op::ConvMaxPool {
            input,
            kernel,
            bias,
            width,
            segments,
            argmax,
        } => {
            let f = node.value.cols();
            let d = nodes[input.0].value.cols();
            let wd = width * d;
            accumulate(nodes, *bias, |gb, _| {
                for row in g.chunks(f) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
            accumulate(nodes, *kernel, |gk, ns| {
                let iv = &ns[input.0].value.data;
                for (s, &(start, _)) in segments.iter().enumerate() {
                    for j in 0..f {
                        let go = g[s * f + j];
                        if go == T::zero() {
                            continue;
                        }
                        let off = (start + argmax[s * f + j]) * d;
                        for (q, &x) in iv[off..off + wd].iter().enumerate() {
                            gk[q * f + j] += go * x;
                        }
                    }
                }
            });
            accumulate(nodes, *input, |gi, ns| {
                let kv = &ns[kernel.0].value.data;
                for (s, &(start, _)) in segments.iter().enumerate() {
                    for j in 0..f {
                        let go = g[s * f + j];
                        if go == T::zero() {
                            continue;
                        }
                        let off = (start + argmax[s * f + j]) * d;
                        for (q, dst) in gi[off..off + wd].iter_mut().enumerate() {
                            *dst += go * kv[q * f + j];
                        }
                    }
                }
            });
        }
        Op::Dropout { x, mask } => accumulate(nodes, *x, |gx, _| {
            for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                *d += s * m;
            }
        }),
        Op::StackSteps { parts } => {
            let (b, n, d) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
            for (i, &p) in parts.iter().enumerate() {
                accumulate(nodes, p, |gp, _| {
                    for r in 0..b {
                        let src = &g[(r * n + i) * d..(r * n + i + 1) * d];
                        gp[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(x, &s)| *x += s);
                    }
                });
            }
        }
        Op::AttnScores { q, keys } => {
            let shape = nodes[keys.0].value.shape.clone();
            let (b, n, d) = (shape[0], shape[1], shape[2]);
            let rows = node.value.rows();
            accumulate(nodes, *q, |gq, ns| {
                let kv = &ns[keys.0].value.data;
                for r in 0..rows {
                    let base = (r % b) * n * d;
                    for i in 0..n {
                        let s = g[r * n + i];
                        let k = &kv[base + i * d..base + (i + 1) * d];
                        gq[r * d..(r + 1) * d].iter_mut().zip(k).for_each(|(x, &kk)| *x += s * kk);
                    }
                }
            });
            accumulate(nodes, *keys, |gk, ns| {
                let qv = &ns[q.0].value.data;
                for r in 0..rows {
                    let base = (r % b) * n * d;
                    for i in 0..n {
                        let s = g[r * n + i];
                        let qr = &qv[r * d..(r + 1) * d];
                        gk[base + i * d..base + (i + 1) * d]
                            .iter_mut()
                            .zip(qr)
                            .for_each(|(x, &qq)| *x += s * qq);
                    }
                }
            });
        }
        Op::AttnContext { weights, values } => {
            let shape = nodes[values.0].value.shape.clone();
            let (b, n, d) = (shape[0], shape[1], shape[2]);
            let rows = node.value.rows();
            accumulate(nodes, *weights, |gw, ns| {
                let vv = &ns[values.0].value.data;
                for r in 0..rows {
                    let base = (r % b) * n * d;
                    let gr = &g[r * d..(r + 1) * d];
                    for i in 0..n {
                        let v = &vv[base + i * d..base + (i + 1) * d];
                        gw[r * n + i] += gr.iter().zip(v).map(|(&x, &y)| x * y).sum();
                    }
                }
            });
            accumulate(nodes, *values, |gv, ns| {
                let wv = &ns[weights.0].value.data;
                for r in 0..rows {
                    let base = (r % b) * n * d;
                    let gr = &g[r * d..(r + 1) * d];
                    for i in 0..n {
                        let w = wv[r * n + i];
                        gv[base + i * d..base + (i + 1) * d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(x, &s)| *x += w * s);
                    }
                }
            });
        }
        Op::SumAll { x } => accumulate(nodes, *x, |gx, _| gx.iter_mut().for_each(|d| *d += g[0])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0], None).unwrap();
        assert!((tape.value(loss).data()[0] - 3f64.ln()).abs() < 1e-12);

        let l = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0], None).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-12);

        let mut tape32 = Tape::<f32>::new();
        let l = tape32.constant(Tensor::from_f64(&[1, 2], &[1000.0, 0.0]).unwrap());
        let loss = tape32.softmax_cross_entropy(l, &[0], None).unwrap();
        assert!(tape32.value(loss).data()[0].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[0, 3], None),
            Err(TensorError::Index { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[2, 1], None).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap().to_vec();
        let row0: Vec<f64> = {
            let e: Vec<f64> = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        };
        let expect = [
            row0[0] / 2.0,
            row0[1] / 2.0,
            (row0[2] - 1.0) / 2.0,
            1.0 / 6.0,
            (1.0 / 3.0 - 1.0) / 2.0,
            1.0 / 6.0,
        ];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let y = tape.softmax_rows(x);
        for r in 0..2 {
            let row = tape.value(y).row(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let mut tape = Tape::<f64>::new();
        let gates = tape.constant(Tensor::zeros(&[1, 8]));
        let c0 = tape.constant(Tensor::zeros(&[1, 2]));
        let c = tape.lstm_cell(gates, c0).unwrap();
        let h = tape.lstm_hidden(gates, c).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_retain_memory() {
        let mut tape = Tape::<f64>::new();
        // input gate -50, forget +50, candidate anything, output 0
        let gates = tape.constant(t(&[1, 4], &[-50.0, 50.0, 0.7, 0.0]));
        let c0 = tape.constant(t(&[1, 1], &[0.42]));
        let c = tape.lstm_cell(gates, c0).unwrap();
        assert!((tape.value(c).data()[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn conv_counting_kernel_gives_max_window_sum() {
        // one-hot chars over 3 symbols: 0 1 1 2 1
        let seq = [0usize, 1, 1, 2, 1];
        let mut data = vec![0.0; seq.len() * 3];
        for (p, &c) in seq.iter().enumerate() {
            data[p * 3 + c] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[5, 3], &data));
        // counts occurrences of symbol 1 in a width-2 window
        let kernel = tape.constant(t(&[6, 1], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
        let bias = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv_maxpool(x, kernel, bias, 2, &[(0, 5)]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);

        let short = tape.conv_maxpool(x, kernel, bias, 2, &[(0, 1)]);
        assert!(matches!(short, Err(TensorError::Precondition { .. })));
    }

    #[test]
    fn backward_visits_each_op_once_and_keeps_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2, 2], &[0.5, -1.0, 0.25, 2.0]));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.tanh(c);
        let e = tape.mul(d, a).unwrap();
        let _unused = tape.sigmoid(b);
        let s = tape.sum_all(e);
        let before: Vec<Tensor<f64>> = (0..tape.len()).map(|i| tape.nodes[i].value.clone()).collect();
        let stats = tape.backward(s).unwrap();
        assert_eq!(stats.ops_visited, 4);
        for (i, v) in before.iter().enumerate() {
            assert_eq!(&tape.nodes[i].value, v);
        }
        assert!(tape.grad(a).is_some() && tape.grad(b).is_some());
    }

    #[test]
    fn dropout_is_identity_at_zero_rate() {
        let mut rng = rand::thread_rng();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
    }

    #[test]
    fn conv_matches_naive_sliding_window() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (d, f, w) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
            let segs = [(0usize, w + 2), (w + 2, w)];
            let rows = 2 * w + 2;
            let x: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..w * d * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(t(&[rows, d], &x));
            let kv = tape.constant(t(&[w * d, f], &k));
            let bv = tape.constant(t(&[f], &b));
            let y = tape.conv_maxpool(xv, kv, bv, w, &segs).unwrap();
            for (s, &(start, len)) in segs.iter().enumerate() {
                for j in 0..f {
                    let mut best = f64::NEG_INFINITY;
                    for p in 0..=len - w {
                        let mut acc = b[j];
                        for r in 0..w {
                            for c in 0..d {
                                acc += x[(start + p + r) * d + c] * k[(r * d + c) * f + j];
                            }
                        }
                        best = best.max(acc);
                    }
                    assert!((tape.value(y).get(s, j) - best).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dropout_rate_and_scaling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let rate = 0.3;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[n], 1.0));
        let y = tape.dropout(x, rate, &mut rng);
        let vals = tape.value(y).data();
        let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((zeros - n as f64 * rate).abs() < 3.0 * sigma);
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::<f32>::new();
            let a = tape.param(Tensor::from_f64(&[3, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, -0.8, 0.9]).unwrap());
            let b = tape.matmul(a, a).unwrap();
            let c = tape.dropout(b, 0.5, &mut rng);
            let d = tape.softmax_rows(c);
            tape.value(d).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..8) {
            let rows = v.len() / cols;
            proptest::prop_assume!(rows > 0);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_f64(&[rows, cols], &v[..rows * cols]).unwrap());
            let y = tape.softmax_rows(x);
            for r in 0..rows {
                let row = tape.value(y).row(r);
                proptest::prop_assert!(row.iter().all(|&p| p >= 0.0));
                proptest::prop_assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
