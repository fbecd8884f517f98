//! Record-and-replay reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass as an
//! append-only sequence of nodes. Inputs always precede their consumers, so
//! a single reverse sweep over the node list accumulates vector-Jacobian
//! products for every recorded value. `backward` borrows the tape immutably
//! and returns a fresh [`Gradients`] map, so several backward passes (one per
//! caption loss, one for the answer logit) can run over one record.

use super::tensor::Tensor;

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on an empty record")]
    EmptyRecord,
    #[error("embedding index {index} out of range for vocabulary of {vocab}")]
    EmbedIndex { index: usize, vocab: usize },
}

pub type Result<T> = std::result::Result<T, TapeError>;

#[derive(Clone, Debug)]
enum Op {
    Input,
    StopGrad { x: Var },
    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Matrix plus a vector added to every row.
    AddRowBroadcast { m: Var, v: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    /// Every entry of `x` scaled by the single value held in `s`.
    MulScalar { x: Var, s: Var },
    /// Row `i` of the matrix scaled by `w[i]`.
    ScaleRows { m: Var, w: Var },
    /// Flat concatenation into a vector; `lens` saved for the backward split.
    Concat { parts: Vec<Var>, lens: Vec<usize> },
    /// Contiguous range of the flat data, viewed as a vector.
    Slice { x: Var, start: usize, len: usize },
    /// 2-D: axis 0 sums columns down to `[cols]`, axis 1 rows to `[rows]`.
    /// 1-D: axis 0 sums to a scalar.
    SumAxis { x: Var, axis: usize },
    /// Elementwise max across same-shaped tensors; ties feed the first.
    MaxSet { parts: Vec<Var> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Ln { x: Var },
    Exp { x: Var },
    Softplus { x: Var },
    LogSigmoid { x: Var },
    LRelu { x: Var, slope: f64 },
    /// Softmax over the last axis (per row for matrices).
    Softmax { x: Var },
    LogSoftmax { x: Var },
    /// Vector softmax restricted to `mask`-true entries; others get weight 0.
    SoftmaxMasked { x: Var, mask: Vec<bool> },
    /// Row gather from a `[vocab, dim]` table.
    Embed { table: Var, indices: Vec<usize> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::StopGrad { .. } => "stop_grad",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulScalar { .. } => "mul_scalar",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxSet { .. } => "max_set",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Ln { .. } => "ln",
            Op::Exp { .. } => "exp",
            Op::Softplus { .. } => "softplus",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::LRelu { .. } => "lrelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SoftmaxMasked { .. } => "softmax_masked",
            Op::Embed { .. } => "embed",
        }
    }
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of one scalar loss with respect to every recorded node.
///
/// Nodes off every path to the loss have no entry; their gradient is zero.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Dense gradient, zero-filled when no gradient flowed to the node.
    pub fn dense(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].out
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].out.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].out.values()
    }

    fn push(&mut self, op: Op, out: Tensor) -> Var {
        debug_assert!(
            out.values().iter().all(|v| v.is_finite()),
            "{} produced a non-finite value",
            op.tag()
        );
        self.nodes.push(Node { op, out });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Constants and parameters both enter this way; the
    /// caller keeps the returned handle to read gradients later.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    /// Identity on values; the backward sweep does not cross it.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].out.clone();
        self.push(Op::StopGrad { x }, out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TapeError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let out = match sb.as_slice() {
            [kb] if *kb == k => {
                let vals = matmul_vals(self.vals(a), m, k, self.vals(b), 1);
                Tensor::vector(vals)
            }
            [kb, n] if *kb == k => {
                let n = *n;
                let vals = matmul_vals(self.vals(a), m, k, self.vals(b), n);
                Tensor::matrix(m, n, vals)
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_same_shape(
        &mut self,
        tag: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::ShapeMismatch {
                op: tag,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let vals: Vec<f64> = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), vals);
        Ok(self.push(op(a, b), out))
    }

    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let sv = self.shape(v).to_vec();
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(TapeError::ShapeMismatch { op: "add_row_broadcast", lhs: sm, rhs: sv });
        }
        let cols = sm[1];
        let vv = self.vals(v).to_vec();
        let vals: Vec<f64> = self
            .vals(m)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(&vv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let out = Tensor::matrix(sm[0], cols, vals);
        Ok(self.push(Op::AddRowBroadcast { m, v }, out))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vals: Vec<f64> = self.vals(x).iter().map(|v| c * v).collect();
        let out = Tensor::new(self.shape(x).to_vec(), vals);
        self.push(Op::Scale { x, c }, out)
    }

    /// Multiply every entry of `x` by the single value in `s` (any shape of length 1).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.vals(s).len() != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.vals(s)[0];
        let vals: Vec<f64> = self.vals(x).iter().map(|v| c * v).collect();
        let out = Tensor::new(self.shape(x).to_vec(), vals);
        Ok(self.push(Op::MulScalar { x, s }, out))
    }

    pub fn scale_rows(&mut self, m: Var, w: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let sw = self.shape(w).to_vec();
        if sm.len() != 2 || sw.len() != 1 || sm[0] != sw[0] {
            return Err(TapeError::ShapeMismatch { op: "scale_rows", lhs: sm, rhs: sw });
        }
        let cols = sm[1];
        let wv = self.vals(w).to_vec();
        let vals: Vec<f64> = self
            .vals(m)
            .chunks_exact(cols)
            .zip(&wv)
            .flat_map(|(row, wi)| row.iter().map(|x| x * wi).collect::<Vec<_>>())
            .collect();
        let out = Tensor::matrix(sm[0], cols, vals);
        Ok(self.push(Op::ScaleRows { m, w }, out))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "concat", msg: "empty part list".into() });
        }
        let lens: Vec<usize> = parts.iter().map(|p| self.vals(*p).len()).collect();
        let mut vals = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            vals.extend_from_slice(self.vals(*p));
        }
        let out = Tensor::vector(vals);
        Ok(self.push(Op::Concat { parts: parts.to_vec(), lens }, out))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.vals(x).len();
        if start + len > total || len == 0 {
            return Err(TapeError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} out of bounds for {total} values", start + len),
            });
        }
        let vals = self.vals(x)[start..start + len].to_vec();
        let out = Tensor::vector(vals);
        Ok(self.push(Op::Slice { x, start, len }, out))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let out = match (s.len(), axis) {
            (1, 0) => Tensor::scalar(self.vals(x).iter().sum()),
            (2, 0) => {
                let c = s[1];
                let mut acc = vec![0.0; c];
                for row in self.vals(x).chunks_exact(c) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::vector(acc)
            }
            (2, 1) => {
                let c = s[1];
                let acc: Vec<f64> = self.vals(x).chunks_exact(c).map(|row| row.iter().sum()).collect();
                Tensor::vector(acc)
            }
            _ => {
                return Err(TapeError::Invalid {
                    op: "sum_axis",
                    msg: format!("axis {axis} invalid for shape {s:?}"),
                })
            }
        };
        Ok(self.push(Op::SumAxis { x, axis }, out))
    }

    pub fn max_set(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "max_set", msg: "empty part list".into() });
        }
        let shape = self.shape(parts[0]).to_vec();
        for p in &parts[1..] {
            if self.shape(*p) != shape.as_slice() {
                return Err(TapeError::ShapeMismatch {
                    op: "max_set",
                    lhs: shape,
                    rhs: self.shape(*p).to_vec(),
                });
            }
        }
        let mut vals = self.vals(parts[0]).to_vec();
        for p in &parts[1..] {
            for (o, v) in vals.iter_mut().zip(self.vals(*p)) {
                if *v > *o {
                    *o = *v;
                }
            }
        }
        let out = Tensor::new(shape, vals);
        Ok(self.push(Op::MaxSet { parts: parts.to_vec() }, out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x| Op::Ln { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, stable_softplus, |x| Op::Softplus { x })
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| -stable_softplus(-v), |x| Op::LogSigmoid { x })
    }

    pub fn lrelu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, |x| Op::LRelu { x, slope })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl Fn(Var) -> Op) -> Var {
        let vals: Vec<f64> = self.vals(x).iter().map(|v| f(*v)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), vals);
        self.push(op(x), out)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let vals = softmax_rows(self.vals(x), cols);
        let out = Tensor::new(self.shape(x).to_vec(), vals);
        self.push(Op::Softmax { x }, out)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let vals = log_softmax_rows(self.vals(x), cols);
        let out = Tensor::new(self.shape(x).to_vec(), vals);
        self.push(Op::LogSoftmax { x }, out)
    }

    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || s[0] != mask.len() {
            return Err(TapeError::Invalid {
                op: "softmax_masked",
                msg: format!("mask of {} entries against shape {s:?}", mask.len()),
            });
        }
        if !mask.iter().any(|m| *m) {
            return Err(TapeError::Invalid { op: "softmax_masked", msg: "all entries masked".into() });
        }
        let xs = self.vals(x);
        let max = xs
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut vals = vec![0.0; xs.len()];
        let mut denom = 0.0;
        for (i, v) in xs.iter().enumerate() {
            if mask[i] {
                let e = (v - max).exp();
                vals[i] = e;
                denom += e;
            }
        }
        for v in vals.iter_mut() {
            *v /= denom;
        }
        let out = Tensor::vector(vals);
        Ok(self.push(Op::SoftmaxMasked { x, mask: mask.to_vec() }, out))
    }

    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TapeError::Invalid {
                op: "embed",
                msg: format!("table must be 2-D, got {s:?}"),
            });
        }
        let (vocab, dim) = (s[0], s[1]);
        let mut vals = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return Err(TapeError::EmbedIndex { index: i, vocab });
            }
            vals.extend_from_slice(&self.vals(table)[i * dim..(i + 1) * dim]);
        }
        let out = Tensor::matrix(indices.len(), dim, vals);
        Ok(self.push(Op::Embed { table, indices: indices.to_vec() }, out))
    }

    /// Single-row lookup, shaped as a vector.
    pub fn embed_one(&mut self, table: Var, index: usize) -> Result<Var> {
        let v = self.embed(table, &[index])?;
        let dim = self.shape(v)[1];
        self.slice(v, 0, dim)
    }

    /// Gradient of a scalar loss with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_until(loss, &[])
    }

    /// Like [`Tape::backward`], but nodes in `stops` are treated as leaves:
    /// their accumulated gradient is kept, nothing propagates to their inputs.
    pub fn backward_until(&self, loss: Var, stops: &[Var]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TapeError::EmptyRecord);
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TapeError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut stop_flags = vec![false; self.nodes.len()];
        for s in stops {
            stop_flags[s.0] = true;
        }
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || stop_flags[id] {
                continue;
            }
            let d_out = grads[id].take().unwrap();
            self.propagate(id, &d_out, &mut grads);
            grads[id] = Some(d_out);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, id: usize, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input => {}
            Op::StopGrad { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = if self.shape(*b).len() == 1 { 1 } else { self.shape(*b)[1] };
                let av = self.vals(*a);
                let bv = self.vals(*b);
                Self::accumulate(grads, *a, m * k, |da| {
                    // dA = dOut · Bᵀ
                    for i in 0..m {
                        let drow = &d_out[i * n..(i + 1) * n];
                        let arow = &mut da[i * k..(i + 1) * k];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            arow[kk] += drow.iter().zip(brow).map(|(d, b)| d * b).sum::<f64>();
                        }
                    }
                });
                Self::accumulate(grads, *b, k * n, |db| {
                    // dB = Aᵀ · dOut
                    for i in 0..m {
                        let drow = &d_out[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for kk in 0..k {
                            let brow = &mut db[kk * n..(kk + 1) * n];
                            for (bg, d) in brow.iter_mut().zip(drow) {
                                *bg += arow[kk] * d;
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                let len = d_out.len();
                Self::accumulate(grads, *a, len, |g| add_into(g, d_out, 1.0));
                Self::accumulate(grads, *b, len, |g| add_into(g, d_out, 1.0));
            }
            Op::Sub { a, b } => {
                let len = d_out.len();
                Self::accumulate(grads, *a, len, |g| add_into(g, d_out, 1.0));
                Self::accumulate(grads, *b, len, |g| add_into(g, d_out, -1.0));
            }
            Op::AddRowBroadcast { m, v } => {
                let cols = self.shape(*v)[0];
                Self::accumulate(grads, *m, d_out.len(), |g| add_into(g, d_out, 1.0));
                Self::accumulate(grads, *v, cols, |g| {
                    for row in d_out.chunks_exact(cols) {
                        for (gi, d) in g.iter_mut().zip(row) {
                            *gi += d;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.vals(*a);
                let bv = self.vals(*b);
                Self::accumulate(grads, *a, av.len(), |g| {
                    for ((gi, d), y) in g.iter_mut().zip(d_out).zip(bv) {
                        *gi += d * y;
                    }
                });
                Self::accumulate(grads, *b, bv.len(), |g| {
                    for ((gi, d), x) in g.iter_mut().zip(d_out).zip(av) {
                        *gi += d * x;
                    }
                });
            }
            Op::Scale { x, c } => {
                Self::accumulate(grads, *x, d_out.len(), |g| add_into(g, d_out, *c));
            }
            Op::MulScalar { x, s } => {
                let c = self.vals(*s)[0];
                let xv = self.vals(*x);
                Self::accumulate(grads, *x, xv.len(), |g| add_into(g, d_out, c));
                Self::accumulate(grads, *s, 1, |g| {
                    g[0] += d_out.iter().zip(xv).map(|(d, x)| d * x).sum::<f64>();
                });
            }
            Op::ScaleRows { m, w } => {
                let cols = self.shape(*m)[1];
                let mv = self.vals(*m);
                let wv = self.vals(*w);
                Self::accumulate(grads, *m, mv.len(), |g| {
                    for ((grow, drow), wi) in
                        g.chunks_exact_mut(cols).zip(d_out.chunks_exact(cols)).zip(wv)
                    {
                        for (gi, d) in grow.iter_mut().zip(drow) {
                            *gi += d * wi;
                        }
                    }
                });
                Self::accumulate(grads, *w, wv.len(), |g| {
                    for ((gi, drow), mrow) in
                        g.iter_mut().zip(d_out.chunks_exact(cols)).zip(mv.chunks_exact(cols))
                    {
                        *gi += drow.iter().zip(mrow).map(|(d, x)| d * x).sum::<f64>();
                    }
                });
            }
            Op::Concat { parts, lens } => {
                let mut offset = 0;
                for (p, len) in parts.iter().zip(lens) {
                    let seg = &d_out[offset..offset + len];
                    Self::accumulate(grads, *p, *len, |g| add_into(g, seg, 1.0));
                    offset += len;
                }
            }
            Op::Slice { x, start, len } => {
                let total = self.vals(*x).len();
                Self::accumulate(grads, *x, total, |g| {
                    add_into(&mut g[*start..*start + *len], d_out, 1.0);
                });
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x);
                let total = self.vals(*x).len();
                match (s.len(), axis) {
                    (1, 0) => Self::accumulate(grads, *x, total, |g| {
                        for gi in g.iter_mut() {
                            *gi += d_out[0];
                        }
                    }),
                    (2, 0) => {
                        let c = s[1];
                        Self::accumulate(grads, *x, total, |g| {
                            for grow in g.chunks_exact_mut(c) {
                                add_into(grow, d_out, 1.0);
                            }
                        });
                    }
                    (2, 1) => {
                        let c = s[1];
                        Self::accumulate(grads, *x, total, |g| {
                            for (grow, d) in g.chunks_exact_mut(c).zip(d_out) {
                                for gi in grow.iter_mut() {
                                    *gi += d;
                                }
                            }
                        });
                    }
                    _ => unreachable!("validated at construction"),
                }
            }
            Op::MaxSet { parts } => {
                let out = node.out.values();
                for p in parts {
                    let pv = self.vals(*p);
                    Self::accumulate(grads, *p, pv.len(), |_| {});
                }
                // Ties feed the first part that attains the max.
                let len = out.len();
                for e in 0..len {
                    for p in parts {
                        if self.vals(*p)[e] == out[e] {
                            if let Some(g) = grads[p.0].as_mut() {
                                g[e] += d_out[e];
                            }
                            break;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let out = node.out.values();
                Self::accumulate(grads, *x, out.len(), |g| {
                    for ((gi, d), o) in g.iter_mut().zip(d_out).zip(out) {
                        *gi += d * o * (1.0 - o);
                    }
                });
            }
            Op::Tanh { x } => {
                let out = node.out.values();
                Self::accumulate(grads, *x, out.len(), |g| {
                    for ((gi, d), o) in g.iter_mut().zip(d_out).zip(out) {
                        *gi += d * (1.0 - o * o);
                    }
                });
            }
            Op::Ln { x } => {
                let xv = self.vals(*x);
                Self::accumulate(grads, *x, xv.len(), |g| {
                    for ((gi, d), v) in g.iter_mut().zip(d_out).zip(xv) {
                        *gi += d / v;
                    }
                });
            }
            Op::Exp { x } => {
                let out = node.out.values();
                Self::accumulate(grads, *x, out.len(), |g| {
                    for ((gi, d), o) in g.iter_mut().zip(d_out).zip(out) {
                        *gi += d * o;
                    }
                });
            }
            Op::Softplus { x } => {
                let xv = self.vals(*x);
                Self::accumulate(grads, *x, xv.len(), |g| {
                    for ((gi, d), v) in g.iter_mut().zip(d_out).zip(xv) {
                        *gi += d * stable_sigmoid(*v);
                    }
                });
            }
            Op::LogSigmoid { x } => {
                let xv = self.vals(*x);
                Self::accumulate(grads, *x, xv.len(), |g| {
                    for ((gi, d), v) in g.iter_mut().zip(d_out).zip(xv) {
                        *gi += d * stable_sigmoid(-*v);
                    }
                });
            }
            Op::LRelu { x, slope } => {
                let xv = self.vals(*x);
                Self::accumulate(grads, *x, xv.len(), |g| {
                    for ((gi, d), v) in g.iter_mut().zip(d_out).zip(xv) {
                        *gi += d * if *v > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::Softmax { x } => {
                let cols = *self.shape(*x).last().unwrap();
                let out = node.out.values();
                Self::accumulate(grads, *x, out.len(), |g| {
                    for ((grow, drow), orow) in g
                        .chunks_exact_mut(cols)
                        .zip(d_out.chunks_exact(cols))
                        .zip(out.chunks_exact(cols))
                    {
                        let dot: f64 = drow.iter().zip(orow).map(|(d, o)| d * o).sum();
                        for ((gi, d), o) in grow.iter_mut().zip(drow).zip(orow) {
                            *gi += o * (d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let cols = *self.shape(*x).last().unwrap();
                let out = node.out.values();
                Self::accumulate(grads, *x, out.len(), |g| {
                    for ((grow, drow), orow) in g
                        .chunks_exact_mut(cols)
                        .zip(d_out.chunks_exact(cols))
                        .zip(out.chunks_exact(cols))
                    {
                        let dsum: f64 = drow.iter().sum();
                        for ((gi, d), o) in grow.iter_mut().zip(drow).zip(orow) {
                            *gi += d - o.exp() * dsum;
                        }
                    }
                });
            }
            Op::SoftmaxMasked { x, mask } => {
                let out = node.out.values();
                Self::accumulate(grads, *x, out.len(), |g| {
                    let dot: f64 = d_out
                        .iter()
                        .zip(out)
                        .zip(mask)
                        .filter(|(_, m)| **m)
                        .map(|((d, o), _)| d * o)
                        .sum();
                    for i in 0..out.len() {
                        if mask[i] {
                            g[i] += out[i] * (d_out[i] - dot);
                        }
                    }
                });
            }
            Op::Embed { table, indices } => {
                let dim = self.shape(*table)[1];
                let total = self.vals(*table).len();
                Self::accumulate(grads, *table, total, |g| {
                    for (t, &idx) in indices.iter().enumerate() {
                        let drow = &d_out[t * dim..(t + 1) * dim];
                        add_into(&mut g[idx * dim..(idx + 1) * dim], drow, 1.0);
                    }
                });
            }
        }
    }

    /// Recompute every node from its recorded op and inputs, in order.
    /// Returns the recomputed values for comparison against the stored ones.
    pub fn replay(&self) -> Vec<Vec<f64>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |var: Var| -> &[f64] { &values[var.0] };
            let out = match &node.op {
                Op::Input => node.out.values().to_vec(),
                Op::StopGrad { x } => v(*x).to_vec(),
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = if self.shape(*b).len() == 1 { 1 } else { self.shape(*b)[1] };
                    matmul_vals(v(*a), m, k, v(*b), n)
                }
                Op::Add { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x + y).collect(),
                Op::Sub { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x - y).collect(),
                Op::Mul { a, b } => v(*a).iter().zip(v(*b)).map(|(x, y)| x * y).collect(),
                Op::AddRowBroadcast { m, v: vec } => {
                    let cols = self.shape(*vec)[0];
                    let vv = v(*vec).to_vec();
                    v(*m)
                        .chunks_exact(cols)
                        .flat_map(|row| row.iter().zip(&vv).map(|(x, y)| x + y).collect::<Vec<_>>())
                        .collect()
                }
                Op::Scale { x, c } => v(*x).iter().map(|y| c * y).collect(),
                Op::MulScalar { x, s } => {
                    let c = v(*s)[0];
                    v(*x).iter().map(|y| c * y).collect()
                }
                Op::ScaleRows { m, w } => {
                    let cols = self.shape(*m)[1];
                    let wv = v(*w).to_vec();
                    v(*m)
                        .chunks_exact(cols)
                        .zip(&wv)
                        .flat_map(|(row, wi)| row.iter().map(|x| x * wi).collect::<Vec<_>>())
                        .collect()
                }
                Op::Concat { parts, .. } => {
                    parts.iter().flat_map(|p| v(*p).to_vec()).collect()
                }
                Op::Slice { x, start, len } => v(*x)[*start..*start + *len].to_vec(),
                Op::SumAxis { x, axis } => {
                    let s = self.shape(*x);
                    match (s.len(), axis) {
                        (1, 0) => vec![v(*x).iter().sum()],
                        (2, 0) => {
                            let c = s[1];
                            let mut acc = vec![0.0; c];
                            for row in v(*x).chunks_exact(c) {
                                for (a, y) in acc.iter_mut().zip(row) {
                                    *a += y;
                                }
                            }
                            acc
                        }
                        (2, 1) => {
                            let c = s[1];
                            v(*x).chunks_exact(c).map(|row| row.iter().sum()).collect()
                        }
                        _ => unreachable!(),
                    }
                }
                Op::MaxSet { parts } => {
                    let mut acc = v(parts[0]).to_vec();
                    for p in &parts[1..] {
                        for (a, y) in acc.iter_mut().zip(v(*p)) {
                            if *y > *a {
                                *a = *y;
                            }
                        }
                    }
                    acc
                }
                Op::Sigmoid { x } => v(*x).iter().map(|y| stable_sigmoid(*y)).collect(),
                Op::Tanh { x } => v(*x).iter().map(|y| y.tanh()).collect(),
                Op::Ln { x } => v(*x).iter().map(|y| y.ln()).collect(),
                Op::Exp { x } => v(*x).iter().map(|y| y.exp()).collect(),
                Op::Softplus { x } => v(*x).iter().map(|y| stable_softplus(*y)).collect(),
                Op::LogSigmoid { x } => v(*x).iter().map(|y| -stable_softplus(-*y)).collect(),
                Op::LRelu { x, slope } => {
                    v(*x).iter().map(|y| if *y > 0.0 { *y } else { slope * y }).collect()
                }
                Op::Softmax { x } => softmax_rows(v(*x), *self.shape(*x).last().unwrap()),
                Op::LogSoftmax { x } => log_softmax_rows(v(*x), *self.shape(*x).last().unwrap()),
                Op::SoftmaxMasked { x, mask } => {
                    let xs = v(*x);
                    let max = xs
                        .iter()
                        .zip(mask)
                        .filter(|(_, m)| **m)
                        .map(|(y, _)| *y)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut vals = vec![0.0; xs.len()];
                    let mut denom = 0.0;
                    for (i, y) in xs.iter().enumerate() {
                        if mask[i] {
                            let e = (y - max).exp();
                            vals[i] = e;
                            denom += e;
                        }
                    }
                    for val in vals.iter_mut() {
                        *val /= denom;
                    }
                    vals
                }
                Op::Embed { table, indices } => {
                    let dim = self.shape(*table)[1];
                    let tv = v(*table);
                    indices.iter().flat_map(|i| tv[i * dim..(i + 1) * dim].to_vec()).collect()
                }
            };
            values.push(out);
        }
        values
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn matmul_vals(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 1 {
        for i in 0..m {
            out[i] = a[i * k..(i + 1) * k].iter().zip(b).map(|(x, y)| x * y).sum();
        }
    } else {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (x, brow) in arow.iter().zip(b.chunks_exact(n)) {
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / denom));
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecvar(t: &mut Tape, v: Vec<f64>) -> Var {
        t.input(Tensor::vector(v))
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![0.0]);
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).values(), &[0.5]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![0.0, 0.0]);
        let y = t.softmax(x);
        assert_eq!(t.value(y).values(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.input(Tensor::matrix(3, 3, vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ]));
        let x = t.input(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y).values(), t.value(x).values());
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.input(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = t.input(Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x ∘ x), x = [1, 2] → grad(x) = [2, 4]
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_axis(sq, 0).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_sigmoid_preactivation() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![0.0]);
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert!((g.get(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_empty_record() {
        let t = Tape::new();
        assert!(matches!(t.backward_until(Var(0), &[]), Err(TapeError::EmptyRecord)));
    }

    #[test]
    fn off_path_nodes_have_no_gradient() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![1.0]);
        let unused = vecvar(&mut t, vec![5.0]);
        let _dangling = t.scale(unused, 2.0);
        let loss = t.mul(x, x).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.dense(unused, 1), vec![0.0]);
    }

    #[test]
    fn stop_grad_blocks_propagation() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![3.0]);
        let sg = t.stop_grad(x);
        let loss = t.mul(sg, sg).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(sg).unwrap(), &[6.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_until_keeps_adjoint_at_stop() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![2.0]);
        let y = t.scale(x, 3.0); // y = 3x
        let loss = t.mul(y, y).unwrap(); // L = 9x², dL/dy = 2y = 12
        let g = t.backward_until(loss, &[y]).unwrap();
        assert_eq!(g.get(y).unwrap(), &[12.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_is_linear() {
        // grad(a·L1 + b·L2) == a·grad(L1) + b·grad(L2)
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![0.3, -1.2, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let l1 = t.sum_axis(sq, 0).unwrap();
        let s = t.sigmoid(x);
        let l2 = t.sum_axis(s, 0).unwrap();
        let (a, b) = (2.5, -0.75);
        let al1 = t.scale(l1, a);
        let bl2 = t.scale(l2, b);
        let combined = t.add(al1, bl2).unwrap();

        let g1 = t.backward(l1).unwrap();
        let g2 = t.backward(l2).unwrap();
        let gc = t.backward(combined).unwrap();
        for i in 0..3 {
            let expect = a * g1.get(x).unwrap()[i] + b * g2.get(x).unwrap()[i];
            assert!((gc.get(x).unwrap()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn mul_scalar_value_and_both_gradients() {
        // d(s·Σx²)/dx = 2sx, d/ds = Σx²
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![1.0, -2.0, 0.5]);
        let s = vecvar(&mut t, vec![3.0]);
        let sq = t.mul(x, x).unwrap();
        let scaled = t.mul_scalar(sq, s).unwrap();
        let loss = t.sum_axis(scaled, 0).unwrap();
        assert!((t.value(loss).item() - 3.0 * 5.25).abs() < 1e-12);

        let g = t.backward(loss).unwrap();
        for (gi, xi) in g.get(x).unwrap().iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - 2.0 * 3.0 * xi).abs() < 1e-12);
        }
        assert!((g.get(s).unwrap()[0] - 5.25).abs() < 1e-12);
    }

    #[test]
    fn mul_scalar_wants_a_single_value() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![1.0, 2.0]);
        let s = vecvar(&mut t, vec![1.0, 1.0]);
        assert!(matches!(
            t.mul_scalar(x, s),
            Err(TapeError::ShapeMismatch { op: "mul_scalar", .. })
        ));
    }

    #[test]
    fn replay_reproduces_bit_identical_values() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![0.1, -0.7, 1.3, 0.02]);
        let w = t.input(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.17 - 1.0).collect()));
        let h = t.matmul(w, x).unwrap();
        let s = t.sigmoid(h);
        let sm = t.softmax(s);
        let _ = t.ln(sm);
        let replayed = t.replay();
        for (id, vals) in replayed.iter().enumerate() {
            let stored = t.value(Var(id)).values();
            assert_eq!(vals.len(), stored.len());
            for (a, b) in vals.iter().zip(stored) {
                assert_eq!(a.to_bits(), b.to_bits(), "node {id} diverged on replay");
            }
        }
    }

    #[test]
    fn masked_softmax_matches_reduced_softmax() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![0.4, -0.3, 1.7, 0.0]);
        let mask = [true, false, true, true];
        let y = t.softmax_masked(x, &mask).unwrap();
        let yv = t.value(y).values().to_vec();
        assert_eq!(yv[1], 0.0);

        let reduced = vecvar(&mut t, vec![0.4, 1.7, 0.0]);
        let yr = t.softmax(reduced);
        let rv = t.value(yr).values();
        assert!((yv[0] - rv[0]).abs() < 1e-15);
        assert!((yv[2] - rv[1]).abs() < 1e-15);
        assert!((yv[3] - rv[2]).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        let mut t = Tape::new();
        let x = vecvar(&mut t, vec![1.0, 2.0]);
        assert!(t.softmax_masked(x, &[false, false]).is_err());
    }

    #[test]
    fn embed_out_of_range_errors() {
        let mut t = Tape::new();
        let table = t.input(Tensor::matrix(3, 2, vec![0.0; 6]));
        assert!(matches!(
            t.embed(table, &[3]),
            Err(TapeError::EmbedIndex { index: 3, vocab: 3 })
        ));
    }

    #[test]
    fn embed_rows_come_back_unchanged() {
        let mut t = Tape::new();
        let table = t.input(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = t.embed(table, &[2, 0]).unwrap();
        assert_eq!(t.value(r).values(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn max_set_ties_feed_first_part() {
        let mut t = Tape::new();
        let a = vecvar(&mut t, vec![1.0, 5.0]);
        let b = vecvar(&mut t, vec![1.0, 2.0]);
        let m = t.max_set(&[a, b]).unwrap();
        let loss = t.sum_axis(m, 0).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap(), &[0.0, 0.0]);
    }
}
