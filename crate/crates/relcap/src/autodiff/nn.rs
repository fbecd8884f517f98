//! Parameter storage and the small layer zoo built on [`Tape`].
//!
//! Parameters live in a [`ParamSet`] outside any tape. Each forward trace
//! starts by binding the whole set onto a fresh tape ([`ParamSet::bind`]),
//! which records one input node per parameter in registration order. Layers
//! hold [`ParamId`]s and read their bound `Var`s through the returned
//! [`Bound`] map, so the same layer object drives any number of traces.

use rand::Rng;

use super::tape::{Gradients, Result, Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Record every parameter as an input node on `tape`, in registration
    /// order, and return the id-to-var map for this trace.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.input(t.clone())).collect();
        Bound { vars }
    }
}

/// Parameter-to-node map for one trace.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    /// Per-parameter gradients in registration order; `None` where no
    /// gradient flowed.
    pub fn grads<'g>(&self, g: &'g Gradients) -> Vec<Option<&'g [f64]>> {
        self.vars.iter().map(|v| g.get(*v)).collect()
    }
}

pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let vals = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, vals)
}

/// Dense layer `W x + b`, with `W` stored `[out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.register(format!("{name}.w"), glorot(out_dim, in_dim, in_dim, out_dim, rng));
        let b = ps.register(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// `W x + b` for a vector input.
    pub fn affine(&self, t: &mut Tape, bd: &Bound, x: Var) -> Result<Var> {
        let wx = t.matmul(bd.var(self.w), x)?;
        t.add(wx, bd.var(self.b))
    }

    /// Leaky-ReLU transform `f(x) = lrelu(W x + b)`.
    pub fn fc(&self, t: &mut Tape, bd: &Bound, x: Var, slope: f64) -> Result<Var> {
        let a = self.affine(t, bd, x)?;
        Ok(t.lrelu(a, slope))
    }
}

/// Gated recurrent unit cell.
///
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `h~ = tanh(Wh x + Uh (r∘h) + bh)`, `h' = (1−z)∘h + z∘h~`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut gate_w = |g: &str| {
            ps.register(format!("{name}.w{g}"), glorot(hidden_dim, input_dim, input_dim, hidden_dim, rng))
        };
        let wz = gate_w("z");
        let wr = gate_w("r");
        let wh = gate_w("h");
        let mut gate_u = |g: &str| {
            ps.register(format!("{name}.u{g}"), glorot(hidden_dim, hidden_dim, hidden_dim, hidden_dim, rng))
        };
        let uz = gate_u("z");
        let ur = gate_u("r");
        let uh = gate_u("h");
        let mut gate_b =
            |g: &str| ps.register(format!("{name}.b{g}"), Tensor::zeros(vec![hidden_dim]));
        let bz = gate_b("z");
        let br = gate_b("r");
        let bh = gate_b("h");
        GruCell { wz, uz, bz, wr, ur, br, wh, uh, bh, input_dim, hidden_dim }
    }

    fn gate(
        &self,
        t: &mut Tape,
        bd: &Bound,
        w: ParamId,
        x: Var,
        u: ParamId,
        h: Var,
        b: ParamId,
    ) -> Result<Var> {
        let wx = t.matmul(bd.var(w), x)?;
        let uh = t.matmul(bd.var(u), h)?;
        let s = t.add(wx, uh)?;
        t.add(s, bd.var(b))
    }

    pub fn step(&self, t: &mut Tape, bd: &Bound, x: Var, h: Var) -> Result<Var> {
        let za = self.gate(t, bd, self.wz, x, self.uz, h, self.bz)?;
        let z = t.sigmoid(za);
        let ra = self.gate(t, bd, self.wr, x, self.ur, h, self.br)?;
        let r = t.sigmoid(ra);
        let rh = t.mul(r, h)?;
        let ca = self.gate(t, bd, self.wh, x, self.uh, rh, self.bh)?;
        let cand = t.tanh(ca);
        let zc = t.mul(z, cand)?;
        let zh = t.mul(z, h)?;
        let keep = t.sub(h, zh)?;
        t.add(keep, zc)
    }

    /// Fold over a token sequence; returns the final hidden state.
    /// An empty sequence returns `h0` untouched.
    pub fn run(&self, t: &mut Tape, bd: &Bound, xs: &[Var], h0: Var) -> Result<Var> {
        let mut h = h0;
        for x in xs {
            h = self.step(t, bd, *x, h)?;
        }
        Ok(h)
    }
}

/// Long short-term memory cell with the standard four gates.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    wi: ParamId,
    ui: ParamId,
    bi: ParamId,
    wf: ParamId,
    uf: ParamId,
    bf: ParamId,
    wg: ParamId,
    ug: ParamId,
    bg: ParamId,
    wo: ParamId,
    uo: ParamId,
    bo: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = |g: &str| {
            ps.register(format!("{name}.w{g}"), glorot(hidden_dim, input_dim, input_dim, hidden_dim, rng))
        };
        let wi = w("i");
        let wf = w("f");
        let wg = w("g");
        let wo = w("o");
        let mut u = |g: &str| {
            ps.register(format!("{name}.u{g}"), glorot(hidden_dim, hidden_dim, hidden_dim, hidden_dim, rng))
        };
        let ui = u("i");
        let uf = u("f");
        let ug = u("g");
        let uo = u("o");
        let mut b = |g: &str| ps.register(format!("{name}.b{g}"), Tensor::zeros(vec![hidden_dim]));
        let bi = b("i");
        let bf = b("f");
        let bg = b("g");
        let bo = b("o");
        LstmCell { wi, ui, bi, wf, uf, bf, wg, ug, bg, wo, uo, bo, input_dim, hidden_dim }
    }

    fn pre(
        &self,
        t: &mut Tape,
        bd: &Bound,
        w: ParamId,
        x: Var,
        u: ParamId,
        h: Var,
        b: ParamId,
    ) -> Result<Var> {
        let wx = t.matmul(bd.var(w), x)?;
        let uh = t.matmul(bd.var(u), h)?;
        let s = t.add(wx, uh)?;
        t.add(s, bd.var(b))
    }

    /// One step; returns `(h', c')`.
    pub fn step(&self, t: &mut Tape, bd: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let ia = self.pre(t, bd, self.wi, x, self.ui, h, self.bi)?;
        let i = t.sigmoid(ia);
        let fa = self.pre(t, bd, self.wf, x, self.uf, h, self.bf)?;
        let f = t.sigmoid(fa);
        let ga = self.pre(t, bd, self.wg, x, self.ug, h, self.bg)?;
        let g = t.tanh(ga);
        let oa = self.pre(t, bd, self.wo, x, self.uo, h, self.bo)?;
        let o = t.sigmoid(oa);
        let fc = t.mul(f, c)?;
        let ig = t.mul(i, g)?;
        let c_next = t.add(fc, ig)?;
        let tc = t.tanh(c_next);
        let h_next = t.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Token embedding table `[vocab, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let table = ps.register(format!("{name}.table"), glorot(vocab, dim, vocab, dim, rng));
        Embedding { table, vocab, dim }
    }

    pub fn lookup(&self, t: &mut Tape, bd: &Bound, index: usize) -> Result<Var> {
        t.embed_one(bd.var(self.table), index)
    }
}
