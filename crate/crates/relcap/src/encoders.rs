//! Question encoder, question-guided object attention, and the word-gated
//! caption embedding.
//!
//! Three pieces that turn an encoded example into the vectors the answer
//! head and the caption decoder consume:
//!
//! * [`QuestionEncoder`]: GRU over question tokens, final hidden state is `q`.
//! * [`QvAttention`]: per-object scores from `(f(v_k), f(q))`, masked softmax,
//!   and the reweighted object set `v^q_k = α_k · K · f(v_k)` with its sum.
//! * [`CaptionEmbedder`]: word GRU whose hiddens gate each word embedding
//!   before a second GRU summarizes the caption; captions pool by
//!   elementwise max.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::glorot;
use crate::autodiff::{
    Bound, Embedding, GruCell, Linear, ParamId, ParamSet, Tape, TapeError, Tensor, Var,
};

type Result<T> = std::result::Result<T, TapeError>;

/// GRU question reader; the hidden state after the last real token is `q`.
pub struct QuestionEncoder {
    emb: Embedding,
    gru: GruCell,
    pub hidden_dim: usize,
}

impl QuestionEncoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        vocab: usize,
        emb_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let emb = Embedding::new(ps, &format!("{name}.emb"), vocab, emb_dim, rng);
        let gru = GruCell::new(ps, &format!("{name}.gru"), emb_dim, hidden_dim, rng);
        QuestionEncoder { emb, gru, hidden_dim }
    }

    /// Fold the GRU over `tokens` and return the final hidden state.
    ///
    /// `tokens` must hold the real (unpadded) question; pad ids are the
    /// caller's problem to strip.
    pub fn encode(&self, t: &mut Tape, bd: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(TapeError::Invalid {
                op: "embed_question",
                msg: "empty question".into(),
            });
        }
        let mut xs = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            xs.push(self.emb.lookup(t, bd, tok)?);
        }
        let h0 = t.input(Tensor::zeros(vec![self.hidden_dim]));
        self.gru.run(t, bd, &xs, h0)
    }
}

/// The object set after question-guided attention.
pub struct AttendedFeatures {
    /// Indices into the original `K` slots, one per kept object.
    pub valid: Vec<usize>,
    /// `v^q_k` in slot order of `valid`.
    pub objects: Vec<Var>,
    /// `v̄^q = Σ_k v^q_k`.
    pub pooled: Var,
    /// Full-length weight vector; masked slots hold exact zeros.
    pub weights: Var,
}

/// Scores each object against the question and reweights its projection.
///
/// Score: `a_k = w · lrelu(W_s [f(v_k); f(q)] + b_s)`; weights are a masked
/// softmax over valid slots. Each kept object becomes `α_k · K · f(v_k)`
/// where `K` counts the valid slots, so the set's total magnitude does not
/// shrink as objects are added.
pub struct QvAttention {
    f_v: Linear,
    f_q: Linear,
    score: Linear,
    w: ParamId,
    slope: f64,
}

impl QvAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        feature_dim: usize,
        q_dim: usize,
        hidden_dim: usize,
        attn_dim: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let f_v = Linear::new(ps, &format!("{name}.fv"), feature_dim, hidden_dim, rng);
        let f_q = Linear::new(ps, &format!("{name}.fq"), q_dim, hidden_dim, rng);
        let score = Linear::new(ps, &format!("{name}.score"), 2 * hidden_dim, attn_dim, rng);
        let w = ps.register(format!("{name}.w"), glorot(1, attn_dim, attn_dim, 1, rng));
        QvAttention { f_v, f_q, score, w, slope }
    }

    /// `features` is `[K, D]` row-major; `mask[k]` marks real objects.
    pub fn attend(
        &self,
        t: &mut Tape,
        bd: &Bound,
        features: Var,
        mask: &[bool],
        q: Var,
    ) -> Result<AttendedFeatures> {
        let shape = t.value(features).shape().to_vec();
        if shape.len() != 2 || shape[0] != mask.len() {
            return Err(TapeError::Invalid {
                op: "attend_question_visual",
                msg: format!("features {shape:?} against mask of {}", mask.len()),
            });
        }
        let valid: Vec<usize> = (0..mask.len()).filter(|&k| mask[k]).collect();
        if valid.is_empty() {
            return Err(TapeError::Invalid {
                op: "attend_question_visual",
                msg: "all objects masked".into(),
            });
        }
        let (k_total, dim) = (shape[0], shape[1]);
        let fq = self.f_q.fc(t, bd, q, self.slope)?;

        let mut projected = vec![None; k_total];
        let mut scores = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let row = t.slice(features, k * dim, dim)?;
            let fv = self.f_v.fc(t, bd, row, self.slope)?;
            let joint = t.concat(&[fv, fq])?;
            let e = self.score.fc(t, bd, joint, self.slope)?;
            let s = t.matmul(bd.var(self.w), e)?;
            scores.push(s);
            projected[k] = Some(fv);
        }
        let score_vec = t.concat(&scores)?;
        let weights = t.softmax_masked(score_vec, mask)?;

        let k_scale = valid.len() as f64;
        let mut objects = Vec::with_capacity(valid.len());
        for &k in &valid {
            let alpha = t.slice(weights, k, 1)?;
            let weighted = t.mul_scalar(projected[k].unwrap(), alpha)?;
            objects.push(t.scale(weighted, k_scale));
        }
        let mut pooled = objects[0];
        for obj in &objects[1..] {
            pooled = t.add(pooled, *obj)?;
        }
        Ok(AttendedFeatures { valid, objects, pooled, weights })
    }
}

/// How the per-word gate is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// One sigmoid per embedding coordinate.
    Vector,
    /// Coordinates summed into a single sigmoid per word.
    Scalar,
    /// Gate pinned to 1; the caption GRU sees raw embeddings.
    Ones,
}

/// Caption embeddings for one example.
pub struct CaptionEncoding {
    /// `c_i`, one per caption.
    pub per_caption: Vec<Var>,
    /// Elementwise max of the `c_i`.
    pub pooled: Var,
    /// Gate activations per caption per word; empty under [`GateMode::Ones`].
    pub gates: Vec<Vec<Var>>,
}

/// Two-layer caption reader with a visually-informed word gate.
///
/// A word GRU runs over the caption; its hidden at each word, multiplied
/// against projections of `v̄^q` and `q`, drives a sigmoid gate on that
/// word's embedding. The gated embeddings feed a second GRU whose final
/// hidden, projected, is the caption vector `c_i`. Captions pool by
/// elementwise max into `c`.
pub struct CaptionEmbedder {
    emb: Embedding,
    word_gru: GruCell,
    cap_gru: GruCell,
    f_gate_v: Linear,
    f_gate_q: Linear,
    f_out: Linear,
    pub mode: GateMode,
    slope: f64,
    emb_dim: usize,
    hidden_dim: usize,
}

impl CaptionEmbedder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        vocab: usize,
        emb_dim: usize,
        vq_dim: usize,
        q_dim: usize,
        hidden_dim: usize,
        mode: GateMode,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let emb = Embedding::new(ps, &format!("{name}.emb"), vocab, emb_dim, rng);
        // Word-GRU hidden width equals the embedding width so the gate's
        // elementwise products are well-typed.
        let word_gru = GruCell::new(ps, &format!("{name}.word"), emb_dim, emb_dim, rng);
        let cap_gru = GruCell::new(ps, &format!("{name}.cap"), emb_dim, hidden_dim, rng);
        let f_gate_v = Linear::new(ps, &format!("{name}.gv"), vq_dim, emb_dim, rng);
        let f_gate_q = Linear::new(ps, &format!("{name}.gq"), q_dim, emb_dim, rng);
        let f_out = Linear::new(ps, &format!("{name}.out"), hidden_dim, hidden_dim, rng);
        CaptionEmbedder {
            emb,
            word_gru,
            cap_gru,
            f_gate_v,
            f_gate_q,
            f_out,
            mode,
            slope,
            emb_dim,
            hidden_dim,
        }
    }

    /// Embed every caption and pool. Captions are bare word-token lists
    /// (no start/end sentinels) and must each be non-empty.
    pub fn embed(
        &self,
        t: &mut Tape,
        bd: &Bound,
        captions: &[Vec<usize>],
        vbar_q: Var,
        q: Var,
    ) -> Result<CaptionEncoding> {
        if captions.is_empty() {
            return Err(TapeError::Invalid { op: "embed_captions", msg: "no captions".into() });
        }
        if let Some(i) = captions.iter().position(|c| c.is_empty()) {
            return Err(TapeError::Invalid {
                op: "embed_captions",
                msg: format!("caption {i} is empty"),
            });
        }
        let (gv, gq) = match self.mode {
            GateMode::Ones => (None, None),
            _ => (
                Some(self.f_gate_v.fc(t, bd, vbar_q, self.slope)?),
                Some(self.f_gate_q.fc(t, bd, q, self.slope)?),
            ),
        };

        let mut per_caption = Vec::with_capacity(captions.len());
        let mut gates = Vec::with_capacity(captions.len());
        for tokens in captions {
            let mut embs = Vec::with_capacity(tokens.len());
            for &tok in tokens {
                embs.push(self.emb.lookup(t, bd, tok)?);
            }

            let mut h1 = t.input(Tensor::zeros(vec![self.emb_dim]));
            let mut cap_gates = Vec::new();
            let mut gated = Vec::with_capacity(embs.len());
            for &e in &embs {
                h1 = self.word_gru.step(t, bd, e, h1)?;
                match self.mode {
                    GateMode::Ones => gated.push(e),
                    GateMode::Vector => {
                        let av = t.mul(h1, gv.unwrap())?;
                        let aq = t.mul(h1, gq.unwrap())?;
                        let a = t.add(av, aq)?;
                        let alpha = t.sigmoid(a);
                        cap_gates.push(alpha);
                        gated.push(t.mul(alpha, e)?);
                    }
                    GateMode::Scalar => {
                        let av = t.mul(h1, gv.unwrap())?;
                        let aq = t.mul(h1, gq.unwrap())?;
                        let a = t.add(av, aq)?;
                        let a_sum = t.sum_axis(a, 0)?;
                        let alpha = t.sigmoid(a_sum);
                        cap_gates.push(alpha);
                        gated.push(t.mul_scalar(e, alpha)?);
                    }
                }
            }

            let h0 = t.input(Tensor::zeros(vec![self.hidden_dim]));
            let h2 = self.cap_gru.run(t, bd, &gated, h0)?;
            per_caption.push(self.f_out.fc(t, bd, h2, self.slope)?);
            if self.mode != GateMode::Ones {
                gates.push(cap_gates);
            }
        }
        let pooled = t.max_set(&per_caption)?;
        Ok(CaptionEncoding { per_caption, pooled, gates })
    }
}
