//! Caption decoder: a two-layer LSTM with per-step attention over the
//! question-attended object set.
//!
//! Layer 1 (attention LSTM) reads `[previous word; v̄^q; language hidden]`
//! and its hidden state scores each object through a small tanh network.
//! Layer 2 (language LSTM) reads `[attended object vector; attention hidden]`
//! and emits the next-word distribution. Teacher forcing gives the caption
//! negative log-likelihood; free-running decoding gives greedy or sampled
//! captions with their log-probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::glorot;
use crate::autodiff::{
    Bound, Embedding, Linear, LstmCell, ParamId, ParamSet, Tape, TapeError, Tensor, Var,
};
use crate::data::{END, START};
use crate::encoders::AttendedFeatures;

type Result<T> = std::result::Result<T, TapeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    Greedy,
    Sample,
}

/// Teacher-forced decode of one caption.
pub struct CaptionNll {
    /// Summed negative log-likelihood, a scalar node.
    pub nll: Var,
    /// Log-probability of the gold token at each step.
    pub step_gold_logps: Vec<Var>,
    /// Object attention weights at each step.
    pub step_attention: Vec<Var>,
}

/// One free-running decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    /// Emitted tokens; ends with `<end>` unless the length cap cut it off.
    pub tokens: Vec<usize>,
    /// Untempered log-probability of each emitted token.
    pub step_log_probs: Vec<f64>,
    pub total_log_prob: f64,
}

pub struct Captioner {
    emb: Embedding,
    att_lstm: LstmCell,
    lang_lstm: LstmCell,
    att_v: Linear,
    att_h: Linear,
    att_w: ParamId,
    out: Linear,
    vq_dim: usize,
    att_dim: usize,
    lang_dim: usize,
}

struct StepState {
    h_att: Var,
    c_att: Var,
    h_lang: Var,
    c_lang: Var,
}

impl Captioner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        vocab: usize,
        emb_dim: usize,
        vq_dim: usize,
        att_dim: usize,
        lang_dim: usize,
        attn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let emb = Embedding::new(ps, &format!("{name}.emb"), vocab, emb_dim, rng);
        let att_lstm = LstmCell::new(
            ps,
            &format!("{name}.att"),
            emb_dim + vq_dim + lang_dim,
            att_dim,
            rng,
        );
        let lang_lstm =
            LstmCell::new(ps, &format!("{name}.lang"), vq_dim + att_dim, lang_dim, rng);
        let att_v = Linear::new(ps, &format!("{name}.attv"), vq_dim, attn_dim, rng);
        let att_h = Linear::new(ps, &format!("{name}.atth"), att_dim, attn_dim, rng);
        let att_w = ps.register(format!("{name}.attw"), glorot(1, attn_dim, attn_dim, 1, rng));
        let out = Linear::new(ps, &format!("{name}.out"), lang_dim, vocab, rng);
        Captioner { emb, att_lstm, lang_lstm, att_v, att_h, att_w, out, vq_dim, att_dim, lang_dim }
    }

    fn zero_state(&self, t: &mut Tape) -> StepState {
        StepState {
            h_att: t.input(Tensor::zeros(vec![self.att_dim])),
            c_att: t.input(Tensor::zeros(vec![self.att_dim])),
            h_lang: t.input(Tensor::zeros(vec![self.lang_dim])),
            c_lang: t.input(Tensor::zeros(vec![self.lang_dim])),
        }
    }

    /// One decode step from `prev` under `state`; returns the new state,
    /// the log-softmax over the vocabulary, and the attention weights used.
    fn step(
        &self,
        t: &mut Tape,
        bd: &Bound,
        att: &AttendedFeatures,
        vbar: Var,
        prev: usize,
        state: &StepState,
    ) -> Result<(StepState, Var, Var)> {
        let word = self.emb.lookup(t, bd, prev)?;
        let x_att = t.concat(&[word, vbar, state.h_lang])?;
        let (h_att, c_att) = self.att_lstm.step(t, bd, x_att, state.h_att, state.c_att)?;

        let fh = self.att_h.affine(t, bd, h_att)?;
        let mut scores = Vec::with_capacity(att.objects.len());
        for &obj in &att.objects {
            let fv = self.att_v.affine(t, bd, obj)?;
            let pre = t.add(fv, fh)?;
            let e = t.tanh(pre);
            scores.push(t.matmul(bd.var(self.att_w), e)?);
        }
        let score_vec = t.concat(&scores)?;
        let weights = t.softmax(score_vec);
        let mut attended = None;
        for (k, &obj) in att.objects.iter().enumerate() {
            let alpha = t.slice(weights, k, 1)?;
            let term = t.mul_scalar(obj, alpha)?;
            attended = Some(match attended {
                None => term,
                Some(acc) => t.add(acc, term)?,
            });
        }

        let x_lang = t.concat(&[attended.unwrap(), h_att])?;
        let (h_lang, c_lang) =
            self.lang_lstm.step(t, bd, x_lang, state.h_lang, state.c_lang)?;
        let logits = self.out.affine(t, bd, h_lang)?;
        let logp = t.log_softmax(logits);
        Ok((StepState { h_att, c_att, h_lang, c_lang }, logp, weights))
    }

    /// Teacher-forced negative log-likelihood of `tokens`, which must start
    /// with `<start>` and hold at least one transition.
    pub fn caption_nll(
        &self,
        t: &mut Tape,
        bd: &Bound,
        tokens: &[usize],
        att: &AttendedFeatures,
    ) -> Result<CaptionNll> {
        if tokens.len() < 2 {
            return Err(TapeError::Invalid {
                op: "caption_nll",
                msg: format!("need at least two tokens, got {}", tokens.len()),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= self.emb.vocab) {
            return Err(TapeError::EmbedIndex { index: bad, vocab: self.emb.vocab });
        }
        let mut state = self.zero_state(t);
        let mut gold_logps = Vec::with_capacity(tokens.len() - 1);
        let mut attention = Vec::with_capacity(tokens.len() - 1);
        for pair in tokens.windows(2) {
            let (prev, gold) = (pair[0], pair[1]);
            let (next, logp, weights) = self.step(t, bd, att, att.pooled, prev, &state)?;
            gold_logps.push(t.slice(logp, gold, 1)?);
            attention.push(weights);
            state = next;
        }
        let stacked = t.concat(&gold_logps)?;
        let total = t.sum_axis(stacked, 0)?;
        let nll = t.scale(total, -1.0);
        Ok(CaptionNll { nll, step_gold_logps: gold_logps, step_attention: attention })
    }

    /// Decode `count` captions from the object set values.
    ///
    /// Sampling draws from the temperature-scaled distribution; recorded
    /// log-probabilities always come from the unscaled one. Greedy decoding
    /// ignores the RNG and the temperature's value, though the latter must
    /// still be positive.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        ps: &ParamSet,
        objects: &[Vec<f64>],
        mode: GenMode,
        count: usize,
        max_len: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<GeneratedCaption>> {
        if count == 0 || max_len == 0 {
            return Err(TapeError::Invalid {
                op: "generate",
                msg: format!("count {count} and max length {max_len} must be positive"),
            });
        }
        if temperature <= 0.0 {
            return Err(TapeError::Invalid {
                op: "generate",
                msg: format!("temperature {temperature} must be positive"),
            });
        }
        if objects.is_empty() {
            return Err(TapeError::Invalid { op: "generate", msg: "no objects".into() });
        }
        if let Some(bad) = objects.iter().find(|o| o.len() != self.vq_dim) {
            return Err(TapeError::Invalid {
                op: "generate",
                msg: format!("object of width {} where {} expected", bad.len(), self.vq_dim),
            });
        }
        (0..count)
            .map(|_| self.generate_one(ps, objects, mode, max_len, temperature, rng))
            .collect()
    }

    fn generate_one(
        &self,
        ps: &ParamSet,
        objects: &[Vec<f64>],
        mode: GenMode,
        max_len: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<GeneratedCaption> {
        let mut t = Tape::new();
        let bd = ps.bind(&mut t);
        let object_vars: Vec<Var> =
            objects.iter().map(|o| t.input(Tensor::vector(o.clone()))).collect();
        let mut pooled = object_vars[0];
        for o in &object_vars[1..] {
            pooled = t.add(pooled, *o)?;
        }
        let att = AttendedFeatures {
            valid: (0..objects.len()).collect(),
            objects: object_vars,
            pooled,
            weights: t.input(Tensor::vector(vec![1.0 / objects.len() as f64; objects.len()])),
        };

        let mut state = self.zero_state(&mut t);
        let mut prev = START;
        let mut tokens = Vec::new();
        let mut step_log_probs = Vec::new();
        while tokens.len() < max_len {
            let (next, logp, _) = self.step(&mut t, &bd, &att, att.pooled, prev, &state)?;
            let logp_vals = t.value(logp).values().to_vec();
            let chosen = match mode {
                GenMode::Greedy => crate::vqa::argmax(&logp_vals),
                GenMode::Sample => {
                    let scaled = t.scale(logp, 1.0 / temperature);
                    let probs = t.softmax(scaled);
                    sample_index(t.value(probs).values(), rng)
                }
            };
            tokens.push(chosen);
            step_log_probs.push(logp_vals[chosen]);
            if chosen == END {
                break;
            }
            prev = chosen;
            state = next;
        }
        let total_log_prob = step_log_probs.iter().sum();
        Ok(GeneratedCaption { tokens, step_log_probs, total_log_prob })
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}
