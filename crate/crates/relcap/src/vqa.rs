//! Answer head: caption-adjusted object attention, the joint representation,
//! sigmoid answer scores, and the soft-target loss.
//!
//! With adjustment on, each object's weight comes from a scalar score
//! `f(f(c) ∘ f(v^q_k))` softmaxed over the object set, and the attended
//! vector is the weight-blended sum. With it off the head consumes the plain
//! object sum and the scoring graph is never recorded.

use rand::Rng;

use crate::autodiff::{Bound, Linear, ParamSet, Tape, TapeError, Tensor, Var};
use crate::encoders::AttendedFeatures;

type Result<T> = std::result::Result<T, TapeError>;

/// Lowest index attaining the maximum.
pub fn argmax(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate().skip(1) {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

/// Object attention after the caption embedding has had its say.
pub struct AdjustedAttention {
    /// `α^cv` over the valid objects; `None` when adjustment is off.
    pub weights: Option<Var>,
    /// `v̄^qc`.
    pub pooled: Var,
}

/// One example's answer scores.
pub struct AnswerPrediction {
    pub h: Var,
    pub logits: Var,
    /// `σ(logits)`.
    pub scores: Var,
    /// Argmax of the scores, lowest index on ties.
    pub predicted: usize,
}

pub struct VqaHead {
    f_adj_c: Linear,
    f_adj_v: Linear,
    f_adj: Linear,
    f_join_v: Linear,
    f_join_c: Linear,
    out: Linear,
    pub use_caa: bool,
    slope: f64,
}

impl VqaHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        vq_dim: usize,
        c_dim: usize,
        q_dim: usize,
        proj_dim: usize,
        answers: usize,
        use_caa: bool,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let f_adj_c = Linear::new(ps, &format!("{name}.adjc"), c_dim, proj_dim, rng);
        let f_adj_v = Linear::new(ps, &format!("{name}.adjv"), vq_dim, proj_dim, rng);
        let f_adj = Linear::new(ps, &format!("{name}.adj"), proj_dim, 1, rng);
        let f_join_v = Linear::new(ps, &format!("{name}.joinv"), vq_dim, q_dim, rng);
        let f_join_c = Linear::new(ps, &format!("{name}.joinc"), c_dim, q_dim, rng);
        let out = Linear::new(ps, &format!("{name}.out"), q_dim, answers, rng);
        VqaHead { f_adj_c, f_adj_v, f_adj, f_join_v, f_join_c, out, use_caa, slope }
    }

    /// Reweight the object set by caption affinity, or pass its sum through
    /// untouched when adjustment is off.
    pub fn adjust(
        &self,
        t: &mut Tape,
        bd: &Bound,
        att: &AttendedFeatures,
        c: Option<Var>,
    ) -> Result<AdjustedAttention> {
        if !self.use_caa {
            return Ok(AdjustedAttention { weights: None, pooled: att.pooled });
        }
        let c = c.ok_or_else(|| TapeError::Invalid {
            op: "adjust_attention",
            msg: "caption embedding required when adjustment is on".into(),
        })?;
        let fc = self.f_adj_c.fc(t, bd, c, self.slope)?;
        let mut scores = Vec::with_capacity(att.objects.len());
        for &obj in &att.objects {
            let fv = self.f_adj_v.fc(t, bd, obj, self.slope)?;
            let prod = t.mul(fc, fv)?;
            scores.push(self.f_adj.fc(t, bd, prod, self.slope)?);
        }
        let score_vec = t.concat(&scores)?;
        let weights = t.softmax(score_vec);

        let mut pooled = None;
        for (k, &obj) in att.objects.iter().enumerate() {
            let alpha = t.slice(weights, k, 1)?;
            let term = t.mul_scalar(obj, alpha)?;
            pooled = Some(match pooled {
                None => term,
                Some(acc) => t.add(acc, term)?,
            });
        }
        Ok(AdjustedAttention { weights: Some(weights), pooled: pooled.unwrap() })
    }

    /// `h = q ∘ (f(v̄^qc) + f(c))`, scored per answer candidate.
    pub fn predict(
        &self,
        t: &mut Tape,
        bd: &Bound,
        q: Var,
        pooled: Var,
        c: Var,
    ) -> Result<AnswerPrediction> {
        if self.out.out_dim == 0 {
            return Err(TapeError::Invalid {
                op: "predict",
                msg: "no answer candidates".into(),
            });
        }
        let fv = self.f_join_v.fc(t, bd, pooled, self.slope)?;
        let fc = self.f_join_c.fc(t, bd, c, self.slope)?;
        let sum = t.add(fv, fc)?;
        let h = t.mul(q, sum)?;
        let logits = self.out.affine(t, bd, h)?;
        let scores = t.sigmoid(logits);
        let predicted = argmax(t.value(scores).values());
        Ok(AnswerPrediction { h, logits, scores, predicted })
    }
}

/// Multi-label loss against soft targets, summed over candidates.
///
/// Computed from the logits as `Σ_j softplus(z_j) − s_j·z_j`, which equals
/// the binary cross-entropy without ever forming `log(σ)` explicitly.
pub fn vqa_loss(t: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let n = t.value(logits).len();
    if n != targets.len() {
        return Err(TapeError::ShapeMismatch {
            op: "vqa_loss",
            lhs: t.value(logits).shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if let Some(bad) = targets.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(TapeError::Invalid {
            op: "vqa_loss",
            msg: format!("target {bad} outside [0,1]"),
        });
    }
    let s = t.input(Tensor::vector(targets.to_vec()));
    let sp = t.softplus(logits);
    let sz = t.mul(logits, s)?;
    let per = t.sub(sp, sz)?;
    t.sum_axis(per, 0)
}

/// Soft score earned by the predicted answer.
pub fn soft_accuracy(scores: &[f64], predicted: usize) -> f64 {
    scores.get(predicted).copied().unwrap_or(0.0)
}

/// The selector's answer signal: the logit of answer `index`, or its
/// log-sigmoid when `log_mode` is set.
pub fn spred(t: &mut Tape, logits: Var, index: usize, log_mode: bool) -> Result<Var> {
    let z = t.slice(logits, index, 1)?;
    Ok(if log_mode { t.log_sigmoid(z) } else { z })
}
