//! The assembled network: one forward pass records everything the losses
//! and the caption selector need on a single tape.
//!
//! A [`Trace`] keeps handles to the attended object nodes `v^q_k`, the
//! answer-signal node, the answer loss, and one teacher-forced decoder run
//! per gold caption, so selection can replay gradients without rebuilding
//! the graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tape, TapeError, Tensor, Var};
use crate::captioner::{CaptionNll, Captioner};
use crate::data::{EncodedExample, END, START, UNK};
use crate::encoders::{AttendedFeatures, CaptionEmbedder, GateMode, QuestionEncoder, QvAttention};
use crate::seeds;
use crate::vqa::{self, AnswerPrediction, VqaHead};

type Result<T> = std::result::Result<T, TapeError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Word embedding width, shared by the question reader, the caption
    /// reader, and the decoder.
    pub embed_dim: usize,
    /// Width of `q`, the projected objects, and the caption vectors.
    pub hidden_dim: usize,
    /// Width of the attention scorers.
    pub attn_dim: usize,
    pub decoder_att_dim: usize,
    pub decoder_lang_dim: usize,
    pub lrelu_slope: f64,
    /// Caption-adjusted object attention on the answer path.
    pub use_caa: bool,
    pub gate_mode: GateMode,
    /// Use `log σ(logit)` instead of the raw logit as the answer signal.
    pub spred_log: bool,
    /// Keep the caption loss gradient from flowing past `v^q` into the
    /// encoders.
    pub stop_caption_grad: bool,
    /// With captions off, `c` becomes a zero vector and the decoder never
    /// runs: the plain attention-VQA baseline.
    pub use_captions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden_dim: 64,
            attn_dim: 32,
            decoder_att_dim: 64,
            decoder_lang_dim: 64,
            lrelu_slope: 0.2,
            use_caa: true,
            gate_mode: GateMode::Vector,
            spred_log: false,
            stop_caption_grad: false,
            use_captions: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attn_dim", self.attn_dim),
            ("decoder_att_dim", self.decoder_att_dim),
            ("decoder_lang_dim", self.decoder_lang_dim),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.lrelu_slope) {
            return Err(format!("lrelu_slope {} outside [0,1)", self.lrelu_slope));
        }
        Ok(())
    }
}

/// One example's recorded forward pass.
pub struct Trace {
    pub tape: Tape,
    pub bound: Bound,
    /// `v^q_k` for the valid objects, in slot order.
    pub objects: Vec<Var>,
    /// The nodes the decoder consumed; equal to `objects` unless the
    /// caption-gradient stop is on, in which case these are stop-gradient
    /// copies.
    pub caption_objects: Vec<Var>,
    /// Original object slots behind `objects`.
    pub valid: Vec<usize>,
    pub q: Var,
    /// Pooled caption embedding `c`.
    pub caption_c: Var,
    /// Question-guided attention weights; absent when the objects were
    /// injected directly.
    pub qv_weights: Option<Var>,
    /// Caption-adjusted attention weights; absent with adjustment off.
    pub caa_weights: Option<Var>,
    pub prediction: AnswerPrediction,
    /// The answer signal the selector differentiates.
    pub spred: Var,
    pub vqa_loss: Var,
    /// One teacher-forced run per gold caption.
    pub caption_nlls: Vec<CaptionNll>,
    /// Target soft score of the predicted answer.
    pub soft_score: f64,
}

pub struct Model {
    pub params: ParamSet,
    pub cfg: ModelConfig,
    pub question_vocab: usize,
    pub caption_vocab: usize,
    pub answers: usize,
    pub feature_dim: usize,
    qenc: QuestionEncoder,
    qv: QvAttention,
    cap_embed: CaptionEmbedder,
    head: VqaHead,
    pub decoder: Captioner,
}

/// Word tokens for the caption reader: sentinels stripped, with a lone
/// `<unk>` standing in for captions that carried no words at all.
pub fn encoder_tokens(wrapped: &[usize]) -> Vec<usize> {
    let body: Vec<usize> = wrapped
        .iter()
        .copied()
        .filter(|&tok| tok != START && tok != END)
        .collect();
    if body.is_empty() {
        vec![UNK]
    } else {
        body
    }
}

impl Model {
    pub fn new(
        cfg: ModelConfig,
        question_vocab: usize,
        caption_vocab: usize,
        answers: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = seeds::derive(seed, &[seeds::INIT]);
        let mut ps = ParamSet::new();
        let qenc = QuestionEncoder::new(
            &mut ps,
            "qenc",
            question_vocab,
            cfg.embed_dim,
            cfg.hidden_dim,
            &mut rng,
        );
        let qv = QvAttention::new(
            &mut ps,
            "qv",
            feature_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.attn_dim,
            cfg.lrelu_slope,
            &mut rng,
        );
        let cap_embed = CaptionEmbedder::new(
            &mut ps,
            "cap",
            caption_vocab,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.gate_mode,
            cfg.lrelu_slope,
            &mut rng,
        );
        let head = VqaHead::new(
            &mut ps,
            "vqa",
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.attn_dim,
            answers,
            cfg.use_caa,
            cfg.lrelu_slope,
            &mut rng,
        );
        let decoder = Captioner::new(
            &mut ps,
            "dec",
            caption_vocab,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.decoder_att_dim,
            cfg.decoder_lang_dim,
            cfg.attn_dim,
            &mut rng,
        );
        Model {
            params: ps,
            cfg,
            question_vocab,
            caption_vocab,
            answers,
            feature_dim,
            qenc,
            qv,
            cap_embed,
            head,
            decoder,
        }
    }

    pub fn forward_example(&self, ex: &EncodedExample) -> Result<Trace> {
        let mask: Vec<bool> = (0..ex.max_objects).map(|k| k < ex.valid_objects).collect();
        self.forward(
            &ex.question_tokens[..ex.question_len],
            &ex.features,
            &mask,
            &ex.captions,
            &ex.answer_scores,
            None,
        )
    }

    /// Record the full pass. `vq_override` swaps the attended object set for
    /// free input nodes holding the given rows, bypassing the question
    /// attention entirely; gradient checks and the selection tests lean on
    /// this to treat `v^q` as independent variables.
    pub fn forward(
        &self,
        question: &[usize],
        features: &[f64],
        mask: &[bool],
        captions: &[Vec<usize>],
        targets: &[f64],
        vq_override: Option<&[Vec<f64>]>,
    ) -> Result<Trace> {
        self.forward_with(&self.params, question, features, mask, captions, targets, vq_override)
    }

    /// [`forward`](Self::forward) over caller-supplied parameter values; the
    /// set must share this model's layout. Finite-difference checks perturb
    /// a clone this way without touching the live parameters.
    pub fn forward_with(
        &self,
        params: &ParamSet,
        question: &[usize],
        features: &[f64],
        mask: &[bool],
        captions: &[Vec<usize>],
        targets: &[f64],
        vq_override: Option<&[Vec<f64>]>,
    ) -> Result<Trace> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let t = &mut tape;

        let q = self.qenc.encode(t, &bound, question)?;

        let (att, qv_weights) = match vq_override {
            None => {
                if mask.is_empty() || features.len() % mask.len() != 0 {
                    return Err(TapeError::Invalid {
                        op: "forward",
                        msg: format!(
                            "feature buffer of {} does not tile over {} objects",
                            features.len(),
                            mask.len()
                        ),
                    });
                }
                let dim = features.len() / mask.len();
                let fvar = t.input(Tensor::matrix(mask.len(), dim, features.to_vec()));
                let att = self.qv.attend(t, &bound, fvar, mask, q)?;
                let w = att.weights;
                (att, Some(w))
            }
            Some(rows) => {
                if rows.is_empty() {
                    return Err(TapeError::Invalid {
                        op: "forward",
                        msg: "object override is empty".into(),
                    });
                }
                let objects: Vec<Var> =
                    rows.iter().map(|r| t.input(Tensor::vector(r.clone()))).collect();
                let mut pooled = objects[0];
                for o in &objects[1..] {
                    pooled = t.add(pooled, *o)?;
                }
                let weights =
                    t.input(Tensor::vector(vec![1.0 / rows.len() as f64; rows.len()]));
                let att = AttendedFeatures {
                    valid: (0..rows.len()).collect(),
                    objects,
                    pooled,
                    weights,
                };
                (att, None)
            }
        };

        let caption_c = if self.cfg.use_captions {
            let reader_captions: Vec<Vec<usize>> =
                captions.iter().map(|c| encoder_tokens(c)).collect();
            self.cap_embed.embed(t, &bound, &reader_captions, att.pooled, q)?.pooled
        } else {
            t.input(Tensor::zeros(vec![self.cfg.hidden_dim]))
        };

        let adj = self.head.adjust(t, &bound, &att, Some(caption_c))?;
        let prediction = self.head.predict(t, &bound, q, adj.pooled, caption_c)?;
        let spred = vqa::spred(t, prediction.logits, prediction.predicted, self.cfg.spred_log)?;
        let vqa_loss = vqa::vqa_loss(t, prediction.logits, targets)?;

        let (caption_objects, caption_nlls) = if !self.cfg.use_captions {
            (Vec::new(), Vec::new())
        } else {
            let caption_att = if self.cfg.stop_caption_grad {
                let stopped: Vec<Var> = att.objects.iter().map(|&o| t.stop_grad(o)).collect();
                let mut pooled = stopped[0];
                for o in &stopped[1..] {
                    pooled = t.add(pooled, *o)?;
                }
                AttendedFeatures {
                    valid: att.valid.clone(),
                    objects: stopped,
                    pooled,
                    weights: att.weights,
                }
            } else {
                AttendedFeatures {
                    valid: att.valid.clone(),
                    objects: att.objects.clone(),
                    pooled: att.pooled,
                    weights: att.weights,
                }
            };
            let mut nlls = Vec::with_capacity(captions.len());
            for cap in captions {
                nlls.push(self.decoder.caption_nll(t, &bound, cap, &caption_att)?);
            }
            (caption_att.objects, nlls)
        };

        let soft_score = vqa::soft_accuracy(targets, prediction.predicted);
        Ok(Trace {
            tape,
            bound,
            objects: att.objects,
            caption_objects,
            valid: att.valid,
            q,
            caption_c,
            qv_weights,
            caa_weights: adj.weights,
            prediction,
            spred,
            vqa_loss,
            caption_nlls,
            soft_score,
        })
    }

    /// Values of `v^q_k` for one example, recording only the question and
    /// attention stages. The free-running decoder conditions on these.
    pub fn attended_objects(&self, ex: &EncodedExample) -> Result<Vec<Vec<f64>>> {
        if ex.max_objects == 0 || ex.features.len() != ex.max_objects * ex.feature_dim {
            return Err(TapeError::Invalid {
                op: "attended_objects",
                msg: format!(
                    "feature buffer of {} does not tile over {} objects",
                    ex.features.len(),
                    ex.max_objects
                ),
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let q = self.qenc.encode(&mut tape, &bound, &ex.question_tokens[..ex.question_len])?;
        let mask: Vec<bool> = (0..ex.max_objects).map(|k| k < ex.valid_objects).collect();
        let fvar =
            tape.input(Tensor::matrix(ex.max_objects, ex.feature_dim, ex.features.clone()));
        let att = self.qv.attend(&mut tape, &bound, fvar, &mask, q)?;
        Ok(att.objects.iter().map(|&o| tape.value(o).values().to_vec()).collect())
    }

    /// Caption-adjusted attention weights `α^cv` over the valid objects, in
    /// slot order; `None` when the model was built without the adjustment.
    /// Records the answer-side stages only, the decoder never runs.
    pub fn adjusted_attention(&self, ex: &EncodedExample) -> Result<Option<Vec<f64>>> {
        if ex.max_objects == 0 || ex.features.len() != ex.max_objects * ex.feature_dim {
            return Err(TapeError::Invalid {
                op: "adjusted_attention",
                msg: format!(
                    "feature buffer of {} does not tile over {} objects",
                    ex.features.len(),
                    ex.max_objects
                ),
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let t = &mut tape;
        let q = self.qenc.encode(t, &bound, &ex.question_tokens[..ex.question_len])?;
        let mask: Vec<bool> = (0..ex.max_objects).map(|k| k < ex.valid_objects).collect();
        let fvar = t.input(Tensor::matrix(ex.max_objects, ex.feature_dim, ex.features.clone()));
        let att = self.qv.attend(t, &bound, fvar, &mask, q)?;
        let caption_c = if self.cfg.use_captions {
            let reader: Vec<Vec<usize>> = ex.captions.iter().map(|c| encoder_tokens(c)).collect();
            self.cap_embed.embed(t, &bound, &reader, att.pooled, q)?.pooled
        } else {
            t.input(Tensor::zeros(vec![self.cfg.hidden_dim]))
        };
        let adj = self.head.adjust(t, &bound, &att, Some(caption_c))?;
        Ok(adj.weights.map(|w| tape.value(w).values().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(cfg: ModelConfig) -> Model {
        Model::new(cfg, 12, 10, 3, 5, 21)
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 3,
            hidden_dim: 4,
            attn_dim: 3,
            decoder_att_dim: 5,
            decoder_lang_dim: 5,
            ..ModelConfig::default()
        }
    }

    fn example() -> EncodedExample {
        EncodedExample {
            image_id: "img000000".into(),
            question_tokens: vec![4, 6, 9, 0, 0],
            question_len: 3,
            captions: vec![vec![START, 5, 7, END], vec![START, 8, END]],
            answer_scores: vec![1.0, 0.0, 0.3],
            features: vec![0.1; 3 * 5],
            valid_objects: 2,
            feature_dim: 5,
            max_objects: 3,
            relevant_caption_index: 0,
            attention_truth: None,
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny_model(small_cfg());
        let ex = example();
        let a = m.forward_example(&ex).unwrap();
        let b = m.forward_example(&ex).unwrap();
        assert_eq!(
            a.tape.value(a.prediction.logits).values(),
            b.tape.value(b.prediction.logits).values()
        );
        assert_eq!(a.prediction.predicted, b.prediction.predicted);
    }

    #[test]
    fn trace_exposes_the_valid_object_set() {
        let m = tiny_model(small_cfg());
        let trace = m.forward_example(&example()).unwrap();
        assert_eq!(trace.valid, vec![0, 1]);
        assert_eq!(trace.objects.len(), 2);
        assert_eq!(trace.caption_nlls.len(), 2);
        assert_eq!(trace.tape.value(trace.objects[0]).len(), 4);
        assert!(trace.tape.value(trace.vqa_loss).item().is_finite());
    }

    #[test]
    fn caa_flag_controls_the_adjustment_weights() {
        let on = tiny_model(small_cfg());
        assert!(on.forward_example(&example()).unwrap().caa_weights.is_some());
        let off = tiny_model(ModelConfig { use_caa: false, ..small_cfg() });
        assert!(off.forward_example(&example()).unwrap().caa_weights.is_none());
    }

    #[test]
    fn question_padding_stays_outside_the_graph() {
        let m = tiny_model(small_cfg());
        let ex = example();
        let via_example = m.forward_example(&ex).unwrap();
        let mask = vec![true, true, false];
        let direct = m
            .forward(&[4, 6, 9], &ex.features, &mask, &ex.captions, &ex.answer_scores, None)
            .unwrap();
        assert_eq!(
            via_example.tape.value(via_example.prediction.logits).values(),
            direct.tape.value(direct.prediction.logits).values()
        );
    }

    #[test]
    fn stop_flag_blocks_caption_gradients_at_the_interface() {
        let free = tiny_model(small_cfg());
        let ex = example();
        let trace = free.forward_example(&ex).unwrap();
        let fv_w = free.params.by_name("qv.fv.w").unwrap();
        let grads = trace.tape.backward(trace.caption_nlls[0].nll).unwrap();
        assert!(grads.get(trace.bound.var(fv_w)).is_some());

        let stopped = tiny_model(ModelConfig { stop_caption_grad: true, ..small_cfg() });
        let trace = stopped.forward_example(&ex).unwrap();
        let fv_w = stopped.params.by_name("qv.fv.w").unwrap();
        let grads = trace.tape.backward(trace.caption_nlls[0].nll).unwrap();
        assert!(grads.get(trace.bound.var(fv_w)).is_none());
        for (a, b) in trace.objects.iter().zip(&trace.caption_objects) {
            assert_eq!(trace.tape.value(*a).values(), trace.tape.value(*b).values());
            assert_ne!(a.id(), b.id());
        }
    }

    #[test]
    fn spred_log_flag_switches_the_answer_signal() {
        let plain = tiny_model(small_cfg());
        let ex = example();
        let tr = plain.forward_example(&ex).unwrap();
        let z = tr.tape.value(tr.prediction.logits).values()[tr.prediction.predicted];
        assert_eq!(tr.tape.value(tr.spred).values(), &[z]);

        let logged = tiny_model(ModelConfig { spred_log: true, ..small_cfg() });
        let tr = logged.forward_example(&ex).unwrap();
        let z = tr.tape.value(tr.prediction.logits).values()[tr.prediction.predicted];
        let got = tr.tape.value(tr.spred).values()[0];
        assert!((got - -(1.0 + (-z).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn override_objects_become_free_inputs() {
        let m = tiny_model(small_cfg());
        let ex = example();
        let rows = vec![vec![0.3, -0.2, 0.5, 0.1], vec![-0.4, 0.6, 0.0, 0.2]];
        let tr = m
            .forward(
                &[4, 6, 9],
                &[],
                &[],
                &ex.captions,
                &ex.answer_scores,
                Some(&rows),
            )
            .unwrap();
        assert!(tr.qv_weights.is_none());
        for (obj, row) in tr.objects.iter().zip(&rows) {
            assert_eq!(tr.tape.value(*obj).values(), row.as_slice());
        }
    }

    #[test]
    fn captionless_baseline_runs_without_a_decoder() {
        let m = tiny_model(ModelConfig { use_captions: false, ..small_cfg() });
        let trace = m.forward_example(&example()).unwrap();
        assert!(trace.caption_nlls.is_empty());
        assert!(trace.caption_objects.is_empty());
        assert!(trace.tape.value(trace.caption_c).values().iter().all(|&v| v == 0.0));
        assert!(trace.tape.value(trace.vqa_loss).item().is_finite());
        assert!(trace.tape.backward(trace.vqa_loss).is_ok());
    }

    #[test]
    fn attended_objects_reproduce_the_trace_values() {
        let m = tiny_model(small_cfg());
        let ex = example();
        let trace = m.forward_example(&ex).unwrap();
        let rows = m.attended_objects(&ex).unwrap();
        assert_eq!(rows.len(), trace.objects.len());
        for (row, obj) in rows.iter().zip(&trace.objects) {
            assert_eq!(row.as_slice(), trace.tape.value(*obj).values());
        }
    }

    #[test]
    fn adjusted_attention_reproduces_the_trace_weights() {
        let m = tiny_model(small_cfg());
        let ex = example();
        let trace = m.forward_example(&ex).unwrap();
        let expected = trace.tape.value(trace.caa_weights.unwrap()).values().to_vec();
        let weights = m.adjusted_attention(&ex).unwrap().unwrap();
        assert_eq!(weights, expected);
        assert_eq!(weights.len(), ex.valid_objects);

        let off = tiny_model(ModelConfig { use_caa: false, ..small_cfg() });
        assert!(off.adjusted_attention(&ex).unwrap().is_none());
    }

    #[test]
    fn sentinel_stripping_feeds_the_reader_words_only() {
        assert_eq!(encoder_tokens(&[START, 5, 7, END]), vec![5, 7]);
        assert_eq!(encoder_tokens(&[START, END]), vec![UNK]);
        assert_eq!(encoder_tokens(&[START, 9]), vec![9]);
    }

    #[test]
    fn config_validation_names_the_offender() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { hidden_dim: 0, ..ModelConfig::default() };
        assert!(bad.validate().unwrap_err().contains("hidden_dim"));
        let bad = ModelConfig { lrelu_slope: 1.5, ..ModelConfig::default() };
        assert!(bad.validate().unwrap_err().contains("lrelu_slope"));
    }
}
