//! Picks the caption whose likelihood gradient agrees most with the answer
//! gradient, per example and per step.
//!
//! For a recorded trace, one backward pass from the answer signal and one
//! per caption loss, each cut off at the `v^q_k` interface, yield per-object
//! gradient fields. A caption's score is the summed inner product of the
//! answer field with the negated caption field; captions scoring above the
//! threshold ξ are feasible, and the best feasible index joins the caption
//! loss into the training objective. Parameters are never touched here.

use crate::autodiff::{Tape, TapeError, Var};
use crate::model::Trace;

type Result<T> = std::result::Result<T, TapeError>;

/// Scores and the decision for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionReport {
    /// `g_i` per caption.
    pub inner_products: Vec<f64>,
    pub xi: f64,
    /// Best feasible caption, lowest index on ties; `None` when nothing
    /// clears the threshold.
    pub selected: Option<usize>,
    pub feasible: Vec<usize>,
}

/// `Σ_k ⟨answer_k, −caption_k⟩` over paired per-object gradients.
pub fn inner_product(answer_field: &[Vec<f64>], caption_nll_field: &[Vec<f64>]) -> f64 {
    answer_field
        .iter()
        .zip(caption_nll_field)
        .map(|(a, n)| a.iter().zip(n).map(|(x, y)| x * -y).sum::<f64>())
        .sum()
}

fn field(tape: &Tape, loss: Var, stops: &[Var], dims: &[usize]) -> Result<Vec<Vec<f64>>> {
    let grads = tape.backward_until(loss, stops)?;
    Ok(stops.iter().zip(dims).map(|(&s, &d)| grads.dense(s, d)).collect())
}

/// One `g_i` per gold caption, computed from the trace's recorded graph.
///
/// Runs one backward pass for the answer signal and one per caption, all
/// stopped at the object interface; nothing upstream is revisited and no
/// state changes.
pub fn grad_inner_products(trace: &Trace) -> Result<Vec<f64>> {
    if trace.objects.is_empty() {
        return Err(TapeError::Invalid {
            op: "grad_inner_products",
            msg: "trace holds no attended objects".into(),
        });
    }
    let dims: Vec<usize> =
        trace.objects.iter().map(|&o| trace.tape.value(o).len()).collect();

    let mut answer_stops = trace.objects.clone();
    answer_stops.push(trace.q);
    let answer_field = field(&trace.tape, trace.spred, &answer_stops, &dims)?;

    let mut out = Vec::with_capacity(trace.caption_nlls.len());
    for run in &trace.caption_nlls {
        let caption_field = field(&trace.tape, run.nll, &trace.caption_objects, &dims)?;
        out.push(inner_product(&answer_field, &caption_field));
    }
    Ok(out)
}

/// Best index among `{i : g_i > ξ}`, lowest on ties; `None` if empty.
pub fn select(g: &[f64], xi: f64) -> Result<Option<usize>> {
    if g.is_empty() {
        return Err(TapeError::Invalid { op: "select", msg: "no caption scores".into() });
    }
    let mut best: Option<usize> = None;
    for (i, &gi) in g.iter().enumerate() {
        if gi > xi && best.map_or(true, |b| gi > g[b]) {
            best = Some(i);
        }
    }
    Ok(best)
}

/// Score every caption and decide.
pub fn report(trace: &Trace, xi: f64) -> Result<SelectionReport> {
    let inner_products = grad_inner_products(trace)?;
    let selected = select(&inner_products, xi)?;
    let feasible =
        inner_products.iter().enumerate().filter(|(_, &g)| g > xi).map(|(i, _)| i).collect();
    Ok(SelectionReport { inner_products, xi, selected, feasible })
}

/// `L = L^vqa + L^c_{i*}`, or the answer loss alone when nothing was
/// selected. The no-selection case returns the very same node, so the two
/// losses are bit-identical, not merely close.
pub fn joint_loss(
    t: &mut Tape,
    vqa_loss: Var,
    caption_nlls: &[Var],
    selected: Option<usize>,
) -> Result<Var> {
    match selected {
        None => Ok(vqa_loss),
        Some(i) => {
            let nll = *caption_nlls.get(i).ok_or_else(|| TapeError::Invalid {
                op: "joint_loss",
                msg: format!("selected caption {i} of {}", caption_nlls.len()),
            })?;
            t.add(vqa_loss, nll)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{END, START};
    use crate::model::{Model, ModelConfig};
    use crate::seeds;
    use rand::Rng;

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

    fn model() -> Model {
        Model::new(small_cfg(), 12, 10, 3, 5, 33)
    }

    fn rig_rows(seed: u64, k: usize) -> Vec<Vec<f64>> {
        let mut r = seeds::derive(seed, &[seeds::SAMPLE]);
        (0..k).map(|_| (0..4).map(|_| r.gen_range(-0.8..0.8)).collect()).collect()
    }

    fn captions() -> Vec<Vec<usize>> {
        vec![vec![START, 5, 7, END], vec![START, 8, END], vec![START, 4, 4, 6, END]]
    }

    fn rigged_trace(seed: u64, m: &Model) -> crate::model::Trace {
        let rows = rig_rows(seed, 2);
        m.forward(
            &[4, 6, 9],
            &[],
            &[],
            &captions(),
            &[1.0, 0.0, 0.3],
            Some(&rows),
        )
        .unwrap()
    }

    #[test]
    fn aligned_fields_score_their_own_energy() {
        let g = vec![vec![0.5, -1.0], vec![2.0, 0.25]];
        let neg: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let energy: f64 = g.iter().flatten().map(|x| x * x).sum();
        assert!((inner_product(&g, &neg) - energy).abs() < 1e-12);
        assert!((inner_product(&g, &g) + energy).abs() < 1e-12);
    }

    #[test]
    fn anti_aligned_fields_are_infeasible_at_any_positive_threshold() {
        let g = vec![vec![0.3, 0.9], vec![-0.4, 1.1]];
        let score = inner_product(&g, &g);
        assert!(score < 0.0);
        assert_eq!(select(&[score], 0.0).unwrap(), None);
    }

    #[test]
    fn common_scaling_preserves_the_ranking() {
        let answer = vec![vec![0.5, -1.0], vec![2.0, 0.25]];
        let caps: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|i| {
                answer
                    .iter()
                    .map(|v| v.iter().map(|x| -x * (1.0 + i as f64 * 0.3) + 0.1).collect())
                    .collect()
            })
            .collect();
        let base: Vec<f64> = caps.iter().map(|c| inner_product(&answer, c)).collect();
        let lambda = 7.5;
        let scaled_answer: Vec<Vec<f64>> =
            answer.iter().map(|v| v.iter().map(|x| x * lambda).collect()).collect();
        let scaled: Vec<f64> = caps
            .iter()
            .map(|c| {
                let sc: Vec<Vec<f64>> =
                    c.iter().map(|v| v.iter().map(|x| x * lambda).collect()).collect();
                inner_product(&scaled_answer, &sc)
            })
            .collect();
        let order = |g: &[f64]| {
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap());
            idx
        };
        assert_eq!(order(&base), order(&scaled));
        assert_eq!(
            select(&base, 0.0).unwrap(),
            select(&scaled, 0.0).unwrap()
        );
    }

    #[test]
    fn select_takes_the_argmax_over_the_feasible_set() {
        assert_eq!(select(&[0.2, 0.7, 0.1], 0.05).unwrap(), Some(1));
        assert_eq!(select(&[-0.3, -0.1], 0.0).unwrap(), None);
        assert_eq!(select(&[0.5, 0.5], 0.0).unwrap(), Some(0));
        assert_eq!(select(&[0.5], 0.5).unwrap(), None);
        assert!(select(&[], 0.0).is_err());
    }

    #[test]
    fn scores_match_a_free_variable_oracle() {
        // Same graph, but gradients read off plain backward passes with the
        // objects as inputs, no stop set involved.
        let m = model();
        for seed in 0..8 {
            let trace = rigged_trace(seed, &m);
            let got = grad_inner_products(&trace).unwrap();

            let dims: Vec<usize> =
                trace.objects.iter().map(|&o| trace.tape.value(o).len()).collect();
            let answer_grads = trace.tape.backward(trace.spred).unwrap();
            let answer_field: Vec<Vec<f64>> = trace
                .objects
                .iter()
                .zip(&dims)
                .map(|(&o, &d)| answer_grads.dense(o, d))
                .collect();
            let mut expect = Vec::new();
            for run in &trace.caption_nlls {
                let cap_grads = trace.tape.backward(run.nll).unwrap();
                let cap_field: Vec<Vec<f64>> = trace
                    .objects
                    .iter()
                    .zip(&dims)
                    .map(|(&o, &d)| cap_grads.dense(o, d))
                    .collect();
                expect.push(inner_product(&answer_field, &cap_field));
            }
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-6, "seed {seed}: {got:?} vs {expect:?}");
            }
        }
    }

    #[test]
    fn report_is_deterministic_and_consistent() {
        let m = model();
        let trace = rigged_trace(3, &m);
        let a = report(&trace, 0.0).unwrap();
        let b = report(&trace, 0.0).unwrap();
        assert_eq!(a, b);
        for &i in &a.feasible {
            assert!(a.inner_products[i] > a.xi);
        }
        if let Some(i) = a.selected {
            assert!(a.feasible.contains(&i));
            for &j in &a.feasible {
                assert!(a.inner_products[i] >= a.inner_products[j]);
            }
        }
    }

    #[test]
    fn selection_never_touches_parameters() {
        let m = model();
        let fingerprint = |m: &Model| -> u64 {
            let mut h: u64 = 0xcbf29ce484222325;
            for (_, _, t) in m.params.iter() {
                for v in t.values() {
                    h ^= v.to_bits();
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
            h
        };
        let before = fingerprint(&m);
        let trace = rigged_trace(5, &m);
        let _ = report(&trace, 0.0).unwrap();
        assert_eq!(fingerprint(&m), before);
    }

    #[test]
    fn chosen_caption_descends_toward_a_stronger_answer() {
        let m = model();
        let delta = 1e-4;
        let mut exercised = 0;
        for seed in 0..12 {
            let rows = rig_rows(seed, 2);
            let trace = m
                .forward(&[4, 6, 9], &[], &[], &captions(), &[1.0, 0.0, 0.3], Some(&rows))
                .unwrap();
            let g = grad_inner_products(&trace).unwrap();
            let Some(star) = select(&g, 0.0).unwrap() else { continue };
            let locked = trace.prediction.predicted;
            let base = trace.tape.value(trace.prediction.logits).values()[locked];

            let nll_grads =
                trace.tape.backward_until(trace.caption_nlls[star].nll, &trace.objects).unwrap();
            let stepped: Vec<Vec<f64>> = trace
                .objects
                .iter()
                .zip(&rows)
                .map(|(&o, row)| {
                    let gr = nll_grads.dense(o, row.len());
                    row.iter().zip(gr).map(|(v, gv)| v - delta * gv).collect()
                })
                .collect();
            let moved = m
                .forward(&[4, 6, 9], &[], &[], &captions(), &[1.0, 0.0, 0.3], Some(&stepped))
                .unwrap();
            let after = moved.tape.value(moved.prediction.logits).values()[locked];
            assert!(
                after > base,
                "seed {seed}: answer signal fell from {base} to {after} (g = {:?})",
                g[star]
            );
            exercised += 1;
        }
        assert!(exercised >= 3, "only {exercised} rigs had a feasible caption");
    }

    #[test]
    fn joint_loss_adds_or_reuses_the_answer_node() {
        let m = model();
        let mut trace = rigged_trace(2, &m);
        let nlls: Vec<Var> = trace.caption_nlls.iter().map(|r| r.nll).collect();

        let alone = joint_loss(&mut trace.tape, trace.vqa_loss, &nlls, None).unwrap();
        assert_eq!(alone.id(), trace.vqa_loss.id());

        let with_cap = joint_loss(&mut trace.tape, trace.vqa_loss, &nlls, Some(1)).unwrap();
        let expect = trace.tape.value(trace.vqa_loss).item() + trace.tape.value(nlls[1]).item();
        assert!((trace.tape.value(with_cap).item() - expect).abs() < 1e-12);

        assert!(joint_loss(&mut trace.tape, trace.vqa_loss, &nlls, Some(9)).is_err());
    }

    #[test]
    fn joint_gradient_is_the_sum_of_its_parts() {
        let m = model();
        let mut trace = rigged_trace(4, &m);
        let nlls: Vec<Var> = trace.caption_nlls.iter().map(|r| r.nll).collect();
        let joint = joint_loss(&mut trace.tape, trace.vqa_loss, &nlls, Some(0)).unwrap();

        let gj = trace.tape.backward(joint).unwrap();
        let gv = trace.tape.backward(trace.vqa_loss).unwrap();
        let gc = trace.tape.backward(nlls[0]).unwrap();
        for id in m.params.ids() {
            let v = trace.bound.var(id);
            let len = m.params.get(id).len();
            let j = gj.dense(v, len);
            let a = gv.dense(v, len);
            let b = gc.dense(v, len);
            for i in 0..len {
                assert!((j[i] - (a[i] + b[i])).abs() < 1e-10);
            }
        }
    }
}
