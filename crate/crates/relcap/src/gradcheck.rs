//! Central finite-difference verification of recorded gradients.
//!
//! Every analytic gradient in this codebase is ultimately defended by one of
//! these checks: perturb a coordinate by ±h, re-run the forward pass, and
//! compare (f(x+h) − f(x−h)) / 2h against the recorded value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{ParamId, ParamSet, TapeError, Var};
use crate::data::{END, START};
use crate::model::{Model, ModelConfig};
use crate::selection;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CheckSummary {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
}

impl CheckSummary {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    pub fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some(WorstCoordinate {
                label: label.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(&mut self, other: &CheckSummary) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
/// The floor sits above the roundoff a central difference leaves on a loss of
/// magnitude ~1e2 at the default step; a genuinely wrong gradient of that size
/// still reads as a large error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Check the gradient of `loss` with respect to the listed parameters.
///
/// `analytic` pairs each parameter with its full gradient, in the same order.
/// `loss` must rebuild the forward pass from the parameter set it is handed;
/// the set is restored to its original values before returning.
pub fn check_params<F>(
    ps: &mut ParamSet,
    ids: &[ParamId],
    analytic: &[Vec<f64>],
    mut loss: F,
    step: f64,
) -> CheckSummary
where
    F: FnMut(&ParamSet) -> f64,
{
    assert_eq!(ids.len(), analytic.len(), "one gradient per checked parameter");
    let mut summary = CheckSummary::default();
    for (id, grad) in ids.iter().zip(analytic) {
        let len = ps.get(*id).len();
        assert_eq!(grad.len(), len, "gradient length mismatch for {}", ps.name(*id));
        let label = ps.name(*id).to_string();
        for j in 0..len {
            let orig = ps.get(*id).values()[j];
            ps.get_mut(*id).values_mut()[j] = orig + step;
            let up = loss(ps);
            ps.get_mut(*id).values_mut()[j] = orig - step;
            let down = loss(ps);
            ps.get_mut(*id).values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            summary.record(&label, j, grad[j], numeric);
        }
    }
    summary
}

/// Check a gradient with respect to a free vector the caller owns.
/// Used where the differentiated quantity is not a parameter, e.g. the
/// per-object attended features.
pub fn check_vector<F>(
    vals: &mut [f64],
    analytic: &[f64],
    mut loss: F,
    step: f64,
    label: &str,
) -> CheckSummary
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(vals.len(), analytic.len());
    let mut summary = CheckSummary::default();
    for j in 0..vals.len() {
        let orig = vals[j];
        vals[j] = orig + step;
        let up = loss(vals);
        vals[j] = orig - step;
        let down = loss(vals);
        vals[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        summary.record(label, j, analytic[j], numeric);
    }
    summary
}

/// Problem sizes for the end-to-end joint-loss check.
#[derive(Clone, Copy, Debug)]
pub struct JointDims {
    pub objects: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub captions: usize,
    pub caption_tokens: usize,
    pub answers: usize,
}

impl Default for JointDims {
    fn default() -> Self {
        JointDims {
            objects: 3,
            feature_dim: 4,
            hidden: 5,
            captions: 2,
            caption_tokens: 4,
            answers: 3,
        }
    }
}

pub struct NamedCheck {
    pub name: String,
    pub summary: CheckSummary,
}

/// Finite-difference the full joint loss on a randomized small model: once
/// over every parameter through the real feature path, then over each
/// attended object row treated as a free variable. The caption choice is
/// frozen at the unperturbed point so every probe evaluates one smooth
/// functional.
pub fn joint_suite(
    dims: &JointDims,
    seed: u64,
    step: f64,
) -> Result<Vec<NamedCheck>, TapeError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let qvocab = 9;
    let cvocab = 11;
    let cfg = ModelConfig {
        embed_dim: 4,
        hidden_dim: dims.hidden,
        attn_dim: 4,
        decoder_att_dim: 5,
        decoder_lang_dim: 5,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, qvocab, cvocab, dims.answers, dims.feature_dim, seed);

    let question: Vec<usize> = (0..3).map(|_| rng.gen_range(4..qvocab)).collect();
    let captions: Vec<Vec<usize>> = (0..dims.captions)
        .map(|_| {
            let mut c = vec![START];
            c.extend((0..dims.caption_tokens).map(|_| rng.gen_range(4..cvocab)));
            c.push(END);
            c
        })
        .collect();
    let features: Vec<f64> =
        (0..dims.objects * dims.feature_dim).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let mask = vec![true; dims.objects];
    let targets: Vec<f64> = (0..dims.answers).map(|_| rng.gen_range(0.05..0.95)).collect();

    let mut checks = Vec::new();

    let mut trace = model.forward(&question, &features, &mask, &captions, &targets, None)?;
    let nlls: Vec<Var> = trace.caption_nlls.iter().map(|c| c.nll).collect();
    let choice = selection::report(&trace, 0.0)?.selected;
    let loss = selection::joint_loss(&mut trace.tape, trace.vqa_loss, &nlls, choice)?;
    let g = trace.tape.backward(loss)?;
    let ids: Vec<ParamId> = model.params.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| g.dense(trace.bound.var(*id), model.params.get(*id).len()))
        .collect();
    let mut ps = model.params.clone();
    let summary = check_params(
        &mut ps,
        &ids,
        &analytic,
        |ps| {
            let tr = model
                .forward_with(ps, &question, &features, &mask, &captions, &targets, None)
                .expect("perturbed forward");
            let mut v = tr.tape.value(tr.vqa_loss).item();
            if let Some(i) = choice {
                v += tr.tape.value(tr.caption_nlls[i].nll).item();
            }
            v
        },
        step,
    );
    checks.push(NamedCheck { name: "joint loss / parameters".into(), summary });

    let rows: Vec<Vec<f64>> = (0..dims.objects)
        .map(|_| (0..dims.hidden).map(|_| rng.gen_range(-0.8..0.8)).collect())
        .collect();
    let mut free = model.forward(&question, &[], &[], &captions, &targets, Some(&rows))?;
    let free_nlls: Vec<Var> = free.caption_nlls.iter().map(|c| c.nll).collect();
    let free_choice = selection::report(&free, 0.0)?.selected;
    let free_loss =
        selection::joint_loss(&mut free.tape, free.vqa_loss, &free_nlls, free_choice)?;
    let gf = free.tape.backward(free_loss)?;
    for k in 0..dims.objects {
        let analytic_k = gf.dense(free.objects[k], dims.hidden);
        let label = format!("joint loss / v^q[{k}]");
        let mut row = rows[k].clone();
        let summary = check_vector(
            &mut row,
            &analytic_k,
            |vals| {
                let mut probe = rows.clone();
                probe[k] = vals.to_vec();
                let tr = model
                    .forward(&question, &[], &[], &captions, &targets, Some(&probe))
                    .expect("perturbed forward");
                let mut v = tr.tape.value(tr.vqa_loss).item();
                if let Some(i) = free_choice {
                    v += tr.tape.value(tr.caption_nlls[i].nll).item();
                }
                v
            },
            step,
            &label,
        );
        checks.push(NamedCheck { name: label, summary });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Linear, ParamSet, Tape, Tensor};

    fn probe_loss(ps: &ParamSet, lin: &Linear, x: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let bd = ps.bind(&mut t);
        let xv = t.input(Tensor::vector(x.to_vec()));
        let y = lin.fc(&mut t, &bd, xv, 0.01).unwrap();
        let s = t.sigmoid(y);
        let loss = t.sum_axis(s, 0).unwrap();
        let g = t.backward(loss).unwrap();
        let grads = vec![
            g.dense(bd.var(lin.w), ps.get(lin.w).len()),
            g.dense(bd.var(lin.b), ps.get(lin.b).len()),
        ];
        (t.value(loss).item(), grads)
    }

    #[test]
    fn analytic_matches_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "p", 4, 3, &mut rng);
        let x = [0.3, -1.1, 0.8, 2.0];
        let (_, grads) = probe_loss(&ps, &lin, &x);
        let ids = [lin.w, lin.b];
        let summary = check_params(
            &mut ps,
            &ids,
            &grads,
            |ps| probe_loss(ps, &lin, &x).0,
            DEFAULT_STEP,
        );
        assert!(summary.passes(DEFAULT_TOLERANCE), "max err {}", summary.max_rel_err);
        assert_eq!(summary.checked, 4 * 3 + 3);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "p", 2, 2, &mut rng);
        let x = [1.0, -0.5];
        let (_, mut grads) = probe_loss(&ps, &lin, &x);
        grads[0][0] += 0.5;
        let ids = [lin.w, lin.b];
        let summary = check_params(
            &mut ps,
            &ids,
            &grads,
            |ps| probe_loss(ps, &lin, &x).0,
            DEFAULT_STEP,
        );
        assert!(!summary.passes(DEFAULT_TOLERANCE));
        let worst = summary.worst.unwrap();
        assert_eq!(worst.label, "p.w");
        assert_eq!(worst.index, 0);
    }

    #[test]
    fn joint_suite_passes_on_default_dims() {
        let checks = joint_suite(&JointDims::default(), 3, DEFAULT_STEP).unwrap();
        assert_eq!(checks.len(), 4);
        for c in &checks {
            assert!(c.summary.checked > 0);
            assert!(c.summary.passes(DEFAULT_TOLERANCE), "{}: {}", c.name, c.summary.max_rel_err);
        }
    }

    #[test]
    fn vector_check_on_quadratic() {
        let mut vals = vec![0.7, -0.2, 1.9];
        let analytic: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        let summary = check_vector(
            &mut vals,
            &analytic,
            |v| v.iter().map(|x| x * x).sum(),
            DEFAULT_STEP,
            "x",
        );
        assert!(summary.passes(1e-8), "quadratic should be near-exact under central differences");
    }
}
