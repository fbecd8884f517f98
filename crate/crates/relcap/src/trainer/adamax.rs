//! AdaMax updates over a parameter set, plus global-norm gradient clipping.

use crate::autodiff::ParamSet;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Infinity-norm variant of Adam. Moment buffers mirror the parameter set
/// entry for entry.
pub struct AdaMax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl AdaMax {
    pub fn new(ps: &ParamSet, lr: f64) -> AdaMax {
        let m = ps.ids().map(|id| vec![0.0; ps.get(id).len()]).collect();
        let u = ps.ids().map(|id| vec![0.0; ps.get(id).len()]).collect();
        AdaMax { lr, beta1: BETA1, beta2: BETA2, eps: EPS, step: 0, m, u }
    }

    /// One update from dense gradients aligned with the set by position.
    ///
    /// A NaN anywhere aborts before any state changes, naming the parameter
    /// it sat in.
    pub fn apply(&mut self, ps: &mut ParamSet, grads: &[Vec<f64>]) -> Result<(), TrainError> {
        if grads.len() != ps.len() {
            return Err(TrainError::GradLayout { got: grads.len(), expected: ps.len() });
        }
        for (i, id) in ps.ids().enumerate() {
            if grads[i].len() != ps.get(id).len() {
                return Err(TrainError::GradLayout { got: grads[i].len(), expected: ps.get(id).len() });
            }
            if grads[i].iter().any(|g| g.is_nan()) {
                return Err(TrainError::NanGradient { name: ps.name(id).to_string() });
            }
        }
        self.step += 1;
        let scale = self.lr / (1.0 - self.beta1.powi(self.step as i32));
        for (i, id) in ps.ids().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let u = &mut self.u[i];
            let theta = ps.get_mut(id).values_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                u[j] = (self.beta2 * u[j]).max(g[j].abs());
                theta[j] -= scale * m[j] / (u[j] + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the pre-clip
/// norm when clipping fired.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Option<f64> {
    let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= max_norm {
        return None;
    }
    let k = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= k;
        }
    }
    Some(norm)
}
