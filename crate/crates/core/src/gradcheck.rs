//! Central-difference gradient checking on small networks.

use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::{LayerSpec, ModelConfig, WeightSet};
use crate::trainer::{objective_gradient, Objective, TeacherBatch, TrainConfig};

/// A network with every dimension ≤ 8 and a 5-frame receptive field, so a
/// 12-frame utterance is enough.
pub fn tiny_config(num_speakers: usize, low_rank: bool) -> ModelConfig {
    let r = |k: usize| if low_rank { Some(k) } else { None };
    ModelConfig {
        input_dim: 3,
        tdnn: vec![
            LayerSpec { context: vec![-1, 0, 1], in_dim: 3, out_dim: 6, rank: None },
            LayerSpec { context: vec![-1, 1], in_dim: 6, out_dim: 5, rank: r(3) },
            LayerSpec { context: vec![0], in_dim: 5, out_dim: 6, rank: r(2) },
            LayerSpec { context: vec![0], in_dim: 6, out_dim: 4, rank: r(3) },
            LayerSpec { context: vec![0], in_dim: 4, out_dim: 7, rank: r(2) },
        ],
        embed_dim: 5,
        num_speakers,
        width_factor: 1.0,
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
    /// among parameters whose discrepancy exceeds the difference quotient's
    /// rounding resolution.
    pub max_rel_err: f64,
    /// Matrix index and flat entry of the worst such parameter.
    pub worst: (usize, usize),
    /// Largest relative error over every parameter, resolvable or not.
    pub max_rel_err_raw: f64,
    /// Parameters whose discrepancy is within rounding resolution but whose
    /// relative error exceeds `1e-4`.
    pub unresolved: usize,
    pub checked: usize,
}

/// Denominator floor so parameters with (near-)zero gradient are compared
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Rounding in `L(w ± ε)` limits a central difference to about
/// `ulps · machine-ε · |L| / ε`; discrepancies below that carry no signal.
pub const FD_RESOLUTION_ULPS: f64 = 8.0;

pub fn fd_resolution(loss_plus: f64, loss_minus: f64, eps: f64) -> f64 {
    FD_RESOLUTION_ULPS * f64::EPSILON * loss_plus.abs().max(loss_minus.abs()) / eps
}

/// Compares `analytic` against central differences of `loss` over every
/// parameter of `weights`.
pub fn compare(weights: &WeightSet, analytic: &WeightSet, eps: f64, loss: impl Fn(&WeightSet) -> Result<f64>) -> Result<GradCheck> {
    let mut out = GradCheck { max_rel_err: 0.0, worst: (0, 0), max_rel_err_raw: 0.0, unresolved: 0, checked: 0 };
    let count = weights.matrices().len();
    for mi in 0..count {
        let len = weights.matrices()[mi].as_slice().len();
        for e in 0..len {
            let mut plus = weights.clone();
            plus.matrices_mut()[mi].as_mut_slice()[e] += eps;
            let mut minus = weights.clone();
            minus.matrices_mut()[mi].as_mut_slice()[e] -= eps;
            let (lp, lm) = (loss(&plus)?, loss(&minus)?);
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.matrices()[mi].as_slice()[e];
            let err = rel_err(a, numeric);
            out.max_rel_err_raw = out.max_rel_err_raw.max(err);
            if (a - numeric).abs() <= fd_resolution(lp, lm, eps) {
                out.unresolved += (err > 1e-4) as usize;
            } else if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = (mi, e);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Gradient check of one objective on one batch.
pub fn check_objective(
    config: &ModelConfig,
    weights: &WeightSet,
    chunks: &[Matrix],
    labels: &[usize],
    objective: Objective,
    teacher: Option<&TeacherBatch>,
    tc: &TrainConfig,
    eps: f64,
) -> Result<GradCheck> {
    let (_, analytic) = objective_gradient(config, weights, chunks, labels, objective, teacher, tc)?;
    compare(weights, &analytic, eps, |w| {
        objective_gradient(config, w, chunks, labels, objective, teacher, tc).map(|(v, _)| v)
    })
}
