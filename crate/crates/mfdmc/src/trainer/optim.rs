//! Update rules (plain SGD and adaptive-moment) shared by the main trainer
//! and the baselines.
//!
//! Adaptive-moment keeps first/second moment estimates per parameter with
//! bias correction driven by the global step count. Rows that a batch never
//! touches (logits, per-entity biases) keep stale moments until next touched;
//! center matrices are small and update densely every step.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainSgd,
    AdaptiveMoment,
}

/// Hyperparameters of one update-rule instance. beta1/beta2/epsilon are
/// ignored under plain SGD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimHyper {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(crate::Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.kind == OptimizerKind::AdaptiveMoment {
            for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(0.0..1.0).contains(&beta) {
                    return Err(crate::Error::Config(format!(
                        "{name} must lie in [0, 1), got {beta}"
                    )));
                }
            }
            if !(self.epsilon > 0.0) {
                return Err(crate::Error::Config(format!(
                    "epsilon must be positive, got {}",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// First/second moment estimates shaped like one parameter matrix.
#[derive(Clone, Debug)]
pub struct MomentPair {
    pub m: Matrix,
    pub v: Matrix,
}

impl MomentPair {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MomentPair {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    pub fn like(shape: &Matrix) -> Self {
        Self::zeros(shape.rows(), shape.cols())
    }
}

/// Moment estimates for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct VecMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl VecMoments {
    pub fn zeros(len: usize) -> Self {
        VecMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Applies one update to a parameter slice. `moments` must be `Some` for
/// adaptive-moment (slices aligned with `params`); `step` is the 1-based
/// global step used for bias correction.
pub fn update_slice(
    params: &mut [f64],
    grads: &[f64],
    moments: Option<(&mut [f64], &mut [f64])>,
    hyper: &OptimHyper,
    step: u64,
) {
    debug_assert_eq!(params.len(), grads.len());
    match hyper.kind {
        OptimizerKind::PlainSgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= hyper.learning_rate * g;
            }
        }
        OptimizerKind::AdaptiveMoment => {
            let (m, v) = moments.expect("adaptive-moment update without moment state");
            debug_assert_eq!(m.len(), params.len());
            let c1 = 1.0 - hyper.beta1.powi(step as i32);
            let c2 = 1.0 - hyper.beta2.powi(step as i32);
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
            }
        }
    }
}

/// Update for a single scalar parameter (the global bias).
pub fn update_scalar(
    param: &mut f64,
    grad: f64,
    moments: Option<(&mut f64, &mut f64)>,
    hyper: &OptimHyper,
    step: u64,
) {
    let mut p = [*param];
    match moments {
        Some((m, v)) => {
            let mut ms = [*m];
            let mut vs = [*v];
            update_slice(&mut p, &[grad], Some((&mut ms, &mut vs)), hyper, step);
            *m = ms[0];
            *v = vs[0];
        }
        None => update_slice(&mut p, &[grad], None, hyper, step),
    }
    *param = p[0];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd(lr: f64) -> OptimHyper {
        OptimHyper {
            kind: OptimizerKind::PlainSgd,
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn adam(lr: f64) -> OptimHyper {
        OptimHyper {
            kind: OptimizerKind::AdaptiveMoment,
            ..sgd(lr)
        }
    }

    #[test]
    fn plain_sgd_moves_against_the_gradient() {
        let mut p = [0.0];
        update_slice(&mut p, &[1.0], None, &sgd(0.1), 1);
        assert!((p[0] + 0.1).abs() < 1e-15, "got {}", p[0]);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = [1.5, -2.0];
        update_slice(&mut p, &[0.0, 0.0], None, &sgd(0.1), 1);
        assert_eq!(p, [1.5, -2.0]);

        let mut moments = (vec![0.0; 2], vec![0.0; 2]);
        update_slice(
            &mut p,
            &[0.0, 0.0],
            Some((&mut moments.0, &mut moments.1)),
            &adam(0.1),
            1,
        );
        assert_eq!(p, [1.5, -2.0], "zero moments and zero gradient move nothing");
    }

    #[test]
    fn adaptive_first_step_magnitude_is_learning_rate() {
        let mut p = [0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        update_slice(&mut p, &[1.0], Some((&mut m, &mut v)), &adam(0.01), 1);
        // bias-corrected m̂ = v̂ = 1 at step 1 → update ≈ lr/(1 + eps)
        assert!((p[0] + 0.01).abs() < 1e-9, "got {}", p[0]);
    }

    #[test]
    fn validate_rejects_bad_hyperparameters() {
        assert!(sgd(0.0).validate().is_err());
        let mut bad = adam(0.1);
        bad.beta1 = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = adam(0.1);
        bad.epsilon = 0.0;
        assert!(bad.validate().is_err());
        assert!(adam(0.1).validate().is_ok());
    }
}
