use crate::scalar::Scalar;

use super::config::OptimizerKind;
use super::TrainerError;

/// Plain gradient descent `θ ← θ − η·g`.
pub fn optimizer_step<T: Scalar>(params: &mut [T], grads: &[T], lr: T) -> Result<(), TrainerError> {
    if params.len() != grads.len() {
        return Err(TrainerError::MissingGradient {
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * g;
    }
    Ok(())
}

/// Update rule with its per-parameter state.
///
/// Adam, at step t with gradient g:
///
/// ```text
/// m ← β1·m + (1 − β1)·g
/// v ← β2·v + (1 − β2)·g²
/// θ ← θ − η · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
/// ```
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd { lr: T },
    Adam {
        lr: T,
        beta1: T,
        beta2: T,
        eps: T,
        t: i32,
        m: Vec<T>,
        v: Vec<T>,
    },
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(lr: T) -> Self {
        Self::Sgd { lr }
    }

    pub fn adam(lr: T, beta1: T, beta2: T, eps: T, n: usize) -> Self {
        Self::Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn from_kind(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(T::of(lr)),
            OptimizerKind::Adam => Self::adam(T::of(lr), T::of(beta1), T::of(beta2), T::of(eps), n),
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), TrainerError> {
        match self {
            Self::Sgd { lr } => optimizer_step(params, grads, *lr),
            Self::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                if params.len() != grads.len() || params.len() != m.len() {
                    return Err(TrainerError::MissingGradient {
                        expected: m.len(),
                        found: grads.len(),
                    });
                }
                *t += 1;
                let one = T::one();
                let c1 = one - beta1.powi(*t);
                let c2 = one - beta2.powi(*t);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = *beta1 * m[i] + (one - *beta1) * g;
                    v[i] = *beta2 * v[i] + (one - *beta2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    params[i] = params[i] - *lr * mhat / (vhat.sqrt() + *eps);
                }
                Ok(())
            }
        }
    }
}
