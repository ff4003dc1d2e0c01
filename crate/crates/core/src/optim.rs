//! SGD with momentum.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::ParamId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("momentum must lie in [0, 1), got {0}")]
    Momentum(f64),
    #[error("non-finite gradient for parameter {0}; step aborted")]
    NonFiniteGradient(ParamId),
    #[error("gradient for parameter {id} has {actual} elements, parameter has {expected}")]
    Length { id: ParamId, expected: usize, actual: usize },
}

/// `v <- momentum * v + g; p <- p - lr * v`, per parameter, in place.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self, OptimError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::Momentum(momentum));
        }
        Ok(Sgd {
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update to every `(id, param, grad)` triple.
    ///
    /// All gradients are validated before any parameter moves, so a
    /// non-finite gradient leaves every parameter untouched.
    pub fn step<'a>(&mut self, lr: f64, items: impl IntoIterator<Item = (ParamId, &'a mut [f64], &'a [f64])>) -> Result<(), OptimError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(OptimError::LearningRate(lr));
        }
        let items: Vec<_> = items.into_iter().collect();
        for (id, p, g) in &items {
            if p.len() != g.len() {
                return Err(OptimError::Length {
                    id: *id,
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(OptimError::NonFiniteGradient(*id));
            }
        }
        for (id, p, g) in items {
            let v = self.velocity.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut opt = Sgd::new(0.0).unwrap();
        let mut p = [1.0];
        opt.step(0.1, [(0, &mut p[..], &[0.5][..])]).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion() {
        let mut opt = Sgd::new(0.9).unwrap();
        let mut p = [0.0];
        opt.step(0.1, [(0, &mut p[..], &[1.0][..])]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        opt.step(0.1, [(0, &mut p[..], &[1.0][..])]).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut opt = Sgd::new(0.5).unwrap();
        let mut p = [3.25];
        opt.step(0.1, [(0, &mut p[..], &[0.0][..])]).unwrap();
        assert_eq!(p[0], 3.25);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut opt = Sgd::new(0.0).unwrap();
        let mut a = [1.0];
        let mut b = [2.0];
        let err = opt
            .step(0.1, [(0, &mut a[..], &[1.0][..]), (1, &mut b[..], &[f64::NAN][..])])
            .unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient(1));
        assert_eq!((a[0], b[0]), (1.0, 2.0));
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(Sgd::new(1.0).is_err());
        assert!(Sgd::new(-0.1).is_err());
        let mut opt = Sgd::new(0.0).unwrap();
        let mut p = [1.0];
        assert_eq!(opt.step(0.0, [(0, &mut p[..], &[1.0][..])]), Err(OptimError::LearningRate(0.0)));
    }
}
