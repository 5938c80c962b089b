//! SGD-with-momentum and RMSprop parameter updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Named parameter set, ordered for deterministic iteration.
pub type ParamSet<S> = BTreeMap<String, Tensor<S>>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Rmsprop => write!(f, "rmsprop"),
        }
    }
}

/// Per-parameter accumulator state for one optimizer run.
///
/// SGD: `v <- momentum*v + g; theta <- theta - lr*v`.
/// RMSprop: `s <- rho*s + (1-rho)*g^2; theta <- theta - lr*g/sqrt(s + 1e-8)`.
pub struct OptimizerState<S> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_rate: f64,
    accum: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, momentum: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Argument(format!(
                "learning rate {} must be positive",
                learning_rate
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Argument(format!(
                "momentum {} outside [0,1)",
                momentum
            )));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            momentum,
            decay_rate: 0.9,
            accum: BTreeMap::new(),
        })
    }

    /// Apply one update to every parameter with a matching gradient.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>) -> Result<()> {
        for (name, theta) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if g.shape() != theta.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} vs parameter {:?} for {}",
                    g.shape(),
                    theta.shape(),
                    name
                )));
            }
            let acc = self
                .accum
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            match self.kind {
                OptimizerKind::Sgd => {
                    let m = S::of(self.momentum);
                    let lr = S::of(self.learning_rate);
                    for ((v, &gv), t) in acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(theta.data_mut())
                    {
                        *v = m * *v + gv;
                        *t = *t - lr * *v;
                    }
                }
                OptimizerKind::Rmsprop => {
                    let rho = S::of(self.decay_rate);
                    let one_minus = S::of(1.0 - self.decay_rate);
                    let lr = S::of(self.learning_rate);
                    let eps = S::of(1e-8);
                    for ((s, &gv), t) in acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(theta.data_mut())
                    {
                        *s = rho * *s + one_minus * gv * gv;
                        *t = *t - lr * gv / (*s + eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}

/// Glorot-uniform initialization in `+-sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform<S: Scalar, R: rand::Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::of((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product mismatch is impossible here")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::scalar(v));
        p
    }

    #[test]
    fn sgd_without_momentum_moves_by_lr() {
        let mut params = one_param(1.0);
        let grads = one_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.01, 0.0).unwrap();
        opt.step(&mut params, &grads).unwrap();
        assert!((params["w"].data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_step_recurrence() {
        // v1 = 1, v2 = 0.9 + 1 = 1.9 => total delta = -lr * (1 + 1.9).
        let mut params = one_param(0.0);
        let grads = one_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, 0.9).unwrap();
        opt.step(&mut params, &grads).unwrap();
        opt.step(&mut params, &grads).unwrap();
        assert!((params["w"].data()[0] + 0.1 * (1.0 + 1.9)).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_zero_gradient_leaves_params() {
        let mut params = one_param(0.5);
        let grads = one_param(0.0);
        let mut opt = OptimizerState::new(OptimizerKind::Rmsprop, 0.001, 0.0).unwrap();
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data()[0], 0.5);
    }

    #[test]
    fn rmsprop_single_step_closed_form() {
        let mut params = one_param(0.0);
        let grads = one_param(2.0);
        let mut opt = OptimizerState::new(OptimizerKind::Rmsprop, 0.01, 0.0).unwrap();
        opt.step(&mut params, &grads).unwrap();
        let s = 0.1 * 4.0;
        let want = -0.01 * 2.0 / (s + 1e-8f64).sqrt();
        assert!((params["w"].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(OptimizerState::<f64>::new(OptimizerKind::Sgd, 0.0, 0.0).is_err());
        assert!(OptimizerState::<f64>::new(OptimizerKind::Sgd, 0.1, 1.0).is_err());
    }

    #[test]
    fn mismatched_gradient_shape_is_error() {
        let mut params = one_param(0.0);
        let mut grads = ParamSet::new();
        grads.insert("w".into(), Tensor::zeros(&[2]));
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, 0.0).unwrap();
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn glorot_respects_bound() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = glorot_uniform(&[50, 50], 50, 50, &mut rng);
        let bound = (6.0 / 100.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > bound * 0.5));
    }
}
