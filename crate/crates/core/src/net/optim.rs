//! Parameter update rules: Adam, SGD with momentum, and the step LR policy.

use serde::{Deserialize, Serialize};

use super::NetError;
use crate::tensor::{Scalar, Tensor};

/// Optimizer hyperparameters, chosen per training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
    SgdMomentum {
        lr: f32,
        momentum: f32,
    },
}

impl OptimizerKind {
    pub fn base_lr(&self) -> f32 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::SgdMomentum { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: &str| Err(NetError::ConfigInvalid(msg.into()));
        match *self {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                if lr <= 0.0 {
                    return bad("adam lr must be positive");
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad("adam betas must lie in [0,1)");
                }
                if eps <= 0.0 {
                    return bad("adam eps must be positive");
                }
            }
            OptimizerKind::SgdMomentum { lr, momentum } => {
                if lr <= 0.0 {
                    return bad("sgd lr must be positive");
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum must lie in [0,1)");
                }
            }
        }
        Ok(())
    }
}

/// Mutable optimizer state, one entry per parameter tensor.
#[derive(Debug, Clone)]
pub enum OptState<T> {
    Adam {
        t: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    },
    Momentum {
        v: Vec<Tensor<T>>,
    },
}

impl<T: Scalar> OptState<T> {
    pub fn new(kind: &OptimizerKind, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        match kind {
            OptimizerKind::Adam { .. } => OptState::Adam {
                t: 0,
                m: zeros(),
                v: zeros(),
            },
            OptimizerKind::SgdMomentum { .. } => OptState::Momentum { v: zeros() },
        }
    }
}

fn check_finite<T: Scalar>(grads: &[&Tensor<T>]) -> Result<(), NetError> {
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(NetError::NonFiniteGradient(format!("parameter {i}")));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. `state.t` advances by one.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptState<T>,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<(), NetError> {
    check_finite(grads)?;
    let OptState::Adam { t, m, v } = state else {
        return Err(NetError::ConfigInvalid("adam step on non-adam state".into()));
    };
    *t += 1;
    let (b1, b2) = (T::from_f32(beta1), T::from_f32(beta2));
    let one = T::one();
    let bc1 = one - T::from_f64((beta1 as f64).powi(*t as i32));
    let bc2 = one - T::from_f64((beta2 as f64).powi(*t as i32));
    let lr = T::from_f32(lr);
    let eps = T::from_f32(eps);
    for ((p, g), (mt, vt)) in params.iter_mut().zip(grads).zip(m.iter_mut().zip(v.iter_mut())) {
        let pd = p.data_mut();
        let gd = g.data();
        let md = mt.data_mut();
        let vd = vt.data_mut();
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (one - b1) * gd[i];
            vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Momentum update: `v <- mu*v + g; p <- p - lr*v`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptState<T>,
    lr: f32,
    momentum: f32,
) -> Result<(), NetError> {
    check_finite(grads)?;
    let OptState::Momentum { v } = state else {
        return Err(NetError::ConfigInvalid("momentum step on non-momentum state".into()));
    };
    let mu = T::from_f32(momentum);
    let lr = T::from_f32(lr);
    for ((p, g), vt) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
        let pd = p.data_mut();
        let gd = g.data();
        let vd = vt.data_mut();
        for i in 0..pd.len() {
            vd[i] = mu * vd[i] + gd[i];
            pd[i] = pd[i] - lr * vd[i];
        }
    }
    Ok(())
}

/// Step policy: `lr = lr0 * gamma^floor(epoch / step)`.
pub fn step_lr(epoch: usize, lr0: f32, gamma: f32, step: usize) -> f32 {
    debug_assert!(step >= 1);
    lr0 * gamma.powi((epoch / step.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(&[n], v)
    }

    #[test]
    fn adam_zero_gradient_means_zero_update() {
        let mut p = single(vec![1.0, -2.0]);
        let g = single(vec![0.0, 0.0]);
        let mut state = OptState::new(
            &OptimizerKind::Adam {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &[&p],
        );
        adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_near_lr() {
        // with constant gradient, m_hat = g and v_hat = g^2, so the update is
        // -lr * g / (|g| + eps-scale) with magnitude ~ lr
        let mut p = single(vec![0.0]);
        let g = single(vec![3.0]);
        let mut state = OptState::new(
            &OptimizerKind::Adam {
                lr: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &[&p],
        );
        adam_step(&mut [&mut p], &[&g], &mut state, 0.05, 0.9, 0.999, 1e-8).unwrap();
        // hyperparameters pass through f32, so the closed form must too
        let (lr, eps) = (0.05f32 as f64, 1e-8f32 as f64);
        let expected = -lr * 3.0 / (3.0 + eps);
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert!((p.data()[0].abs() - 0.05).abs() < 1e-7);
    }

    /// Independent scalar Adam, coded from the update equations.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, p: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mh = self.m / (1.0 - b1.powi(self.t));
            let vh = self.v / (1.0 - b2.powi(self.t));
            p - lr * mh / (vh.sqrt() + eps)
        }
    }

    #[test]
    fn adam_on_quadratic_matches_scalar_oracle() {
        // minimize f(p) = (p-3)^2/2, gradient p-3
        let mut p = single(vec![10.0]);
        let mut state = OptState::new(
            &OptimizerKind::Adam {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &[&p],
        );
        let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        let mut op = 10.0f64;
        // oracle shares the f32-cast hyperparameter values
        let (lr, b1, b2, eps) = (0.1f32 as f64, 0.9f32 as f64, 0.999f32 as f64, 1e-8f32 as f64);
        for _ in 0..100 {
            let g = single(vec![p.data()[0] - 3.0]);
            adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
            op = oracle.step(op, op - 3.0, lr, b1, b2, eps);
            assert!((p.data()[0] - op).abs() < 1e-10);
        }
        assert!((p.data()[0] - 3.0).abs() < 2.0, "should move toward the minimum");
    }

    #[test]
    fn momentum_zero_mu_is_plain_sgd() {
        let mut p = single(vec![1.0]);
        let g = single(vec![0.5]);
        // 0.25 is exact in f32
        let mut state =
            OptState::new(&OptimizerKind::SgdMomentum { lr: 0.25, momentum: 0.0 }, &[&p]);
        sgd_momentum_step(&mut [&mut p], &[&g], &mut state, 0.25, 0.0).unwrap();
        assert!((p.data()[0] - (1.0 - 0.25 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn momentum_zero_gradients_keep_params_fixed() {
        let mut p = single(vec![4.0]);
        let g = single(vec![0.0]);
        let mut state = OptState::new(&OptimizerKind::SgdMomentum { lr: 0.2, momentum: 0.9 }, &[&p]);
        for _ in 0..10 {
            sgd_momentum_step(&mut [&mut p], &[&g], &mut state, 0.2, 0.9).unwrap();
        }
        assert_eq!(p.data(), &[4.0]);
    }

    #[test]
    fn momentum_two_steps_unroll() {
        // v1 = g, p1 = p0 - a*g; v2 = mu*g + g, p2 = p1 - a*(mu+1)*g
        // total: p2 = p0 - a*g*(2 + mu)
        let (a, mu, g0) = (0.1f64, 0.7f64, 2.0f64);
        let mut p = single(vec![0.0]);
        let g = single(vec![g0]);
        let mut state = OptState::new(
            &OptimizerKind::SgdMomentum { lr: a as f32, momentum: mu as f32 },
            &[&p],
        );
        for _ in 0..2 {
            sgd_momentum_step(&mut [&mut p], &[&g], &mut state, a as f32, mu as f32).unwrap();
        }
        let expected = -a * g0 * (2.0 + mu);
        assert!((p.data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut p = single(vec![0.0]);
        let g = single(vec![f64::NAN]);
        let mut state = OptState::new(
            &OptimizerKind::Adam { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            &[&p],
        );
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.9, 0.999, 1e-8),
            Err(NetError::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn step_lr_schedule() {
        assert_eq!(step_lr(0, 0.1, 0.5, 10), 0.1);
        assert_eq!(step_lr(25, 0.1, 1.0, 10), 0.1);
        let lr = step_lr(25, 0.1, 0.1, 10);
        assert!((lr - 0.001).abs() < 1e-9);
    }
}
