//! Stochastic gradient descent with Nesterov momentum.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mutable view of one trainable parameter handed to the optimizer.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    /// Binary mask; positions with 0 are frozen at zero.
    pub mask: Option<&'a Tensor<T>>,
    /// Batch-norm affine parameters (weight decay on them is configurable).
    pub is_norm: bool,
}

/// Velocity buffers plus hyper-parameters. `learning_rate` is set by the
/// training loop before every step.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_norm_params: bool,
    pub learning_rate: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "sgd",
                format!("momentum {momentum} not in [0, 1)"),
            ));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(Error::invalid(
                "sgd",
                format!("weight decay {weight_decay} < 0"),
            ));
        }
        Ok(OptimizerState {
            momentum,
            weight_decay,
            decay_norm_params: true,
            learning_rate: 0.0,
            velocity: Vec::new(),
        })
    }

    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Restores buffers saved from a previous run.
    pub fn set_velocities(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }

    /// Zeroes the velocity at every masked position of parameter `index`.
    pub fn apply_mask(&mut self, index: usize, mask: &Tensor<T>) {
        if let Some(v) = self.velocity.get_mut(index) {
            for (vi, &m) in v.iter_mut().zip(mask.data()) {
                if m == T::zero() {
                    *vi = T::zero();
                }
            }
        }
    }

    /// One update of every parameter, in order:
    /// `g = grad + wd·w; v = μ·v + g; w -= lr·(g + μ·v)`.
    pub fn step(&mut self, params: &mut [ParamMut<'_, T>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.len()])
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd",
                left_name: "velocity buffers",
                left: self.velocity.len(),
                right_name: "parameters",
                right: params.len(),
            });
        }
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(self.learning_rate);
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let wd = if p.is_norm && !self.decay_norm_params {
                T::zero()
            } else {
                T::from_f64_lossy(self.weight_decay)
            };
            if v.len() != p.tensor.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    left_name: "velocity length",
                    left: v.len(),
                    right_name: "parameter length",
                    right: p.tensor.len(),
                });
            }
            let grad = p
                .tensor
                .grad
                .take()
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            let mask = p.mask.map(|m| m.data());
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                if mask.is_some_and(|m| m[i] == T::zero()) {
                    v[i] = T::zero();
                    continue;
                }
                let g = grad[i] + wd * w[i];
                v[i] = mu * v[i] + g;
                w[i] -= lr * (g + mu * v[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, grad: f64) -> Tensor<f64> {
        let mut t = Tensor::from_vec(&[1], vec![w]).unwrap();
        t.grad = Some(vec![grad]);
        t
    }

    fn step(opt: &mut OptimizerState<f64>, t: &mut Tensor<f64>, mask: Option<&Tensor<f64>>) {
        let mut ps = [ParamMut {
            name: "w".into(),
            tensor: t,
            mask,
            is_norm: false,
        }];
        opt.step(&mut ps).unwrap();
    }

    #[test]
    fn nesterov_hand_evaluation() {
        let mut opt = OptimizerState::<f64>::new(0.9, 0.0).unwrap();
        opt.learning_rate = 0.1;
        let mut t = one_param(1.0, 1.0);
        step(&mut opt, &mut t, None);
        assert_eq!(opt.velocities()[0], vec![1.0]);
        assert!((t.data()[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut opt = OptimizerState::<f64>::new(0.9, 1e-4).unwrap();
        let mut t = one_param(0.7, 3.0);
        step(&mut opt, &mut t, None);
        assert_eq!(t.data()[0], 0.7);
    }

    #[test]
    fn weight_decay_only() {
        // g = 1e-4, v = 1e-4, w = 1 - 1·(1e-4 + 0·v)
        let mut opt = OptimizerState::<f64>::new(0.0, 1e-4).unwrap();
        opt.learning_rate = 1.0;
        let mut t = one_param(1.0, 0.0);
        step(&mut opt, &mut t, None);
        assert!((t.data()[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn masked_positions_frozen() {
        let mut opt = OptimizerState::<f64>::new(0.9, 1e-4).unwrap();
        opt.learning_rate = 0.5;
        let mask = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let mut t = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        for _ in 0..10 {
            t.grad = Some(vec![5.0, 1.0]);
            step(&mut opt, &mut t, Some(&mask));
        }
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(opt.velocities()[0][0], 0.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = OptimizerState::<f64>::new(0.9, 0.0).unwrap();
        let mut t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut ps = [ParamMut {
            name: "w".into(),
            tensor: &mut t,
            mask: None,
            is_norm: false,
        }];
        assert!(matches!(opt.step(&mut ps), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(OptimizerState::<f64>::new(1.0, 0.0).is_err());
        assert!(OptimizerState::<f64>::new(0.9, -1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn masked_weights_stay_zero(
            grads in proptest::collection::vec(-1e3f64..1e3, 8..64),
            lr in 0.0f64..2.0,
            steps in 1..50usize,
        ) {
            let n = grads.len();
            let mask = Tensor::from_vec(&[n], (0..n).map(|i| (i % 3 != 0) as u8 as f64).collect()).unwrap();
            let mut t = Tensor::from_vec(&[n], (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
            let mut opt = OptimizerState::<f64>::new(0.9, 1e-4).unwrap();
            opt.learning_rate = lr;
            for _ in 0..steps {
                t.grad = Some(grads.clone());
                step(&mut opt, &mut t, Some(&mask));
            }
            for i in (0..n).step_by(3) {
                proptest::prop_assert_eq!(t.data()[i], 0.0);
            }
        }
    }
}
