//! Stochastic gradient descent with Nesterov momentum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Learning rate, momentum and one velocity per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocities mirroring `params`.
    pub fn new(params: &BTreeMap<String, Tensor<T>>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        let velocity = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok(OptimizerState { lr, momentum, velocity })
    }

    /// `v <- m v + g`, `w <- w - lr (g + m v)`.
    ///
    /// Every gradient is checked before any parameter moves, so a rejected
    /// step leaves both parameters and velocities untouched.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter {name}")))?;
            let v = self
                .velocity
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no velocity for parameter {name}")))?;
            if g.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "sgd step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} is {} at element {i}",
                    g.data()[i]
                )));
            }
        }
        let lr = T::of(self.lr);
        let m = T::of(self.momentum);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let v = self.velocity.get_mut(name).unwrap();
            for ((w, vel), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = m * *vel + gi;
                *w = *w - lr * (gi + m * *vel);
            }
        }
        Ok(())
    }
}
