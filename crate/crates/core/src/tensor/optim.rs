use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::Tensor;

/// One heavy-ball update: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim(
            "sgd_momentum_step",
            &[param.len()],
            &[grad.len(), velocity.len()],
        ));
    }
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with momentum over a named parameter set. Velocities are keyed by
/// parameter name and created lazily at zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocities: IndexMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocities: IndexMap::new(),
        }
    }

    pub fn velocities(&self) -> &IndexMap<String, Vec<f64>> {
        &self.velocities
    }

    pub fn set_velocity(&mut self, name: &str, v: Vec<f64>) {
        self.velocities.insert(name.to_string(), v);
    }

    /// Updates every parameter that carries a gradient. Parameters without
    /// a gradient (frozen, or unused by the forward pass) are left alone.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        lr: f64,
    ) -> Result<()> {
        for (name, t) in params {
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad.take() else {
                continue;
            };
            let v = self
                .velocities
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let res = sgd_momentum_step(&mut t.data, &grad, v, lr, self.momentum);
            t.grad = Some(grad);
            res?;
        }
        Ok(())
    }
}
