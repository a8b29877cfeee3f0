use super::ParameterVector;
use crate::{Error, Result, Scalar};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Option<ParameterVector<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T) -> Result<Self> {
        if !(learning_rate >= T::zero()) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {learning_rate}"
            )));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: None,
        })
    }

    pub fn velocity(&self) -> Option<&ParameterVector<T>> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, params: &mut ParameterVector<T>, grads: &ParameterVector<T>) -> Result<()> {
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        sgd_step(params, grads, self.learning_rate, self.momentum, velocity)
    }
}

/// One momentum-SGD update applied in place to `params` and `velocity`.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterVector<T>,
    grads: &ParameterVector<T>,
    learning_rate: T,
    momentum: T,
    velocity: &mut ParameterVector<T>,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(velocity)?;
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.tensor.data())
            .zip(v.tensor.data_mut())
        {
            *vv = momentum * *vv + gv;
            *pv -= learning_rate * *vv;
        }
    }
    Ok(())
}
