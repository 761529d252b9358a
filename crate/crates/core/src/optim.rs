//! Adam with gradient-additive L2 regularization.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, l2: f64) -> Self {
        Self {
            lr,
            l2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Matrix<T>>,
    pub second_moment: Vec<Matrix<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<I>(shapes: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let (first_moment, second_moment) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self {
            first_moment,
            second_moment,
            step: 0,
        }
    }
}

/// One Adam update over a list of parameter tensors.
///
/// `l2 * θ` is added to each gradient before the moment updates.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[&Matrix<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::Shape(format!(
                "adam: tensor {i} has parameter {:?}, gradient {:?}, state {:?}",
                p.shape(),
                g.shape(),
                state.first_moment[i].shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = lit::<T>(config.beta1);
    let b2 = lit::<T>(config.beta2);
    let one = T::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let lr = lit::<T>(config.lr);
    let l2 = lit::<T>(config.l2);
    let eps = lit::<T>(config.eps);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let values = p.as_mut_slice();
        for (((theta, &grad), m), v) in values
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            let grad = grad + l2 * *theta;
            *m = b1 * *m + (one - b1) * grad;
            *v = b2 * *v + (one - b2) * grad * grad;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
