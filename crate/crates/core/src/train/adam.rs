//! Bias-corrected Adam with an L2 term on weight means.

use crate::error::{Error, Result};
use crate::zoo::{Model, ParamKind};
use crate::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// First moments, one per model parameter.
    pub m: Vec<Tensor>,
    /// Second moments, one per model parameter.
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`, default coefficients.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.params().iter().map(|p| &p.value))
    }
}

/// One update of a single tensor. `decay` is the L2 coefficient added to
/// the gradient as `decay * theta`; `step` is the already-incremented
/// step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    theta: &mut [Real],
    grad: Option<&[Real]>,
    m: &mut [Real],
    v: &mut [Real],
    state: (Real, Real, Real),
    step: u64,
    lr: Real,
    decay: Real,
) {
    let (b1, b2, eps) = state;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad.map_or(0.0, |g| g[i]) + decay * theta[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every trainable parameter of `model`.
///
/// `weight_decay` is applied to weight means (`mu`, which are the weights
/// of a point-estimate model) only. A missing gradient counts as zero.
/// Non-finite gradients abort before any parameter changes.
pub fn adam_step(
    model: &mut Model,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: Real,
    weight_decay: Real,
) -> Result<()> {
    let n = model.params().len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Consistency(format!(
            "{n} parameters, {} gradients, {} moment tensors",
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in model.params().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    state.step += 1;
    let coeffs = (state.beta1, state.beta2, state.eps);
    for (i, grad) in grads.iter().enumerate() {
        if !model.is_trainable(i) {
            continue;
        }
        let decay = if model.params()[i].kind == ParamKind::Mu {
            weight_decay
        } else {
            0.0
        };
        let theta = model.params_mut()[i].value.data_mut();
        adam_update(
            theta,
            grad.as_ref().map(Tensor::data),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            coeffs,
            state.step,
            lr,
            decay,
        );
    }
    Ok(())
}
