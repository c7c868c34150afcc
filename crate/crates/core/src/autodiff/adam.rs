use super::tensor::Tensor2D;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor2D>,
    pub second: Vec<Tensor2D>,
}

impl AdamState {
    pub fn for_params(params: &[Tensor2D]) -> Self {
        Self {
            step: 0,
            first: params
                .iter()
                .map(|p| Tensor2D::zeros(p.rows(), p.cols()))
                .collect(),
            second: params
                .iter()
                .map(|p| Tensor2D::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step(
    params: &mut [Tensor2D],
    grads: &[Tensor2D],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() || params.len() != state.second.len()
    {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.first[i]) || !p.same_shape(&state.second[i]) {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
