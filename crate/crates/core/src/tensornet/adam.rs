use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for each parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T = f64> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update:
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam got {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "adam parameter {:?} with gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(state.t as i32));
    let bc2 = T::of(1.0 - c.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let one = T::one();
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut params = vec![Tensor::<f64>::full(&[3], 0.7)];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st).unwrap();
        assert_eq!(params[0].data(), &[0.7; 3]);
        assert!(st.m[0]
            .data()
            .iter()
            .chain(st.v[0].data())
            .all(|&v| v == 0.0));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn single_scalar_step() {
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert!((st.m[0].item() - 0.1).abs() < 1e-15);
        assert!((st.v[0].item() - 0.001).abs() < 1e-15);
        // m_hat = v_hat = 1 so the step is lr / (1 + eps)
        assert!((params[0].item() - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((params[0].item() - 0.999).abs() < 1e-6);
    }

    #[test]
    fn mismatched_shapes() {
        let mut params = vec![Tensor::<f64>::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st).is_err());
        assert!(adam_step(&mut params, &[], &mut st).is_err());
    }
}
