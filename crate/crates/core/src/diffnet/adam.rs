use serde::{Deserialize, Serialize};

use super::ParamBlocks;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, shaped like the parameter blocks they track.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamBlocks<T>>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
        AdamState {
            config,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &T> {
        self.second.iter().flatten()
    }
}

/// One bias-corrected Adam update, descending along `grads`.
///
/// All gradients are checked before anything is modified, so an error leaves
/// both `params` and `state` untouched.
pub fn adam_step<T: Real, P: ParamBlocks<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    if grad_blocks.len() != state.first.len()
        || grad_blocks
            .iter()
            .zip(&state.first)
            .any(|(g, m)| g.len() != m.len())
    {
        return Err(Error::invalid(
            "gradient shape does not match optimizer state",
        ));
    }
    if let Some(block) = grad_blocks
        .iter()
        .position(|b| b.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFiniteGradient { block });
    }

    let cfg = state.config;
    let t = state.step + 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bias1 = T::one() - b1.powi(t as i32);
    let bias2 = T::one() - b2.powi(t as i32);
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));

    let mut param_blocks = params.blocks_mut();
    if param_blocks.len() != grad_blocks.len() {
        return Err(Error::invalid(
            "parameter shape does not match optimizer state",
        ));
    }
    for (((p, g), m), v) in param_blocks
        .iter_mut()
        .zip(&grad_blocks)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((pi, &gi), mi), vi) in p
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, DenseLayer, MlpConfig, MlpParams};

    fn scalar(v: f64) -> MlpParams<f64> {
        MlpParams::from_layers(vec![DenseLayer::from_parts(1, 1, &[v], &[0.0]).unwrap()])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let g = MlpParams::from_layers(vec![DenseLayer::from_parts(1, 1, &[1.0], &[0.0]).unwrap()]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((p.layers()[0].weights()[0] + 1e-3).abs() < 1e-6);
        assert_eq!(p.layers()[0].bias()[0], 0.0);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let cfg = MlpConfig::new(vec![2, 3, 1], Activation::Tanh).unwrap();
        let mut p = MlpParams::<f64>::zeros(&cfg);
        p.layers_mut()[0].weights_mut()[1] = 0.25;
        let before = p.clone();
        let g = MlpParams::zeros(&cfg);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn constant_gradient_descends_every_step() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..2 {
            adam_step(&mut p, &g, &mut st).unwrap();
            let w = p.layers()[0].weights()[0];
            assert!(w < last);
            last = w;
        }
        assert!(st.second_moments().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = scalar(0.3);
        let g = scalar(-4.0);
        let mut st = AdamState::new(
            &p,
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
        );
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, scalar(0.3));
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let cfg = MlpConfig::new(vec![1, 2, 1], Activation::Tanh).unwrap();
        let mut p = MlpParams::<f64>::zeros(&cfg);
        let mut g = MlpParams::zeros(&cfg);
        g.layers_mut()[1].bias_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&p, AdamConfig::default());
        match adam_step(&mut p, &g, &mut st) {
            Err(Error::NonFiniteGradient { block }) => assert_eq!(block, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.step(), 0);
    }
}
