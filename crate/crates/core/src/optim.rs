//! AdamW with decoupled weight decay.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::encoder::{LoraParams, StemWeights};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// A collection of named tensors that can be optimized.
pub trait ParamSet<T> {
    fn param_views(&self) -> Vec<ArrayViewD<'_, T>>;
    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>>;
}

impl<T: Real> ParamSet<T> for LoraParams<T> {
    fn param_views(&self) -> Vec<ArrayViewD<'_, T>> {
        self.tensors().into_iter().map(|(_, v)| v).collect()
    }
    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.tensors_mut().into_iter().map(|(_, v)| v).collect()
    }
}

impl<T: Real> ParamSet<T> for StemWeights<T> {
    fn param_views(&self) -> Vec<ArrayViewD<'_, T>> {
        self.tensors().into_iter().map(|(_, v)| v).collect()
    }
    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.tensors_mut().into_iter().map(|(_, v)| v).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub first: Vec<ArrayD<T>>,
    pub second: Vec<ArrayD<T>>,
    pub step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let zeros: Vec<ArrayD<T>> = params
            .param_views()
            .iter()
            .map(|v| ArrayD::zeros(v.raw_dim()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update of `params` in place.
pub fn optimizer_step<T: Real, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grads = grads.param_views();
    let mut views = params.param_views_mut();
    if views.len() != grads.len() || views.len() != state.first.len() {
        return Err(Error::shape("parameter, gradient and moment counts differ"));
    }
    for ((p, g), m) in views.iter().zip(&grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let c1 = T::lit(1.0 - cfg.beta1);
    let c2 = T::lit(1.0 - cfg.beta2);
    let bias1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bias2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.lr);
    let decay = T::lit(cfg.lr * cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    for (((p, g), m), v) in views
        .iter_mut()
        .zip(&grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let mhat = *m / bias1;
                let vhat = *v / bias2;
                *p = *p - decay * *p - lr * mhat / (vhat.sqrt() + eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_lora, EncoderConfig, LoraConfig};

    fn params() -> LoraParams<f64> {
        let enc = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            width: 4,
            heads: 1,
            embed_dim: 4,
            mlp_ratio: 1,
        };
        let cfg = LoraConfig {
            rank: 1,
            targets: vec![crate::encoder::Target::Q],
            ..Default::default()
        };
        init_lora(&cfg, &enc).unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..3 {
            optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, mut v) in g.tensors_mut() {
            v.fill(1.0);
        }
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                // m_hat / (sqrt(v_hat) + eps) = 1 / (1 + 1e-8)
                assert!(((y - x) - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pure_decay_shrinks_geometrically() {
        let mut p = params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        for _ in 0..4 {
            optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        let factor = (1.0f64 - 0.05).powi(4);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y * factor).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let mut p = params();
        let other = init_lora::<f64>(
            &LoraConfig::default(),
            &EncoderConfig {
                image_size: 8,
                patch_size: 4,
                depth: 1,
                width: 4,
                heads: 1,
                embed_dim: 4,
                mlp_ratio: 1,
            },
        )
        .unwrap();
        let mut st = AdamWState::new(&p);
        assert!(optimizer_step(&mut p, &other, &mut st, &AdamWConfig::default()).is_err());
    }
}
