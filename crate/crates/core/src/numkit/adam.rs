use serde::{Deserialize, Serialize};

use super::{Params, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig<T>,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig<T>) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters are untouched if any gradient is non-finite.
    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g_slices = grads.param_slices();
        for (name, g) in &g_slices {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{name}` at index {i}; training aborted"
                )));
            }
        }
        let p_slices = params.param_slices_mut();
        if p_slices.len() != g_slices.len() {
            return Err(Error::Shape("parameter/gradient slot count differs".into()));
        }
        if self.first.is_empty() {
            self.first = g_slices.iter().map(|(_, g)| vec![T::zero(); g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = T::one() - beta1.powi(t);
        let c2 = T::one() - beta2.powi(t);
        for (k, ((pname, p), (_, g))) in p_slices.into_iter().zip(g_slices).enumerate() {
            if p.len() != g.len() || self.first[k].len() != g.len() {
                return Err(Error::Shape(format!("slot `{pname}` changed size")));
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (T::one() - beta1) * g[i];
                v[i] = beta2 * v[i] + (T::one() - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
