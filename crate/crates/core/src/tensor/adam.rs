use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Bias-corrected Adam with per-parameter moment buffers keyed by name.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        Ok(AdamState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[S]> {
        self.m.get(name).map(|v| v.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[S]> {
        self.v.get(name).map(|v| v.as_slice())
    }

    /// Applies one update to every `(name, grad)` pair; parameters without
    /// a gradient entry are left alone.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::config(format!(
                    "gradient shape {:?} != parameter shape {:?} for `{name}`",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(m) = self.m.get(name) {
                if m.len() != p.len() {
                    return Err(Error::config(format!("moment shape mismatch for `{name}`")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let (b1, b2) = (S::from_f64(beta1), S::from_f64(beta2));
        let (c1, c2) = (S::from_f64(1.0 - beta1), S::from_f64(1.0 - beta2));
        let bc1 = S::from_f64(1.0 - beta1.powi(t));
        let bc2 = S::from_f64(1.0 - beta2.powi(t));
        let (lr, eps) = (S::from_f64(lr), S::from_f64(eps));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); g.len()]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + c1 * gv;
                *vv = b2 * *vv + c2 * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
