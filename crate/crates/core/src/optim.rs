//! Adaptive-moment gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParameterSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moment estimates for one [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = params.zero_grads().arrays;
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, params: &ParameterSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .enumerate()
                .all(|(i, (_, a))| self.m[i].len() == a.len() && self.v[i].len() == a.len())
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(
        &mut self,
        params: &mut ParameterSet,
        grads: &ParamGrads,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if !self.matches(params) || grads.arrays.len() != params.len() {
            return Err(Error::Structure("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, (_, arr)) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.arrays[i]);
            for j in 0..arr.data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                arr.data[j] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
