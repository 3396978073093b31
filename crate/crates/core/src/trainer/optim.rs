//! SGD and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &[&Tensor<f32>]) -> Result<Self> {
        cfg.validate()?;
        let zeros = |p: &&Tensor<f32>| vec![0.0; p.numel()];
        let (m, v) = match cfg.kind {
            OptimizerKind::Sgd => (vec![], vec![]),
            OptimizerKind::Adam => (params.iter().map(zeros).collect(), params.iter().map(zeros).collect()),
        };
        Ok(Optimizer { cfg, t: 0, m, v })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Adam first and second moments, one vector per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update with learning rate `lr`. Non-finite gradients abort before
    /// any parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer_step", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        self.t += 1;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x = (*x as f64 - lr * d as f64) as f32;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig { beta1: b1, beta2: b2, eps, .. } = self.cfg;
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d as f64;
                        m[j] = b1 * m[j] + (1.0 - b1) * d;
                        v[j] = b2 * v[j] + (1.0 - b2) * d * d;
                        let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        *x = (*x as f64 - update) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
