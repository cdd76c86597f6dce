use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

/// Update rule and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Rmsprop { alpha: f64, eps: f64 },
}

/// Optimizer names accepted in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    pub fn method(self) -> Method {
        match self {
            OptimizerKind::Adam => Method::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            OptimizerKind::Rmsprop => Method::Rmsprop {
                alpha: 0.99,
                eps: 1e-8,
            },
        }
    }
}

/// Moment accumulators for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub method: Method,
    pub learning_rate: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(method: Method, learning_rate: f64, store: &ParamStore) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate}")));
        }
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Ok(OptimizerState {
            method,
            learning_rate,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Applies one update. Parameters with `None` gradients are left alone.
    /// The whole step is rejected before any mutation if a gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return shape_err(format!(
                "optimizer tracks {} tensors, store has {}, got {} gradients",
                self.first.len(),
                store.len(),
                grads.len()
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != store.get(id).len() {
                    return shape_err(format!("gradient for {}", store.name(id)));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.learning_rate;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(ParamId(i)).data_mut();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            match self.method {
                Method::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for k in 0..g.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                Method::Rmsprop { alpha, eps } => {
                    for k in 0..g.len() {
                        v[k] = alpha * v[k] + (1.0 - alpha) * g[k] * g[k];
                        p[k] -= lr * g[k] / (v[k].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
