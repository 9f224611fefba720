//! First-order optimizers that return the step instead of applying it, so
//! callers can transform (project) the step before touching parameters.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: i32,
}

/// Adam with bias correction; one moment pair per key.
#[derive(Debug, Clone)]
pub struct Adam<K: Ord> {
    pub config: AdamConfig,
    state: BTreeMap<K, Moments>,
}

impl<K: Ord + Copy> Adam<K> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Updates the moments with `grad` and returns `lr * m_hat / (sqrt(v_hat) + eps)`,
    /// the amount to subtract from the parameter.
    pub fn step(&mut self, key: K, grad: ArrayViewD<f64>) -> ArrayD<f64> {
        let c = self.config;
        let st = self.state.entry(key).or_insert_with(|| Moments {
            m: ArrayD::zeros(grad.raw_dim()),
            v: ArrayD::zeros(grad.raw_dim()),
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t);
        let bc2 = 1.0 - c.beta2.powi(st.t);
        let mut out = ArrayD::zeros(grad.raw_dim());
        Zip::from(&mut out)
            .and(&mut st.m)
            .and(&mut st.v)
            .and(&grad)
            .for_each(|o, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *o = c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<K: Ord> {
    pub config: SgdConfig,
    velocity: BTreeMap<K, ArrayD<f64>>,
}

impl<K: Ord + Copy> Sgd<K> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Returns the amount to subtract from `param`.
    pub fn step(&mut self, key: K, grad: ArrayViewD<f64>, param: ArrayViewD<f64>) -> ArrayD<f64> {
        let c = self.config;
        let vel = self
            .velocity
            .entry(key)
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        Zip::from(&mut *vel).and(&grad).and(&param).for_each(|v, &g, &p| {
            *v = c.momentum * *v + g + c.weight_decay * p;
        });
        vel.mapv(|v| c.lr * v)
    }
}
