//! Adam without weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParameterSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// One update over the trainable tensors listed in `grads`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.param(name) else { continue };
            if !p.trainable() {
                continue;
            }
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut w = p.tensor().data().to_vec();
            for i in 0..n {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + EPS);
            }
            params.update(name, w);
        }
    }
}
