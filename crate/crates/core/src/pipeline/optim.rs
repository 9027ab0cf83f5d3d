//! Decoupled-weight-decay adaptive-moment optimizer and the one-cycle
//! learning-rate schedule. Moments are kept in f64 regardless of the model
//! precision; updates walk parameters in name order, so runs are bit
//! reproducible.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::ParamMap;
use crate::tensor::Scalar;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Global gradient-norm clipping: scales all gradients so the joint
    /// L2 norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
        let norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
        norm
    }

    /// One update over all parameters with gradients. Parameters without a
    /// gradient entry are left untouched.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamMap<T>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get(&name)?.clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut new_data = Vec::with_capacity(g.len());
            for (i, pv) in p.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let pv64 = pv.to_f64();
                let updated = pv64 - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pv64);
                new_data.push(T::from_f64(updated));
            }
            params.set(&name, p.with_data(new_data)?)?;
        }
        Ok(())
    }
}

/// One-cycle schedule: linear warmup from `lr_max / div` over the first
/// `pct_start` of training, then linear anneal to `lr_max / final_div`.
#[derive(Debug, Clone)]
pub struct OneCycle {
    pub lr_max: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(lr_max: f64, total_steps: usize) -> OneCycle {
        OneCycle {
            lr_max,
            total_steps: total_steps.max(1),
            pct_start: 0.05,
            div: 25.0,
            final_div: 1000.0,
        }
    }

    /// Learning rate for 0-indexed `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warmup = ((self.total_steps as f64) * self.pct_start).max(1.0);
        let s = step as f64;
        if s < warmup {
            let lo = self.lr_max / self.div;
            lo + (self.lr_max - lo) * (s / warmup)
        } else {
            let span = (self.total_steps as f64 - warmup).max(1.0);
            let a = ((s - warmup) / span).min(1.0);
            let lo = self.lr_max / self.final_div;
            self.lr_max + (lo - self.lr_max) * a
        }
    }
}
