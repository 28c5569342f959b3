//! AdamW with decoupled weight decay, cosine learning-rate annealing and
//! global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moments as a parameter collection (`m/<name>`, `v/<name>`, plus a
    /// `step` scalar) so they can share the checkpoint format.
    pub fn state(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert("step", Tensor::scalar(T::lit(self.step as f64)));
        for (k, mo) in &self.moments {
            s.insert(format!("m/{k}"), mo.m.clone());
            s.insert(format!("v/{k}"), mo.v.clone());
        }
        s
    }

    pub fn from_state(config: AdamWConfig, state: &ParamStore<T>) -> Result<Self> {
        let step = state.require("step")?.item().as_f64() as u64;
        let mut moments = BTreeMap::new();
        for (name, m) in state.iter() {
            if let Some(k) = name.strip_prefix("m/") {
                let v = state.require(&format!("v/{k}"))?.clone();
                moments.insert(k.to_string(), Moments { m: m.clone(), v });
            }
        }
        Ok(AdamW { config, step, moments })
    }

    /// One update of every parameter selected by `trainable`.
    ///
    /// A selected parameter without an entry in `grads` is a consistency error,
    /// and nothing is modified in that case.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        trainable: impl Fn(&str) -> bool,
        grads: &GradMap<T>,
        lr: f64,
    ) -> Result<()> {
        let names: Vec<String> = params.names().filter(|n| trainable(n)).map(str::to_owned).collect();
        for name in &names {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::Consistency(format!("missing gradient for trainable parameter {name}")))?;
            let p = params.get(name).expect("name from store");
            if g.shape() != p.shape() {
                return Err(TensorError::Consistency(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for name in names {
            let g = &grads[&name];
            let p = params.get_mut(&name).expect("name from store");
            let mo = self.moments.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let (pd, md, vd) = (p.data_mut(), mo.m.data_mut(), mo.v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let denom = vd[i].sqrt() * inv_sqrt_bc2 + eps;
                pd[i] = pd[i] * decay - step_size * md[i] / denom;
            }
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(TensorError::Config("cosine schedule needs total_steps > 0".into()));
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

pub fn global_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    grads.values().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt()
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut GradMap<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}
