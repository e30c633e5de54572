use std::path::Path;

use crate::autodiff::serialize::{load_params, save_params};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Linear ramp to `base_lr` at `warmup`, inverse-square-root decay after.
pub fn warmup_lr(step: u64, base_lr: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate step counts from 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Contract("warmup must be at least one step".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(base_lr * (s / w).min((w / s).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moments shaped like the parameters, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

const STEP_KEY: &str = "adam.step";

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimState {
            config: AdamConfig::default(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update. All gradients are checked before any
    /// parameter moves, so a rejected step leaves `params` untouched.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", params.name(id))));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, params: &ParamStore, path: &Path) -> Result<()> {
        let mut named = Vec::with_capacity(2 * self.m.len() + 1);
        named.push((STEP_KEY.to_string(), Tensor::scalar(self.step as f64)));
        for (id, (m, v)) in params.ids().zip(self.m.iter().zip(&self.v)) {
            named.push((format!("m/{}", params.name(id)), m.clone()));
            named.push((format!("v/{}", params.name(id)), v.clone()));
        }
        save_params(path, &named)
    }

    pub fn load(params: &ParamStore, path: &Path) -> Result<Self> {
        let named = load_params(path)?;
        let mut it = named.into_iter();
        let step = match it.next() {
            Some((k, t)) if k == STEP_KEY && t.numel() == 1 => t.data()[0] as u64,
            _ => return Err(Error::Checkpoint(format!("{}: missing step counter", path.display()))),
        };
        let mut state = OptimState::new(params);
        state.step = step;
        for id in params.ids() {
            for (prefix, slot) in [("m/", &mut state.m[id.index()]), ("v/", &mut state.v[id.index()])] {
                let want = format!("{prefix}{}", params.name(id));
                match it.next() {
                    Some((k, t)) if k == want && t.shape() == slot.shape() => *slot = t,
                    _ => return Err(Error::Checkpoint(format!("{}: expected {want}", path.display()))),
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint(format!("{}: trailing optimizer entries", path.display())));
        }
        Ok(state)
    }
}
