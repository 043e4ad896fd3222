use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient, and every parameter of a
    /// frozen store, are left untouched; the step count always advances.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        if store.is_frozen() {
            return Ok(());
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - (beta1 as f64).powi(t);
        let c2 = 1.0 - (beta2 as f64).powi(t);
        let step_size = (lr as f64 / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id).values_mut();
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::Contract(format!(
                    "gradient of length {} for parameter of length {}",
                    g.len(),
                    p.len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
