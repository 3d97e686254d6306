//! Adam with decoupled weight decay, plus the milestone learning-rate
//! schedule used by the training harness.

use std::collections::BTreeSet;

use super::tape::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Per-parameter first/second moment estimates and the shared step count.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    /// Parameters the optimizer is allowed to touch. Everything else is
    /// frozen: no moment update, no decay, bitwise unchanged.
    trainable: BTreeSet<ParamId>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Result<Self> {
        if config.lr <= 0.0 {
            return Err(TensorError::Contract(format!(
                "adamw: lr must be > 0, got {}",
                config.lr
            )));
        }
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let v = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(AdamW {
            config,
            m,
            v,
            step: 0,
            trainable: store.ids().collect(),
        })
    }

    pub fn set_trainable(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.trainable = ids.into_iter().collect();
    }

    pub fn trainable(&self) -> &BTreeSet<ParamId> {
        &self.trainable
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One decoupled update:
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !self.trainable.contains(&id) {
                continue;
            }
            let grad = store.grad(id).data().to_vec();
            let m = self.m[id_index(id)].data_mut();
            let v = self.v[id_index(id)].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.config.lr * (m_hat / (v_hat.sqrt() + self.config.eps))
                    + self.config.lr * self.config.weight_decay * p[j];
            }
            store.value(id).check_finite("adamw step")?;
        }
        Ok(())
    }
}

fn id_index(id: ParamId) -> usize {
    // ParamId is an index into the registration order, which the moment
    // vectors mirror.
    id.0
}

/// Multiplies the learning rate by `gamma` when the epoch index crosses
/// each milestone.
#[derive(Debug, Clone)]
pub struct MilestoneSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MilestoneSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, gamma: f64) -> Result<Self> {
        if !milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(TensorError::Contract(format!(
                "milestones must be strictly ascending, got {milestones:?}"
            )));
        }
        Ok(MilestoneSchedule {
            base_lr,
            milestones,
            gamma,
        })
    }

    /// Learning rate in effect for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let crossed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.gamma.powi(crossed as i32)
    }
}
