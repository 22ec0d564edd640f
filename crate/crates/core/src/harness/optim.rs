use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore, Tensor};

/// Adam with decoupled weight decay. Moment buffers are indexed like the
/// parameter store; parameters without a gradient are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct GroupLr {
    pub backbone: f64,
    pub head: f64,
}

impl GroupLr {
    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Head => self.head,
        }
    }
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .ids()
            .filter(|&id| store.is_trainable(id))
            .filter_map(|id| store.get(id).grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Clips gradients to `max_norm` (if given), then applies one update.
    /// Returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: GroupLr, max_norm: Option<f64>) -> f64 {
        let norm = Self::grad_norm(store);
        let clip = match max_norm {
            Some(m) if norm > m => m / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let rate = lr.of(store.group(id));
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = (&mut self.m[id_index(id)], &mut self.v[id_index(id)]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= rate * self.weight_decay * data[i];
                data[i] -= rate * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        norm
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for id in store.ids() {
            let shape = store.get(id).shape();
            let name = store.name(id);
            out.push((format!("m.{name}"), Tensor::new(shape, self.m[id_index(id)].clone())?));
            out.push((format!("v.{name}"), Tensor::new(shape, self.v[id_index(id)].clone())?));
        }
        Ok(out)
    }

    pub fn load_state(&mut self, store: &ParamStore, tensors: &[(String, Tensor)], step: u64) -> Result<()> {
        let find = |key: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state `{key}` missing")))
        };
        for id in store.ids() {
            let name = store.name(id);
            for (prefix, buf) in [("m", &mut self.m[id_index(id)]), ("v", &mut self.v[id_index(id)])] {
                let t = find(&format!("{prefix}.{name}"))?;
                if t.numel() != buf.len() {
                    return Err(Error::Checkpoint(format!("optimizer state `{prefix}.{name}` has wrong size")));
                }
                buf.copy_from_slice(t.data());
            }
        }
        self.step = step;
        Ok(())
    }
}

fn id_index(id: crate::tensor::ParamId) -> usize {
    id.0
}
