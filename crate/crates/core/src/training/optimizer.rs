use std::collections::BTreeMap;

use ndarray::Zip;

use crate::archive::{Archive, Dtype};
use crate::autograd::{Gradients, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            Zip::from(p.value_mut())
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *w -= lr * (update + wd * *w);
                });
        }
    }

    /// Moments stored under `optim.m.{name}` / `optim.v.{name}`.
    pub fn save_into(&self, store: &ParamStore, archive: &mut Archive) {
        for (&id, (m, v)) in &self.moments {
            let name = &store.get(id).name;
            archive.insert(format!("optim.m.{name}"), m, Dtype::F64);
            archive.insert(format!("optim.v.{name}"), v, Dtype::F64);
        }
        archive.metadata.insert("optim.step".into(), self.step.to_string());
    }

    pub fn load_from(&mut self, store: &ParamStore, archive: &Archive) -> Result<()> {
        self.moments.clear();
        self.step = archive
            .metadata
            .get("optim.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Invalid("checkpoint lacks optimizer step".into()))?;
        for name in archive.names() {
            let Some(pname) = name.strip_prefix("optim.m.") else { continue };
            let id = store
                .id(pname)
                .ok_or_else(|| Error::Invalid(format!("optimizer state for unknown tensor `{pname}`")))?;
            let m = archive.tensor(name)?;
            let v = archive.tensor(&format!("optim.v.{pname}"))?;
            self.moments.insert(id, (m, v));
        }
        Ok(())
    }
}
