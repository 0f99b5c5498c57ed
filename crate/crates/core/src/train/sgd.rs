//! Stochastic gradient descent with momentum and coupled weight decay.

use std::collections::HashMap;

use lc3net_tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Parameters that receive weight decay: convolution kernels only.
    pub fn decayed(store: &ParamStore) -> Vec<ParamId> {
        store
            .trainable_ids()
            .filter(|&id| store.entry(id).kind.decays())
            .collect()
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm(grads: &HashMap<ParamId, Tensor>) -> f64 {
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort_by_key(|id| id.index());
        ids.iter()
            .map(|id| grads[id].data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// One update: `v ← m·v + (g + wd·w)`, `w ← w − lr·v`.
    /// With `clip`, gradients are first rescaled to at most that global norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f64, clip: Option<f64>) {
        let scale = match clip {
            Some(c) => {
                let norm = Self::grad_norm(grads);
                if norm > c {
                    (c / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(&id) else { continue };
            let decay = if store.entry(id).kind.decays() {
                self.weight_decay as f32
            } else {
                0.0
            };
            let (m, lr) = (self.momentum as f32, lr as f32);
            let w = store.value_mut(id);
            let v = self.velocity.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, v), &g) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = g * scale + decay * *w;
                *v = m * *v + d;
                *w -= lr * *v;
            }
        }
    }
}
