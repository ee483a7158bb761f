//! Adam optimizer over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..AdamHyper::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment accumulators for a fixed list of parameter tensors
/// (identified by position and length).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        AdamState {
            hyper,
            step: 0,
            slots: sizes
                .iter()
                .map(|&n| Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    /// One Adam step over every slot. `params[i]` and `grads[i]` must match
    /// the size the state was created with.
    pub fn apply(&mut self, mut params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(params.len(), self.slots.len());
        assert_eq!(grads.len(), self.slots.len());
        self.step += 1;
        let t = self.step as i32;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((slot, p), g) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads) {
            assert_eq!(slot.m.len(), p.len());
            assert_eq!(slot.m.len(), g.len());
            for i in 0..p.len() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

impl PartialEq for AdamState {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step && self.slots == other.slots
    }
}
