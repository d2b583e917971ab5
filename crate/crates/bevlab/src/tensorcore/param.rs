//! Named, optionally frozen model parameters and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorcore::tensor::Tensor;

/// A named weight tensor. Frozen (`trainable = false`) parameters receive
/// zero gradient and are never updated by the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { tensor, name: name.into(), trainable: true }
    }

    /// He-style initialization: normal with std sqrt(2 / fan_in).
    pub fn he_init(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| gaussian(rng) * std).collect();
        Parameter::new(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Parameter::new(name, Tensor::zeros(shape))
    }
}

/// Box-Muller, driven by the deterministic stream RNG.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Adam state, keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamSlot>,
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: HashMap::new() }
    }

    /// One update. Non-trainable parameters are left untouched even if a
    /// gradient is supplied.
    pub fn step(&mut self, params: &mut [&mut Parameter], grads: &HashMap<String, Vec<f64>>) -> Result<()> {
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = match grads.get(&p.name) {
                Some(g) => g,
                None => continue,
            };
            if g.len() != p.tensor.len() {
                return Err(Error::Shape(format!(
                    "adam: gradient length {} vs parameter {} ({})",
                    g.len(),
                    p.tensor.len(),
                    p.name
                )));
            }
            let slot = self.state.entry(p.name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            slot.t += 1;
            let b1t = 1.0 - self.beta1.powi(slot.t as i32);
            let b2t = 1.0 - self.beta2.powi(slot.t as i32);
            let data = p.tensor.data_mut();
            for i in 0..g.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / b1t;
                let vhat = slot.v[i] / b2t;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
