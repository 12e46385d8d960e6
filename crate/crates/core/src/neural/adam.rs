//! Bias-corrected Adam and gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::layers::{NeuralError, ParamStore};

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter entry.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        AdamState {
            m: store.entries().iter().map(|e| vec![0.0; e.values.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.values.len()]).collect(),
            step: 0,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Restores accumulators saved in a checkpoint.
    pub fn restore(
        &mut self,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step: u64,
    ) -> Result<(), NeuralError> {
        let shapes_match = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(NeuralError::Shape("optimizer state mismatch".into()));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), NeuralError> {
    if grads.len() != store.len() {
        return Err(NeuralError::Shape(format!(
            "{} gradient entries for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (e, g) in store.entries().iter().zip(grads) {
        if e.values.len() != g.len() {
            return Err(NeuralError::Shape(format!("gradient size mismatch for {}", e.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..grads.len() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = &grads[i];
        let values = &mut store.entries_mut()[i].values;
        for j in 0..g.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            values[j] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Scales all gradients down so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
