//! ADAM with an `η/√t` step size and a geometrically decaying first-moment
//! rate `β₁·λ^(t−1)`, plus the early-stopping controller used by training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Use `η` at every step instead of `η/√t`.
    pub constant_eta: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            lambda: 1.0,
            epsilon: 1e-8,
            constant_eta: false,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !open(self.beta1) || !open(self.beta2) {
            return Err(Error::Config(format!(
                "beta1/beta2 must lie in (0, 1), got {}/{}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Step size at (1-based) step `t`.
    pub fn step_size(&self, t: u64) -> f64 {
        if self.constant_eta {
            self.eta
        } else {
            self.eta / (t as f64).sqrt()
        }
    }

    /// First-moment decay rate at (1-based) step `t`.
    pub fn beta1_at(&self, t: u64) -> f64 {
        self.beta1 * self.lambda.powi((t - 1) as i32)
    }
}

/// Moment estimates, keyed like the parameter tensors they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub keys: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for tensors with the given keys and lengths.
    pub fn new(keys: Vec<String>, lengths: &[usize]) -> Self {
        let zeros = || lengths.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            keys,
            t: 0,
        }
    }
}

/// One optimisation step. Updates `state` and `params` in place.
///
/// ```text
/// t ← t+1;  β₁ₜ = β₁λ^(t−1)
/// m ← β₁ₜ m + (1−β₁ₜ) g;   v ← β₂ v + (1−β₂) g²
/// m̂ = m/(1−β₁ᵗ);  v̂ = v/(1−β₂ᵗ)
/// w ← w − ηₜ · m̂ / √(v̂ + ε)
/// ```
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut [&mut [T]],
    grads: &[&[T]],
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} tensors, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[i].len() || g.len() != state.m[i].len() {
            return Err(Error::invalid(format!(
                "tensor `{}` length mismatch with optimizer state",
                state.keys[i]
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in `{}`",
                state.keys[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t;
    let b1t = config.beta1_at(t);
    let b2 = config.beta2;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let lr = config.step_size(t);
    let eps = config.epsilon;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            let mj = b1t * m[j].as_f64() + (1.0 - b1t) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            p[j] = T::of(p[j].as_f64() - lr * m_hat / (v_hat + eps).sqrt());
        }
    }
    Ok(())
}

/// Stops after `patience` consecutive epochs without a strict improvement
/// of a higher-is-better metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopController {
    pub patience: usize,
    pub best_metric: Option<f64>,
    pub epochs_since_improvement: usize,
}

impl EarlyStopController {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_metric: None,
            epochs_since_improvement: 0,
        }
    }

    /// Whether the most recent [`Self::should_stop`] call set a new best.
    pub fn improved_last(&self) -> bool {
        self.best_metric.is_some() && self.epochs_since_improvement == 0
    }

    /// Record one epoch's metric; true when training should stop.
    pub fn should_stop(&mut self, metric: f64) -> bool {
        match self.best_metric {
            Some(best) if !(metric > best) => self.epochs_since_improvement += 1,
            _ => {
                self.best_metric = Some(metric);
                self.epochs_since_improvement = 0;
            }
        }
        self.epochs_since_improvement >= self.patience
    }
}
