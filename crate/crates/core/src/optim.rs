//! Client-side optimizers with a warmup + cosine schedule, and server-side
//! outer optimizers applied to the round pseudo-gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamVector;

/// Linear warmup to `max_lr`, cosine decay to `alpha * max_lr` over
/// `decay_steps`, then constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub alpha: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            max_lr: 6.0e-4,
            warmup_steps: 0,
            decay_steps: 1,
            alpha: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr {} must be finite and >= 0", self.max_lr)));
        }
        if self.decay_steps < 1 {
            return Err(Error::Config("decay_steps must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn min_lr(&self) -> f64 {
        self.alpha * self.max_lr
    }

    /// Learning rate after `step` sequential optimizer steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress = ((step - self.warmup_steps) as f64 / self.decay_steps as f64).min(1.0);
        let min = self.min_lr();
        self.max_lr - (self.max_lr - min) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
    }
}

/// Compute-optimal schedule period: `ceil(20 · |θ| / tokens_per_step)`.
pub fn compute_schedule_period(param_count: u64, tokens_per_step: u64) -> Result<u64> {
    if param_count == 0 || tokens_per_step == 0 {
        return Err(Error::Config(
            "schedule period needs a positive parameter count and tokens per step".into(),
        ));
    }
    Ok((20 * param_count).div_ceil(tokens_per_step))
}

/// Settings for a client optimizer; `kind` selects the registered implementation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalOptimizerSpec {
    pub kind: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for LocalOptimizerSpec {
    fn default() -> Self {
        Self {
            kind: "adamw".into(),
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl LocalOptimizerSpec {
    /// Plain SGD without momentum, weight decay or clipping.
    pub fn plain_sgd() -> Self {
        Self {
            kind: "sgd".into(),
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..Self::default()
        }
    }
}

/// A client optimizer. Instances are created fresh for every round.
pub trait LocalOptimizer: Send {
    fn name(&self) -> &'static str;
    fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()>;
    fn step_count(&self) -> u64;
}

fn check_grads(grads: &ParamVector) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric("gradient contains NaN or infinity".into()));
    }
    Ok(())
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.entries_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl AdamWState {
    pub fn new(like: &ParamVector, spec: &LocalOptimizerSpec) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step_count: 0,
            beta1: spec.beta1,
            beta2: spec.beta2,
            eps: spec.eps,
            weight_decay: spec.weight_decay,
            clip_norm: spec.clip_norm,
        }
    }
}

impl LocalOptimizer for AdamWState {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        check_grads(grads)?;
        let mut grads = grads.clone();
        clip_global_norm(&mut grads, self.clip_norm);

        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let entries = params
            .entries_mut()
            .zip(grads.entries())
            .zip(self.m.entries_mut())
            .zip(self.v.entries_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in entries {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut());
            for (((p, &g), m), v) in iter {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }

    fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Stateless gradient descent, optionally with global-norm clipping.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub clip_norm: f64,
    step_count: u64,
}

impl Sgd {
    pub fn new(clip_norm: f64) -> Self {
        Self {
            clip_norm,
            step_count: 0,
        }
    }
}

impl LocalOptimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        check_grads(grads)?;
        if self.clip_norm > 0.0 {
            let mut g = grads.clone();
            clip_global_norm(&mut g, self.clip_norm);
            params.axpy(-lr, &g)?;
        } else {
            params.axpy(-lr, grads)?;
        }
        self.step_count += 1;
        Ok(())
    }

    fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// The averaged round update handed to a server optimizer.
///
/// `delta` is the mean of `θ_t − θ_k` over contributing clients and
/// `client_mean` the mean of the client models, both summed in ascending
/// client-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGradient {
    pub delta: ParamVector,
    pub client_mean: ParamVector,
}

impl PseudoGradient {
    /// Builds the update from a pseudo-gradient alone, taking the client mean
    /// as `θ_t − Δ`.
    pub fn from_delta(global: &ParamVector, delta: ParamVector) -> Result<Self> {
        let client_mean = global.sub(&delta)?;
        Ok(Self { delta, client_mean })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerOptSpec {
    pub kind: String,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for ServerOptSpec {
    fn default() -> Self {
        Self {
            kind: "fedavg".into(),
            lr: 1.0,
            momentum: 0.0,
            nesterov: false,
        }
    }
}

/// Applies one outer step per round. Owned by the aggregator; may keep state
/// across rounds.
pub trait ServerOptimizer: Send {
    fn name(&self) -> &'static str;
    fn step(&mut self, global: &ParamVector, update: &PseudoGradient, round: u64) -> Result<ParamVector>;
    /// Persistent buffer to checkpoint, if any.
    fn velocity(&self) -> Option<&ParamVector> {
        None
    }
    fn restore_velocity(&mut self, _velocity: ParamVector) -> Result<()> {
        Err(Error::Usage(format!("{} keeps no server state", self.name())))
    }
}

/// New global model is exactly the mean of the client models.
#[derive(Clone, Debug, Default)]
pub struct FedAvg;

impl ServerOptimizer for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn step(&mut self, global: &ParamVector, update: &PseudoGradient, _round: u64) -> Result<ParamVector> {
        global.check_compatible(&update.client_mean)?;
        Ok(update.client_mean.clone())
    }
}

/// Momentum SGD on the pseudo-gradient, optionally Nesterov.
///
/// `v ← μ·v + Δ`, direction `v` (or `μ·v + Δ` with Nesterov), and
/// `θ ← θ − η·direction`.
#[derive(Clone, Debug)]
pub struct FedMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Option<ParamVector>,
}

impl FedMomentum {
    pub fn new(lr: f64, momentum: f64, nesterov: bool) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "server lr {lr} must be >= 0 and momentum {momentum} in [0, 1)"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            nesterov,
            velocity: None,
        })
    }
}

impl ServerOptimizer for FedMomentum {
    fn name(&self) -> &'static str {
        "fedmom"
    }

    fn step(&mut self, global: &ParamVector, update: &PseudoGradient, _round: u64) -> Result<ParamVector> {
        global.check_compatible(&update.delta)?;
        global.check_compatible(&update.client_mean)?;
        let previous = self
            .velocity
            .take()
            .unwrap_or_else(|| update.delta.zeros_like());
        let (mu, eta) = (self.momentum, self.lr);
        let velocity = previous.zip_map(&update.delta, |v, d| mu * v + d)?;
        // θ_t − η·dir rewritten around the client mean (θ_t − Δ), so that
        // η = 1, μ = 0 yields the FedAvg bytes exactly.
        let carried = if self.nesterov { &velocity } else { &previous };
        let correction = update
            .delta
            .zip_map(carried, |d, w| (1.0 - eta) * d - eta * mu * w)?;
        let next = update.client_mean.add(&correction)?;
        self.velocity = Some(velocity);
        Ok(next)
    }

    fn velocity(&self) -> Option<&ParamVector> {
        self.velocity.as_ref()
    }

    fn restore_velocity(&mut self, velocity: ParamVector) -> Result<()> {
        self.velocity = Some(velocity);
        Ok(())
    }
}
