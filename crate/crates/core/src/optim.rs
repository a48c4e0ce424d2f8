//! Update rules over flat adapter vectors: preconditioned, SGD and AdamW,
//! with gradient clipping, per-step delta capping and the closed-form
//! trust-region step.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precond::Preconditioner;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Precond,
    Sgd,
    Adamw,
}

impl UpdateKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            UpdateKind::Precond => 1e-3,
            UpdateKind::Sgd => 5e-4,
            UpdateKind::Adamw => 3e-4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UpdateKind::Precond => "precond",
            UpdateKind::Sgd => "sgd",
            UpdateKind::Adamw => "adamw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateRuleConfig {
    pub kind: UpdateKind,
    /// `None` selects the kind's default.
    pub learning_rate: Option<f64>,
    pub steps: usize,
    /// Gradient norm clip `c`; `None` disables clipping.
    pub clip_coef: Option<f64>,
    /// Per-step cap on `‖δ‖₂`; `None` disables capping.
    pub max_delta_norm: Option<f64>,
    /// When set, the step size is `η = sqrt(2ε / gᵀPg)` instead of the fixed rate.
    pub trust_region_epsilon: Option<f64>,
    /// Strength of the L2 pull toward the episode-initial adapter.
    pub lambda_reg: f64,
    pub reg_enabled: bool,
    /// Steps are buffered and applied every `flush_every` steps (1 applies immediately).
    pub flush_every: usize,
    /// Cap on the token count of one aligned update text.
    pub precond_max: Option<usize>,
    pub adam: AdamParams,
}

impl Default for UpdateRuleConfig {
    fn default() -> Self {
        Self {
            kind: UpdateKind::Precond,
            learning_rate: None,
            steps: 10,
            clip_coef: Some(1.0),
            max_delta_norm: Some(0.25),
            trust_region_epsilon: None,
            lambda_reg: 1e-3,
            reg_enabled: true,
            flush_every: 2,
            precond_max: Some(384),
            adam: AdamParams::default(),
        }
    }
}

impl UpdateRuleConfig {
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.kind.default_learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.clip_coef.is_some_and(|c| c <= 0.0) {
            return Err(Error::config("clip_coef must be positive"));
        }
        if self.max_delta_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::config("max_delta_norm must be positive"));
        }
        if self.trust_region_epsilon.is_some_and(|e| e <= 0.0) {
            return Err(Error::config("trust-region epsilon must be positive"));
        }
        if self.flush_every == 0 {
            return Err(Error::config("flush_every must be at least 1"));
        }
        if self.lambda_reg < 0.0 {
            return Err(Error::config("lambda_reg must be non-negative"));
        }
        Ok(())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g · min(1, c / ‖g‖₂)`.
pub fn clip_gradient(g: &[f64], c: f64) -> Vec<f64> {
    scale_to_norm(g, c)
}

/// Scales `δ` down so that `‖δ‖₂ ≤ max_norm`.
pub fn cap_delta(delta: &[f64], max_norm: f64) -> Vec<f64> {
    scale_to_norm(delta, max_norm)
}

fn scale_to_norm(v: &[f64], limit: f64) -> Vec<f64> {
    let n = norm(v);
    if n <= limit || n == 0.0 {
        return v.to_vec();
    }
    let f = limit / n;
    v.iter().map(|x| x * f).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub params: Vec<f64>,
    pub delta: Vec<f64>,
    pub grad_norm: f64,
    pub elapsed: Duration,
}

fn apply(phi: &[f64], delta: Vec<f64>, grad_norm: f64, start: Instant) -> StepOutcome {
    let params = phi.iter().zip(&delta).map(|(p, d)| p + d).collect();
    StepOutcome {
        params,
        delta,
        grad_norm,
        elapsed: start.elapsed(),
    }
}

fn check_dims(phi: &[f64], g: &[f64]) -> Result<()> {
    if phi.len() != g.len() {
        return Err(Error::config(format!(
            "parameter vector has {} entries, gradient {}",
            phi.len(),
            g.len()
        )));
    }
    Ok(())
}

/// `φ' = φ − α · P ∘ g`.
pub fn precond_step(phi: &[f64], g: &[f64], p: &[f64], alpha: f64) -> Result<StepOutcome> {
    let start = Instant::now();
    check_dims(phi, g)?;
    if p.len() != g.len() {
        return Err(Error::config(format!(
            "preconditioner has {} entries, gradient {}",
            p.len(),
            g.len()
        )));
    }
    let delta = g.iter().zip(p).map(|(gi, pi)| -alpha * pi * gi).collect();
    Ok(apply(phi, delta, norm(g), start))
}

/// `φ' = φ − α · g`.
pub fn sgd_step(phi: &[f64], g: &[f64], alpha: f64) -> Result<StepOutcome> {
    let start = Instant::now();
    check_dims(phi, g)?;
    let delta = g.iter().map(|gi| -alpha * gi).collect();
    Ok(apply(phi, delta, norm(g), start))
}

/// First and second moment estimates; reset at every episode start.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adamw_step(
    state: &mut AdamState,
    phi: &[f64],
    g: &[f64],
    alpha: f64,
    hp: &AdamParams,
) -> Result<StepOutcome> {
    let start = Instant::now();
    check_dims(phi, g)?;
    if state.m.len() != g.len() {
        *state = AdamState::new(g.len());
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    let mut delta = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g[i];
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let adaptive = if m_hat == 0.0 { 0.0 } else { m_hat / (v_hat.sqrt() + hp.eps) };
        delta.push(-alpha * (adaptive + hp.weight_decay * phi[i]));
    }
    Ok(apply(phi, delta, norm(g), start))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrustRegionStep {
    pub delta: Vec<f64>,
    /// `None` when `g = 0` and the step length is undefined.
    pub eta: Option<f64>,
}

/// Closed-form minimiser of `δᵀg` subject to `½ δᵀ I δ ≤ ε` for diagonal `I`:
/// `δ* = −η I⁻¹ g`, `η = sqrt(2ε / gᵀ I⁻¹ g)`.
pub fn trust_region_step(g: &[f64], fisher_diag: &[f64], epsilon: f64) -> Result<TrustRegionStep> {
    if g.len() != fisher_diag.len() {
        return Err(Error::config("gradient and Fisher diagonal differ in length"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("trust-region epsilon must be positive"));
    }
    if fisher_diag.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Numeric("Fisher diagonal must be positive".into()));
    }
    let quad: f64 = g.iter().zip(fisher_diag).map(|(gi, fi)| gi * gi / fi).sum();
    if quad == 0.0 {
        return Ok(TrustRegionStep {
            delta: vec![0.0; g.len()],
            eta: None,
        });
    }
    let eta = (2.0 * epsilon / quad).sqrt();
    Ok(TrustRegionStep {
        delta: g.iter().zip(fisher_diag).map(|(gi, fi)| -eta * gi / fi).collect(),
        eta: Some(eta),
    })
}

/// Step size `sqrt(2ε) / sqrt(gᵀ P g)`; `None` for a zero gradient.
pub fn trust_region_learning_rate(g: &[f64], p: &[f64], epsilon: f64) -> Option<f64> {
    let quad: f64 = g.iter().zip(p).map(|(gi, pi)| gi * gi * pi).sum();
    (quad > 0.0).then(|| (2.0 * epsilon).sqrt() / quad.sqrt())
}

/// Per-step record for the update trace log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTrace {
    pub episode: String,
    pub segment: usize,
    pub rule: UpdateKind,
    pub grad_norm: f64,
    pub delta_norm: f64,
    pub wall_time_s: f64,
}

/// Applies one rule repeatedly within an episode. Owns the optimiser state.
#[derive(Clone, Debug)]
pub struct Updater {
    config: UpdateRuleConfig,
    adam: AdamState,
}

/// Outcome of one rule application before it is written to the adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStep {
    pub delta: Vec<f64>,
    pub grad_norm: f64,
    pub elapsed: Duration,
}

impl Updater {
    pub fn new(config: UpdateRuleConfig, n: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            adam: AdamState::new(n),
        })
    }

    pub fn config(&self) -> &UpdateRuleConfig {
        &self.config
    }

    pub fn reset(&mut self) {
        self.adam.reset();
    }

    /// Clip, rule, optional trust-region sizing, cap. `grad` already includes
    /// any regularisation term.
    pub fn step(&mut self, phi: &[f64], grad: &[f64], precond: &Preconditioner) -> Result<UpdateStep> {
        let start = Instant::now();
        let grad_norm = norm(grad);
        let g = match self.config.clip_coef {
            Some(c) => clip_gradient(grad, c),
            None => grad.to_vec(),
        };
        let mut alpha = self.config.learning_rate();
        if let Some(eps) = self.config.trust_region_epsilon {
            let metric: Vec<f64> = match self.config.kind {
                UpdateKind::Precond => precond.diag.clone(),
                _ => vec![1.0; g.len()],
            };
            alpha = trust_region_learning_rate(&g, &metric, eps).unwrap_or(0.0);
        }
        let outcome = match self.config.kind {
            UpdateKind::Precond => precond_step(phi, &g, &precond.diag, alpha)?,
            UpdateKind::Sgd => sgd_step(phi, &g, alpha)?,
            UpdateKind::Adamw => adamw_step(&mut self.adam, phi, &g, alpha, &self.config.adam)?,
        };
        let delta = match self.config.max_delta_norm {
            Some(m) => cap_delta(&outcome.delta, m),
            None => outcome.delta,
        };
        Ok(UpdateStep {
            delta,
            grad_norm,
            elapsed: start.elapsed(),
        })
    }
}
