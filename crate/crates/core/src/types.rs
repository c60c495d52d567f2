//! Value types shared by every other module: actions, bounds, beliefs and
//! the planner / value configurations.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single control input `a_t`.
pub type ActionVector = DVector<f64>;

/// Per-component closed interval every action must lie in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: DVector<f64>,
    pub high: DVector<f64>,
}

impl ActionBounds {
    /// `[-1, 1]^dim`.
    pub fn symmetric(dim: usize) -> Self {
        Self {
            low: DVector::from_element(dim, -1.0),
            high: DVector::from_element(dim, 1.0),
        }
    }

    pub fn new(low: DVector<f64>, high: DVector<f64>) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::DimensionMismatch {
                what: "action bounds",
                expected: low.len(),
                got: high.len(),
            });
        }
        if low.iter().zip(high.iter()).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidConfig("action bound low > high".into()));
        }
        Ok(Self { low, high })
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn range(&self) -> DVector<f64> {
        &self.high - &self.low
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.high + &self.low) * 0.5
    }

    pub fn clip(&self, a: &ActionVector) -> ActionVector {
        DVector::from_iterator(
            a.len(),
            a.iter()
                .zip(self.low.iter().zip(self.high.iter()))
                .map(|(&x, (&l, &h))| x.clamp(l, h)),
        )
    }

    pub fn contains(&self, a: &ActionVector) -> bool {
        a.iter()
            .zip(self.low.iter().zip(self.high.iter()))
            .all(|(&x, (&l, &h))| x >= l && x <= h)
    }
}

/// An `H`-step open-loop plan `a_{0:H-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub actions: Vec<ActionVector>,
}

impl ActionSequence {
    pub fn new(actions: Vec<ActionVector>) -> Self {
        Self { actions }
    }

    pub fn constant(a: &ActionVector, horizon: usize) -> Self {
        Self {
            actions: vec![a.clone(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Clamp every component of every action into `bounds`.
pub fn clip_actions(seq: &ActionSequence, bounds: &ActionBounds) -> ActionSequence {
    ActionSequence {
        actions: seq.actions.iter().map(|a| bounds.clip(a)).collect(),
    }
}

/// Filtered latent state `(h, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    /// Deterministic recurrent memory.
    pub h: DVector<f64>,
    /// Stochastic latent sample.
    pub z: DVector<f64>,
}

impl Belief {
    pub fn new(h: DVector<f64>, z: DVector<f64>) -> Self {
        Self { h, z }
    }

    pub fn zeros(d_h: usize, d_z: usize) -> Self {
        Self {
            h: DVector::zeros(d_h),
            z: DVector::zeros(d_z),
        }
    }

    /// `[h; z]` as one flat feature vector.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h.len() + self.z.len());
        out.extend_from_slice(self.h.as_slice());
        out.extend_from_slice(self.z.as_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(self.z.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Planning horizon `H`.
    pub horizon: usize,
    /// Number of mixture modes `M`.
    pub modes: usize,
    /// Candidates drawn per mode per iteration `K`.
    pub candidates: usize,
    /// MPPI iterations `L`.
    pub iterations: usize,
    /// Softmax temperature `tau`.
    pub temperature: f64,
    /// Stabilizer `delta` added to the best score.
    pub delta: f64,
    /// Covariance floor `epsilon`.
    pub epsilon: f64,
    /// Policy/random mixing ratio `alpha_m` for each mode.
    pub alpha_schedule: Vec<f64>,
    /// Initial proposal standard deviation as a fraction of the action range.
    pub sigma_init: f64,
    /// Weight of the fresh policy/random initialization when blended into a
    /// warm-started mode.
    pub init_blend: f64,
}

impl PlannerConfig {
    /// Evenly spaced `alpha` from 1 (pure policy) down to 0 (pure random).
    pub fn even_alpha(modes: usize) -> Vec<f64> {
        if modes == 1 {
            return vec![1.0];
        }
        (0..modes)
            .map(|m| 1.0 - m as f64 / (modes - 1) as f64)
            .collect()
    }

    pub fn with_modes(mut self, modes: usize) -> Self {
        self.modes = modes;
        self.alpha_schedule = Self::even_alpha(modes);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.horizon < 1 {
            return bad("planner horizon must be >= 1");
        }
        if self.modes < 1 {
            return bad("planner modes must be >= 1");
        }
        if self.candidates < 2 {
            return bad("planner candidates must be >= 2");
        }
        if self.iterations < 1 {
            return bad("planner iterations must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("planner temperature must be > 0");
        }
        if !(self.delta > 0.0) {
            return bad("planner delta must be > 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("planner epsilon must be > 0");
        }
        if self.alpha_schedule.len() != self.modes {
            return bad("alpha schedule must have one entry per mode");
        }
        if self.alpha_schedule.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alpha schedule entries must lie in [0, 1]");
        }
        if !(self.sigma_init > 0.0) {
            return bad("planner sigma_init must be > 0");
        }
        if !(0.0..=1.0).contains(&self.init_blend) {
            return bad("planner init_blend must lie in [0, 1]");
        }
        Ok(())
    }
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            modes: 4,
            candidates: 256,
            iterations: 6,
            temperature: 0.5,
            delta: 1e-6,
            epsilon: 1e-4,
            alpha_schedule: Self::even_alpha(4),
            sigma_init: 0.5,
            init_blend: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    /// Critic ensemble size `E`.
    pub ensemble: usize,
    /// UCB exploration coefficient `beta`.
    pub beta: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Discount `gamma`.
    pub gamma: f64,
    /// EMA decay of the UCB normalizer.
    pub normalizer_decay: f64,
}

impl ValueConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.ensemble < 2 {
            return bad("critic ensemble size must be >= 2");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(0.0 <= self.lambda_min && self.lambda_min <= self.lambda_max && self.lambda_max <= 1.0)
        {
            return bad("need 0 <= lambda_min <= lambda_max <= 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.normalizer_decay >= 0.0 && self.normalizer_decay < 1.0) {
            return bad("normalizer decay must lie in [0, 1)");
        }
        Ok(())
    }
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            ensemble: 5,
            beta: 1.0,
            lambda_min: 0.6,
            lambda_max: 0.95,
            gamma: 0.99,
            normalizer_decay: 0.99,
        }
    }
}
