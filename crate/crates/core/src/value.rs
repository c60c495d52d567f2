//! Critic ensemble, UCB scoring, running normalization, the UCB-gated
//! lambda schedule, and the recursive lambda-return shared by the planner
//! and the learner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::seed::{Purpose, SeedSpec};
use crate::types::{Belief, ValueConfig};
use crate::worldmodel::LatentTrajectory;

/// Ensemble of value approximators over belief features `[h; z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticEnsemble {
    pub members: Vec<Mlp>,
}

impl CriticEnsemble {
    /// `size` members with hidden layers `hidden`, each initialized from its
    /// own stream.
    pub fn new(size: usize, input_dim: usize, hidden: &[usize], seeds: &SeedSpec) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig("critic ensemble size must be >= 2".into()));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let members = (0..size)
            .map(|i| {
                let mut rng = seeds.stream(Purpose::CriticInit, &[i as u64]);
                Mlp::init(&sizes, Activation::Identity, 1.0, &mut rng)
            })
            .collect();
        Ok(Self { members })
    }

    /// Like [`CriticEnsemble::new`] but with every output layer zeroed, so all
    /// members start at zero with distinct hidden features.
    pub fn zeros(size: usize, input_dim: usize, hidden: &[usize], seeds: &SeedSpec) -> Result<Self> {
        let mut e = Self::new(size, input_dim, hidden, seeds)?;
        for m in &mut e.members {
            let fan_in = m.sizes[m.sizes.len() - 2];
            let n = m.params.len();
            m.params[n - fan_in - 1..].iter_mut().for_each(|p| *p = 0.0);
        }
        Ok(e)
    }

    /// Every member outputs the constant `c` (zero weights, bias `c`).
    pub fn constant(size: usize, input_dim: usize, c: f64) -> Self {
        let sizes = [input_dim, 1];
        let members = (0..size)
            .map(|_| {
                let mut m = Mlp::zeros(&sizes, Activation::Identity);
                *m.params.last_mut().unwrap() = c;
                m
            })
            .collect();
        Self { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn values(&self, belief: &Belief) -> Vec<f64> {
        let x = belief.features();
        self.members.iter().map(|m| m.forward(&x)[0]).collect()
    }

    pub fn moments(&self, belief: &Belief) -> EnsembleMoments {
        ensemble_moments(&self.values(belief))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoments {
    pub mu: f64,
    /// Sample standard deviation, divisor `E - 1`.
    pub sigma: f64,
}

/// Mean and unbiased standard deviation of member outputs (Welford).
pub fn ensemble_moments(values: &[f64]) -> EnsembleMoments {
    assert!(values.len() >= 2, "ensemble moments need at least two members");
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    EnsembleMoments {
        mu: mean,
        sigma: (m2.max(0.0) / (values.len() - 1) as f64).sqrt(),
    }
}

pub fn ucb(m: EnsembleMoments, beta: f64) -> f64 {
    m.mu + beta * m.sigma
}

/// Exponential-moving z-score of raw UCB values, mapped to `[0, 1]` by
/// `(z + 3) / 6` and clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub mean: f64,
    pub var: f64,
    pub decay: f64,
    /// Number of updates applied so far.
    pub updates: u64,
}

const NORM_EPS: f64 = 1e-8;

impl RunningNormalizer {
    pub fn new(decay: f64) -> Self {
        Self { mean: 0.0, var: 1.0, decay, updates: 0 }
    }

    /// Normalized value under the current statistics.
    pub fn apply(&self, raw: f64) -> f64 {
        let z = (raw - self.mean) / (self.var + NORM_EPS).sqrt();
        let u = (z + 3.0) / 6.0;
        if u.is_nan() {
            return 0.5;
        }
        u.clamp(0.0, 1.0)
    }

    /// Normalize `raw` with the statistics as they stand, then fold it in
    /// when `update` is set.
    pub fn normalize(&mut self, raw: f64, update: bool) -> f64 {
        let out = self.apply(raw);
        if update {
            self.update_batch(&[raw]);
        }
        out
    }

    /// Fold a batch of raw values in as one EMA step. The first batch sets
    /// the statistics directly.
    pub fn update_batch(&mut self, raw: &[f64]) {
        let finite: Vec<f64> = raw.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return;
        }
        let n = finite.len() as f64;
        let batch_mean = finite.iter().sum::<f64>() / n;
        if self.updates == 0 {
            self.mean = batch_mean;
            self.var = finite.iter().map(|v| (v - batch_mean).powi(2)).sum::<f64>() / n;
        } else {
            let d = self.decay;
            self.mean = d * self.mean + (1.0 - d) * batch_mean;
            let m = self.mean;
            let batch_var = finite.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            self.var = d * self.var + (1.0 - d) * batch_var;
        }
        self.updates += 1;
    }
}

/// `lambda_max - (lambda_max - lambda_min) * norm_ucb`.
pub fn lambda_gate(norm_ucb: f64, cfg: &ValueConfig) -> f64 {
    cfg.lambda_max - (cfg.lambda_max - cfg.lambda_min) * norm_ucb
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnTrace {
    pub rewards: Vec<f64>,
    pub mus: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub returns: Vec<f64>,
}

impl ReturnTrace {
    pub fn g0(&self) -> f64 {
        self.returns[0]
    }
}

/// Backward recursion
/// `G_{H-1} = mu_{H-1}`, `G_t = r_t + gamma((1 - l_t) mu_{t+1} + l_t G_{t+1})`.
pub fn lambda_return(rewards: &[f64], mus: &[f64], lambdas: &[f64], gamma: f64) -> Result<ReturnTrace> {
    let h = rewards.len();
    if h == 0 {
        return Err(Error::Empty("lambda-return rewards"));
    }
    if mus.len() != h {
        return Err(Error::LengthMismatch { what: "bootstrap means", expected: h, got: mus.len() });
    }
    if lambdas.len() != h - 1 {
        return Err(Error::LengthMismatch { what: "lambdas", expected: h - 1, got: lambdas.len() });
    }
    let mut returns = vec![0.0; h];
    returns[h - 1] = mus[h - 1];
    for t in (0..h - 1).rev() {
        let l = lambdas[t];
        returns[t] = rewards[t] + gamma * ((1.0 - l) * mus[t + 1] + l * returns[t + 1]);
    }
    Ok(ReturnTrace {
        rewards: rewards.to_vec(),
        mus: mus.to_vec(),
        lambdas: lambdas.to_vec(),
        returns,
    })
}

/// Everything the shared return computes along one imagined trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    pub moments: Vec<EnsembleMoments>,
    /// Raw UCB at every depth.
    pub ucb: Vec<f64>,
    pub trace: ReturnTrace,
}

impl ScoredTrace {
    /// Raw UCB values that gated a lambda; these feed the normalizer.
    pub fn gating_ucb(&self) -> &[f64] {
        &self.ucb[..self.ucb.len() - 1]
    }
}

/// The uncertainty-gated return of a trajectory: ensemble moments at each
/// imagined belief, UCB, normalization against a fixed snapshot, gating, and
/// the lambda recursion. Planner scoring and learner targets both call this.
pub fn score_trajectory(
    critics: &CriticEnsemble,
    normalizer: &RunningNormalizer,
    cfg: &ValueConfig,
    traj: &LatentTrajectory,
) -> Result<ScoredTrace> {
    let h = traj.horizon();
    if h == 0 {
        return Err(Error::Empty("trajectory"));
    }
    if traj.rewards.len() != h {
        return Err(Error::LengthMismatch { what: "trajectory rewards", expected: h, got: traj.rewards.len() });
    }
    let moments: Vec<EnsembleMoments> = traj.beliefs.iter().map(|b| critics.moments(b)).collect();
    let ucbs: Vec<f64> = moments.iter().map(|m| ucb(*m, cfg.beta)).collect();
    let lambdas: Vec<f64> = ucbs[..h - 1]
        .iter()
        .map(|&u| lambda_gate(normalizer.apply(u), cfg))
        .collect();
    let mus: Vec<f64> = moments.iter().map(|m| m.mu).collect();
    let trace = lambda_return(&traj.rewards, &mus, &lambdas, cfg.gamma)?;
    if trace.returns.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("lambda return"));
    }
    Ok(ScoredTrace { moments, ucb: ucbs, trace })
}
