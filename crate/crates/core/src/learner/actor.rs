//! Tanh-squashed Gaussian policy over beliefs.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::LN_2PI;
use crate::nn::{Activation, Adam, Mlp};
use crate::planner::Policy;
use crate::seed::Stream;
use crate::types::{ActionBounds, ActionVector, Belief};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `pi(a | s)`: the network maps belief features to a pre-squash mean and a
/// raw spread; `std = floor + softplus(raw)` and
/// `a = center + half_range * tanh(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub net: Mlp,
    pub bounds: ActionBounds,
    /// Pre-squash standard-deviation floor per component.
    pub std_floor: Vec<f64>,
}

/// One draw from the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorSample {
    pub action: ActionVector,
    /// Pre-squash value `u`.
    pub pre_squash: DVector<f64>,
    pub log_prob: f64,
}

impl Actor {
    /// `noise_floor` is the minimum action noise as a fraction of the range;
    /// near the center of the bounds this maps to a pre-squash floor of
    /// `2 * noise_floor`.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], bounds: ActionBounds, noise_floor: f64, rng: &mut R) -> Self {
        let d = bounds.dim();
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * d);
        let mut net = Mlp::init(&sizes, Activation::Identity, 1.0, rng);
        // shrink the output layer so the initial policy is near-uniform
        let last_in = sizes[sizes.len() - 2];
        let n = net.params.len();
        let w_start = n - (last_in * 2 * d + 2 * d);
        for w in &mut net.params[w_start..n - 2 * d] {
            *w *= 0.1;
        }
        let std_floor = vec![2.0 * noise_floor; d];
        Self { net, bounds, std_floor }
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Pre-squash mean and standard deviation.
    pub fn distribution(&self, belief: &Belief) -> (Vec<f64>, Vec<f64>) {
        let out = self.net.forward(&belief.features());
        self.split(&out)
    }

    fn split(&self, out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.action_dim();
        let mean = out[..d].to_vec();
        let std = (0..d).map(|i| self.std_floor[i] + softplus(out[d + i])).collect();
        (mean, std)
    }

    pub fn squash(&self, u: &DVector<f64>) -> ActionVector {
        let c = self.bounds.center();
        let half = self.bounds.range() * 0.5;
        let a = DVector::from_fn(u.len(), |i, _| c[i] + half[i] * u[i].tanh());
        self.bounds.clip(&a)
    }

    /// `log |da/du|` summed over components.
    fn squash_log_det(&self, u: &DVector<f64>) -> f64 {
        let half = self.bounds.range() * 0.5;
        u.iter()
            .zip(half.iter())
            .map(|(&x, &h)| {
                // log(1 - tanh^2 x) = 2 (ln 2 - x - softplus(-2x))
                h.ln() + 2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x))
            })
            .sum()
    }

    pub fn sample(&self, belief: &Belief, stream: &mut Stream) -> ActorSample {
        let (mean, std) = self.distribution(belief);
        let u = DVector::from_fn(mean.len(), |i, _| mean[i] + std[i] * stream.sample::<f64, _>(StandardNormal));
        let log_prob = gaussian_log_prob(&u, &mean, &std) - self.squash_log_det(&u);
        ActorSample { action: self.squash(&u), pre_squash: u, log_prob }
    }

    /// Squashed mean action.
    pub fn mode_action(&self, belief: &Belief) -> ActionVector {
        let (mean, _) = self.distribution(belief);
        self.squash(&DVector::from_vec(mean))
    }

    /// `log pi(a | s)` of the action whose pre-squash value is `u`.
    pub fn log_prob(&self, belief: &Belief, u: &DVector<f64>) -> f64 {
        let (mean, std) = self.distribution(belief);
        gaussian_log_prob(u, &mean, &std) - self.squash_log_det(u)
    }

    /// Pre-squash Gaussian entropy.
    pub fn entropy(&self, belief: &Belief) -> f64 {
        let (_, std) = self.distribution(belief);
        std.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum()
    }

    /// Gradient of `weight * log pi(a|s) + entropy_weight * H(pi(.|s))` with
    /// respect to the parameters, accumulated into `grad`. Returns the value.
    pub fn accumulate_grad(&self, belief: &Belief, u: &DVector<f64>, weight: f64, entropy_weight: f64, grad: &mut [f64]) -> f64 {
        let d = self.action_dim();
        let tape = self.net.forward_tape(&belief.features());
        let out = tape.output().to_vec();
        let (mean, std) = self.split(&out);
        let mut g_out = vec![0.0; 2 * d];
        let mut value = 0.0;
        for i in 0..d {
            let r = u[i] - mean[i];
            let s2 = std[i] * std[i];
            value += weight * (-0.5 * (LN_2PI + r * r / s2) - std[i].ln());
            value += entropy_weight * (0.5 * (LN_2PI + 1.0) + std[i].ln());
            let d_std = weight * (r * r / (s2 * std[i]) - 1.0 / std[i]) + entropy_weight / std[i];
            g_out[i] = weight * r / s2;
            g_out[d + i] = d_std * sigmoid(out[d + i]);
        }
        value -= weight * self.squash_log_det(u);
        self.net.backward(&tape, &g_out, grad);
        value
    }

    pub fn params(&self) -> &[f64] {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }
}

fn gaussian_log_prob(u: &DVector<f64>, mean: &[f64], std: &[f64]) -> f64 {
    (0..u.len())
        .map(|i| {
            let r = (u[i] - mean[i]) / std[i];
            -0.5 * (LN_2PI + r * r) - std[i].ln()
        })
        .sum()
}

impl Policy for Actor {
    fn act(&self, belief: &Belief, stream: &mut Stream) -> ActionVector {
        self.sample(belief, stream).action
    }
}

/// Actor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct ActorLearner {
    pub actor: Actor,
    pub adam: Adam,
    pub entropy_coef: f64,
}

/// One actor sample used for a policy-gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub belief: Belief,
    pub pre_squash: DVector<f64>,
    pub advantage: f64,
}

impl ActorLearner {
    pub fn new(actor: Actor, lr: f64, entropy_coef: f64) -> Self {
        let n = actor.net.params.len();
        Self { actor, adam: Adam::new(lr, n), entropy_coef }
    }

    /// Mean of `log pi * advantage + entropy_coef * entropy` over `steps`
    /// and its gradient.
    pub fn objective_gradient(&self, steps: &[PolicyStep]) -> Result<(f64, Vec<f64>)> {
        if steps.is_empty() {
            return Err(Error::Empty("policy steps"));
        }
        let n = steps.len() as f64;
        let mut grad = vec![0.0; self.actor.net.params.len()];
        let mut total = 0.0;
        for s in steps {
            total += self
                .actor
                .accumulate_grad(&s.belief, &s.pre_squash, s.advantage / n, self.entropy_coef / n, &mut grad);
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("actor objective"));
        }
        Ok((total, grad))
    }

    /// One ascent step; returns the objective before the step.
    pub fn update(&mut self, steps: &[PolicyStep]) -> Result<f64> {
        let (obj, grad) = self.objective_gradient(steps)?;
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.adam.step(&mut self.actor.net.params, &neg);
        Ok(obj)
    }
}
