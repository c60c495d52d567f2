//! Latent world models: the model contract, filtering, prior imagination and
//! the variational objective used to fit them.

pub mod elbo;
pub mod env;
pub mod evidence;
pub mod linear;
pub mod neural;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{standard_normal, DiagGaussian};
use crate::seed::Stream;
use crate::types::{ActionSequence, ActionVector, Belief};

pub use elbo::{elbo, elbo_estimate, elbo_gradient, ElboEstimate, ElboNoise};
pub use env::{AnalyticEnv, EnvConfig, EnvKind, EnvModel, StepOutcome};
pub use evidence::exact_evidence;
pub use linear::LinearGaussianRssm;
pub use neural::NeuralRssm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_h: usize,
    pub d_z: usize,
    pub d_o: usize,
    pub d_a: usize,
}

/// Generative latent model `(posterior, transition, prior, decoder, reward)`.
///
/// The transition is a pure deterministic function; every distribution it
/// returns has strictly positive variances.
pub trait LatentModel: Send + Sync {
    fn dims(&self) -> ModelDims;

    /// `e(z | h, o)`.
    fn posterior(&self, h: &DVector<f64>, o: &DVector<f64>) -> DiagGaussian;

    /// `h' = f(h, z, a)`.
    fn transition(&self, h: &DVector<f64>, z: &DVector<f64>, a: &ActionVector) -> DVector<f64>;

    /// `p(z | h)`.
    fn prior(&self, h: &DVector<f64>) -> DiagGaussian;

    /// `d(o | h, z)`.
    fn decode(&self, h: &DVector<f64>, z: &DVector<f64>) -> DiagGaussian;

    /// Mean of `r(r | h, z)`.
    fn reward(&self, h: &DVector<f64>, z: &DVector<f64>) -> f64;

    /// Variance of the reward likelihood.
    fn reward_var(&self) -> f64 {
        1.0
    }

    /// `h_0`; the zero vector.
    fn initial_h(&self) -> DVector<f64> {
        DVector::zeros(self.dims().d_h)
    }
}

/// One recorded episode fragment: `T + 1` observation slots (each possibly
/// missing), `T + 1` reward slots and `T` actions. `rewards[t]` is the reward
/// received on arriving at step `t`, so `rewards[0]` is usually absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub observations: Vec<Option<DVector<f64>>>,
    pub rewards: Vec<Option<f64>>,
    pub actions: Vec<ActionVector>,
}

impl Sequence {
    pub fn new(
        observations: Vec<Option<DVector<f64>>>,
        rewards: Vec<Option<f64>>,
        actions: Vec<ActionVector>,
    ) -> Result<Self> {
        let s = Self {
            observations,
            rewards,
            actions,
        };
        if s.observations.is_empty() {
            return Err(Error::Empty("sequence observations"));
        }
        if s.actions.len() + 1 != s.observations.len() {
            return Err(Error::LengthMismatch {
                what: "sequence actions",
                expected: s.observations.len() - 1,
                got: s.actions.len(),
            });
        }
        if s.rewards.len() != s.observations.len() {
            return Err(Error::LengthMismatch {
                what: "sequence rewards",
                expected: s.observations.len(),
                got: s.rewards.len(),
            });
        }
        Ok(s)
    }

    /// Observations only; no reward channel.
    pub fn observations_only(observations: Vec<Option<DVector<f64>>>, actions: Vec<ActionVector>) -> Result<Self> {
        let n = observations.len();
        Self::new(observations, vec![None; n], actions)
    }

    /// `T`, the number of transitions.
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        for o in self.observations.iter().flatten() {
            if o.len() != dims.d_o {
                return Err(Error::DimensionMismatch {
                    what: "observation",
                    expected: dims.d_o,
                    got: o.len(),
                });
            }
        }
        for a in &self.actions {
            if a.len() != dims.d_a {
                return Err(Error::DimensionMismatch {
                    what: "action",
                    expected: dims.d_a,
                    got: a.len(),
                });
            }
        }
        Ok(())
    }
}

/// Imagined future: `beliefs[t]` is the belief after executing `a_t` and
/// `rewards[t]` the predicted reward on arriving there.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub beliefs: Vec<Belief>,
    pub rewards: Vec<f64>,
}

impl LatentTrajectory {
    pub fn horizon(&self) -> usize {
        self.beliefs.len()
    }
}

/// Belief at a step: sample `z` from the posterior when `o` is present and
/// from the prior otherwise.
pub fn filter_update<M: LatentModel + ?Sized>(
    model: &M,
    h: DVector<f64>,
    obs: Option<&DVector<f64>>,
    stream: &mut Stream,
) -> (Belief, DiagGaussian) {
    let dist = match obs {
        Some(o) => model.posterior(&h, o),
        None => model.prior(&h),
    };
    let eps = standard_normal(stream, dist.dim());
    let z = dist.reparam(&eps);
    (Belief::new(h, z), dist)
}

/// Run the filtering posterior over a recorded sequence, returning one belief
/// per observation slot together with the distribution each `z` was drawn
/// from.
pub fn posterior_filter_detailed<M: LatentModel + ?Sized>(
    model: &M,
    seq: &Sequence,
    stream: &mut Stream,
) -> Result<Vec<(Belief, DiagGaussian)>> {
    seq.check_dims(&model.dims())?;
    let mut out = Vec::with_capacity(seq.observations.len());
    let mut h = model.initial_h();
    for t in 0..seq.observations.len() {
        let (belief, dist) = filter_update(model, h, seq.observations[t].as_ref(), stream);
        if t < seq.actions.len() {
            h = model.transition(&belief.h, &belief.z, &seq.actions[t]);
        } else {
            h = belief.h.clone();
        }
        out.push((belief, dist));
    }
    Ok(out)
}

pub fn posterior_filter<M: LatentModel + ?Sized>(
    model: &M,
    seq: &Sequence,
    stream: &mut Stream,
) -> Result<Vec<Belief>> {
    Ok(posterior_filter_detailed(model, seq, stream)?
        .into_iter()
        .map(|(b, _)| b)
        .collect())
}

/// Imagine forward from `start` under the prior, executing `actions`.
pub fn prior_rollout<M: LatentModel + ?Sized>(
    model: &M,
    start: &Belief,
    actions: &ActionSequence,
    stream: &mut Stream,
) -> LatentTrajectory {
    let mut beliefs = Vec::with_capacity(actions.horizon());
    let mut rewards = Vec::with_capacity(actions.horizon());
    let mut cur = start.clone();
    for a in &actions.actions {
        cur = imagine_step(model, &cur, a, stream);
        rewards.push(model.reward(&cur.h, &cur.z));
        beliefs.push(cur.clone());
    }
    LatentTrajectory { beliefs, rewards }
}

/// Imagine forward for `horizon` steps choosing each action with `policy`.
/// The policy draws from the same stream, before the prior sample of the step.
pub fn policy_rollout<M, P>(
    model: &M,
    start: &Belief,
    horizon: usize,
    stream: &mut Stream,
    mut policy: P,
) -> (LatentTrajectory, Vec<ActionVector>)
where
    M: LatentModel + ?Sized,
    P: FnMut(&Belief, &mut Stream) -> ActionVector,
{
    let mut beliefs = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut cur = start.clone();
    for _ in 0..horizon {
        let a = policy(&cur, stream);
        cur = imagine_step(model, &cur, &a, stream);
        rewards.push(model.reward(&cur.h, &cur.z));
        beliefs.push(cur.clone());
        actions.push(a);
    }
    (LatentTrajectory { beliefs, rewards }, actions)
}

fn imagine_step<M: LatentModel + ?Sized>(
    model: &M,
    cur: &Belief,
    a: &ActionVector,
    stream: &mut Stream,
) -> Belief {
    let h = model.transition(&cur.h, &cur.z, a);
    let prior = model.prior(&h);
    let eps = standard_normal(stream, prior.dim());
    let z = prior.reparam(&eps);
    Belief::new(h, z)
}

/// Draw a fully observed sequence from the generative model under fixed
/// actions. `rewards[0]` is absent.
pub fn simulate_sequence<M: LatentModel + ?Sized>(model: &M, actions: &[ActionVector], stream: &mut Stream) -> Result<Sequence> {
    let mut h = model.initial_h();
    let sd_r = model.reward_var().sqrt();
    let mut observations = Vec::with_capacity(actions.len() + 1);
    let mut rewards = Vec::with_capacity(actions.len() + 1);
    for t in 0..=actions.len() {
        let z = model.prior(&h).sample(stream);
        observations.push(Some(model.decode(&h, &z).sample(stream)));
        let noise: f64 = stream.sample(rand_distr::StandardNormal);
        rewards.push((t > 0).then(|| model.reward(&h, &z) + sd_r * noise));
        if t < actions.len() {
            h = model.transition(&h, &z, &actions[t]);
        }
    }
    Sequence::new(observations, rewards, actions.to_vec())
}

/// The model families the learner and planner can run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldModel {
    Linear(LinearGaussianRssm),
    Neural(NeuralRssm),
    /// Hand-specified model of an analytic environment; never fitted.
    Oracle(EnvModel),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            WorldModel::Linear($m) => $e,
            WorldModel::Neural($m) => $e,
            WorldModel::Oracle($m) => $e,
        }
    };
}

impl LatentModel for WorldModel {
    fn dims(&self) -> ModelDims {
        dispatch!(self, m => m.dims())
    }
    fn posterior(&self, h: &DVector<f64>, o: &DVector<f64>) -> DiagGaussian {
        dispatch!(self, m => m.posterior(h, o))
    }
    fn transition(&self, h: &DVector<f64>, z: &DVector<f64>, a: &ActionVector) -> DVector<f64> {
        dispatch!(self, m => m.transition(h, z, a))
    }
    fn prior(&self, h: &DVector<f64>) -> DiagGaussian {
        dispatch!(self, m => m.prior(h))
    }
    fn decode(&self, h: &DVector<f64>, z: &DVector<f64>) -> DiagGaussian {
        dispatch!(self, m => m.decode(h, z))
    }
    fn reward(&self, h: &DVector<f64>, z: &DVector<f64>) -> f64 {
        dispatch!(self, m => m.reward(h, z))
    }
    fn reward_var(&self) -> f64 {
        dispatch!(self, m => m.reward_var())
    }
    fn initial_h(&self) -> DVector<f64> {
        dispatch!(self, m => m.initial_h())
    }
}
