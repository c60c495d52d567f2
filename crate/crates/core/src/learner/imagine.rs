//! Imagined actor rollouts under the model prior and the targets derived
//! from them.

use nalgebra::DVector;

use super::actor::{Actor, PolicyStep};
use crate::error::{Error, Result};
use crate::seed::Stream;
use crate::types::{ActionVector, Belief, ValueConfig};
use crate::value::{score_trajectory, CriticEnsemble, RunningNormalizer, ScoredTrace};
use crate::worldmodel::{policy_rollout, LatentModel, LatentTrajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedRollout {
    pub start: Belief,
    pub trajectory: LatentTrajectory,
    pub actions: Vec<ActionVector>,
    pub pre_squash: Vec<DVector<f64>>,
    pub log_probs: Vec<f64>,
    /// Filled by [`attach_returns`].
    pub scored: Option<ScoredTrace>,
}

impl ImaginedRollout {
    /// Belief the actor acted from at step `t`.
    pub fn acting_belief(&self, t: usize) -> &Belief {
        if t == 0 {
            &self.start
        } else {
            &self.trajectory.beliefs[t - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedBatch {
    pub rollouts: Vec<ImaginedRollout>,
}

/// Roll the actor forward `horizon` steps from every start belief.
pub fn imagine_rollouts<M: LatentModel + ?Sized>(
    model: &M,
    actor: &Actor,
    starts: &[Belief],
    horizon: usize,
    stream: &mut Stream,
) -> ImaginedBatch {
    let rollouts = starts
        .iter()
        .map(|start| {
            let mut pre_squash = Vec::with_capacity(horizon);
            let mut log_probs = Vec::with_capacity(horizon);
            let (trajectory, actions) = policy_rollout(model, start, horizon, stream, |b, s| {
                let x = actor.sample(b, s);
                pre_squash.push(x.pre_squash);
                log_probs.push(x.log_prob);
                x.action
            });
            ImaginedRollout { start: start.clone(), trajectory, actions, pre_squash, log_probs, scored: None }
        })
        .collect();
    ImaginedBatch { rollouts }
}

/// Score every rollout with the shared return under a fixed normalizer
/// snapshot. Returns the raw gating UCB values in rollout order.
pub fn attach_returns(
    batch: &mut ImaginedBatch,
    critics: &CriticEnsemble,
    normalizer: &RunningNormalizer,
    cfg: &ValueConfig,
) -> Result<Vec<f64>> {
    let mut raw = Vec::new();
    for r in &mut batch.rollouts {
        let s = score_trajectory(critics, normalizer, cfg, &r.trajectory)?;
        raw.extend_from_slice(s.gating_ucb());
        r.scored = Some(s);
    }
    Ok(raw)
}

fn returns(r: &ImaginedRollout) -> Result<&[f64]> {
    r.scored
        .as_ref()
        .map(|s| s.trace.returns.as_slice())
        .ok_or(Error::InvalidConfig("imagined batch has no returns attached".into()))
}

/// Critic regression pairs `(beliefs[t], G_t)`.
pub fn critic_targets(batch: &ImaginedBatch) -> Result<(Vec<Belief>, Vec<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in &batch.rollouts {
        let g = returns(r)?;
        xs.extend(r.trajectory.beliefs.iter().cloned());
        ys.extend_from_slice(g);
    }
    Ok((xs, ys))
}

/// Policy-gradient samples with advantage `G_t - b_t`, where `b_t` is the
/// batch mean of `G_t`.
pub fn policy_steps(batch: &ImaginedBatch) -> Result<Vec<PolicyStep>> {
    let n = batch.rollouts.len();
    if n == 0 {
        return Err(Error::Empty("imagined batch"));
    }
    let h = batch.rollouts[0].actions.len();
    let mut baseline = vec![0.0; h];
    for r in &batch.rollouts {
        for (b, g) in baseline.iter_mut().zip(returns(r)?) {
            *b += g / n as f64;
        }
    }
    let mut steps = Vec::with_capacity(n * h);
    for r in &batch.rollouts {
        let g = returns(r)?;
        for t in 0..h {
            steps.push(PolicyStep {
                belief: r.acting_belief(t).clone(),
                pre_squash: r.pre_squash[t].clone(),
                advantage: g[t] - baseline[t],
            });
        }
    }
    Ok(steps)
}

/// Mean lambda over every gated step of the batch.
pub fn mean_lambda(batch: &ImaginedBatch) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for r in &batch.rollouts {
        if let Some(sc) = &r.scored {
            s += sc.trace.lambdas.iter().sum::<f64>();
            n += sc.trace.lambdas.len();
        }
    }
    if n == 0 {
        None
    } else {
        Some(s / n as f64)
    }
}
