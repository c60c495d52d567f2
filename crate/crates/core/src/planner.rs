//! Gaussian-mixture MPPI in belief space.
//!
//! `M` diagonal Gaussian proposals over action sequences are sampled,
//! rolled out under the model prior, scored with the shared uncertainty-gated
//! return, and each is refit by weighted moment matching. Weights use one
//! best score over all modes so modes stay comparable.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{Purpose, SeedSpec, Stream};
use crate::types::{clip_actions, ActionBounds, ActionSequence, ActionVector, Belief, PlannerConfig, ValueConfig};
use crate::value::{score_trajectory, CriticEnsemble, RunningNormalizer, ScoredTrace};
use crate::worldmodel::{policy_rollout, prior_rollout, LatentModel, LatentTrajectory};

/// Anything that can propose an action for a belief.
pub trait Policy: Sync {
    fn act(&self, belief: &Belief, stream: &mut Stream) -> ActionVector;
}

/// Uniform actions over the bounds.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    pub bounds: ActionBounds,
}

impl Policy for UniformPolicy {
    fn act(&self, _belief: &Belief, stream: &mut Stream) -> ActionVector {
        DVector::from_fn(self.bounds.dim(), |i, _| {
            stream.random_range(self.bounds.low[i]..=self.bounds.high[i])
        })
    }
}

/// One diagonal Gaussian over an `H`-step action sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalMode {
    pub mu: Vec<ActionVector>,
    /// Diagonal variances per step.
    pub var: Vec<DVector<f64>>,
}

impl ProposalMode {
    pub fn horizon(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub modes: Vec<ProposalMode>,
    pub alpha_schedule: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub mode: usize,
    pub index: usize,
    pub actions: ActionSequence,
    pub trajectory: LatentTrajectory,
    pub scored: ScoredTrace,
    pub score: f64,
}

fn init_var(cfg: &PlannerConfig, bounds: &ActionBounds) -> DVector<f64> {
    bounds.range().map(|r| (cfg.sigma_init * r).powi(2))
}

/// Random sequence: Gaussian around the bound centers with the initial
/// proposal spread, clipped.
fn random_sequence(cfg: &PlannerConfig, bounds: &ActionBounds, stream: &mut Stream) -> Vec<ActionVector> {
    let center = bounds.center();
    let std = init_var(cfg, bounds).map(f64::sqrt);
    (0..cfg.horizon)
        .map(|_| {
            let a = DVector::from_fn(bounds.dim(), |i, _| center[i] + std[i] * stream.sample::<f64, _>(StandardNormal));
            bounds.clip(&a)
        })
        .collect()
}

/// Fresh proposals: `mu_m = alpha_m a_pi + (1 - alpha_m) a_rand` where `a_pi`
/// is the actor rolled through the model prior from `belief`.
#[allow(clippy::too_many_arguments)]
pub fn init_modes<M: LatentModel + ?Sized, P: Policy + ?Sized>(
    actor: &P,
    model: &M,
    belief: &Belief,
    cfg: &PlannerConfig,
    bounds: &ActionBounds,
    seeds: &SeedSpec,
    call: u64,
) -> ModeSet {
    let var0 = init_var(cfg, bounds);
    let modes = (0..cfg.modes)
        .map(|m| {
            let mut ps = seeds.stream(Purpose::PolicyInit, &[call, m as u64]);
            let (_, a_pi) = policy_rollout(model, belief, cfg.horizon, &mut ps, |b, s| actor.act(b, s));
            let mut rs = seeds.stream(Purpose::RandomInit, &[call, m as u64]);
            let a_rand = random_sequence(cfg, bounds, &mut rs);
            blend_mode(cfg.alpha_schedule[m], &a_pi, &a_rand, &var0)
        })
        .collect();
    ModeSet { modes, alpha_schedule: cfg.alpha_schedule.clone() }
}

/// The `alpha` blend of one mode, with every variance at `var0`.
pub fn blend_mode(alpha: f64, a_pi: &[ActionVector], a_rand: &[ActionVector], var0: &DVector<f64>) -> ProposalMode {
    let mu = a_pi
        .iter()
        .zip(a_rand)
        .map(|(p, r)| p * alpha + r * (1.0 - alpha))
        .collect::<Vec<_>>();
    let var = vec![var0.clone(); mu.len()];
    ProposalMode { mu, var }
}

/// Receding-horizon shift: drop the first step, repeat the last mean, and
/// reset the last variance to `var0`.
pub fn warm_start_shift(modes: &ModeSet, var0: &DVector<f64>) -> ModeSet {
    let modes_out = modes
        .modes
        .iter()
        .map(|mode| {
            let h = mode.horizon();
            let mut mu: Vec<ActionVector> = mode.mu[1.min(h - 1)..].to_vec();
            let mut var: Vec<DVector<f64>> = mode.var[1.min(h - 1)..].to_vec();
            if h > 1 {
                mu.push(mode.mu[h - 1].clone());
                var.push(var0.clone());
            } else {
                var[0] = var0.clone();
            }
            ProposalMode { mu, var }
        })
        .collect();
    ModeSet { modes: modes_out, alpha_schedule: modes.alpha_schedule.clone() }
}

/// Convex blend `(1 - b) * warm + b * fresh` of means and variances.
pub fn blend_sets(warm: &ModeSet, fresh: &ModeSet, b: f64) -> ModeSet {
    let modes = warm
        .modes
        .iter()
        .zip(&fresh.modes)
        .map(|(w, f)| ProposalMode {
            mu: w.mu.iter().zip(&f.mu).map(|(x, y)| x * (1.0 - b) + y * b).collect(),
            var: w.var.iter().zip(&f.var).map(|(x, y)| x * (1.0 - b) + y * b).collect(),
        })
        .collect();
    ModeSet { modes, alpha_schedule: warm.alpha_schedule.clone() }
}

/// One sequence from `N(mu_t, diag var_t)` per step, clipped to the bounds.
pub fn sample_candidate(mode: &ProposalMode, bounds: &ActionBounds, stream: &mut Stream) -> ActionSequence {
    let actions = mode
        .mu
        .iter()
        .zip(&mode.var)
        .map(|(mu, var)| DVector::from_fn(mu.len(), |i, _| mu[i] + var[i].sqrt() * stream.sample::<f64, _>(StandardNormal)))
        .collect();
    clip_actions(&ActionSequence::new(actions), bounds)
}

pub fn sample_candidates(mode: &ProposalMode, k: usize, bounds: &ActionBounds, stream: &mut Stream) -> Vec<ActionSequence> {
    (0..k).map(|_| sample_candidate(mode, bounds, stream)).collect()
}

/// Roll each candidate out from `start` and score it with the shared
/// return. `streams[i]` drives the prior samples of candidate `i`.
#[allow(clippy::too_many_arguments)]
pub fn score_candidates<M: LatentModel + ?Sized>(
    mode: usize,
    candidates: Vec<ActionSequence>,
    start: &Belief,
    model: &M,
    critics: &CriticEnsemble,
    normalizer: &RunningNormalizer,
    cfg: &ValueConfig,
    streams: &mut [Stream],
) -> Result<Vec<ScoredCandidate>> {
    if streams.len() != candidates.len() {
        return Err(Error::LengthMismatch { what: "candidate streams", expected: candidates.len(), got: streams.len() });
    }
    candidates
        .into_iter()
        .zip(streams.iter_mut())
        .enumerate()
        .map(|(index, (actions, stream))| score_one(mode, index, actions, start, model, critics, normalizer, cfg, stream))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn score_one<M: LatentModel + ?Sized>(
    mode: usize,
    index: usize,
    actions: ActionSequence,
    start: &Belief,
    model: &M,
    critics: &CriticEnsemble,
    normalizer: &RunningNormalizer,
    cfg: &ValueConfig,
    stream: &mut Stream,
) -> Result<ScoredCandidate> {
    let trajectory = prior_rollout(model, start, &actions, stream);
    let scored = score_trajectory(critics, normalizer, cfg, &trajectory)?;
    let score = scored.trace.g0();
    Ok(ScoredCandidate { mode, index, actions, trajectory, scored, score })
}

/// Best `(score, position)` over `scores`; ties keep the earliest position.
/// Callers order scores by ascending `(mode, candidate)`.
pub fn global_best(scores: &[f64]) -> Result<(f64, usize)> {
    if scores.is_empty() {
        return Err(Error::Empty("scored candidates"));
    }
    let mut best = (scores[0], 0);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best.0 {
            best = (s, i);
        }
    }
    Ok(best)
}

/// `softmax_k((1/tau) * G_k / (G_best + delta))` over one mode.
pub fn mode_weights(scores: &[f64], g_best: f64, tau: f64, delta: f64) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) || !g_best.is_finite() {
        return Err(Error::NonFinite("candidate scores"));
    }
    if scores.is_empty() {
        return Err(Error::Empty("mode scores"));
    }
    let denom = g_best + delta;
    let logits: Vec<f64> = scores.iter().map(|s| (s / denom) / tau).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Weighted moment matching: `mu_t = sum_k w_k a_t`,
/// `var_t = sum_k w_k (a_t - mu_t)^2 + epsilon`.
pub fn update_mode(candidates: &[&ActionSequence], weights: &[f64], epsilon: f64) -> ProposalMode {
    let h = candidates[0].horizon();
    let d = candidates[0].actions[0].len();
    let mut mu = Vec::with_capacity(h);
    let mut var = Vec::with_capacity(h);
    for t in 0..h {
        let mut m = DVector::zeros(d);
        for (c, &w) in candidates.iter().zip(weights) {
            m += &c.actions[t] * w;
        }
        let mut v = DVector::from_element(d, 0.0);
        for (c, &w) in candidates.iter().zip(weights) {
            let diff = &c.actions[t] - &m;
            v += diff.component_mul(&diff) * w;
        }
        v.add_scalar_mut(epsilon);
        mu.push(m);
        var.push(v);
    }
    ProposalMode { mu, var }
}

/// Result of refitting every mode from one iteration's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureUpdate {
    pub weights: Vec<Vec<f64>>,
    pub modes: Vec<ProposalMode>,
    /// Mode holding the best candidate.
    pub best_mode: usize,
    pub best_score: f64,
    /// First mean action of `best_mode`, clipped.
    pub action: ActionVector,
}

/// Shift all scores by the global minimum, take the global best, weight each
/// mode and refit it. `scores[m][k]` belongs to `candidates[m][k]`.
pub fn mixture_update(
    candidates: &[Vec<&ActionSequence>],
    scores: &[Vec<f64>],
    cfg: &PlannerConfig,
    bounds: &ActionBounds,
) -> Result<MixtureUpdate> {
    let flat: Vec<f64> = scores.iter().flatten().copied().collect();
    let (best_score, pos) = global_best(&flat)?;
    let mut best_mode = 0;
    let mut seen = 0;
    for (m, s) in scores.iter().enumerate() {
        if pos < seen + s.len() {
            best_mode = m;
            break;
        }
        seen += s.len();
    }
    let floor = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let g_best = best_score - floor;
    let mut weights = Vec::with_capacity(scores.len());
    let mut modes = Vec::with_capacity(scores.len());
    for (cands, s) in candidates.iter().zip(scores) {
        let shifted: Vec<f64> = s.iter().map(|g| g - floor).collect();
        let w = mode_weights(&shifted, g_best, cfg.temperature, cfg.delta)?;
        modes.push(update_mode(cands, &w, cfg.epsilon));
        weights.push(w);
    }
    let action = bounds.clip(&modes[best_mode].mu[0]);
    Ok(MixtureUpdate { weights, modes, best_mode, best_score, action })
}

/// Per-call planner record, one NDJSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub step: u64,
    pub call: u64,
    /// Global best score of each iteration.
    pub best_by_iteration: Vec<f64>,
    /// Best score of each mode in the final iteration.
    pub mode_best: Vec<f64>,
    pub selected_mode: usize,
    /// Mean lambda by depth over every candidate of the call.
    pub mean_lambda_by_depth: Vec<f64>,
    /// Mean lambda over (candidate, depth) pairs whose ensemble spread is
    /// above / not above the call's median spread.
    pub lambda_high_sigma: Option<f64>,
    pub lambda_low_sigma: Option<f64>,
    pub wall_ms: f64,
}

impl PlanDiagnostics {
    pub fn mean_lambda(&self) -> Option<f64> {
        if self.mean_lambda_by_depth.is_empty() {
            None
        } else {
            Some(self.mean_lambda_by_depth.iter().sum::<f64>() / self.mean_lambda_by_depth.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub action: ActionVector,
    pub modes: ModeSet,
    pub diagnostics: PlanDiagnostics,
    /// Raw gating UCB values of every candidate, in (iteration, mode,
    /// candidate, depth) order.
    pub raw_ucb: Vec<f64>,
}

/// Receding-horizon planner state: configuration, the mixture carried
/// between calls, and the worker pool.
pub struct Planner {
    pub cfg: PlannerConfig,
    pub value: ValueConfig,
    pub bounds: ActionBounds,
    seeds: SeedSpec,
    call: u64,
    modes: Option<ModeSet>,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Planner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Planner")
            .field("cfg", &self.cfg)
            .field("call", &self.call)
            .field("workers", &self.pool.as_ref().map(|p| p.current_num_threads()))
            .finish()
    }
}

impl Planner {
    /// `workers = 0` uses the global rayon pool.
    pub fn new(cfg: PlannerConfig, value: ValueConfig, bounds: ActionBounds, seeds: SeedSpec, workers: usize) -> Result<Self> {
        cfg.validate()?;
        value.validate()?;
        let pool = if workers == 0 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?,
            )
        };
        Ok(Self { cfg, value, bounds, seeds, call: 0, modes: None, pool })
    }

    pub fn calls(&self) -> u64 {
        self.call
    }

    pub fn modes(&self) -> Option<&ModeSet> {
        self.modes.as_ref()
    }

    /// Forget the carried mixture; the next call initializes afresh.
    pub fn reset(&mut self) {
        self.modes = None;
    }

    /// Plan from `belief`. Scores use a snapshot of `normalizer`; the raw
    /// UCB values of the call are folded in once it finishes.
    pub fn plan<M: LatentModel + ?Sized, P: Policy + ?Sized>(
        &mut self,
        belief: &Belief,
        model: &M,
        critics: &CriticEnsemble,
        actor: &P,
        normalizer: &mut RunningNormalizer,
    ) -> Result<PlanOutput> {
        let snapshot = normalizer.clone();
        let out = match &self.pool {
            Some(pool) => pool.install(|| self.plan_inner(belief, model, critics, actor, &snapshot)),
            None => self.plan_inner(belief, model, critics, actor, &snapshot),
        }?;
        normalizer.update_batch(&out.raw_ucb);
        self.modes = Some(out.modes.clone());
        self.call += 1;
        Ok(out)
    }

    fn plan_inner<M: LatentModel + ?Sized, P: Policy + ?Sized>(
        &self,
        belief: &Belief,
        model: &M,
        critics: &CriticEnsemble,
        actor: &P,
        normalizer: &RunningNormalizer,
    ) -> Result<PlanOutput> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let call = self.call;
        let fresh = init_modes(actor, model, belief, cfg, &self.bounds, &self.seeds, call);
        let mut set = match &self.modes {
            Some(prev) if prev.modes.len() == cfg.modes && prev.modes[0].horizon() == cfg.horizon => {
                let var0 = init_var(cfg, &self.bounds);
                blend_sets(&warm_start_shift(prev, &var0), &fresh, cfg.init_blend)
            }
            _ => fresh,
        };

        let h = cfg.horizon;
        let mut best_by_iteration = Vec::with_capacity(cfg.iterations);
        let mut lambda_sum = vec![0.0; h.saturating_sub(1)];
        let mut lambda_count = 0usize;
        let mut spread: Vec<(f64, f64)> = Vec::new();
        let mut raw_ucb = Vec::new();
        let mut last: Option<(MixtureUpdate, Vec<f64>)> = None;

        for iter in 0..cfg.iterations {
            let jobs: Vec<(usize, usize)> = (0..cfg.modes)
                .flat_map(|m| (0..cfg.candidates).map(move |k| (m, k)))
                .collect();
            let scored: Vec<ScoredCandidate> = jobs
                .par_iter()
                .map(|&(m, k)| {
                    let mut stream = self.seeds.stream(Purpose::Sample, &[call, iter as u64, m as u64, k as u64]);
                    let actions = sample_candidate(&set.modes[m], &self.bounds, &mut stream);
                    score_one(m, k, actions, belief, model, critics, normalizer, &self.value, &mut stream)
                })
                .collect::<Result<Vec<_>>>()?;

            for c in &scored {
                raw_ucb.extend_from_slice(c.scored.gating_ucb());
                for (t, l) in c.scored.trace.lambdas.iter().enumerate() {
                    lambda_sum[t] += l;
                    spread.push((c.scored.moments[t].sigma, *l));
                }
                lambda_count += 1;
            }

            let mut cands: Vec<Vec<&ActionSequence>> = vec![Vec::with_capacity(cfg.candidates); cfg.modes];
            let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.candidates); cfg.modes];
            for c in &scored {
                cands[c.mode].push(&c.actions);
                scores[c.mode].push(c.score);
            }
            let upd = mixture_update(&cands, &scores, cfg, &self.bounds)?;
            best_by_iteration.push(upd.best_score);
            let mode_best = scores
                .iter()
                .map(|s| s.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            set = ModeSet { modes: upd.modes.clone(), alpha_schedule: set.alpha_schedule.clone() };
            last = Some((upd, mode_best));
        }

        let (upd, mode_best) = last.expect("at least one iteration");
        let mean_lambda_by_depth = lambda_sum.iter().map(|s| s / lambda_count as f64).collect();
        let (lambda_high_sigma, lambda_low_sigma) = split_by_spread(&mut spread);
        let diagnostics = PlanDiagnostics {
            step: 0,
            call,
            best_by_iteration,
            mode_best,
            selected_mode: upd.best_mode,
            mean_lambda_by_depth,
            lambda_high_sigma,
            lambda_low_sigma,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        Ok(PlanOutput { action: upd.action, modes: set, diagnostics, raw_ucb })
    }
}

/// Mean lambda above and at-or-below the median spread.
fn split_by_spread(pairs: &mut [(f64, f64)]) -> (Option<f64>, Option<f64>) {
    if pairs.len() < 2 {
        return (None, None);
    }
    let mut sigmas: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    sigmas.sort_by(f64::total_cmp);
    let median = sigmas[sigmas.len() / 2];
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), l| (s + l, n + 1));
        if n == 0 {
            None
        } else {
            Some(s / n as f64)
        }
    };
    let high = mean(&mut pairs.iter().filter(|p| p.0 > median).map(|p| p.1));
    let low = mean(&mut pairs.iter().filter(|p| p.0 <= median).map(|p| p.1));
    (high, low)
}
