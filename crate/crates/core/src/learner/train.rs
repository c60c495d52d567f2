//! The online loop: filter the belief, plan or act, store the transition,
//! and interleave model, critic and actor updates.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::actor::{Actor, ActorLearner};
use super::critic::CriticLearner;
use super::imagine::{attach_returns, critic_targets, imagine_rollouts, mean_lambda, policy_steps};
use super::model_fit::{model_update, trainable_params};
use super::replay::{ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::planner::{PlanDiagnostics, Planner, Policy, UniformPolicy};
use crate::seed::{Purpose, SeedSpec};
use crate::types::{ActionVector, Belief, PlannerConfig, ValueConfig};
use crate::value::{CriticEnsemble, RunningNormalizer};
use crate::worldmodel::{
    filter_update, AnalyticEnv, EnvConfig, EnvModel, LatentModel, LinearGaussianRssm, ModelDims, NeuralRssm,
    WorldModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Neural,
    Linear,
    Oracle,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural" => Ok(ModelKind::Neural),
            "linear" => Ok(ModelKind::Linear),
            "oracle" => Ok(ModelKind::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown model kind '{other}'"))),
        }
    }
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Neural => "neural",
            ModelKind::Linear => "linear",
            ModelKind::Oracle => "oracle",
        }
    }
}

/// Starting point of the critic ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticInit {
    /// Independently initialized members.
    Random,
    /// Every member outputs zero, so the ensemble starts with no spread.
    Zero,
}

impl std::str::FromStr for CriticInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CriticInit::Random),
            "zero" => Ok(CriticInit::Zero),
            other => Err(Error::InvalidConfig(format!("unknown critic init '{other}'"))),
        }
    }
}

impl CriticInit {
    pub fn name(self) -> &'static str {
        match self {
            CriticInit::Random => "random",
            CriticInit::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub model_kind: ModelKind,
    pub critic_init: CriticInit,
    pub d_h: usize,
    pub d_z: usize,
    pub model_hidden: usize,
    pub critic_hidden: usize,
    pub actor_hidden: usize,
    pub model_lr: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub entropy_coef: f64,
    /// Minimum action noise as a fraction of the action range.
    pub noise_floor: f64,
    /// Environment steps of uniform random actions before acting or learning.
    pub warmup_steps: u64,
    /// Run the update block every this many environment steps.
    pub update_every: u64,
    pub model_updates: usize,
    pub critic_updates: usize,
    pub actor_updates: usize,
    /// Imagination start beliefs and replayed sequences per update.
    pub batch_size: usize,
    pub seq_len: usize,
    pub replay_capacity: usize,
    /// When false every parameter stays at its initial value.
    pub learn: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Neural,
            critic_init: CriticInit::Random,
            d_h: 8,
            d_z: 4,
            model_hidden: 32,
            critic_hidden: 32,
            actor_hidden: 32,
            model_lr: 1e-3,
            critic_lr: 1e-3,
            actor_lr: 3e-4,
            entropy_coef: 3e-4,
            noise_floor: 0.05,
            warmup_steps: 1000,
            update_every: 1,
            model_updates: 1,
            critic_updates: 1,
            actor_updates: 1,
            batch_size: 64,
            seq_len: 16,
            replay_capacity: 100_000,
            learn: true,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.update_every == 0 {
            return bad("learner update_every must be >= 1");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("learner batch_size and seq_len must be >= 1");
        }
        if self.replay_capacity < self.seq_len {
            return bad("replay capacity must hold at least one sequence");
        }
        if self.d_h == 0 || self.d_z == 0 {
            return bad("latent sizes must be >= 1");
        }
        if !(self.noise_floor > 0.0) {
            return bad("noise floor must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub planner: PlannerConfig,
    pub value: ValueConfig,
    pub learner: LearnerConfig,
    /// Execute planner actions; otherwise the actor acts directly.
    pub use_planner: bool,
    pub episodes: usize,
    /// Stop training after this many environment steps, 0 for no limit.
    pub max_env_steps: u64,
    /// Evaluate whenever the environment step count reaches a multiple of
    /// this.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Planner worker threads, 0 for the global pool.
    pub workers: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.planner.validate()?;
        self.value.validate()?;
        self.learner.validate()?;
        if self.eval_episodes > 0 && self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1 when evaluating".into()));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        match self.learner.model_kind {
            ModelKind::Oracle => EnvModel::new(self.env.clone()).dims(),
            _ => ModelDims {
                d_h: self.learner.d_h,
                d_z: self.learner.d_z,
                d_o: self.env.obs_dim(),
                d_a: self.env.action_dim(),
            },
        }
    }
}

/// Model, critics, actor and normalizer, with their optimizers.
#[derive(Debug, Clone)]
pub struct Agent {
    pub model: WorldModel,
    pub model_adam: Adam,
    pub critics: CriticLearner,
    pub actor: ActorLearner,
    pub normalizer: RunningNormalizer,
}

impl Agent {
    pub fn new(cfg: &TrainConfig, seeds: &SeedSpec) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.model_dims();
        let mut rng = seeds.stream(Purpose::ModelInit, &[]);
        let model = match cfg.learner.model_kind {
            ModelKind::Neural => WorldModel::Neural(NeuralRssm::new(dims, cfg.learner.model_hidden, &mut rng)),
            ModelKind::Linear => WorldModel::Linear(LinearGaussianRssm::random(dims, &mut rng)),
            ModelKind::Oracle => WorldModel::Oracle(EnvModel::new(cfg.env.clone())),
        };
        let features = dims.d_h + dims.d_z;
        let hidden = [cfg.learner.critic_hidden];
        let critics = match cfg.learner.critic_init {
            CriticInit::Random => CriticEnsemble::new(cfg.value.ensemble, features, &hidden, &seeds.child(Purpose::CriticInit, &[]))?,
            CriticInit::Zero => CriticEnsemble::zeros(cfg.value.ensemble, features, &hidden, &seeds.child(Purpose::CriticInit, &[]))?,
        };
        let mut arng = seeds.stream(Purpose::ActorInit, &[]);
        let actor = Actor::new(features, &[cfg.learner.actor_hidden], cfg.env.bounds(), cfg.learner.noise_floor, &mut arng);
        Ok(Self::from_parts(cfg, model, critics, actor, RunningNormalizer::new(cfg.value.normalizer_decay)))
    }

    pub fn from_parts(cfg: &TrainConfig, model: WorldModel, critics: CriticEnsemble, actor: Actor, normalizer: RunningNormalizer) -> Self {
        let model_adam = Adam::new(cfg.learner.model_lr, trainable_params(&model));
        Self {
            model,
            model_adam,
            critics: CriticLearner::new(critics, cfg.learner.critic_lr),
            actor: ActorLearner::new(actor, cfg.learner.actor_lr, cfg.learner.entropy_coef),
            normalizer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub phase: Phase,
    pub episode: u64,
    /// Training environment steps taken so far.
    pub env_step: u64,
    pub ret: f64,
    pub elbo: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_obj: Option<f64>,
    pub mean_lambda: Option<f64>,
    /// Total planning wall time in the episode.
    pub plan_ms: f64,
}

/// Receives the loop's outputs as they are produced.
pub trait RunSink {
    fn episode(&mut self, m: &EpisodeMetrics) -> Result<()>;
    fn plan(&mut self, _phase: Phase, _d: &PlanDiagnostics) -> Result<()> {
        Ok(())
    }
    fn step(&mut self, _phase: Phase, _episode: u64, _r: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Collects everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub episodes: Vec<EpisodeMetrics>,
    pub plans: Vec<(Phase, PlanDiagnostics)>,
}

impl RunSink for MemorySink {
    fn episode(&mut self, m: &EpisodeMetrics) -> Result<()> {
        self.episodes.push(m.clone());
        Ok(())
    }

    fn plan(&mut self, phase: Phase, d: &PlanDiagnostics) -> Result<()> {
        self.plans.push((phase, d.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Plan,
    /// Sample the actor.
    Actor,
    /// The actor's mean action.
    ActorMean,
}

/// Per-step record of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub belief_h: Vec<f64>,
    pub belief_z: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub position: [f64; 2],
    pub observed: bool,
    pub collided: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub ret: f64,
    pub records: Vec<StepRecord>,
    pub diagnostics: Vec<PlanDiagnostics>,
    pub plan_ms: f64,
    pub reached_goal: bool,
}

/// Streams of one episode are keyed by `episode` under `seeds`; actions
/// before global step `warmup_until` are uniform. The episode is cut short
/// once the global step reaches `step_limit`.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions {
    pub episode: u64,
    pub warmup_until: u64,
    pub mode: ActMode,
    pub step_limit: u64,
}

/// The act path shared by training, evaluation and replay.
pub fn choose_action(
    agent: &mut Agent,
    planner: &mut Planner,
    belief: &Belief,
    mode: ActMode,
    seeds: &SeedSpec,
    global_step: u64,
    warmup_until: u64,
) -> Result<(ActionVector, Option<PlanDiagnostics>)> {
    let mut stream = seeds.stream(Purpose::Act, &[global_step]);
    if global_step < warmup_until {
        let uniform = UniformPolicy { bounds: agent.actor.actor.bounds.clone() };
        return Ok((uniform.act(belief, &mut stream), None));
    }
    match mode {
        ActMode::Plan => {
            let out = planner.plan(belief, &agent.model, &agent.critics.ensemble, &agent.actor.actor, &mut agent.normalizer)?;
            Ok((out.action, Some(out.diagnostics)))
        }
        ActMode::Actor => Ok((agent.actor.actor.sample(belief, &mut stream).action, None)),
        ActMode::ActorMean => Ok((agent.actor.actor.mode_action(belief), None)),
    }
}

/// Run one episode. `after_step` sees every stored transition with the
/// global step it completed.
pub fn run_episode<F>(
    agent: &mut Agent,
    planner: &mut Planner,
    env_cfg: &EnvConfig,
    seeds: &SeedSpec,
    opts: EpisodeOptions,
    global_step: &mut u64,
    mut after_step: F,
) -> Result<EpisodeTrace>
where
    F: FnMut(&mut Agent, Transition, u64) -> Result<()>,
{
    planner.reset();
    let (mut env, first) = AnalyticEnv::reset(env_cfg.clone(), seeds.stream(Purpose::Environment, &[opts.episode]));
    let mut fstream = seeds.stream(Purpose::Filter, &[opts.episode]);
    let h0 = agent.model.initial_h();
    let (mut belief, _) = filter_update(&agent.model, h0, first.as_ref(), &mut fstream);
    let mut prev_obs = first;
    let mut ret = 0.0;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut plan_ms = 0.0;
    let mut t = 0;
    loop {
        let started = Instant::now();
        let (action, diag) = choose_action(agent, planner, &belief, opts.mode, seeds, *global_step, opts.warmup_until)?;
        if let Some(mut d) = diag {
            plan_ms += started.elapsed().as_secs_f64() * 1e3;
            d.step = *global_step;
            diagnostics.push(d);
        }
        let out = env.step(&action)?;
        ret += out.reward;
        records.push(StepRecord {
            t,
            belief_h: belief.h.iter().copied().collect(),
            belief_z: belief.z.iter().copied().collect(),
            action: action.iter().copied().collect(),
            reward: out.reward,
            position: env.position(),
            observed: out.observation.is_some(),
            collided: out.collided,
        });
        let transition = Transition {
            episode: opts.episode,
            observation: prev_obs.take(),
            action: action.clone(),
            reward: out.reward,
            next_observation: out.observation.clone(),
        };
        *global_step += 1;
        after_step(agent, transition, *global_step)?;
        let h = agent.model.transition(&belief.h, &belief.z, &action);
        belief = filter_update(&agent.model, h, out.observation.as_ref(), &mut fstream).0;
        prev_obs = out.observation;
        t += 1;
        if out.done || *global_step >= opts.step_limit {
            break;
        }
    }
    let reached_goal = env_cfg.in_goal(env.position());
    Ok(EpisodeTrace { ret, records, diagnostics, plan_ms, reached_goal })
}

/// Averages of one update block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnStats {
    pub elbo: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_obj: Option<f64>,
    pub mean_lambda: Option<f64>,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// One update block: model steps on replayed sequences, then imagination
/// from filtered replay beliefs, critic steps and actor steps on the shared
/// returns.
pub fn learn_step(agent: &mut Agent, replay: &ReplayBuffer, cfg: &TrainConfig, seeds: &SeedSpec, step: u64) -> Result<LearnStats> {
    let lc = &cfg.learner;
    let mut rs = seeds.stream(Purpose::Replay, &[step]);
    let seqs = match replay.sample_batch(lc.batch_size, lc.seq_len, &mut rs) {
        Ok(s) => s,
        Err(Error::Empty(_)) => return Ok(LearnStats::default()),
        Err(e) => return Err(e),
    };
    let mut elbos = Vec::new();
    for k in 0..lc.model_updates {
        let mut ms = seeds.stream(Purpose::ModelFit, &[step, k as u64]);
        if let Some(v) = model_update(&mut agent.model, &mut agent.model_adam, &seqs, &mut ms)? {
            elbos.push(v / seqs[0].observations.len() as f64);
        }
    }

    let mut fs = seeds.stream(Purpose::Imagine, &[step, 0]);
    let mut starts = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let beliefs = crate::worldmodel::posterior_filter(&agent.model, s, &mut fs)?;
        let pick = fs.random_range(0..beliefs.len());
        starts.push(beliefs[pick].clone());
    }

    let mut losses = Vec::new();
    let mut objs = Vec::new();
    let mut lambdas = Vec::new();
    let rounds = lc.critic_updates.max(lc.actor_updates);
    for k in 0..rounds {
        let mut is = seeds.stream(Purpose::Imagine, &[step, 1 + k as u64]);
        let mut batch = imagine_rollouts(&agent.model, &agent.actor.actor, &starts, cfg.planner.horizon, &mut is);
        let snapshot = agent.normalizer.clone();
        let raw = attach_returns(&mut batch, &agent.critics.ensemble, &snapshot, &cfg.value)?;
        agent.normalizer.update_batch(&raw);
        if let Some(l) = mean_lambda(&batch) {
            lambdas.push(l);
        }
        if k < lc.critic_updates {
            let (xs, ys) = critic_targets(&batch)?;
            losses.push(agent.critics.update(&xs, &ys)?);
        }
        if k < lc.actor_updates {
            let steps = policy_steps(&batch)?;
            objs.push(agent.actor.update(&steps)?);
        }
    }
    Ok(LearnStats {
        elbo: mean_of(&elbos),
        critic_loss: mean_of(&losses),
        actor_obj: mean_of(&objs),
        mean_lambda: mean_of(&lambdas),
    })
}

#[derive(Debug)]
pub struct RunResult {
    pub agent: Agent,
    pub env_steps: u64,
}

fn act_mode(cfg: &TrainConfig, eval: bool) -> ActMode {
    match (cfg.use_planner, eval) {
        (true, _) => ActMode::Plan,
        (false, false) => ActMode::Actor,
        (false, true) => ActMode::ActorMean,
    }
}

/// Seeds of evaluation round `round`.
pub fn eval_seeds(seeds: &SeedSpec, round: u64) -> SeedSpec {
    seeds.child(Purpose::Evaluation, &[round])
}

/// Frozen-policy evaluation: `cfg.eval_episodes` episodes on their own
/// streams, without learning or normalizer updates leaking out.
pub fn evaluate(agent: &Agent, cfg: &TrainConfig, seeds: &SeedSpec, round: u64, sink: &mut dyn RunSink, env_step: u64) -> Result<Vec<f64>> {
    let es = eval_seeds(seeds, round);
    let mut planner = Planner::new(cfg.planner.clone(), cfg.value.clone(), cfg.env.bounds(), es.child(Purpose::Act, &[]), cfg.workers)?;
    let mut returns = Vec::with_capacity(cfg.eval_episodes);
    for i in 0..cfg.eval_episodes {
        let mut frozen = agent.clone();
        let mut step = 0u64;
        let opts = EpisodeOptions { episode: i as u64, warmup_until: 0, mode: act_mode(cfg, true), step_limit: u64::MAX };
        let trace = run_episode(&mut frozen, &mut planner, &cfg.env, &es, opts, &mut step, |_, _, _| Ok(()))?;
        for d in &trace.diagnostics {
            sink.plan(Phase::Eval, d)?;
        }
        for r in &trace.records {
            sink.step(Phase::Eval, i as u64, r)?;
        }
        sink.episode(&EpisodeMetrics {
            phase: Phase::Eval,
            episode: i as u64,
            env_step,
            ret: trace.ret,
            elbo: None,
            critic_loss: None,
            actor_obj: None,
            mean_lambda: mean_of(&trace.diagnostics.iter().filter_map(|d| d.mean_lambda()).collect::<Vec<_>>()),
            plan_ms: trace.plan_ms,
        })?;
        returns.push(trace.ret);
    }
    Ok(returns)
}

/// The full training loop for one seed.
pub fn train_loop(cfg: &TrainConfig, seed: u64, sink: &mut dyn RunSink) -> Result<RunResult> {
    cfg.validate()?;
    let seeds = SeedSpec::new(seed);
    let mut agent = Agent::new(cfg, &seeds)?;
    train_from(cfg, &seeds, &mut agent, sink)
}

/// [`train_loop`] from an existing agent.
pub fn train_from(cfg: &TrainConfig, seeds: &SeedSpec, agent: &mut Agent, sink: &mut dyn RunSink) -> Result<RunResult> {
    let mut planner = Planner::new(cfg.planner.clone(), cfg.value.clone(), cfg.env.bounds(), seeds.child(Purpose::Act, &[]), cfg.workers)?;
    let mut replay = ReplayBuffer::new(cfg.learner.replay_capacity);
    let mut global_step = 0u64;

    if cfg.episodes == 0 && cfg.eval_episodes > 0 {
        evaluate(agent, cfg, seeds, 0, sink, 0)?;
    }
    let limit = if cfg.max_env_steps == 0 { u64::MAX } else { cfg.max_env_steps };
    for ep in 0..cfg.episodes {
        if global_step >= limit {
            break;
        }
        let mut elbos = Vec::new();
        let mut losses = Vec::new();
        let mut objs = Vec::new();
        let mut learner_lambdas = Vec::new();
        let opts = EpisodeOptions {
            episode: ep as u64,
            warmup_until: cfg.learner.warmup_steps,
            mode: act_mode(cfg, false),
            step_limit: limit,
        };
        let trace = run_episode(agent, &mut planner, &cfg.env, seeds, opts, &mut global_step, |agent, tr, step| {
            replay.push(tr);
            if cfg.learner.learn && step >= cfg.learner.warmup_steps && step % cfg.learner.update_every == 0 {
                let st = learn_step(agent, &replay, cfg, seeds, step)?;
                elbos.extend(st.elbo);
                losses.extend(st.critic_loss);
                objs.extend(st.actor_obj);
                learner_lambdas.extend(st.mean_lambda);
            }
            if cfg.eval_episodes > 0 && step % cfg.eval_every == 0 {
                evaluate(agent, cfg, seeds, step / cfg.eval_every, &mut *sink, step)?;
            }
            Ok(())
        })?;
        for d in &trace.diagnostics {
            sink.plan(Phase::Train, d)?;
        }
        for r in &trace.records {
            sink.step(Phase::Train, ep as u64, r)?;
        }
        let plan_lambdas: Vec<f64> = trace.diagnostics.iter().filter_map(|d| d.mean_lambda()).collect();
        let mean_lambda = mean_of(&plan_lambdas).or(mean_of(&learner_lambdas));
        sink.episode(&EpisodeMetrics {
            phase: Phase::Train,
            episode: ep as u64,
            env_step: global_step,
            ret: trace.ret,
            elbo: mean_of(&elbos),
            critic_loss: mean_of(&losses),
            actor_obj: mean_of(&objs),
            mean_lambda,
            plan_ms: trace.plan_ms,
        })?;
    }
    Ok(RunResult { agent: agent.clone(), env_steps: global_step })
}

/// Returns of uniform random actions on the training episode streams.
pub fn random_policy_returns(env_cfg: &EnvConfig, seed: u64, episodes: usize) -> Result<Vec<f64>> {
    let seeds = SeedSpec::new(seed);
    let uniform = UniformPolicy { bounds: env_cfg.bounds() };
    let dummy = Belief::zeros(0, 0);
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let (mut env, _) = AnalyticEnv::reset(env_cfg.clone(), seeds.stream(Purpose::Environment, &[ep as u64]));
        let mut stream = seeds.stream(Purpose::Act, &[u64::MAX, ep as u64]);
        let mut ret = 0.0;
        loop {
            let o = env.step(&uniform.act(&dummy, &mut stream))?;
            ret += o.reward;
            if o.done {
                break;
            }
        }
        out.push(ret);
    }
    Ok(out)
}
