//! Imagined actor-critic learning on the shared return, world-model
//! fitting, and the online training loop.

pub mod actor;
pub mod critic;
pub mod imagine;
pub mod model_fit;
pub mod replay;
pub mod train;

pub use actor::{Actor, ActorLearner, ActorSample, PolicyStep};
pub use critic::CriticLearner;
pub use imagine::{attach_returns, critic_targets, imagine_rollouts, policy_steps, ImaginedBatch, ImaginedRollout};
pub use model_fit::{fit_step, model_update};
pub use replay::{ReplayBuffer, Transition};
pub use train::{
    choose_action, evaluate, learn_step, random_policy_returns, run_episode, train_from, train_loop, ActMode, Agent, CriticInit,
    EpisodeMetrics, EpisodeOptions, EpisodeTrace, LearnerConfig, MemorySink, ModelKind, Phase, RunResult, RunSink,
    StepRecord, TrainConfig,
};
