//! Re-runs acting from a checkpoint without learning and dumps every step.

use std::io::Write;
use std::path::{Path, PathBuf};

use lmpc_core::checkpoint::Checkpoint;
use lmpc_core::learner::{run_episode, ActMode, EpisodeOptions, EpisodeTrace};
use lmpc_core::planner::Planner;
use lmpc_core::seed::{Purpose, SeedSpec};
use serde_json::json;

use crate::config::{from_resolved, ExperimentConfig};

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    /// Defaults to `<run>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the run's own seed.
    pub env_seed: Option<u64>,
    pub episodes: usize,
    /// Overrides the environment's episode length.
    pub max_steps: Option<usize>,
    /// Act with the actor instead of the planner.
    pub no_plan: bool,
    /// Evaluation protocol: no warmup, and the actor acts with its mean.
    pub eval: bool,
}

#[derive(Debug)]
pub struct ReplayOutput {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub episodes: Vec<EpisodeTrace>,
}

fn run_seed_of(dir: &Path) -> Option<u64> {
    dir.file_name()?.to_str()?.strip_prefix("seed_")?.parse().ok()
}

fn err(msg: String) -> lmpc_core::Error {
    lmpc_core::Error::InvalidConfig(msg)
}

/// Replay from a seed directory written by `run`. Fails if the checkpoint
/// was written for a different configuration.
pub fn replay(run: &Path, opts: &ReplayOptions) -> lmpc_core::Result<ReplayOutput> {
    let text = std::fs::read_to_string(run.join("config.resolved")).map_err(|e| err(format!("{}: {e}", run.display())))?;
    let mut config = from_resolved(&text).map_err(|e| err(e.to_string()))?;
    let ck_path = opts.checkpoint.clone().unwrap_or_else(|| run.join("checkpoint.json"));
    let ck_text = std::fs::read_to_string(&ck_path).map_err(|e| err(format!("{}: {e}", ck_path.display())))?;
    let ck = Checkpoint::from_json(&ck_text)?;
    if ck.config_hash != config.hash {
        return Err(err(format!("checkpoint hash {} does not match config hash {}", ck.config_hash, config.hash)));
    }
    let seed = match opts.env_seed.or_else(|| run_seed_of(run)) {
        Some(s) => s,
        None => return Err(err(format!("{}: cannot infer the seed, pass one explicitly", run.display()))),
    };
    if opts.no_plan {
        config.train.use_planner = false;
    }
    if let Some(m) = opts.max_steps {
        config.train.env.max_steps = m;
    }
    let cfg = &config.train;
    let mut agent = ck.restore(cfg);
    let seeds = SeedSpec::new(seed);
    let mut planner = Planner::new(cfg.planner.clone(), cfg.value.clone(), cfg.env.bounds(), seeds.child(Purpose::Act, &[]), cfg.workers)?;
    let mode = match (cfg.use_planner, opts.eval) {
        (true, _) => ActMode::Plan,
        (false, false) => ActMode::Actor,
        (false, true) => ActMode::ActorMean,
    };
    let warmup_until = if opts.eval { 0 } else { cfg.learner.warmup_steps };
    let mut global_step = 0u64;
    let mut episodes = Vec::with_capacity(opts.episodes);
    for ep in 0..opts.episodes {
        let o = EpisodeOptions { episode: ep as u64, warmup_until, mode, step_limit: u64::MAX };
        episodes.push(run_episode(&mut agent, &mut planner, &cfg.env, &seeds, o, &mut global_step, |_, _, _| Ok(()))?);
    }
    Ok(ReplayOutput { config, seed, episodes })
}

impl ReplayOutput {
    /// One `step` record per step and one `episode` record per episode.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (ep, tr) in self.episodes.iter().enumerate() {
            for r in &tr.records {
                let mut v = serde_json::to_value(r)?;
                v["kind"] = json!("step");
                v["episode"] = json!(ep);
                writeln!(w, "{v}")?;
            }
            let v = json!({
                "kind": "episode",
                "episode": ep,
                "seed": self.seed,
                "return": tr.ret,
                "steps": tr.records.len(),
                "reached_goal": tr.reached_goal,
            });
            writeln!(w, "{v}")?;
        }
        Ok(())
    }
}
