//! Executes an experiment and writes one directory per seed:
//! `config.resolved`, `metrics.csv`, `diagnostics.ndjson`,
//! `checkpoint.json` and `manifest.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lmpc_core::checkpoint::Checkpoint;
use lmpc_core::learner::{train_from, Agent, EpisodeMetrics, Phase, RunSink, StepRecord};
use lmpc_core::planner::PlanDiagnostics;
use lmpc_core::seed::SeedSpec;
use serde_json::json;

use crate::config::ExperimentConfig;

pub const OUTPUT_ENV: &str = "LMPC_OUT";
pub const METRICS_HEADER: &str = "phase,episode,env_step,return,elbo,critic_loss,actor_obj,mean_lambda,plan_ms";
pub const RUN_FILES: [&str; 5] = ["config.resolved", "metrics.csv", "diagnostics.ndjson", "checkpoint.json", "manifest.json"];

/// Output root: explicit argument, then `LMPC_OUT`, then `./out`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(&cfg.hash)
}

pub fn seed_dir(root: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    run_dir(root, cfg).join(format!("seed_{seed}"))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_else(|| "NA".into())
}

pub fn metrics_line(m: &EpisodeMetrics, timing: bool) -> String {
    format!(
        "{},{},{},{:?},{},{},{},{},{}",
        m.phase.name(),
        m.episode,
        m.env_step,
        m.ret,
        opt(m.elbo),
        opt(m.critic_loss),
        opt(m.actor_obj),
        opt(m.mean_lambda),
        if timing { format!("{:?}", m.plan_ms) } else { "NA".into() }
    )
}

/// Streams metrics and diagnostics to files as they arrive.
struct FileSink {
    metrics: BufWriter<File>,
    diagnostics: BufWriter<File>,
    timing: bool,
    episodes: usize,
}

impl FileSink {
    fn io(e: std::io::Error) -> lmpc_core::Error {
        lmpc_core::Error::Io(e.to_string())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.metrics.flush()?;
        self.diagnostics.flush()
    }
}

impl RunSink for FileSink {
    fn episode(&mut self, m: &EpisodeMetrics) -> lmpc_core::Result<()> {
        if m.phase == Phase::Train {
            self.episodes += 1;
        }
        writeln!(self.metrics, "{}", metrics_line(m, self.timing)).map_err(Self::io)
    }

    fn plan(&mut self, phase: Phase, d: &PlanDiagnostics) -> lmpc_core::Result<()> {
        let mut v = serde_json::to_value(d).map_err(|e| lmpc_core::Error::Serialization(e.to_string()))?;
        v["kind"] = json!("plan");
        v["phase"] = json!(phase.name());
        if !self.timing {
            v["wall_ms"] = serde_json::Value::Null;
        }
        writeln!(self.diagnostics, "{v}").map_err(Self::io)
    }

    fn step(&mut self, phase: Phase, episode: u64, r: &StepRecord) -> lmpc_core::Result<()> {
        let mut v = serde_json::to_value(r).map_err(|e| lmpc_core::Error::Serialization(e.to_string()))?;
        v["kind"] = json!("step");
        v["phase"] = json!(phase.name());
        v["episode"] = json!(episode);
        writeln!(self.diagnostics, "{v}").map_err(Self::io)
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub complete: bool,
    pub error: Option<String>,
}

/// Train one seed and write its directory. Failures mid-run still leave the
/// partial metrics and a manifest marked incomplete.
pub fn run_seed(cfg: &ExperimentConfig, root: &Path, seed: u64) -> std::io::Result<SeedOutcome> {
    let dir = seed_dir(root, cfg, seed);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.resolved"), &cfg.resolved)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let diagnostics = BufWriter::new(File::create(dir.join("diagnostics.ndjson"))?);
    let mut sink = FileSink { metrics, diagnostics, timing: cfg.timing, episodes: 0 };

    let started = Instant::now();
    let seeds = SeedSpec::new(seed);
    let result = Agent::new(&cfg.train, &seeds).and_then(|mut agent| train_from(&cfg.train, &seeds, &mut agent, &mut sink));
    sink.flush()?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;

    let (complete, error, env_steps) = match &result {
        Ok(r) => {
            let ck = Checkpoint::capture(&r.agent, &cfg.hash, r.env_steps);
            let text = ck.to_json().map_err(std::io::Error::other)?;
            std::fs::write(dir.join("checkpoint.json"), text)?;
            (true, None, r.env_steps)
        }
        Err(e) => (false, Some(e.to_string()), 0),
    };
    if !complete && !dir.join("checkpoint.json").exists() {
        std::fs::write(dir.join("checkpoint.json"), "null\n")?;
    }
    let manifest = json!({
        "config_hash": cfg.hash,
        "seed": seed,
        "status": if complete { "complete" } else { "incomplete" },
        "error": error,
        "ablation": cfg.ablation.name(),
        "episodes": sink.episodes,
        "env_steps": env_steps,
        "wall_ms": if cfg.timing { json!(wall_ms) } else { serde_json::Value::Null },
        "files": RUN_FILES,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(SeedOutcome { seed, dir, complete, error })
}

/// Run every seed of `cfg` in order.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> std::io::Result<Vec<SeedOutcome>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, root, s)).collect()
}
