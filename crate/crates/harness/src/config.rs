//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! env.kind = two_gap_corridor
//! planner.modes = 4
//! run.seeds = 0, 1, 2
//! ```
//!
//! Resolution applies the file, then CLI overrides, then the ablation
//! rewrite, on top of defaults. The resolved form lists every key in sorted
//! order and is what gets hashed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use lmpc_core::learner::{LearnerConfig, ModelKind, TrainConfig};
use lmpc_core::types::{PlannerConfig, ValueConfig};
use lmpc_core::worldmodel::{EnvConfig, EnvKind};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    /// A required key is absent.
    Missing(String),
    Unknown(String),
    Invalid { key: String, value: String, reason: String },
    Syntax { line: usize, text: String },
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Missing(k) => write!(f, "missing required field '{k}'"),
            ConfigError::Unknown(k) => write!(f, "unknown field '{k}'"),
            ConfigError::Invalid { key, value, reason } => write!(f, "invalid value '{value}' for '{key}': {reason}"),
            ConfigError::Syntax { line, text } => write!(f, "line {line}: expected 'key = value', got '{text}'"),
            ConfigError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoGmm,
    FixedLambda,
    Horizon5,
    Horizon15,
    NoPlan,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoGmm,
        Ablation::FixedLambda,
        Ablation::Horizon5,
        Ablation::Horizon15,
        Ablation::NoPlan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGmm => "no_gmm",
            Ablation::FixedLambda => "fixed_lambda",
            Ablation::Horizon5 => "horizon_5",
            Ablation::Horizon15 => "horizon_15",
            Ablation::NoPlan => "no_plan",
        }
    }

    /// Rewrite the resolved key map.
    fn apply(self, kv: &mut BTreeMap<String, String>) {
        match self {
            Ablation::Full => {}
            Ablation::NoGmm => {
                kv.insert("planner.modes".into(), "1".into());
                kv.insert("planner.alpha".into(), "1".into());
            }
            Ablation::FixedLambda => {
                let hi = kv["value.lambda_max"].clone();
                kv.insert("value.lambda_min".into(), hi);
            }
            Ablation::Horizon5 => {
                kv.insert("planner.horizon".into(), "5".into());
            }
            Ablation::Horizon15 => {
                kv.insert("planner.horizon".into(), "15".into());
            }
            Ablation::NoPlan => {
                kv.insert("planner.enabled".into(), "false".into());
            }
        }
    }
}

impl FromStr for Ablation {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| ConfigError::Invalid {
                key: "run.ablation".into(),
                value: s.into(),
                reason: "expected one of full, no_gmm, fixed_lambda, horizon_5, horizon_15, no_plan".into(),
            })
    }
}

/// Keys that change how a run executes but not what it computes; they are
/// left out of the hash.
const EXECUTION_KEYS: [&str; 2] = ["exec.workers", "exec.timing"];

const REQUIRED: [&str; 2] = ["env.kind", "run.seeds"];

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

/// Every known key with its default for `kind`.
fn defaults(kind: EnvKind) -> BTreeMap<String, String> {
    let e = EnvConfig::for_kind(kind);
    let p = PlannerConfig::default();
    let v = ValueConfig::default();
    let l = LearnerConfig::default();
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("env.kind", kind.name().into());
    put("env.p_occ", fmt_f(e.p_occ));
    put("env.max_steps", e.max_steps.to_string());
    put("env.obs_noise", fmt_f(e.obs_noise));
    put("env.process_noise", fmt_f(e.process_noise));
    put("env.max_speed", fmt_f(e.max_speed));
    put("env.step_penalty", fmt_f(e.step_penalty));
    put("env.shaping", fmt_f(e.shaping));
    put("env.goal_bonus", fmt_f(e.goal_bonus));
    put("env.collision_penalty", fmt_f(e.collision_penalty));

    put("planner.enabled", "true".into());
    put("planner.horizon", p.horizon.to_string());
    put("planner.modes", p.modes.to_string());
    put("planner.candidates", p.candidates.to_string());
    put("planner.iterations", p.iterations.to_string());
    put("planner.temperature", fmt_f(p.temperature));
    put("planner.delta", fmt_f(p.delta));
    put("planner.epsilon", fmt_f(p.epsilon));
    put("planner.alpha", "even".into());
    put("planner.sigma_init", fmt_f(p.sigma_init));
    put("planner.init_blend", fmt_f(p.init_blend));

    put("value.ensemble", v.ensemble.to_string());
    put("value.beta", fmt_f(v.beta));
    put("value.lambda_min", fmt_f(v.lambda_min));
    put("value.lambda_max", fmt_f(v.lambda_max));
    put("value.gamma", fmt_f(v.gamma));
    put("value.normalizer_decay", fmt_f(v.normalizer_decay));

    put("learner.model", l.model_kind.name().into());
    put("learner.critic_init", l.critic_init.name().into());
    put("learner.d_h", l.d_h.to_string());
    put("learner.d_z", l.d_z.to_string());
    put("learner.model_hidden", l.model_hidden.to_string());
    put("learner.critic_hidden", l.critic_hidden.to_string());
    put("learner.actor_hidden", l.actor_hidden.to_string());
    put("learner.model_lr", fmt_f(l.model_lr));
    put("learner.critic_lr", fmt_f(l.critic_lr));
    put("learner.actor_lr", fmt_f(l.actor_lr));
    put("learner.entropy_coef", fmt_f(l.entropy_coef));
    put("learner.noise_floor", fmt_f(l.noise_floor));
    put("learner.warmup_steps", l.warmup_steps.to_string());
    put("learner.update_every", l.update_every.to_string());
    put("learner.model_updates", l.model_updates.to_string());
    put("learner.critic_updates", l.critic_updates.to_string());
    put("learner.actor_updates", l.actor_updates.to_string());
    put("learner.batch_size", l.batch_size.to_string());
    put("learner.seq_len", l.seq_len.to_string());
    put("learner.replay_capacity", l.replay_capacity.to_string());
    put("learner.learn", l.learn.to_string());

    put("run.seeds", String::new());
    put("run.episodes", "200".into());
    put("run.max_env_steps", "0".into());
    put("run.eval_every", "1000".into());
    put("run.eval_episodes", "10".into());
    put("run.ablation", "full".into());

    put("exec.workers", "0".into());
    put("exec.timing", "false".into());
    m
}

/// Parse `key = value` lines. Later lines override earlier ones.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse a `key=value` CLI override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: s.to_string() })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub ablation: Ablation,
    pub timing: bool,
    /// Sorted `key = value` text of every key.
    pub resolved: String,
    pub hash: String,
}

fn get<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    let v = &kv[key];
    v.parse::<T>().map_err(|e| ConfigError::Invalid { key: key.into(), value: v.clone(), reason: e.to_string() })
}

fn get_bool(kv: &BTreeMap<String, String>, key: &str) -> Result<bool, ConfigError> {
    match kv[key].as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(ConfigError::Invalid { key: key.into(), value: v.into(), reason: "expected true or false".into() }),
    }
}

fn get_list<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    let v = &kv[key];
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| ConfigError::Invalid { key: key.into(), value: v.clone(), reason: e.to_string() }))
        .collect()
}

/// Expand `a..b` seed ranges (end exclusive) in a seed list.
fn expand_seeds(kv: &mut BTreeMap<String, String>) -> Result<(), ConfigError> {
    let raw = kv["run.seeds"].clone();
    let mut seeds = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = |r: String| ConfigError::Invalid { key: "run.seeds".into(), value: raw.clone(), reason: r };
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            let b: u64 = b.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?);
        }
    }
    if seeds.is_empty() {
        return Err(ConfigError::Invalid { key: "run.seeds".into(), value: raw, reason: "no seeds listed".into() });
    }
    kv.insert("run.seeds".into(), seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    Ok(())
}

/// Resolve file lines, overrides and an optional ablation into a complete
/// configuration. Pure: equal inputs give equal outputs and hashes.
pub fn resolve(
    file: &[(String, String)],
    overrides: &[(String, String)],
    ablation: Option<Ablation>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut given: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in file.iter().chain(overrides) {
        given.insert(k.clone(), v.clone());
    }
    for req in REQUIRED {
        if !given.contains_key(req) {
            return Err(ConfigError::Missing(req.to_string()));
        }
    }
    let kind: EnvKind = given["env.kind"].parse().map_err(|e: lmpc_core::Error| ConfigError::Invalid {
        key: "env.kind".into(),
        value: given["env.kind"].clone(),
        reason: e.to_string(),
    })?;
    let mut kv = defaults(kind);
    for (k, v) in given {
        if !kv.contains_key(&k) {
            return Err(ConfigError::Unknown(k));
        }
        kv.insert(k, v);
    }
    if let Some(a) = ablation {
        kv.insert("run.ablation".into(), a.name().into());
    }
    let ablation: Ablation = kv["run.ablation"].parse()?;
    ablation.apply(&mut kv);
    expand_seeds(&mut kv)?;

    let modes: usize = get(&kv, "planner.modes")?;
    let alpha = if kv["planner.alpha"] == "even" {
        PlannerConfig::even_alpha(modes)
    } else {
        get_list::<f64>(&kv, "planner.alpha")?
    };
    let env = EnvConfig {
        kind,
        p_occ: get(&kv, "env.p_occ")?,
        max_steps: get(&kv, "env.max_steps")?,
        obs_noise: get(&kv, "env.obs_noise")?,
        process_noise: get(&kv, "env.process_noise")?,
        max_speed: get(&kv, "env.max_speed")?,
        step_penalty: get(&kv, "env.step_penalty")?,
        shaping: get(&kv, "env.shaping")?,
        goal_bonus: get(&kv, "env.goal_bonus")?,
        collision_penalty: get(&kv, "env.collision_penalty")?,
    };
    let planner = PlannerConfig {
        horizon: get(&kv, "planner.horizon")?,
        modes,
        candidates: get(&kv, "planner.candidates")?,
        iterations: get(&kv, "planner.iterations")?,
        temperature: get(&kv, "planner.temperature")?,
        delta: get(&kv, "planner.delta")?,
        epsilon: get(&kv, "planner.epsilon")?,
        alpha_schedule: alpha,
        sigma_init: get(&kv, "planner.sigma_init")?,
        init_blend: get(&kv, "planner.init_blend")?,
    };
    let value = ValueConfig {
        ensemble: get(&kv, "value.ensemble")?,
        beta: get(&kv, "value.beta")?,
        lambda_min: get(&kv, "value.lambda_min")?,
        lambda_max: get(&kv, "value.lambda_max")?,
        gamma: get(&kv, "value.gamma")?,
        normalizer_decay: get(&kv, "value.normalizer_decay")?,
    };
    let model_kind: ModelKind = get(&kv, "learner.model")?;
    let learner = LearnerConfig {
        model_kind,
        critic_init: get(&kv, "learner.critic_init")?,
        d_h: get(&kv, "learner.d_h")?,
        d_z: get(&kv, "learner.d_z")?,
        model_hidden: get(&kv, "learner.model_hidden")?,
        critic_hidden: get(&kv, "learner.critic_hidden")?,
        actor_hidden: get(&kv, "learner.actor_hidden")?,
        model_lr: get(&kv, "learner.model_lr")?,
        critic_lr: get(&kv, "learner.critic_lr")?,
        actor_lr: get(&kv, "learner.actor_lr")?,
        entropy_coef: get(&kv, "learner.entropy_coef")?,
        noise_floor: get(&kv, "learner.noise_floor")?,
        warmup_steps: get(&kv, "learner.warmup_steps")?,
        update_every: get(&kv, "learner.update_every")?,
        model_updates: get(&kv, "learner.model_updates")?,
        critic_updates: get(&kv, "learner.critic_updates")?,
        actor_updates: get(&kv, "learner.actor_updates")?,
        batch_size: get(&kv, "learner.batch_size")?,
        seq_len: get(&kv, "learner.seq_len")?,
        replay_capacity: get(&kv, "learner.replay_capacity")?,
        learn: get_bool(&kv, "learner.learn")?,
    };
    let train = TrainConfig {
        env,
        planner,
        value,
        learner,
        use_planner: get_bool(&kv, "planner.enabled")?,
        episodes: get(&kv, "run.episodes")?,
        max_env_steps: get(&kv, "run.max_env_steps")?,
        eval_every: get(&kv, "run.eval_every")?,
        eval_episodes: get(&kv, "run.eval_episodes")?,
        workers: get(&kv, "exec.workers")?,
    };
    train.validate().map_err(|e| ConfigError::Invalid { key: "config".into(), value: String::new(), reason: e.to_string() })?;
    let seeds = get_list::<u64>(&kv, "run.seeds")?;
    let timing = get_bool(&kv, "exec.timing")?;

    let resolved: String = kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let hashed: String = kv
        .iter()
        .filter(|(k, _)| !EXECUTION_KEYS.contains(&k.as_str()))
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let digest = Sha256::digest(hashed.as_bytes());
    let hash: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok(ExperimentConfig { train, seeds, ablation, timing, resolved, hash })
}

/// Read and resolve a config file.
pub fn load(path: &std::path::Path, overrides: &[(String, String)], ablation: Option<Ablation>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    resolve(&parse_lines(&text)?, overrides, ablation)
}

/// Resolve a previously written `config.resolved`.
pub fn from_resolved(text: &str) -> Result<ExperimentConfig, ConfigError> {
    resolve(&parse_lines(text)?, &[], None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Vec<(String, String)> {
        parse_lines("env.kind = two_gap_corridor\nrun.seeds = 0..3 # three seeds\nplanner.modes = 4\n").unwrap()
    }

    #[test]
    fn no_gmm_only_touches_modes() {
        let full = resolve(&base(), &[], None).unwrap();
        let nog = resolve(&base(), &[], Some(Ablation::NoGmm)).unwrap();
        assert_eq!(nog.train.planner.modes, 1);
        assert_eq!(nog.train.planner.alpha_schedule, vec![1.0]);
        let mut a = full.train.clone();
        a.planner = nog.train.planner.clone();
        assert_eq!(a, nog.train);
        assert_ne!(full.hash, nog.hash);
    }

    #[test]
    fn other_ablations() {
        let f = resolve(&base(), &[], Some(Ablation::FixedLambda)).unwrap();
        assert_eq!(f.train.value.lambda_min, f.train.value.lambda_max);
        assert_eq!(resolve(&base(), &[], Some(Ablation::Horizon5)).unwrap().train.planner.horizon, 5);
        assert_eq!(resolve(&base(), &[], Some(Ablation::Horizon15)).unwrap().train.planner.horizon, 15);
        assert!(!resolve(&base(), &[], Some(Ablation::NoPlan)).unwrap().train.use_planner);
    }

    #[test]
    fn resolution_is_pure_and_resolved_text_round_trips() {
        let a = resolve(&base(), &[("planner.candidates".into(), "16".into())], None).unwrap();
        let b = resolve(&base(), &[("planner.candidates".into(), "16".into())], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seeds, vec![0, 1, 2]);
        let again = from_resolved(&a.resolved).unwrap();
        assert_eq!(again.hash, a.hash);
        assert_eq!(again.train, a.train);
    }

    #[test]
    fn workers_do_not_change_the_hash() {
        let a = resolve(&base(), &[("exec.workers".into(), "1".into())], None).unwrap();
        let b = resolve(&base(), &[("exec.workers".into(), "8".into())], None).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.resolved, b.resolved);
    }

    #[test]
    fn missing_and_unknown_fields() {
        let e = resolve(&parse_lines("run.seeds = 1").unwrap(), &[], None).unwrap_err();
        assert_eq!(e, ConfigError::Missing("env.kind".into()));
        assert!(e.to_string().contains("env.kind"));
        let e = resolve(&parse_lines("env.kind = two_gap_corridor").unwrap(), &[], None).unwrap_err();
        assert!(e.to_string().contains("run.seeds"));
        let e = resolve(&base(), &[("planner.bogus".into(), "1".into())], None).unwrap_err();
        assert_eq!(e, ConfigError::Unknown("planner.bogus".into()));
        assert!(parse_lines("just words").is_err());
    }

    #[test]
    fn cli_overrides_win() {
        let over = vec![parse_override("planner.modes=2").unwrap()];
        let c = resolve(&base(), &over, None).unwrap();
        assert_eq!(c.train.planner.modes, 2);
        assert_eq!(c.train.planner.alpha_schedule, vec![1.0, 0.0]);
    }
}
