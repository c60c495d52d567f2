//! Analytic toy environments with known multimodal structure, and a
//! hand-specified latent model of each.
//!
//! `TwoGapCorridor`: a point mass in the unit square starts below a
//! horizontal wall that has two gaps placed symmetrically about the start
//! column; the goal sits above the wall. Both gaps are equally good.
//!
//! `MultiGoalReacher`: a velocity-controlled point starts at the origin of
//! `[-1, 1]^2` with three equally rewarded goals spaced 120 degrees apart.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LatentModel, ModelDims};
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::seed::Stream;
use crate::types::{ActionBounds, ActionVector};

pub const WALL_Y: f64 = 0.5;
/// Free intervals of the wall along x.
pub const GAPS: [(f64, f64); 2] = [(0.2, 0.3), (0.7, 0.8)];
pub const CORRIDOR_START: [f64; 2] = [0.5, 0.1];
pub const CORRIDOR_GOAL: [f64; 2] = [0.5, 0.9];
pub const GOAL_RADIUS: f64 = 0.08;
/// Distance kept between a blocked point and the wall line, several noise
/// scales so a blocked belief stays on its side.
const WALL_MARGIN: f64 = 0.02;

pub const REACHER_GOAL_RADIUS: f64 = 0.6;
pub const REACHER_BUMP_WIDTH: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TwoGapCorridor,
    MultiGoalReacher,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gap_corridor" => Ok(EnvKind::TwoGapCorridor),
            "multi_goal_reacher" => Ok(EnvKind::MultiGoalReacher),
            other => Err(Error::InvalidConfig(format!("unknown environment '{other}'"))),
        }
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::TwoGapCorridor => "two_gap_corridor",
            EnvKind::MultiGoalReacher => "multi_goal_reacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Probability that an observation is withheld.
    pub p_occ: f64,
    pub max_steps: usize,
    pub obs_noise: f64,
    pub process_noise: f64,
    /// Displacement per step at full action.
    pub max_speed: f64,
    pub step_penalty: f64,
    /// Weight of the distance-to-goal penalty.
    pub shaping: f64,
    pub goal_bonus: f64,
    pub collision_penalty: f64,
}

impl EnvConfig {
    pub fn corridor() -> Self {
        Self {
            kind: EnvKind::TwoGapCorridor,
            p_occ: 0.2,
            max_steps: 60,
            obs_noise: 0.01,
            process_noise: 0.005,
            max_speed: 0.12,
            step_penalty: 0.01,
            shaping: 0.1,
            goal_bonus: 10.0,
            collision_penalty: 0.01,
        }
    }

    pub fn reacher() -> Self {
        Self {
            kind: EnvKind::MultiGoalReacher,
            p_occ: 0.2,
            max_steps: 40,
            obs_noise: 0.01,
            process_noise: 0.005,
            max_speed: 0.08,
            step_penalty: 0.0,
            shaping: 0.0,
            goal_bonus: 0.0,
            collision_penalty: 0.0,
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::TwoGapCorridor => Self::corridor(),
            EnvKind::MultiGoalReacher => Self::reacher(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.p_occ) {
            return bad("env p_occ must lie in [0, 1]");
        }
        if self.max_steps == 0 {
            return bad("env max_steps must be >= 1");
        }
        if !(self.obs_noise > 0.0) || !(self.process_noise > 0.0) {
            return bad("env noise scales must be > 0");
        }
        if !(self.max_speed > 0.0) {
            return bad("env max_speed must be > 0");
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn obs_dim(&self) -> usize {
        2
    }

    pub fn bounds(&self) -> ActionBounds {
        ActionBounds::symmetric(2)
    }

    pub fn reacher_goals() -> [[f64; 2]; 3] {
        let mut g = [[0.0; 2]; 3];
        for (k, slot) in g.iter_mut().enumerate() {
            let ang = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            *slot = [REACHER_GOAL_RADIUS * ang.cos(), REACHER_GOAL_RADIUS * ang.sin()];
        }
        g
    }

    fn start(&self) -> [f64; 2] {
        match self.kind {
            EnvKind::TwoGapCorridor => CORRIDOR_START,
            EnvKind::MultiGoalReacher => [0.0, 0.0],
        }
    }

    /// Shaped reward for being at `p`, excluding collision penalties.
    pub fn position_reward(&self, p: [f64; 2]) -> f64 {
        match self.kind {
            EnvKind::TwoGapCorridor => {
                let d = dist(p, CORRIDOR_GOAL);
                let bonus = if d < GOAL_RADIUS { self.goal_bonus } else { 0.0 };
                -self.step_penalty - self.shaping * d + bonus
            }
            EnvKind::MultiGoalReacher => Self::reacher_goals()
                .iter()
                .map(|g| {
                    let d = dist(p, *g);
                    (-d * d / (2.0 * REACHER_BUMP_WIDTH * REACHER_BUMP_WIDTH)).exp()
                })
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn in_goal(&self, p: [f64; 2]) -> bool {
        match self.kind {
            EnvKind::TwoGapCorridor => dist(p, CORRIDOR_GOAL) < GOAL_RADIUS,
            EnvKind::MultiGoalReacher => false,
        }
    }

    /// Noise-free motion of the point from `p` under `a`, plus a displacement
    /// `noise`. Returns the new position and whether a wall blocked it.
    pub fn move_point(&self, p: [f64; 2], a: &[f64], noise: [f64; 2]) -> ([f64; 2], bool) {
        let a0 = a[0].clamp(-1.0, 1.0);
        let a1 = a[1].clamp(-1.0, 1.0);
        let proposed = [
            p[0] + self.max_speed * a0 + noise[0],
            p[1] + self.max_speed * a1 + noise[1],
        ];
        match self.kind {
            EnvKind::TwoGapCorridor => {
                let proposed = [proposed[0].clamp(0.0, 1.0), proposed[1].clamp(0.0, 1.0)];
                corridor_collide(p, proposed)
            }
            EnvKind::MultiGoalReacher => ([proposed[0].clamp(-1.0, 1.0), proposed[1].clamp(-1.0, 1.0)], false),
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn in_gap(x: f64) -> bool {
    GAPS.iter().any(|&(lo, hi)| x >= lo && x <= hi)
}

/// Resolve a straight move `from -> to` against the wall line. A move that
/// crosses the line outside both gaps stops just short of the wall at the
/// proposed x.
pub fn corridor_collide(from: [f64; 2], to: [f64; 2]) -> ([f64; 2], bool) {
    let below_before = from[1] < WALL_Y;
    let below_after = to[1] < WALL_Y;
    if below_before == below_after {
        return (to, false);
    }
    let frac = (WALL_Y - from[1]) / (to[1] - from[1]);
    let cross_x = from[0] + frac * (to[0] - from[0]);
    if in_gap(cross_x) {
        return (to, false);
    }
    let y = if below_before { WALL_Y - WALL_MARGIN } else { WALL_Y + WALL_MARGIN };
    ([to[0], y], true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `None` when the observation was withheld.
    pub observation: Option<DVector<f64>>,
    pub reward: f64,
    pub done: bool,
    pub collided: bool,
}

/// A running episode of one of the analytic environments.
#[derive(Debug, Clone)]
pub struct AnalyticEnv {
    pub config: EnvConfig,
    position: [f64; 2],
    velocity: [f64; 2],
    steps: usize,
    done: bool,
    stream: Stream,
}

impl AnalyticEnv {
    /// Start an episode; returns the environment and the first observation.
    pub fn reset(config: EnvConfig, stream: Stream) -> (Self, Option<DVector<f64>>) {
        let position = config.start();
        let mut env = Self {
            config,
            position,
            velocity: [0.0, 0.0],
            steps: 0,
            done: false,
            stream,
        };
        let obs = env.observe();
        (env, obs)
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.velocity
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Place the point directly; for tests and oracles.
    pub fn set_position(&mut self, p: [f64; 2]) {
        self.position = p;
    }

    fn observe(&mut self) -> Option<DVector<f64>> {
        let occluded = self.stream.random::<f64>() < self.config.p_occ;
        let n0: f64 = self.stream.sample(StandardNormal);
        let n1: f64 = self.stream.sample(StandardNormal);
        if occluded {
            return None;
        }
        Some(DVector::from_vec(vec![
            self.position[0] + self.config.obs_noise * n0,
            self.position[1] + self.config.obs_noise * n1,
        ]))
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action.len() != self.config.action_dim() {
            return Err(Error::DimensionMismatch {
                what: "env action",
                expected: self.config.action_dim(),
                got: action.len(),
            });
        }
        let n0: f64 = self.stream.sample(StandardNormal);
        let n1: f64 = self.stream.sample(StandardNormal);
        let noise = [self.config.process_noise * n0, self.config.process_noise * n1];
        let (next, collided) = self.config.move_point(self.position, action.as_slice(), noise);
        self.velocity = [next[0] - self.position[0], next[1] - self.position[1]];
        self.position = next;
        self.steps += 1;
        let mut reward = self.config.position_reward(next);
        if collided {
            reward -= self.config.collision_penalty;
        }
        self.done = self.config.in_goal(next) || self.steps >= self.config.max_steps;
        let observation = self.observe();
        Ok(StepOutcome {
            observation,
            reward,
            done: self.done,
            collided,
        })
    }
}

/// Hand-specified latent model of an analytic environment.
///
/// `h` carries the predicted position (and for the reacher the last
/// velocity); `z` is a position correction with the process-noise prior, so
/// the believed position is `h[0..2] + z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvModel {
    pub config: EnvConfig,
}

impl EnvModel {
    pub fn new(config: EnvConfig) -> Self {
        Self { config }
    }

    pub fn position(h: &DVector<f64>, z: &DVector<f64>) -> [f64; 2] {
        [h[0] + z[0], h[1] + z[1]]
    }

    fn gain(&self) -> (f64, f64) {
        let q = self.config.process_noise.powi(2);
        let r = self.config.obs_noise.powi(2);
        (q / (q + r), q * r / (q + r))
    }
}

impl LatentModel for EnvModel {
    fn dims(&self) -> ModelDims {
        let d_h = match self.config.kind {
            EnvKind::TwoGapCorridor => 2,
            EnvKind::MultiGoalReacher => 4,
        };
        ModelDims { d_h, d_z: 2, d_o: 2, d_a: 2 }
    }

    fn posterior(&self, h: &DVector<f64>, o: &DVector<f64>) -> DiagGaussian {
        let (k, v) = self.gain();
        DiagGaussian::new(
            DVector::from_vec(vec![k * (o[0] - h[0]), k * (o[1] - h[1])]),
            DVector::from_element(2, v),
        )
    }

    fn transition(&self, h: &DVector<f64>, z: &DVector<f64>, a: &ActionVector) -> DVector<f64> {
        let p = Self::position(h, z);
        let (next, _) = self.config.move_point(p, a.as_slice(), [0.0, 0.0]);
        match self.config.kind {
            EnvKind::TwoGapCorridor => DVector::from_vec(next.to_vec()),
            EnvKind::MultiGoalReacher => DVector::from_vec(vec![next[0], next[1], next[0] - p[0], next[1] - p[1]]),
        }
    }

    fn prior(&self, _h: &DVector<f64>) -> DiagGaussian {
        DiagGaussian::new(DVector::zeros(2), DVector::from_element(2, self.config.process_noise.powi(2)))
    }

    fn decode(&self, h: &DVector<f64>, z: &DVector<f64>) -> DiagGaussian {
        let p = Self::position(h, z);
        DiagGaussian::new(DVector::from_vec(p.to_vec()), DVector::from_element(2, self.config.obs_noise.powi(2)))
    }

    fn reward(&self, h: &DVector<f64>, z: &DVector<f64>) -> f64 {
        self.config.position_reward(Self::position(h, z))
    }

    /// The model knows where episodes start.
    fn initial_h(&self) -> DVector<f64> {
        let s = self.config.start();
        match self.config.kind {
            EnvKind::TwoGapCorridor => DVector::from_vec(s.to_vec()),
            EnvKind::MultiGoalReacher => DVector::from_vec(vec![s[0], s[1], 0.0, 0.0]),
        }
    }
}
