use lmpc_core::gaussian::DiagGaussian;
use lmpc_core::nn::{Activation, Mlp};
use lmpc_core::planner::{
    mixture_update, sample_candidates, score_candidates, Planner, ProposalMode, UniformPolicy,
};
use lmpc_core::seed::{Purpose, SeedSpec, Stream};
use lmpc_core::types::{ActionBounds, ActionSequence, ActionVector, Belief, PlannerConfig, ValueConfig};
use lmpc_core::value::{CriticEnsemble, RunningNormalizer};
use lmpc_core::worldmodel::env::REACHER_GOAL_RADIUS;
use lmpc_core::worldmodel::{EnvConfig, EnvModel, LatentModel, ModelDims};
use nalgebra::DVector;
use rand::Rng;

fn stream(tag: u64, i: u64) -> Stream {
    SeedSpec::new(0xb2).stream(Purpose::Test, &[tag, i])
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_vec(x.to_vec())
}

#[test]
fn candidate_moments_match_proposal() {
    let mode = ProposalMode {
        mu: vec![v(&[0.3, -0.2]), v(&[-0.5, 0.1]), v(&[0.0, 0.4])],
        var: vec![v(&[0.04, 0.09]), v(&[0.01, 0.25]), v(&[0.16, 0.02])],
    };
    let wide = ActionBounds::new(v(&[-100.0, -100.0]), v(&[100.0, 100.0])).unwrap();
    let n = 100_000;
    let cands = sample_candidates(&mode, n, &wide, &mut stream(1, 0));
    for t in 0..3 {
        for i in 0..2 {
            let mean = cands.iter().map(|c| c.actions[t][i]).sum::<f64>() / n as f64;
            let se = (mode.var[t][i] / n as f64).sqrt();
            assert!((mean - mode.mu[t][i]).abs() < 3.0 * se, "t={t} i={i}: {mean}");
        }
    }
    let tight = ActionBounds::symmetric(2);
    let wild = ProposalMode { mu: mode.mu.clone(), var: vec![v(&[4.0, 4.0]); 3] };
    for c in sample_candidates(&wild, 1000, &tight, &mut stream(1, 1)) {
        assert!(c.actions.iter().all(|a| tight.contains(a)));
    }
}

/// Two-state model: the next state is 1 when the action is positive and 0
/// otherwise; reward `2 h - 0.5`.
struct TwoState;

impl LatentModel for TwoState {
    fn dims(&self) -> ModelDims {
        ModelDims { d_h: 1, d_z: 1, d_o: 1, d_a: 1 }
    }
    fn posterior(&self, _h: &DVector<f64>, _o: &DVector<f64>) -> DiagGaussian {
        self.prior(_h)
    }
    fn transition(&self, _h: &DVector<f64>, _z: &DVector<f64>, a: &ActionVector) -> DVector<f64> {
        v(&[if a[0] > 0.0 { 1.0 } else { 0.0 }])
    }
    fn prior(&self, _h: &DVector<f64>) -> DiagGaussian {
        DiagGaussian::new(v(&[0.0]), v(&[1e-6]))
    }
    fn decode(&self, h: &DVector<f64>, _z: &DVector<f64>) -> DiagGaussian {
        DiagGaussian::new(h.clone(), v(&[1.0]))
    }
    fn reward(&self, h: &DVector<f64>, _z: &DVector<f64>) -> f64 {
        2.0 * h[0] - 0.5
    }
}

/// Linear member `w h + b`, blind to `z`.
fn linear_member(w: f64, b: f64) -> Mlp {
    let mut m = Mlp::zeros(&[2, 1], Activation::Identity);
    m.params = vec![w, 0.0, b];
    m
}

#[test]
fn three_step_scores_match_hand_expansion() {
    let critics = CriticEnsemble { members: vec![linear_member(1.0, 0.5), linear_member(3.0, -0.5)] };
    let cfg = ValueConfig { ensemble: 2, beta: 1.0, lambda_min: 0.6, lambda_max: 0.95, gamma: 0.9, normalizer_decay: 0.99 };
    let mut norm = RunningNormalizer::new(0.99);
    norm.mean = 1.0;
    norm.var = 4.0;

    // member values {0.5, -0.5} in state 0 and {1.5, 2.5} in state 1
    let sigma = 0.5f64.sqrt();
    let mu = [0.0, 2.0];
    let lam = |s: usize| {
        let z = (mu[s] + sigma - 1.0) / (4.0f64 + 1e-8).sqrt();
        0.95 - 0.35 * ((z + 3.0) / 6.0)
    };
    let reward = [-0.5, 1.5];

    let seqs: [[f64; 3]; 4] = [[0.5, -0.3, 0.9], [-1.0, -1.0, -1.0], [1.0, 1.0, -0.2], [-0.4, 0.7, 0.1]];
    let cands: Vec<ActionSequence> = seqs.iter().map(|s| ActionSequence::new(s.iter().map(|&a| v(&[a])).collect())).collect();
    let mut streams: Vec<Stream> = (0..cands.len() as u64).map(|i| stream(2, i)).collect();
    let start = Belief::new(v(&[0.0]), v(&[0.0]));
    let out = score_candidates(0, cands, &start, &TwoState, &critics, &norm, &cfg, &mut streams).unwrap();

    for (c, s) in out.iter().zip(&seqs) {
        let st: Vec<usize> = s.iter().map(|&a| usize::from(a > 0.0)).collect();
        let g2 = mu[st[2]];
        let g1 = reward[st[1]] + 0.9 * ((1.0 - lam(st[1])) * mu[st[2]] + lam(st[1]) * g2);
        let g0 = reward[st[0]] + 0.9 * ((1.0 - lam(st[0])) * mu[st[1]] + lam(st[0]) * g1);
        assert!((c.score - g0).abs() < 1e-10, "{s:?}: {} vs {g0}", c.score);
        assert!((c.scored.trace.returns[1] - g1).abs() < 1e-10);
    }
}

#[test]
fn mixture_update_matches_weighted_statistics() {
    let mut rng = stream(3, 0);
    let pcfg = PlannerConfig { temperature: 0.7, ..PlannerConfig::default() };
    let bounds = ActionBounds::symmetric(2);
    for _ in 0..200 {
        let modes = rng.random_range(1..=3);
        let k = 32;
        let h = rng.random_range(1..=4);
        let cands: Vec<Vec<ActionSequence>> = (0..modes)
            .map(|_| {
                (0..k)
                    .map(|_| ActionSequence::new((0..h).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect()))
                    .collect()
            })
            .collect();
        let scores: Vec<Vec<f64>> = (0..modes).map(|_| (0..k).map(|_| rng.random_range(-20.0..5.0)).collect()).collect();
        let refs: Vec<Vec<&ActionSequence>> = cands.iter().map(|c| c.iter().collect()).collect();
        let upd = mixture_update(&refs, &scores, &pcfg, &bounds).unwrap();

        let all: Vec<f64> = scores.iter().flatten().copied().collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for m in 0..modes {
            let raw: Vec<f64> = scores[m].iter().map(|s| (((s - lo) / (hi - lo + pcfg.delta)) / pcfg.temperature).exp()).collect();
            let z: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / z).collect();
            assert!((upd.weights[m].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in upd.weights[m].iter().zip(&w) {
                assert!((a - b).abs() < 1e-12);
            }
            for t in 0..h {
                for i in 0..2 {
                    let mean: f64 = (0..k).map(|j| w[j] * cands[m][j].actions[t][i]).sum();
                    let var: f64 = (0..k).map(|j| w[j] * (cands[m][j].actions[t][i] - mean).powi(2)).sum::<f64>() + pcfg.epsilon;
                    assert!((upd.modes[m].mu[t][i] - mean).abs() < 1e-12);
                    assert!((upd.modes[m].var[t][i] - var).abs() < 1e-12);
                    assert!(upd.modes[m].var[t][i] >= pcfg.epsilon);
                }
            }
        }
    }
}

/// `h` is the last action; reward peaks at `a = 0.37`.
struct Bump;

impl LatentModel for Bump {
    fn dims(&self) -> ModelDims {
        ModelDims { d_h: 1, d_z: 1, d_o: 1, d_a: 1 }
    }
    fn posterior(&self, h: &DVector<f64>, _o: &DVector<f64>) -> DiagGaussian {
        self.prior(h)
    }
    fn transition(&self, _h: &DVector<f64>, _z: &DVector<f64>, a: &ActionVector) -> DVector<f64> {
        a.clone()
    }
    fn prior(&self, _h: &DVector<f64>) -> DiagGaussian {
        DiagGaussian::new(v(&[0.0]), v(&[1e-12]))
    }
    fn decode(&self, h: &DVector<f64>, _z: &DVector<f64>) -> DiagGaussian {
        DiagGaussian::new(h.clone(), v(&[1.0]))
    }
    fn reward(&self, h: &DVector<f64>, _z: &DVector<f64>) -> f64 {
        (-(h[0] - 0.37).powi(2) / 0.05).exp()
    }
}

#[test]
fn planned_action_is_near_grid_search_optimum() {
    let value = ValueConfig { ensemble: 2, lambda_min: 1.0, lambda_max: 1.0, ..ValueConfig::default() };
    let critics = CriticEnsemble::constant(2, 2, 0.0);
    let h = 5;
    let total = |a: f64| (0..h - 1).map(|t| value.gamma.powi(t as i32) * Bump.reward(&v(&[a]), &v(&[0.0]))).sum::<f64>();
    let best = (0..=2000)
        .map(|i| -1.0 + i as f64 * 1e-3)
        .max_by(|a, b| total(*a).total_cmp(&total(*b)))
        .unwrap();

    let cfg = PlannerConfig { horizon: h, candidates: 64, iterations: 10, temperature: 0.1, ..PlannerConfig::default() }.with_modes(2);
    let bounds = ActionBounds::symmetric(1);
    let actor = UniformPolicy { bounds: bounds.clone() };
    for seed in 0..5 {
        let mut planner = Planner::new(cfg.clone(), value.clone(), bounds.clone(), SeedSpec::new(seed), 0).unwrap();
        let mut norm = RunningNormalizer::new(0.99);
        let out = planner.plan(&Belief::new(v(&[0.0]), v(&[0.0])), &Bump, &critics, &actor, &mut norm).unwrap();
        assert!((out.action[0] - best).abs() < 0.1, "seed {seed}: {} vs {best}", out.action[0]);
    }
}

fn corridor_setup() -> (EnvModel, CriticEnsemble, PlannerConfig, ValueConfig, ActionBounds) {
    let env = EnvConfig::corridor();
    let value = ValueConfig::default();
    let critics = CriticEnsemble::new(value.ensemble, 4, &[16], &SeedSpec::new(4)).unwrap();
    let cfg = PlannerConfig { candidates: 32, iterations: 6, ..PlannerConfig::default() };
    (EnvModel::new(env.clone()), critics, cfg, value, env.bounds())
}

#[test]
fn worker_count_does_not_change_the_plan() {
    let (model, critics, cfg, value, bounds) = corridor_setup();
    let actor = UniformPolicy { bounds: bounds.clone() };
    let start = Belief::new(model.initial_h(), v(&[0.0, 0.0]));
    let run = |workers: usize| {
        let mut planner = Planner::new(cfg.clone(), value.clone(), bounds.clone(), SeedSpec::new(11), workers).unwrap();
        let mut norm = RunningNormalizer::new(0.99);
        let mut out = Vec::new();
        for _ in 0..3 {
            let mut p = planner.plan(&start, &model, &critics, &actor, &mut norm).unwrap();
            p.diagnostics.wall_ms = 0.0;
            out.push((p.action.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), p.diagnostics, p.modes));
        }
        (out, norm)
    };
    let (a, na) = run(1);
    let (b, nb) = run(8);
    assert_eq!(a, b);
    assert_eq!(na, nb);
}

#[test]
fn best_score_improves_over_iterations() {
    let (model, critics, cfg, value, bounds) = corridor_setup();
    let cfg = PlannerConfig { temperature: 0.1, ..cfg };
    let actor = UniformPolicy { bounds: bounds.clone() };
    let start = Belief::new(model.initial_h(), v(&[0.0, 0.0]));
    let mut monotone = 0;
    for seed in 0..100 {
        let mut planner = Planner::new(cfg.clone(), value.clone(), bounds.clone(), SeedSpec::new(seed), 0).unwrap();
        let mut norm = RunningNormalizer::new(0.99);
        let out = planner.plan(&start, &model, &critics, &actor, &mut norm).unwrap();
        let best = &out.diagnostics.best_by_iteration;
        if best[best.len() - 1] >= best[0] {
            monotone += 1;
        }
        for m in &out.modes.modes {
            assert!(m.var.iter().all(|s| s.iter().all(|x| *x >= cfg.epsilon)));
        }
    }
    assert!(monotone >= 90, "{monotone}/100");
}

#[test]
fn reacher_modes_stay_apart() {
    let env = EnvConfig::reacher();
    let model = EnvModel::new(env.clone());
    let bounds = env.bounds();
    let value = ValueConfig::default();
    let critics = CriticEnsemble::constant(value.ensemble, 6, 0.0);
    let cfg = PlannerConfig { horizon: 10, candidates: 64, iterations: 5, ..PlannerConfig::default() }.with_modes(3);
    let start = Belief::new(model.initial_h(), v(&[0.0, 0.0]));
    let norm = RunningNormalizer::new(0.99);

    let goals = EnvConfig::reacher_goals();
    let mut modes: Vec<ProposalMode> = goals
        .iter()
        .map(|g| {
            let dir = v(&[g[0] / REACHER_GOAL_RADIUS, g[1] / REACHER_GOAL_RADIUS]);
            ProposalMode { mu: vec![dir; cfg.horizon], var: vec![v(&[0.04, 0.04]); cfg.horizon] }
        })
        .collect();
    for iter in 0..cfg.iterations as u64 {
        let mut cands = Vec::new();
        let mut scores = Vec::new();
        for (m, mode) in modes.iter().enumerate() {
            let c = sample_candidates(mode, cfg.candidates, &bounds, &mut stream(7, iter * 10 + m as u64));
            let mut streams: Vec<Stream> = (0..c.len() as u64).map(|k| stream(8, iter * 1000 + m as u64 * 100 + k)).collect();
            let scored = score_candidates(m, c, &start, &model, &critics, &norm, &value, &mut streams).unwrap();
            scores.push(scored.iter().map(|s| s.score).collect::<Vec<_>>());
            cands.push(scored.into_iter().map(|s| s.actions).collect::<Vec<_>>());
        }
        let refs: Vec<Vec<&ActionSequence>> = cands.iter().map(|c| c.iter().collect()).collect();
        modes = mixture_update(&refs, &scores, &cfg, &bounds).unwrap().modes;
    }
    for i in 0..3 {
        for j in i + 1..3 {
            let d = (&modes[i].mu[0] - &modes[j].mu[0]).norm();
            assert!(d > 0.5, "modes {i} and {j} at distance {d}");
        }
    }
}
