use lmpc_core::gaussian::LN_2PI;
use lmpc_core::seed::{Purpose, SeedSpec, Stream};
use lmpc_core::types::{ActionSequence, Belief};
use lmpc_core::worldmodel::env::{CORRIDOR_START, GOAL_RADIUS};
use lmpc_core::worldmodel::{
    elbo_estimate, exact_evidence, posterior_filter, prior_rollout, simulate_sequence, EnvConfig, LatentModel,
    LinearGaussianRssm, ModelDims, Sequence,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn stream(tag: u64, i: u64) -> Stream {
    SeedSpec::new(0x77).stream(Purpose::Test, &[tag, i])
}

fn actions(rng: &mut Stream, t: usize, d_a: usize) -> Vec<DVector<f64>> {
    (0..t).map(|_| DVector::from_fn(d_a, |_, _| rng.random_range(-1.0..1.0))).collect()
}

/// Log density of `y` under `N(mean, cov)` through an LU determinant.
fn gaussian_log_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let lu = cov.clone().lu();
    let r = y - mean;
    let sol = lu.solve(&r).expect("invertible covariance");
    -0.5 * (r.dot(&sol) + lu.determinant().ln() + y.len() as f64 * LN_2PI)
}

/// Instance whose per-step conditional posterior is diagonal and exact for
/// the whole sequence: the observation z-block is diagonal on the first
/// `d_z` rows and zero below, `B = 0` and the reward ignores `z`.
fn factorized_instance(rng: &mut Stream) -> LinearGaussianRssm {
    let d_h = rng.random_range(1..=4);
    let d_z = rng.random_range(1..=4);
    let extra_obs = rng.random_range(0..=1);
    let dims = ModelDims { d_h, d_z, d_o: d_z + extra_obs, d_a: 1 };
    let mut m = LinearGaussianRssm::random(dims, rng);
    m.b.fill(0.0);
    for i in 0..dims.d_o {
        for j in 0..d_z {
            m.d[(i, d_h + j)] = if i == j { rng.random_range(0.5..2.0) } else { 0.0 };
        }
    }
    for j in 0..d_z {
        m.reward_w[d_h + j] = 0.0;
    }
    m.set_exact_conditional_encoder().unwrap();
    m
}

#[test]
fn exact_encoder_matches_joint_gaussian_conditioning() {
    let mut rng = stream(1, 0);
    for _ in 0..100 {
        let dims = ModelDims {
            d_h: rng.random_range(1..=4),
            d_z: rng.random_range(1..=4),
            d_o: rng.random_range(1..=4),
            d_a: 1,
        };
        let mut m = LinearGaussianRssm::random(dims, &mut rng);
        m.set_exact_conditional_encoder().unwrap();
        let h = DVector::from_fn(dims.d_h, |_, _| rng.random_range(-1.0..1.0));
        let o = DVector::from_fn(dims.d_o, |_, _| rng.random_range(-2.0..2.0));

        // x = [z; o] = mu + J eps with eps = [eps_z; eps_o]
        let (dz, no) = (dims.d_z, dims.d_o);
        let d_h_block = m.d.columns(0, dims.d_h).into_owned();
        let d_z_block = m.d.columns(dims.d_h, dz).into_owned();
        let p_half = DMatrix::from_diagonal(&m.prior_logvar.map(|l| (0.5 * l).exp()));
        let r_half = DMatrix::from_diagonal(&m.obs_logvar.map(|l| (0.5 * l).exp()));
        let mut jac = DMatrix::zeros(dz + no, dz + no);
        jac.view_mut((0, 0), (dz, dz)).copy_from(&p_half);
        jac.view_mut((dz, 0), (no, dz)).copy_from(&(&d_z_block * &p_half));
        jac.view_mut((dz, dz), (no, no)).copy_from(&r_half);
        let cov = &jac * jac.transpose();
        let mu_z = &m.w * &h;
        let mu_o = &d_h_block * &h + &d_z_block * &mu_z;

        let s_zo = cov.view((0, dz), (dz, no)).into_owned();
        let s_oo = cov.view((dz, dz), (no, no)).into_owned();
        let s_zz = cov.view((0, 0), (dz, dz)).into_owned();
        let lu = s_oo.lu();
        let cond_mean = &mu_z + &s_zo * lu.solve(&(&o - &mu_o)).unwrap();
        let cond_cov = &s_zz - &s_zo * lu.solve(&s_zo.transpose()).unwrap();

        let q = m.posterior(&h, &o);
        for i in 0..dz {
            assert!((q.mean[i] - cond_mean[i]).abs() < 1e-8, "mean {} vs {}", q.mean[i], cond_mean[i]);
            assert!((q.var[i] - cond_cov[(i, i)]).abs() < 1e-8);
        }
    }
}

#[test]
fn filter_first_belief_uses_exact_posterior_mean() {
    let mut rng = stream(2, 0);
    let mut m = LinearGaussianRssm::random(ModelDims { d_h: 2, d_z: 1, d_o: 2, d_a: 1 }, &mut rng);
    m.set_exact_conditional_encoder().unwrap();
    m.enc_logvar.fill(-800.0); // collapse the posterior onto its mean
    let o = DVector::from_vec(vec![0.4, -0.7]);
    let seq = Sequence::observations_only(vec![Some(o.clone())], vec![]).unwrap();
    let b = &posterior_filter(&m, &seq, &mut rng).unwrap()[0];
    // h_0 = 0: conditional mean is P D_z^T (D_z P D_z^T + R)^-1 o
    let p = m.prior_logvar[0].exp();
    let dz = m.d.column(2).into_owned();
    let s = &dz * dz.transpose() * p + DMatrix::from_diagonal(&m.obs_logvar.map(f64::exp));
    let expect = p * dz.dot(&s.lu().solve(&o).unwrap());
    assert_eq!(b.h, DVector::zeros(2));
    assert!((b.z[0] - expect).abs() < 1e-8);
}

#[test]
fn prior_rollout_mean_follows_linear_recursion() {
    let mut rng = stream(3, 0);
    let dims = ModelDims { d_h: 3, d_z: 2, d_o: 2, d_a: 1 };
    let m = LinearGaussianRssm::random(dims, &mut rng);
    let horizon = 4;
    let acts = ActionSequence::new(actions(&mut rng, horizon, 1));
    let start = Belief::new(DVector::from_vec(vec![0.3, -0.2, 0.5]), DVector::from_vec(vec![1.0, -0.5]));

    let n = 100_000;
    let mut sum = vec![DVector::<f64>::zeros(2); horizon];
    let mut sq = vec![DVector::<f64>::zeros(2); horizon];
    let mut s = stream(3, 1);
    for _ in 0..n {
        let traj = prior_rollout(&m, &start, &acts, &mut s);
        for t in 0..horizon {
            let z = &traj.beliefs[t].z;
            sum[t] += z;
            sq[t] += z.component_mul(z);
        }
    }

    let mut h = start.h.clone();
    let mut z = start.z.clone();
    for t in 0..horizon {
        h = &m.a * &h + &m.b * &z + &m.c * &acts.actions[t];
        z = &m.w * &h;
        for i in 0..2 {
            let mean = sum[t][i] / n as f64;
            let var = sq[t][i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - z[i]).abs() < 3.0 * se, "t={t} i={i}: {mean} vs {} (se {se})", z[i]);
        }
    }
}

#[test]
fn single_step_elbo_with_exact_encoder_is_the_marginal() {
    let mut rng = stream(4, 0);
    for case in 0..20 {
        let m = factorized_instance(&mut rng);
        let d_z = m.dims.d_z;
        let seq = simulate_sequence(&m, &[], &mut rng).unwrap();
        assert!(seq.rewards[0].is_none());
        let o = seq.observations[0].clone().unwrap();

        // marginal of o_0 at h_0 = 0
        let d_z_block = m.d.columns(m.dims.d_h, d_z).into_owned();
        let p = DMatrix::from_diagonal(&m.prior_logvar.map(f64::exp));
        let r = DMatrix::from_diagonal(&m.obs_logvar.map(f64::exp));
        let cov = &d_z_block * &p * d_z_block.transpose() + &r;
        let marginal = gaussian_log_density(&o, &DVector::zeros(o.len()), &cov);

        // closed-form expectation of the single-step objective
        let q = m.posterior(&DVector::zeros(m.dims.d_h), &o);
        let pred = &d_z_block * &q.mean;
        let mut recon = 0.0;
        for i in 0..o.len() {
            let spread: f64 = (0..d_z).map(|j| d_z_block[(i, j)].powi(2) * q.var[j]).sum();
            recon += -0.5 * (LN_2PI + r[(i, i)].ln() + ((o[i] - pred[i]).powi(2) + spread) / r[(i, i)]);
        }
        let kl: f64 = (0..d_z)
            .map(|j| 0.5 * (p[(j, j)].ln() - q.var[j].ln() + (q.var[j] + q.mean[j].powi(2)) / p[(j, j)] - 1.0))
            .sum();
        assert!((recon - kl - marginal).abs() < 1e-10, "case {case}: {} vs {marginal}", recon - kl);

        let est = elbo_estimate(&m, &seq, 4000, &mut stream(4, 1 + case)).unwrap();
        assert!((est.value - marginal).abs() < 3.0 * est.std_err, "case {case}: {} +- {} vs {marginal}", est.value, est.std_err);
        assert!((exact_evidence(&m, &seq).unwrap() - marginal).abs() < 1e-10);
    }
}

#[test]
fn elbo_never_exceeds_exact_evidence() {
    let mut rng = stream(5, 0);
    let n = 100;
    let mut ok = 0;
    for i in 0..n {
        let dims = ModelDims {
            d_h: rng.random_range(1..=4),
            d_z: rng.random_range(1..=4),
            d_o: rng.random_range(1..=3),
            d_a: 1,
        };
        let mut m = LinearGaussianRssm::random(dims, &mut rng);
        let t = rng.random_range(0..=6);
        let acts = actions(&mut rng, t, 1);
        let seq = simulate_sequence(&m, &acts, &mut rng).unwrap();
        m.randomize_encoder(&mut rng);
        let est = elbo_estimate(&m, &seq, 500, &mut stream(5, 1 + i)).unwrap();
        let ev = exact_evidence(&m, &seq).unwrap();
        if est.value <= ev + 3.0 * est.std_err {
            ok += 1;
        }
    }
    assert!(ok >= 99, "{ok}/{n}");
}

#[test]
fn factorized_instances_have_tight_elbo() {
    let mut rng = stream(6, 0);
    let n = 100;
    let mut ok = 0;
    for i in 0..n {
        let m = factorized_instance(&mut rng);
        let t = rng.random_range(0..=6);
        let seq = simulate_sequence(&m, &actions(&mut rng, t, 1), &mut rng).unwrap();
        let est = elbo_estimate(&m, &seq, 500, &mut stream(6, 1 + i)).unwrap();
        let ev = exact_evidence(&m, &seq).unwrap();
        if (est.value - ev).abs() < 5.0 * est.std_err {
            ok += 1;
        }
    }
    assert!(ok >= 95, "{ok}/{n}");
}

/// Trapezoid rule over `[lo, hi]` with `n` intervals.
fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let dx = (hi - lo) / n as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for k in 1..n {
        s += f(lo + k as f64 * dx);
    }
    s * dx
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

#[test]
fn evidence_matches_numerical_integration() {
    let mut rng = stream(7, 0);
    for _ in 0..5 {
        let m = LinearGaussianRssm::random(ModelDims { d_h: 1, d_z: 1, d_o: 1, d_a: 1 }, &mut rng);
        let acts = actions(&mut rng, 1, 1);
        let seq = simulate_sequence(&m, &acts, &mut rng).unwrap();
        let o0 = seq.observations[0].as_ref().unwrap()[0];
        let o1 = seq.observations[1].as_ref().unwrap()[0];
        let r1 = seq.rewards[1].unwrap();

        let p = m.prior_logvar[0].exp();
        let ro = m.obs_logvar[0].exp();
        let (dh, dz) = (m.d[(0, 0)], m.d[(0, 1)]);
        let (wh, wz) = (m.reward_w[0], m.reward_w[1]);
        let span = 12.0 * p.sqrt();
        let grid = 1600;
        let inner = |z0: f64| {
            let h1 = m.b[(0, 0)] * z0 + m.c[(0, 0)] * acts[0][0];
            let mz = m.w[(0, 0)] * h1;
            trapezoid(mz - span, mz + span, grid, |z1| {
                normal_pdf(z1, mz, p)
                    * normal_pdf(o1, dh * h1 + dz * z1, ro)
                    * normal_pdf(r1, wh * h1 + wz * z1 + m.reward_b, 1.0)
            })
        };
        let total = trapezoid(-span, span, grid, |z0| normal_pdf(z0, 0.0, p) * normal_pdf(o0, dz * z0, ro) * inner(z0));
        let ev = exact_evidence(&m, &seq).unwrap();
        assert!((total.ln() - ev).abs() < 1e-6, "{} vs {ev}", total.ln());
    }
}

#[test]
fn corridor_optimal_routes_split_between_both_gaps() {
    // Finite-horizon DP on a 0.01 grid with 32 full-speed headings. Shaping
    // makes the first step straight up for every optimal route, so the
    // headings are taken from the start to where each optimal route crosses
    // the wall line.
    let cfg = EnvConfig::corridor();
    let n = 101;
    let headings = 32;
    let dirs: Vec<[f64; 2]> = (0..headings)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / headings as f64;
            [a.cos(), a.sin()]
        })
        .collect();
    let cell = |p: [f64; 2]| ((p[0] * 100.0).round() as usize, (p[1] * 100.0).round() as usize);
    let point = |s: usize| [(s / n) as f64 / 100.0, (s % n) as f64 / 100.0];

    // (next cell, reward, terminal)
    let mut next = vec![Vec::with_capacity(headings); n * n];
    for s in 0..n * n {
        for d in &dirs {
            let (q, hit) = cfg.move_point(point(s), d, [0.0, 0.0]);
            let (qi, qj) = cell(q);
            let p = point(qi * n + qj);
            let mut r = cfg.position_reward(p);
            if hit {
                r -= cfg.collision_penalty;
            }
            let goal = ((p[0] - 0.5).powi(2) + (p[1] - 0.9).powi(2)).sqrt() < GOAL_RADIUS;
            next[s].push((qi * n + qj, r, goal));
        }
    }
    // values[k][s]: best return with k steps left
    let mut values = vec![vec![0.0; n * n]];
    for k in 1..=cfg.max_steps {
        let prev = &values[k - 1];
        let v: Vec<f64> = (0..n * n)
            .map(|s| {
                next[s]
                    .iter()
                    .map(|&(q, r, goal)| r + if goal { 0.0 } else { prev[q] })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        values.push(v);
    }

    let (si, sj) = cell(CORRIDOR_START);
    let start = si * n + sj;
    let mut frontier = vec![start];
    let mut crossings: Vec<f64> = Vec::new();
    for k in (1..=cfg.max_steps).rev() {
        let mut reached = Vec::new();
        for &s in &frontier {
            let q: Vec<f64> = next[s]
                .iter()
                .map(|&(q, r, goal)| r + if goal { 0.0 } else { values[k - 1][q] })
                .collect();
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (a, &(t, _, goal)) in next[s].iter().enumerate() {
                if q[a] < best - 1e-9 {
                    continue;
                }
                let (p, p2) = (point(s), point(t));
                if p[1] < 0.5 && p2[1] >= 0.5 {
                    let f = (0.5 - p[1]) / (p2[1] - p[1]);
                    crossings.push(p[0] + f * (p2[0] - p[0]));
                }
                if !goal && !reached.contains(&t) {
                    reached.push(t);
                }
            }
        }
        frontier = reached;
    }

    assert!(!crossings.is_empty());
    let angle = |x: f64| (0.5 - CORRIDOR_START[1]).atan2(x - CORRIDOR_START[0]);
    let mut angles: Vec<f64> = crossings.iter().map(|&x| angle(x)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    // clusters separated by more than one grid heading
    let gap = 2.0 * std::f64::consts::PI / headings as f64;
    let clusters = 1 + angles.windows(2).filter(|w| w[1] - w[0] > gap).count();
    assert!(clusters >= 2, "crossing headings {angles:?}");
    assert!(crossings.iter().any(|&x| x < 0.5) && crossings.iter().any(|&x| x > 0.5), "{crossings:?}");
}
