//! Fast oracle and invariant checks runnable from the binary. Each check
//! recomputes its reference value independently of the engine code.

use lmpc_core::nn::{relative_error, Activation, Mlp};
use lmpc_core::planner::update_mode;
use lmpc_core::seed::{Purpose, SeedSpec, Stream};
use lmpc_core::types::ActionSequence;
use lmpc_core::value::lambda_return;
use lmpc_core::worldmodel::{elbo_estimate, exact_evidence, simulate_sequence, LinearGaussianRssm, ModelDims};
use nalgebra::DVector;
use rand::Rng;

use crate::config::{parse_lines, resolve, Ablation};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn stream(i: u64) -> Stream {
    SeedSpec::new(0x5e1f).stream(Purpose::Test, &[i])
}

/// Returns expanded as a weighted sum of one-step targets.
fn expanded_returns(r: &[f64], mu: &[f64], lam: &[f64], gamma: f64) -> Vec<f64> {
    let h = r.len();
    (0..h)
        .map(|t| {
            let mut total = 0.0;
            let mut c = 1.0;
            for k in t..h - 1 {
                total += c * (r[k] + gamma * (1.0 - lam[k]) * mu[k + 1]);
                c *= gamma * lam[k];
            }
            total + c * mu[h - 1]
        })
        .collect()
}

fn check_lambda_return() -> Check {
    let mut rng = stream(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let h = rng.random_range(1..=6);
        let r: Vec<f64> = (0..h).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mu: Vec<f64> = (0..h).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lam: Vec<f64> = (0..h - 1).map(|_| rng.random_range(0.0..1.0)).collect();
        let gamma = rng.random_range(0.5..1.0);
        let got = lambda_return(&r, &mu, &lam, gamma).expect("valid lengths").returns;
        for (a, b) in got.iter().zip(expanded_returns(&r, &mu, &lam, gamma)) {
            worst = worst.max((a - b).abs());
        }
    }
    Check { name: "lambda_return_expansion", passed: worst < 1e-10, detail: format!("max |diff| {worst:.3e}") }
}

fn check_moment_matching() -> Check {
    let mut rng = stream(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=64);
        let h = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let cands: Vec<ActionSequence> = (0..k)
            .map(|_| ActionSequence::new((0..h).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))).collect()))
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let refs: Vec<&ActionSequence> = cands.iter().collect();
        let eps = 1e-4;
        let m = update_mode(&refs, &w, eps);
        for t in 0..h {
            for j in 0..d {
                let mean: f64 = (0..k).map(|i| w[i] * cands[i].actions[t][j]).sum();
                let var: f64 = (0..k).map(|i| w[i] * (cands[i].actions[t][j] - mean).powi(2)).sum::<f64>() + eps;
                worst = worst.max((m.mu[t][j] - mean).abs()).max((m.var[t][j] - var).abs());
            }
        }
    }
    Check { name: "moment_matching", passed: worst < 1e-12, detail: format!("max |diff| {worst:.3e}") }
}

fn check_mlp_gradient() -> Check {
    let mut rng = stream(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let net = Mlp::init(&[4, 16, 1], Activation::Identity, 1.0, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = net.forward_tape(&x);
        let mut g = vec![0.0; net.params.len()];
        net.backward(&tape, &[1.0], &mut g);
        let mut fd = vec![0.0; net.params.len()];
        let mut probe = net.clone();
        let step = 1e-5;
        for i in 0..fd.len() {
            let p = probe.params[i];
            probe.params[i] = p + step;
            let up = probe.forward(&x)[0];
            probe.params[i] = p - step;
            let dn = probe.forward(&x)[0];
            probe.params[i] = p;
            fd[i] = (up - dn) / (2.0 * step);
        }
        worst = worst.max(relative_error(&g, &fd, 1e-8));
    }
    Check { name: "mlp_gradient", passed: worst < 1e-4, detail: format!("max relative error {worst:.3e}") }
}

fn check_elbo_bound() -> Check {
    let mut rng = stream(4);
    let mut ok = 0;
    let n = 50;
    for i in 0..n {
        let dims = ModelDims { d_h: rng.random_range(1..=3), d_z: rng.random_range(1..=3), d_o: 2, d_a: 1 };
        let model = LinearGaussianRssm::random(dims, &mut rng);
        let t = rng.random_range(0..=4);
        let actions: Vec<DVector<f64>> = (0..t).map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0))).collect();
        let seq = simulate_sequence(&model, &actions, &mut rng).expect("valid sequence");
        let est = elbo_estimate(&model, &seq, 2000, &mut stream(100 + i)).expect("finite elbo");
        let ev = exact_evidence(&model, &seq).expect("evidence");
        if est.value <= ev + 3.0 * est.std_err {
            ok += 1;
        }
    }
    Check { name: "elbo_bound", passed: ok >= n - 1, detail: format!("{ok}/{n} below evidence + 3 SE") }
}

fn check_config_purity() -> Check {
    let base = parse_lines("env.kind = two_gap_corridor\nrun.seeds = 0\n").expect("static config");
    let mut hashes = Vec::new();
    let mut passed = true;
    for ab in Ablation::ALL {
        let a = resolve(&base, &[], Some(ab));
        let b = resolve(&base, &[], Some(ab));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                passed &= a == b;
                hashes.push(a.hash);
            }
            _ => passed = false,
        }
    }
    let mut unique = hashes.clone();
    unique.sort();
    unique.dedup();
    passed &= unique.len() == hashes.len();
    Check { name: "config_purity", passed, detail: format!("{} ablation hashes, {} distinct", hashes.len(), unique.len()) }
}

pub fn run_all() -> Vec<Check> {
    vec![
        check_lambda_return(),
        check_moment_matching(),
        check_mlp_gradient(),
        check_elbo_bound(),
        check_config_purity(),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
