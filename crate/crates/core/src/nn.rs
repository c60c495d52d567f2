//! Small fully connected approximators with an analytic backward pass, and
//! the Adam optimizer used to train them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Multi-layer perceptron with tanh hidden units.
///
/// Parameters live in one flat vector. Layer `l` stores its weight matrix
/// (`out x in`, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub output: Activation,
    pub params: Vec<f64>,
}

/// Post-activation values of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layers: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("tape has at least the input")
    }
}

impl Mlp {
    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: &[usize], output: Activation) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        Self {
            sizes: sizes.to_vec(),
            output,
            params: vec![0.0; Self::param_count(sizes)],
        }
    }

    /// Gaussian weights with variance `gain^2 / fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], output: Activation, gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, output);
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = gain / (fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut cur = x.to_vec();
        let mut off = 0;
        for l in 0..n_layers {
            let next = self.layer(l, &cur, &mut off);
            cur = next;
        }
        cur
    }

    pub fn forward_tape(&self, x: &[f64]) -> Tape {
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let next = self.layer(l, &layers[l], &mut off);
            layers.push(next);
        }
        Tape { layers }
    }

    fn layer(&self, l: usize, input: &[f64], off: &mut usize) -> Vec<f64> {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[*off..*off + fan_in * fan_out];
        let b = &self.params[*off + fan_in * fan_out..*off + fan_in * fan_out + fan_out];
        *off += fan_in * fan_out + fan_out;
        let last = l + 2 == self.sizes.len();
        let act = if last { self.output } else { Activation::Tanh };
        (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let pre = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                match act {
                    Activation::Identity => pre,
                    Activation::Tanh => pre.tanh(),
                }
            })
            .collect()
    }

    /// Accumulates `d(grad_out . y)/d(params)` into `grad_params` and returns
    /// the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad_params.len(), self.params.len());
        let n_layers = self.sizes.len() - 1;
        let mut delta: Vec<f64> = match self.output {
            Activation::Identity => grad_out.to_vec(),
            Activation::Tanh => grad_out
                .iter()
                .zip(tape.output())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        };
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &tape.layers[l];
            let w = &self.params[off..off + fan_in * fan_out];
            let mut g_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad_params[off + o * fan_in..off + (o + 1) * fan_in];
                for ((g, x), (gi, wv)) in gw
                    .iter_mut()
                    .zip(input)
                    .zip(g_in.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]))
                {
                    *g += d * x;
                    *gi += d * wv;
                }
                grad_params[off + fan_in * fan_out + o] += d;
            }
            if l == 0 {
                return g_in;
            }
            delta = g_in
                .iter()
                .zip(input)
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
        }
        unreachable!("loop returns at the first layer")
    }
}

/// Adam on a flat parameter vector. `step` descends; negate the gradient to
/// ascend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, disabled when `None`.
    pub max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(100.0),
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` between two gradient vectors
/// measured in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(net: &Mlp, x: &[f64], w: &[f64], h: f64) -> Vec<f64> {
        let f = |n: &Mlp| -> f64 { n.forward(x).iter().zip(w).map(|(y, c)| y * c).sum() };
        let mut out = vec![0.0; net.params.len()];
        let mut probe = net.clone();
        for i in 0..net.params.len() {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let up = f(&probe);
            probe.params[i] = orig - h;
            let down = f(&probe);
            probe.params[i] = orig;
            out[i] = (up - down) / (2.0 * h);
        }
        out
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(Mlp::param_count(&[3, 4, 2]), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for output in [Activation::Identity, Activation::Tanh] {
            let net = Mlp::init(&[3, 5, 4, 2], output, 1.0, &mut rng);
            let x = [0.3, -0.7, 1.1];
            let w = [0.6, -1.3];
            let tape = net.forward_tape(&x);
            let mut g = vec![0.0; net.params.len()];
            net.backward(&tape, &w, &mut g);
            let fd = central_diff(&net, &x, &w, 1e-5);
            assert!(relative_error(&g, &fd, 1e-8) < 1e-7);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::init(&[2, 6, 1], Activation::Identity, 1.0, &mut rng);
        let x = [0.2, -0.4];
        let tape = net.forward_tape(&x);
        let mut g = vec![0.0; net.params.len()];
        let gx = net.backward(&tape, &[1.0], &mut g);
        for i in 0..2 {
            let mut up = x;
            up[i] += 1e-6;
            let mut dn = x;
            dn[i] -= 1e-6;
            let fd = (net.forward(&up)[0] - net.forward(&dn)[0]) / 2e-6;
            assert!((fd - gx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_is_deterministic_and_tape_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::init(&[2, 3, 1], Activation::Identity, 1.0, &mut rng);
        let a = net.forward(&[0.1, 0.2]);
        let b = net.forward(&[0.1, 0.2]);
        assert_eq!(a, b);
        assert_eq!(net.forward_tape(&[0.1, 0.2]).output(), &a[..]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(0.05, 2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }
}
