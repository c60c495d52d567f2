//! Small nonlinear Gaussian RSSM built from [`Mlp`] components.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::elbo::DifferentiableRssm;
use super::linear::{split, MODEL_DOC_VERSION};
use super::{LatentModel, ModelDims};
use crate::gaussian::DiagGaussian;
use crate::nn::{Activation, Mlp};
use crate::types::ActionVector;

/// Log-variances produced by networks are squashed into `(-LV, LV)`.
const LOGVAR_BOUND: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NeuralDoc", try_from = "NeuralDoc")]
pub struct NeuralRssm {
    pub dims: ModelDims,
    /// `[h, z, a] -> h'`, tanh output.
    pub transition: Mlp,
    /// `h -> [mean, raw logvar]` of the prior.
    pub prior: Mlp,
    /// `[h, o] -> [mean, raw logvar]` of the posterior.
    pub encoder: Mlp,
    /// `[h, z] -> observation mean`.
    pub decoder: Mlp,
    pub obs_logvar: DVector<f64>,
    /// `[h, z] -> reward mean`.
    pub reward_head: Mlp,
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

fn squash_logvar(raw: f64) -> f64 {
    LOGVAR_BOUND * (raw / LOGVAR_BOUND).tanh()
}

fn squash_logvar_grad(raw: f64) -> f64 {
    let t = (raw / LOGVAR_BOUND).tanh();
    1.0 - t * t
}

/// Split a `2 d` network output into mean and squashed log-variance.
fn mean_logvar(out: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let d = out.len() / 2;
    (
        DVector::from_column_slice(&out[..d]),
        DVector::from_iterator(d, out[d..].iter().map(|&r| squash_logvar(r))),
    )
}

/// Gradient on the raw `2 d` network output from gradients on mean and
/// squashed log-variance.
fn mean_logvar_grad(out: &[f64], g_mean: &DVector<f64>, g_logvar: &DVector<f64>) -> Vec<f64> {
    let d = out.len() / 2;
    let mut g = Vec::with_capacity(2 * d);
    g.extend_from_slice(g_mean.as_slice());
    g.extend((0..d).map(|i| g_logvar[i] * squash_logvar_grad(out[d + i])));
    g
}

impl NeuralRssm {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, hidden: usize, rng: &mut R) -> Self {
        let ModelDims { d_h, d_z, d_o, d_a } = dims;
        let mut prior = Mlp::init(&[d_h, hidden, 2 * d_z], Activation::Identity, 0.5, rng);
        let mut encoder = Mlp::init(&[d_h + d_o, hidden, 2 * d_z], Activation::Identity, 0.5, rng);
        // start with modest latent variances
        for net in [&mut prior, &mut encoder] {
            let n = net.params.len();
            for b in &mut net.params[n - d_z..] {
                *b = -2.0;
            }
        }
        Self {
            dims,
            transition: Mlp::init(&[d_h + d_z + d_a, hidden, d_h], Activation::Tanh, 1.0, rng),
            prior,
            encoder,
            decoder: Mlp::init(&[d_h + d_z, hidden, d_o], Activation::Identity, 1.0, rng),
            obs_logvar: DVector::from_element(d_o, -2.0),
            reward_head: Mlp::init(&[d_h + d_z, hidden, 1], Activation::Identity, 1.0, rng),
        }
    }

    fn offsets(&self) -> [usize; 6] {
        let t = self.transition.params.len();
        let p = t + self.prior.params.len();
        let e = p + self.encoder.params.len();
        let d = e + self.decoder.params.len();
        let o = d + self.obs_logvar.len();
        [0, t, p, e, d, o]
    }
}

impl LatentModel for NeuralRssm {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn posterior(&self, h: &DVector<f64>, o: &DVector<f64>) -> DiagGaussian {
        let (m, lv) = self.posterior_raw(h, o);
        DiagGaussian::from_logvar(m, &lv)
    }

    fn transition(&self, h: &DVector<f64>, z: &DVector<f64>, a: &ActionVector) -> DVector<f64> {
        let x = cat(&[h.as_slice(), z.as_slice(), a.as_slice()]);
        DVector::from_vec(self.transition.forward(&x))
    }

    fn prior(&self, h: &DVector<f64>) -> DiagGaussian {
        let (m, lv) = self.prior_raw(h);
        DiagGaussian::from_logvar(m, &lv)
    }

    fn decode(&self, h: &DVector<f64>, z: &DVector<f64>) -> DiagGaussian {
        let (m, lv) = self.decode_raw(h, z);
        DiagGaussian::from_logvar(m, &lv)
    }

    fn reward(&self, h: &DVector<f64>, z: &DVector<f64>) -> f64 {
        self.reward_head.forward(&cat(&[h.as_slice(), z.as_slice()]))[0]
    }
}

impl DifferentiableRssm for NeuralRssm {
    fn param_len(&self) -> usize {
        self.offsets()[5] + self.reward_head.params.len()
    }

    fn params(&self) -> Vec<f64> {
        cat(&[
            &self.transition.params,
            &self.prior.params,
            &self.encoder.params,
            &self.decoder.params,
            self.obs_logvar.as_slice(),
            &self.reward_head.params,
        ])
    }

    fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_len());
        let [t, pr, e, d, o, r] = self.offsets();
        self.transition.params.copy_from_slice(&p[t..pr]);
        self.prior.params.copy_from_slice(&p[pr..e]);
        self.encoder.params.copy_from_slice(&p[e..d]);
        self.decoder.params.copy_from_slice(&p[d..o]);
        self.obs_logvar.copy_from_slice(&p[o..r]);
        self.reward_head.params.copy_from_slice(&p[r..]);
    }

    fn prior_raw(&self, h: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        mean_logvar(&self.prior.forward(h.as_slice()))
    }

    fn posterior_raw(&self, h: &DVector<f64>, o: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        mean_logvar(&self.encoder.forward(&cat(&[h.as_slice(), o.as_slice()])))
    }

    fn decode_raw(&self, h: &DVector<f64>, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.decoder.forward(&cat(&[h.as_slice(), z.as_slice()]));
        (DVector::from_vec(m), self.obs_logvar.clone())
    }

    fn transition_vjp(
        &self,
        h: &DVector<f64>,
        z: &DVector<f64>,
        a: &ActionVector,
        g_out: &DVector<f64>,
        grad: &mut [f64],
    ) -> (DVector<f64>, DVector<f64>) {
        let [t, pr, ..] = self.offsets();
        let x = cat(&[h.as_slice(), z.as_slice(), a.as_slice()]);
        let tape = self.transition.forward_tape(&x);
        let gx = self.transition.backward(&tape, g_out.as_slice(), &mut grad[t..pr]);
        (
            DVector::from_column_slice(&gx[..h.len()]),
            DVector::from_column_slice(&gx[h.len()..h.len() + z.len()]),
        )
    }

    fn prior_vjp(&self, h: &DVector<f64>, g_mean: &DVector<f64>, g_logvar: &DVector<f64>, grad: &mut [f64]) -> DVector<f64> {
        let [_, pr, e, ..] = self.offsets();
        let tape = self.prior.forward_tape(h.as_slice());
        let g = mean_logvar_grad(tape.output(), g_mean, g_logvar);
        DVector::from_vec(self.prior.backward(&tape, &g, &mut grad[pr..e]))
    }

    fn posterior_vjp(
        &self,
        h: &DVector<f64>,
        o: &DVector<f64>,
        g_mean: &DVector<f64>,
        g_logvar: &DVector<f64>,
        grad: &mut [f64],
    ) -> DVector<f64> {
        let [_, _, e, d, ..] = self.offsets();
        let tape = self.encoder.forward_tape(&cat(&[h.as_slice(), o.as_slice()]));
        let g = mean_logvar_grad(tape.output(), g_mean, g_logvar);
        let gx = self.encoder.backward(&tape, &g, &mut grad[e..d]);
        DVector::from_column_slice(&gx[..h.len()])
    }

    fn decode_vjp(
        &self,
        h: &DVector<f64>,
        z: &DVector<f64>,
        g_mean: &DVector<f64>,
        g_logvar: &DVector<f64>,
        grad: &mut [f64],
    ) -> (DVector<f64>, DVector<f64>) {
        let [_, _, _, d, o, r] = self.offsets();
        let tape = self.decoder.forward_tape(&cat(&[h.as_slice(), z.as_slice()]));
        let gx = self.decoder.backward(&tape, g_mean.as_slice(), &mut grad[d..o]);
        for (dst, g) in grad[o..r].iter_mut().zip(g_logvar.iter()) {
            *dst += g;
        }
        split(&DVector::from_vec(gx), h.len())
    }

    fn reward_vjp(&self, h: &DVector<f64>, z: &DVector<f64>, g: f64, grad: &mut [f64]) -> (DVector<f64>, DVector<f64>) {
        let r = self.offsets()[5];
        let tape = self.reward_head.forward_tape(&cat(&[h.as_slice(), z.as_slice()]));
        let gx = self.reward_head.backward(&tape, &[g], &mut grad[r..]);
        split(&DVector::from_vec(gx), h.len())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NeuralDoc {
    version: u32,
    d_h: usize,
    d_z: usize,
    d_o: usize,
    d_a: usize,
    transition: Mlp,
    prior: Mlp,
    encoder: Mlp,
    decoder: Mlp,
    obs_logvar: Vec<f64>,
    reward_head: Mlp,
}

impl From<NeuralRssm> for NeuralDoc {
    fn from(m: NeuralRssm) -> Self {
        Self {
            version: MODEL_DOC_VERSION,
            d_h: m.dims.d_h,
            d_z: m.dims.d_z,
            d_o: m.dims.d_o,
            d_a: m.dims.d_a,
            transition: m.transition,
            prior: m.prior,
            encoder: m.encoder,
            decoder: m.decoder,
            obs_logvar: m.obs_logvar.as_slice().to_vec(),
            reward_head: m.reward_head,
        }
    }
}

impl TryFrom<NeuralDoc> for NeuralRssm {
    type Error = String;

    fn try_from(doc: NeuralDoc) -> Result<Self, String> {
        if doc.version != MODEL_DOC_VERSION {
            return Err(format!("unsupported model document version {}", doc.version));
        }
        let dims = ModelDims {
            d_h: doc.d_h,
            d_z: doc.d_z,
            d_o: doc.d_o,
            d_a: doc.d_a,
        };
        let check = |net: &Mlp, input: usize, output: usize, what: &str| -> Result<(), String> {
            if net.input_dim() != input
                || net.output_dim() != output
                || net.params.len() != Mlp::param_count(&net.sizes)
            {
                return Err(format!("{what}: inconsistent network shape"));
            }
            Ok(())
        };
        check(&doc.transition, dims.d_h + dims.d_z + dims.d_a, dims.d_h, "transition")?;
        check(&doc.prior, dims.d_h, 2 * dims.d_z, "prior")?;
        check(&doc.encoder, dims.d_h + dims.d_o, 2 * dims.d_z, "encoder")?;
        check(&doc.decoder, dims.d_h + dims.d_z, dims.d_o, "decoder")?;
        check(&doc.reward_head, dims.d_h + dims.d_z, 1, "reward_head")?;
        if doc.obs_logvar.len() != dims.d_o {
            return Err("obs_logvar: wrong length".into());
        }
        Ok(Self {
            dims,
            transition: doc.transition,
            prior: doc.prior,
            encoder: doc.encoder,
            decoder: doc.decoder,
            obs_logvar: DVector::from_vec(doc.obs_logvar),
            reward_head: doc.reward_head,
        })
    }
}
