//! Monte-Carlo evidence lower bound with analytic diagonal-Gaussian KL terms,
//! and its reparameterized gradient via a backward pass through time.

use nalgebra::DVector;

use super::{LatentModel, Sequence};
use crate::error::{Error, Result};
use crate::gaussian::{kl_diag, log_prob_diag, standard_normal, DiagGaussian, LN_2PI};
use crate::seed::Stream;
use crate::types::ActionVector;

/// Default number of posterior sample paths per sequence.
pub const DEFAULT_ELBO_SAMPLES: usize = 16;

/// A model whose ELBO can be differentiated with respect to a flat parameter
/// vector. `*_raw` return `(mean, log-variance)`; each `*_vjp` accumulates the
/// parameter gradient of `g . output` into `grad` and returns the gradient
/// with respect to its inputs.
pub trait DifferentiableRssm: LatentModel {
    fn param_len(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);

    fn prior_raw(&self, h: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    fn posterior_raw(&self, h: &DVector<f64>, o: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    fn decode_raw(&self, h: &DVector<f64>, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>);

    fn transition_vjp(
        &self,
        h: &DVector<f64>,
        z: &DVector<f64>,
        a: &ActionVector,
        g_out: &DVector<f64>,
        grad: &mut [f64],
    ) -> (DVector<f64>, DVector<f64>);
    fn prior_vjp(&self, h: &DVector<f64>, g_mean: &DVector<f64>, g_logvar: &DVector<f64>, grad: &mut [f64]) -> DVector<f64>;
    fn posterior_vjp(
        &self,
        h: &DVector<f64>,
        o: &DVector<f64>,
        g_mean: &DVector<f64>,
        g_logvar: &DVector<f64>,
        grad: &mut [f64],
    ) -> DVector<f64>;
    fn decode_vjp(
        &self,
        h: &DVector<f64>,
        z: &DVector<f64>,
        g_mean: &DVector<f64>,
        g_logvar: &DVector<f64>,
        grad: &mut [f64],
    ) -> (DVector<f64>, DVector<f64>);
    fn reward_vjp(&self, h: &DVector<f64>, z: &DVector<f64>, g: f64, grad: &mut [f64]) -> (DVector<f64>, DVector<f64>);
}

/// Standard-normal noise for one posterior sample path: one `d_z` vector per
/// observation slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    pub eps: Vec<DVector<f64>>,
}

impl ElboNoise {
    pub fn draw(stream: &mut Stream, slots: usize, d_z: usize) -> Self {
        Self {
            eps: (0..slots).map(|_| standard_normal(stream, d_z)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    /// Mean over sample paths.
    pub value: f64,
    /// Monte-Carlo standard error of `value`.
    pub std_err: f64,
    pub samples: Vec<f64>,
    /// Per-slot KL terms averaged over sample paths.
    pub kl_terms: Vec<f64>,
}

/// One sample path: total objective and per-slot KL terms.
fn elbo_path<M: LatentModel + ?Sized>(model: &M, seq: &Sequence, noise: &ElboNoise) -> Result<(f64, Vec<f64>)> {
    let mut h = model.initial_h();
    let mut total = 0.0;
    let mut kls = Vec::with_capacity(seq.observations.len());
    let rv = model.reward_var();
    if !(rv > 0.0) {
        return Err(Error::NonPositiveVariance("reward"));
    }
    for t in 0..seq.observations.len() {
        let prior = model.prior(&h);
        prior.check("prior")?;
        let z = match &seq.observations[t] {
            Some(o) => {
                let q = model.posterior(&h, o);
                q.check("posterior")?;
                let z = q.reparam(&noise.eps[t]);
                let kl = kl_diag(&q, &prior);
                let dec = model.decode(&h, &z);
                dec.check("decoder")?;
                total += dec.log_prob(o) - kl;
                kls.push(kl);
                z
            }
            None => {
                kls.push(0.0);
                prior.reparam(&noise.eps[t])
            }
        };
        if let Some(r) = seq.rewards[t] {
            let m = model.reward(&h, &z);
            total += -0.5 * (LN_2PI + rv.ln() + (r - m) * (r - m) / rv);
        }
        if t < seq.actions.len() {
            h = model.transition(&h, &z, &seq.actions[t]);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("elbo"));
    }
    Ok((total, kls))
}

/// ELBO estimate over `n_samples` posterior sample paths.
pub fn elbo_estimate<M: LatentModel + ?Sized>(
    model: &M,
    seq: &Sequence,
    n_samples: usize,
    stream: &mut Stream,
) -> Result<ElboEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("elbo needs at least one sample".into()));
    }
    seq.check_dims(&model.dims())?;
    let d_z = model.dims().d_z;
    let slots = seq.observations.len();
    let mut samples = Vec::with_capacity(n_samples);
    let mut kl_terms = vec![0.0; slots];
    for _ in 0..n_samples {
        let noise = ElboNoise::draw(stream, slots, d_z);
        let (v, kls) = elbo_path(model, seq, &noise)?;
        samples.push(v);
        for (acc, k) in kl_terms.iter_mut().zip(kls) {
            *acc += k / n_samples as f64;
        }
    }
    let n = n_samples as f64;
    let value = samples.iter().sum::<f64>() / n;
    let std_err = if n_samples > 1 {
        let var = samples.iter().map(|s| (s - value) * (s - value)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(ElboEstimate {
        value,
        std_err,
        samples,
        kl_terms,
    })
}

pub fn elbo<M: LatentModel + ?Sized>(model: &M, seq: &Sequence, n_samples: usize, stream: &mut Stream) -> Result<f64> {
    Ok(elbo_estimate(model, seq, n_samples, stream)?.value)
}

struct SlotCache {
    h: DVector<f64>,
    z: DVector<f64>,
    prior: (DVector<f64>, DVector<f64>),
    post: Option<(DVector<f64>, DVector<f64>)>,
    dec: Option<(DVector<f64>, DVector<f64>)>,
    reward_mean: Option<f64>,
}

/// ELBO of one sample path and its gradient with respect to `model.params()`.
pub fn elbo_path_gradient<M: DifferentiableRssm + ?Sized>(model: &M, seq: &Sequence, noise: &ElboNoise) -> Result<(f64, Vec<f64>)> {
    let slots = seq.observations.len();
    let rv = model.reward_var();
    let mut cache: Vec<SlotCache> = Vec::with_capacity(slots);
    let mut h = model.initial_h();
    let mut total = 0.0;
    for t in 0..slots {
        let (mp, lvp) = model.prior_raw(&h);
        let eps = &noise.eps[t];
        let (z, post, dec) = match &seq.observations[t] {
            Some(o) => {
                let (mq, lvq) = model.posterior_raw(&h, o);
                let z = DVector::from_fn(mq.len(), |i, _| mq[i] + (0.5 * lvq[i]).exp() * eps[i]);
                let (md, lvd) = model.decode_raw(&h, &z);
                let vd = lvd.map(f64::exp);
                total += log_prob_diag(o.as_slice(), md.as_slice(), vd.as_slice());
                total -= kl_diag(
                    &DiagGaussian::from_logvar(mq.clone(), &lvq),
                    &DiagGaussian::from_logvar(mp.clone(), &lvp),
                );
                (z, Some((mq, lvq)), Some((md, lvd)))
            }
            None => {
                let z = DVector::from_fn(mp.len(), |i, _| mp[i] + (0.5 * lvp[i]).exp() * eps[i]);
                (z, None, None)
            }
        };
        let reward_mean = seq.rewards[t].map(|r| {
            let m = model.reward(&h, &z);
            total += -0.5 * (LN_2PI + rv.ln() + (r - m) * (r - m) / rv);
            m
        });
        let next = if t < seq.actions.len() {
            Some(model.transition(&h, &z, &seq.actions[t]))
        } else {
            None
        };
        cache.push(SlotCache {
            h: h.clone(),
            z,
            prior: (mp, lvp),
            post,
            dec,
            reward_mean,
        });
        if let Some(n) = next {
            h = n;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("elbo"));
    }

    let mut grad = vec![0.0; model.param_len()];
    let d_h = model.dims().d_h;
    let mut g_h_next = DVector::<f64>::zeros(d_h);
    for t in (0..slots).rev() {
        let c = &cache[t];
        let mut g_h = DVector::<f64>::zeros(d_h);
        let mut g_z = DVector::<f64>::zeros(c.z.len());
        if t < seq.actions.len() {
            let (gh, gz) = model.transition_vjp(&c.h, &c.z, &seq.actions[t], &g_h_next, &mut grad);
            g_h += gh;
            g_z += gz;
        }
        if let (Some(r), Some(m)) = (seq.rewards[t], c.reward_mean) {
            let (gh, gz) = model.reward_vjp(&c.h, &c.z, (r - m) / rv, &mut grad);
            g_h += gh;
            g_z += gz;
        }
        let (mp, lvp) = &c.prior;
        let eps = &noise.eps[t];
        match (&seq.observations[t], &c.post, &c.dec) {
            (Some(o), Some((mq, lvq)), Some((md, lvd))) => {
                let inv_vd = lvd.map(|l| (-l).exp());
                let resid = o - md;
                let g_md = resid.component_mul(&inv_vd);
                let g_lvd = DVector::from_fn(resid.len(), |i, _| -0.5 + 0.5 * resid[i] * resid[i] * inv_vd[i]);
                let (gh, gz) = model.decode_vjp(&c.h, &c.z, &g_md, &g_lvd, &mut grad);
                g_h += gh;
                g_z += gz;

                let n = mq.len();
                let vq = lvq.map(f64::exp);
                let vp = lvp.map(f64::exp);
                // objective contains -KL(q || p)
                let g_mq = DVector::from_fn(n, |i, _| g_z[i] - (mq[i] - mp[i]) / vp[i]);
                let g_lvq = DVector::from_fn(n, |i, _| {
                    g_z[i] * 0.5 * (0.5 * lvq[i]).exp() * eps[i] - 0.5 * (vq[i] / vp[i] - 1.0)
                });
                let g_mp = DVector::from_fn(n, |i, _| (mq[i] - mp[i]) / vp[i]);
                let g_lvp = DVector::from_fn(n, |i, _| {
                    let d = mq[i] - mp[i];
                    -0.5 * (1.0 - (vq[i] + d * d) / vp[i])
                });
                g_h += model.posterior_vjp(&c.h, o, &g_mq, &g_lvq, &mut grad);
                g_h += model.prior_vjp(&c.h, &g_mp, &g_lvp, &mut grad);
            }
            _ => {
                let n = mp.len();
                let g_lvp = DVector::from_fn(n, |i, _| g_z[i] * 0.5 * (0.5 * lvp[i]).exp() * eps[i]);
                g_h += model.prior_vjp(&c.h, &g_z, &g_lvp, &mut grad);
            }
        }
        g_h_next = g_h;
    }
    Ok((total, grad))
}

/// Mean ELBO and gradient over a batch of sequences with one noise path per
/// sequence.
pub fn elbo_gradient<M: DifferentiableRssm + ?Sized>(
    model: &M,
    seqs: &[Sequence],
    noise: &[ElboNoise],
) -> Result<(f64, Vec<f64>)> {
    if seqs.is_empty() {
        return Err(Error::Empty("elbo batch"));
    }
    if seqs.len() != noise.len() {
        return Err(Error::LengthMismatch {
            what: "elbo noise",
            expected: seqs.len(),
            got: noise.len(),
        });
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; model.param_len()];
    for (s, n) in seqs.iter().zip(noise) {
        s.check_dims(&model.dims())?;
        let (v, g) = elbo_path_gradient(model, s, n)?;
        total += v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let k = seqs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    Ok((total / k, grad))
}
