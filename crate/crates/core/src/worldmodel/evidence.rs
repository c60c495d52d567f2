//! Exact log-evidence of the linear-Gaussian family.
//!
//! With `h_0 = 0` every latent and every observed quantity is an affine
//! function of the stacked standard-normal prior noise, so the observed
//! vector is jointly Gaussian and its log density is available in closed
//! form.

use nalgebra::{DMatrix, DVector};

use super::{LatentModel, LinearGaussianRssm, Sequence};
use crate::error::{Error, Result};
use crate::gaussian::LN_2PI;

/// Mean and covariance of every observed scalar in `seq` (observations, then
/// rewards, in time order).
pub fn observed_marginal(model: &LinearGaussianRssm, seq: &Sequence) -> Result<(DVector<f64>, DMatrix<f64>)> {
    seq.check_dims(&model.dims())?;
    let dims = model.dims();
    let slots = seq.observations.len();
    let n_noise = slots * dims.d_z;
    let prior_std = model.prior_logvar.map(|l| (0.5 * l).exp());
    let obs_var = model.obs_logvar.map(f64::exp);
    let reward_var = model.reward_var();
    let (d_hh, d_zz) = model.d_blocks();
    let w_h = model.reward_w.rows(0, dims.d_h).transpose();
    let w_z = model.reward_w.rows(dims.d_h, dims.d_z).transpose();

    // h_t = h_mean + h_jac * eps
    let mut h_mean = model.initial_h();
    let mut h_jac = DMatrix::<f64>::zeros(dims.d_h, n_noise);

    let mut means: Vec<f64> = Vec::new();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut noise: Vec<f64> = Vec::new();

    for t in 0..slots {
        let z_mean = &model.w * &h_mean;
        let mut z_jac = &model.w * &h_jac;
        for i in 0..dims.d_z {
            z_jac[(i, t * dims.d_z + i)] += prior_std[i];
        }
        if let Some(_o) = &seq.observations[t] {
            let o_mean = &d_hh * &h_mean + &d_zz * &z_mean;
            let o_jac = &d_hh * &h_jac + &d_zz * &z_jac;
            for i in 0..dims.d_o {
                means.push(o_mean[i]);
                rows.push(o_jac.row(i).transpose());
                noise.push(obs_var[i]);
            }
        }
        if seq.rewards[t].is_some() {
            let r_mean = (&w_h * &h_mean)[0] + (&w_z * &z_mean)[0] + model.reward_b;
            let r_jac = &w_h * &h_jac + &w_z * &z_jac;
            means.push(r_mean);
            rows.push(r_jac.row(0).transpose());
            noise.push(reward_var);
        }
        if t < seq.actions.len() {
            let a = &seq.actions[t];
            h_mean = &model.a * &h_mean + &model.b * &z_mean + &model.c * a;
            h_jac = &model.a * &h_jac + &model.b * &z_jac;
        }
    }

    let n = means.len();
    let jac = DMatrix::from_fn(n, n_noise, |i, j| rows[i][j]);
    let cov = &jac * jac.transpose() + DMatrix::from_diagonal(&DVector::from_vec(noise));
    Ok((DVector::from_vec(means), cov))
}

fn observed_values(seq: &Sequence) -> DVector<f64> {
    let mut v = Vec::new();
    for t in 0..seq.observations.len() {
        if let Some(o) = &seq.observations[t] {
            v.extend(o.iter().copied());
        }
        if let Some(r) = seq.rewards[t] {
            v.push(r);
        }
    }
    DVector::from_vec(v)
}

/// `log p(o_{0:T}, r_{0:T} | a_{0:T-1})`; rewards enter where present.
pub fn exact_evidence(model: &LinearGaussianRssm, seq: &Sequence) -> Result<f64> {
    let (mean, cov) = observed_marginal(model, seq)?;
    let y = observed_values(seq);
    if y.is_empty() {
        return Ok(0.0);
    }
    let chol = cov
        .cholesky()
        .ok_or(Error::SingularCovariance("joint observation covariance"))?;
    let resid = y - mean;
    let sol = chol.solve(&resid);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let value = -0.5 * (resid.dot(&sol) + log_det + resid.len() as f64 * LN_2PI);
    if !value.is_finite() {
        return Err(Error::NonFinite("exact evidence"));
    }
    Ok(value)
}
