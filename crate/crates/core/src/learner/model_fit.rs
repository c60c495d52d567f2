//! Gradient ascent on the sequence ELBO.

use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::seed::Stream;
use crate::worldmodel::elbo::DifferentiableRssm;
use crate::worldmodel::{elbo_gradient, ElboNoise, Sequence, WorldModel};

/// One Adam ascent step on the mean single-path ELBO of `seqs`, with fresh
/// reparameterization noise per sequence. Returns the ELBO before the step.
pub fn fit_step<M: DifferentiableRssm + ?Sized>(model: &mut M, adam: &mut Adam, seqs: &[Sequence], stream: &mut Stream) -> Result<f64> {
    let d_z = model.dims().d_z;
    let noise: Vec<ElboNoise> = seqs
        .iter()
        .map(|s| ElboNoise::draw(stream, s.observations.len(), d_z))
        .collect();
    let (value, grad) = elbo_gradient(model, seqs, &noise)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("elbo"));
    }
    let mut params = model.params();
    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
    adam.step(&mut params, &neg);
    model.set_params(&params);
    Ok(value)
}

/// [`fit_step`] for any fittable family; `None` for the hand-specified
/// environment model, which is never fitted.
pub fn model_update(model: &mut WorldModel, adam: &mut Adam, seqs: &[Sequence], stream: &mut Stream) -> Result<Option<f64>> {
    match model {
        WorldModel::Linear(m) => fit_step(m, adam, seqs, stream).map(Some),
        WorldModel::Neural(m) => fit_step(m, adam, seqs, stream).map(Some),
        WorldModel::Oracle(_) => Ok(None),
    }
}

/// Number of trainable parameters, zero for the environment model.
pub fn trainable_params(model: &WorldModel) -> usize {
    match model {
        WorldModel::Linear(m) => m.param_len(),
        WorldModel::Neural(m) => m.param_len(),
        WorldModel::Oracle(_) => 0,
    }
}
