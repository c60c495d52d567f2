//! Diagonal Gaussians: densities, analytic KL and sampling.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl DiagGaussian {
    pub fn new(mean: DVector<f64>, var: DVector<f64>) -> Self {
        debug_assert_eq!(mean.len(), var.len());
        Self { mean, var }
    }

    pub fn from_logvar(mean: DVector<f64>, logvar: &DVector<f64>) -> Self {
        let var = logvar.map(f64::exp);
        Self { mean, var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn check(&self, what: &'static str) -> Result<()> {
        if self.var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::NonPositiveVariance(what));
        }
        Ok(())
    }

    pub fn std(&self) -> DVector<f64> {
        self.var.map(f64::sqrt)
    }

    pub fn log_prob(&self, x: &DVector<f64>) -> f64 {
        log_prob_diag(x.as_slice(), self.mean.as_slice(), self.var.as_slice())
    }

    /// `mean + std * eps`.
    pub fn reparam(&self, eps: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.mean
                .iter()
                .zip(self.var.iter())
                .zip(eps.iter())
                .map(|((m, v), e)| m + v.sqrt() * e),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = standard_normal(rng, self.dim());
        self.reparam(&eps)
    }

    pub fn entropy(&self) -> f64 {
        0.5 * self
            .var
            .iter()
            .map(|v| 1.0 + LN_2PI + v.ln())
            .sum::<f64>()
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn log_prob_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v))
        .sum()
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> f64 {
    q.mean
        .iter()
        .zip(q.var.iter())
        .zip(p.mean.iter().zip(p.var.iter()))
        .map(|((mq, vq), (mp, vp))| {
            let d = mq - mp;
            0.5 * (vp.ln() - vq.ln() + (vq + d * d) / vp - 1.0)
        })
        .sum()
}
