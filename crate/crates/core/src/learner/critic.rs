//! Squared-error regression of every critic member toward shared targets.

use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::types::Belief;
use crate::value::CriticEnsemble;

/// Critic ensemble with one optimizer per member.
#[derive(Debug, Clone)]
pub struct CriticLearner {
    pub ensemble: CriticEnsemble,
    pub adams: Vec<Adam>,
}

impl CriticLearner {
    pub fn new(ensemble: CriticEnsemble, lr: f64) -> Self {
        let adams = ensemble
            .members
            .iter()
            .map(|m| Adam::new(lr, m.params.len()))
            .collect();
        Self { ensemble, adams }
    }

    /// Mean squared error of each member and its gradient. Targets are
    /// plain numbers, so nothing flows back into them.
    pub fn member_loss_grad(&self, member: usize, inputs: &[Belief], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch { what: "critic targets", expected: inputs.len(), got: targets.len() });
        }
        if inputs.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        let net = &self.ensemble.members[member];
        let n = inputs.len() as f64;
        let mut grad = vec![0.0; net.params.len()];
        let mut loss = 0.0;
        for (b, &y) in inputs.iter().zip(targets) {
            let tape = net.forward_tape(&b.features());
            let r = tape.output()[0] - y;
            loss += r * r / n;
            net.backward(&tape, &[2.0 * r / n], &mut grad);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss"));
        }
        Ok((loss, grad))
    }

    /// One step for every member; returns the mean pre-step loss.
    pub fn update(&mut self, inputs: &[Belief], targets: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.ensemble.len());
        for i in 0..self.ensemble.len() {
            let (loss, grad) = self.member_loss_grad(i, inputs, targets)?;
            total += loss;
            grads.push(grad);
        }
        for ((net, adam), grad) in self.ensemble.members.iter_mut().zip(&mut self.adams).zip(&grads) {
            adam.step(&mut net.params, grad);
        }
        Ok(total / self.ensemble.len() as f64)
    }
}
