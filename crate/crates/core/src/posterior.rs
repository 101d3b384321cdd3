//! The retrieval posterior: prior, forward model, observation and noise
//! bundled for cost and density evaluation.

use crate::error::{Result, RetrievalError};
use crate::model::{Boundary, ForwardModel, StateVector};
use crate::prior::{GaussianPrior, ObsCovariance};

/// A single-pixel retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct Posterior<'a> {
    pub model: &'a ForwardModel,
    pub prior: &'a GaussianPrior,
    pub obs_cov: &'a ObsCovariance,
    pub y_obs: &'a [f64],
}

impl<'a> Posterior<'a> {
    pub fn new(
        model: &'a ForwardModel,
        prior: &'a GaussianPrior,
        obs_cov: &'a ObsCovariance,
        y_obs: &'a [f64],
    ) -> Result<Self> {
        let n = model.n_channels();
        if prior.n_channels() != n || obs_cov.len() != n || y_obs.len() != n {
            return Err(RetrievalError::Dimension(format!(
                "model {n} channels, prior {}, noise {}, observation {}",
                prior.n_channels(),
                obs_cov.len(),
                y_obs.len()
            )));
        }
        Ok(Posterior {
            model,
            prior,
            obs_cov,
            y_obs,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.model.n_channels()
    }

    /// `½ Σ w_i (y_i − f_i)²` over retained channels.
    pub fn misfit(&self, y_model: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..y_model.len() {
            if self.obs_cov.retained()[i] {
                let r = self.y_obs[i] - y_model[i];
                acc += r * r / self.obs_cov.variances()[i];
            }
        }
        0.5 * acc
    }

    /// Negative log posterior without normalizing constants.
    pub fn cost(&self, state: &StateVector) -> Result<f64> {
        self.cost_with(state, Boundary::Strict).map(|(c, _)| c)
    }

    pub fn cost_with(&self, state: &StateVector, boundary: Boundary) -> Result<(f64, bool)> {
        let (y, outside) = self.model.forward_with(state, boundary)?;
        let prior = 0.5 * (self.prior.refl_quad(&state.refl) + self.prior.atm_quad(state.atm()));
        Ok((prior + self.misfit(&y), outside))
    }

    /// Unnormalized log posterior, `−cost`; `−∞` outside the lookup table
    /// or where the forward model is singular.
    pub fn log_posterior(&self, state: &StateVector) -> f64 {
        match self.cost(state) {
            Ok(c) => -c,
            Err(_) => f64::NEG_INFINITY,
        }
    }
}
