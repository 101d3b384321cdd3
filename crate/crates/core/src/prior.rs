//! Surface prior (Gaussian mixture component selection), block-diagonal
//! joint prior, and the diagonal observation-noise covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, RetrievalError};
use crate::linalg::SpdMatrix;
use crate::model::{StateVector, N_ATM};

/// Default atmospheric prior mean `(aod, h2o [cm])`.
pub const ATM_PRIOR_MEAN: [f64; 2] = [0.2, 1.5];
/// Default atmospheric prior variances, wide relative to physical ranges.
pub const ATM_PRIOR_VAR: [f64; 2] = [1.0, 1.0];
/// Added to every observation variance so zero radiance stays invertible.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// One component of the surface reflectance mixture.
#[derive(Clone, Debug)]
pub struct MixtureComponent {
    pub label: String,
    pub mean: Vec<f64>,
    pub cov: SpdMatrix,
}

impl MixtureComponent {
    pub fn new(label: impl Into<String>, mean: Vec<f64>, cov: SpdMatrix) -> Result<Self> {
        let label = label.into();
        if mean.len() != cov.dim() {
            return Err(RetrievalError::Dimension(format!(
                "component {label}: mean {} vs covariance {}",
                mean.len(),
                cov.dim()
            )));
        }
        Ok(MixtureComponent { label, mean, cov })
    }

    /// Squared Mahalanobis distance of `x` from the component mean.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
        self.cov.mahalanobis_sq(&d)
    }
}

/// Index of the component nearest to `x0` in Mahalanobis distance, with all
/// squared distances. Ties go to the lowest index.
pub fn select_component(components: &[MixtureComponent], x0: &[f64]) -> Result<(usize, Vec<f64>)> {
    if components.is_empty() {
        return Err(RetrievalError::Input("no mixture components".into()));
    }
    let mut dists = Vec::with_capacity(components.len());
    for c in components {
        if c.mean.len() != x0.len() {
            return Err(RetrievalError::Dimension(format!(
                "component {} has {} channels, state has {}",
                c.label,
                c.mean.len(),
                x0.len()
            )));
        }
        dists.push(c.mahalanobis_sq(x0));
    }
    let mut best = 0;
    for (i, &d) in dists.iter().enumerate() {
        if d < dists[best] {
            best = i;
        }
    }
    Ok((best, dists))
}

/// Block-diagonal Gaussian prior over `[x_refl, aod, h2o]`.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: SpdMatrix,
    refl_cov: SpdMatrix,
    atm_cov: SpdMatrix,
    refl_precision: DMatrix<f64>,
    atm_precision: DMatrix<f64>,
    label: String,
}

/// Joint prior from a surface component and an atmospheric block; the
/// surface–atmosphere cross covariance is exactly zero.
pub fn assemble_prior(surface: &MixtureComponent, atm_mean: [f64; 2], atm_cov: &SpdMatrix) -> Result<GaussianPrior> {
    if atm_cov.dim() != N_ATM {
        return Err(RetrievalError::Dimension(format!(
            "atmospheric covariance must be 2x2, got {}x{}",
            atm_cov.dim(),
            atm_cov.dim()
        )));
    }
    let mean = DVector::from_iterator(
        surface.mean.len() + N_ATM,
        surface.mean.iter().copied().chain(atm_mean),
    );
    Ok(GaussianPrior {
        mean,
        cov: SpdMatrix::block_diag(&surface.cov, atm_cov),
        refl_precision: surface.cov.inverse(),
        atm_precision: atm_cov.inverse(),
        refl_cov: surface.cov.clone(),
        atm_cov: atm_cov.clone(),
        label: surface.label.clone(),
    })
}

/// The default wide atmospheric prior block.
pub fn default_atm_prior() -> ([f64; 2], SpdMatrix) {
    (ATM_PRIOR_MEAN, SpdMatrix::from_diagonal(&ATM_PRIOR_VAR).expect("positive variances"))
}

impl GaussianPrior {
    pub fn n_channels(&self) -> usize {
        self.mean.len() - N_ATM
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mean_state(&self) -> StateVector {
        StateVector::from_slice(self.mean.as_slice()).expect("prior dimension ≥ 3")
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    pub fn refl_cov(&self) -> &SpdMatrix {
        &self.refl_cov
    }

    pub fn atm_cov(&self) -> &SpdMatrix {
        &self.atm_cov
    }

    pub fn refl_precision(&self) -> &DMatrix<f64> {
        &self.refl_precision
    }

    pub fn atm_precision(&self) -> &DMatrix<f64> {
        &self.atm_precision
    }

    pub fn atm_mean(&self) -> [f64; 2] {
        let n = self.n_channels();
        [self.mean[n], self.mean[n + 1]]
    }

    pub fn surface_label(&self) -> &str {
        &self.label
    }

    /// `(x − μ)ᵀ Γ⁻¹ (x − μ)` over the reflectance block.
    pub fn refl_quad(&self, refl: &[f64]) -> f64 {
        let n = self.n_channels();
        let p = &self.refl_precision;
        let mut acc = 0.0;
        for j in 0..n {
            let dj = refl[j] - self.mean[j];
            let mut row = 0.0;
            for i in 0..n {
                row += p[(i, j)] * (refl[i] - self.mean[i]);
            }
            acc += row * dj;
        }
        acc
    }

    /// `(x − μ)ᵀ Γ⁻¹ (x − μ)` over the atmospheric block.
    pub fn atm_quad(&self, atm: [f64; 2]) -> f64 {
        let n = self.n_channels();
        let d = [atm[0] - self.mean[n], atm[1] - self.mean[n + 1]];
        let p = &self.atm_precision;
        p[(0, 0)] * d[0] * d[0] + 2.0 * p[(0, 1)] * d[0] * d[1] + p[(1, 1)] * d[1] * d[1]
    }

    fn check(&self, state: &StateVector) -> Result<()> {
        if state.n_channels() != self.n_channels() {
            return Err(RetrievalError::Dimension(format!(
                "state has {} channels, prior has {}",
                state.n_channels(),
                self.n_channels()
            )));
        }
        Ok(())
    }

    /// Normalized log density of the surface block alone.
    pub fn log_density_refl(&self, refl: &[f64]) -> f64 {
        let n = self.n_channels() as f64;
        -0.5 * (self.refl_quad(refl) + n * (2.0 * PI).ln() + self.refl_cov.log_det())
    }

    /// Normalized log density of the atmospheric block alone.
    pub fn log_density_atm(&self, atm: [f64; 2]) -> f64 {
        -0.5 * (self.atm_quad(atm) + 2.0 * (2.0 * PI).ln() + self.atm_cov.log_det())
    }
}

/// Normalized Gaussian log density of the prior,
/// `−½ (x−μ)ᵀ Γ⁻¹ (x−μ) − ½ log((2π)^d det Γ)`.
pub fn log_prior(state: &StateVector, prior: &GaussianPrior) -> Result<f64> {
    prior.check(state)?;
    Ok(prior.log_density_refl(&state.refl) + prior.log_density_atm(state.atm()))
}

/// Composite observation-noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub snr: f64,
    pub calib_frac: f64,
    pub rt_model_var: Vec<f64>,
}

impl NoiseModel {
    pub fn new(snr: f64, calib_frac: f64, rt_model_var: Vec<f64>) -> Result<Self> {
        if !(snr > 0.0) {
            return Err(RetrievalError::Input(format!("snr must be positive, got {snr}")));
        }
        if !(calib_frac >= 0.0) {
            return Err(RetrievalError::Input(format!("calibration fraction must be ≥ 0, got {calib_frac}")));
        }
        if rt_model_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(RetrievalError::Input("model-error variances must be ≥ 0".into()));
        }
        Ok(NoiseModel {
            snr,
            calib_frac,
            rt_model_var,
        })
    }

    /// Model-error variance `(frac · y_ref,i)²` on top of the sensor terms.
    pub fn with_rt_fraction(snr: f64, calib_frac: f64, rt_frac: f64, y_ref: &[f64]) -> Result<Self> {
        if !(rt_frac >= 0.0 && rt_frac.is_finite()) {
            return Err(RetrievalError::Input(format!("model error fraction {rt_frac} must be nonnegative")));
        }
        Self::new(snr, calib_frac, y_ref.iter().map(|y| (rt_frac * y).powi(2)).collect())
    }

    /// SNR 500, 1% calibration, no model error.
    pub fn standard(n: usize) -> Self {
        NoiseModel {
            snr: 500.0,
            calib_frac: 0.01,
            rt_model_var: vec![0.0; n],
        }
    }
}

/// Diagonal observation covariance with the retrieval mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsCovariance {
    variances: Vec<f64>,
    retained: Vec<bool>,
    degenerate: Vec<bool>,
}

impl ObsCovariance {
    pub fn from_variances(variances: Vec<f64>, retained: Vec<bool>) -> Result<Self> {
        if variances.len() != retained.len() {
            return Err(RetrievalError::Dimension("variances and mask differ in length".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(RetrievalError::Input("observation variances must be positive".into()));
        }
        let n = variances.len();
        Ok(ObsCovariance {
            variances,
            retained,
            degenerate: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    /// Channels whose signal-dependent and model variance was zero.
    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    /// Inverse variances, zero on masked channels.
    pub fn weights(&self) -> Vec<f64> {
        self.variances
            .iter()
            .zip(&self.retained)
            .map(|(v, &r)| if r { 1.0 / v } else { 0.0 })
            .collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        ObsCovariance {
            variances: self.variances.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// `Γ_obs,ii = (y_i/snr)² + (calib·y_i)² + rt_i + floor`.
pub fn build_noise_cov(y_obs: &[f64], noise: &NoiseModel, retained: &[bool]) -> Result<ObsCovariance> {
    let n = y_obs.len();
    if noise.rt_model_var.len() != n || retained.len() != n {
        return Err(RetrievalError::Dimension(format!(
            "noise model: {} observations, {} model variances, {} mask entries",
            n,
            noise.rt_model_var.len(),
            retained.len()
        )));
    }
    let mut variances = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for (i, &y) in y_obs.iter().enumerate() {
        if !y.is_finite() {
            return Err(RetrievalError::Input(format!("non-finite radiance at channel {i}")));
        }
        let v = (y / noise.snr).powi(2) + (noise.calib_frac * y).powi(2) + noise.rt_model_var[i];
        degenerate.push(v == 0.0);
        variances.push(v + VARIANCE_FLOOR);
    }
    Ok(ObsCovariance {
        variances,
        retained: retained.to_vec(),
        degenerate,
    })
}
