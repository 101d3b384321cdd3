//! Block Metropolis sampler.
//!
//! Each iteration updates the atmospheric block with an adaptive,
//! nonnegativity-truncated Gaussian proposal and then the reflectance block
//! with a fixed Gaussian proposal (`ε₂ Γ_L`, or `ε₁ Γ_lin` recomputed at the
//! current atmosphere), each followed by a Metropolis accept/reject on the
//! joint posterior.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RetrievalError};
use crate::linalg::{self, add_correlated_normal, SpdMatrix};
use crate::model::{AtmSpectra, Boundary, StateVector, N_ATM};
use crate::oe::OeResult;
use crate::posterior::Posterior;

/// Smallest value an atmospheric coordinate is projected to when the
/// starting point is infeasible.
pub const INIT_FLOOR: f64 = 1e-6;

const TUNE_GAIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflProposal {
    /// `ε₂ Γ_L`, the reflectance block of the Laplace covariance.
    #[default]
    Laplace,
    /// `ε₁ Γ_lin`, the linear-model posterior at the current atmosphere.
    LinearInversion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_samples: usize,
    pub thin: usize,
    pub burn_in: usize,
    pub eps2: f64,
    pub eps1: f64,
    pub adapt_start: usize,
    pub eps0: f64,
    pub eps_am: f64,
    pub s2: f64,
    pub refl_proposal: ReflProposal,
    pub seed: u64,
    /// Correct the acceptance ratio for the truncated atmospheric proposal.
    pub hastings_correction: bool,
    /// Hold the atmosphere at its starting value and sample reflectances only.
    pub fix_atm: bool,
    /// Start even if the optimal-estimation run did not converge.
    pub allow_unconverged: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_samples: 2_000_000,
            thin: 10,
            burn_in: 200_000,
            eps2: 0.11,
            eps1: 0.14,
            adapt_start: 1000,
            eps0: 1e-3,
            eps_am: 1e-3,
            s2: 2.38 * 2.38 / 2.0,
            refl_proposal: ReflProposal::Laplace,
            seed: 0,
            hastings_correction: true,
            fix_atm: false,
            allow_unconverged: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps2", self.eps2),
            ("eps1", self.eps1),
            ("eps0", self.eps0),
            ("eps_am", self.eps_am),
            ("s2", self.s2),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(RetrievalError::Input(format!("{name} must be positive, got {v}")));
        }
        if self.thin == 0 || self.n_samples == 0 {
            return Err(RetrievalError::Input("n_samples and thin must be positive".into()));
        }
        if self.burn_in >= self.n_samples {
            return Err(RetrievalError::Input(format!(
                "burn_in {} must be below n_samples {}",
                self.burn_in, self.n_samples
            )));
        }
        Ok(())
    }

    /// Number of samples the chain will keep.
    pub fn kept(&self) -> usize {
        (self.n_samples - self.burn_in) / self.thin
    }

    fn refl_scale(&self) -> f64 {
        match self.refl_proposal {
            ReflProposal::Laplace => self.eps2,
            ReflProposal::LinearInversion => self.eps1,
        }
    }
}

/// Streaming mean and covariance of the atmospheric history.
#[derive(Clone, Debug, Default)]
pub struct AdaptiveCov {
    count: usize,
    mean: [f64; 2],
    comoment: [[f64; 2]; 2],
}

impl AdaptiveCov {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: [f64; 2]) {
        self.count += 1;
        let n = self.count as f64;
        let delta = [x[0] - self.mean[0], x[1] - self.mean[1]];
        self.mean[0] += delta[0] / n;
        self.mean[1] += delta[1] / n;
        let after = [x[0] - self.mean[0], x[1] - self.mean[1]];
        for r in 0..2 {
            for c in 0..2 {
                self.comoment[r][c] += delta[r] * after[c];
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> [f64; 2] {
        self.mean
    }

    /// Unbiased sample covariance; zero with fewer than two samples.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        if self.count < 2 {
            return [[0.0; 2]; 2];
        }
        let d = (self.count - 1) as f64;
        let off = 0.5 * (self.comoment[0][1] + self.comoment[1][0]) / d;
        [[self.comoment[0][0] / d, off], [off, self.comoment[1][1] / d]]
    }

    /// Proposal covariance for iteration `i`, assuming the history holds
    /// `x⁽⁰⁾ … x⁽ⁱ⁻¹⁾`.
    pub fn proposal(&self, i: usize, cfg: &McmcConfig) -> SpdMatrix {
        if i <= cfg.adapt_start {
            return scaled_identity(cfg.eps0);
        }
        schedule_matrix(self.covariance(), cfg)
    }
}

fn scaled_identity(c: f64) -> SpdMatrix {
    SpdMatrix::from_diagonal(&[c, c]).expect("positive diagonal")
}

fn schedule_matrix(cov: [[f64; 2]; 2], cfg: &McmcConfig) -> SpdMatrix {
    let m = DMatrix::from_row_slice(
        2,
        2,
        &[
            cfg.s2 * cov[0][0] + cfg.s2 * cfg.eps_am,
            cfg.s2 * cov[0][1],
            cfg.s2 * cov[1][0],
            cfg.s2 * cov[1][1] + cfg.s2 * cfg.eps_am,
        ],
    );
    SpdMatrix::new(m).expect("covariance plus ridge is SPD")
}

/// Adaptive atmospheric proposal covariance at iteration `i` from the batch
/// history `x⁽⁰⁾ … x⁽ⁱ⁻¹⁾`:
/// `ε₀ I` for `i ≤ adapt_start`, else `s₂ cov(history) + s₂ ε_AM I`.
pub fn adapt_cov(history: &[[f64; 2]], i: usize, cfg: &McmcConfig) -> Result<SpdMatrix> {
    if i <= cfg.adapt_start {
        return Ok(scaled_identity(cfg.eps0));
    }
    if history.len() < i {
        return Err(RetrievalError::Input(format!(
            "iteration {i} needs {i} history samples, got {}",
            history.len()
        )));
    }
    let h = &history[..i];
    let n = h.len() as f64;
    let mean = [h.iter().map(|x| x[0]).sum::<f64>() / n, h.iter().map(|x| x[1]).sum::<f64>() / n];
    let mut cov = [[0.0; 2]; 2];
    for x in h {
        for r in 0..2 {
            for c in 0..2 {
                cov[r][c] += (x[r] - mean[r]) * (x[c] - mean[c]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    Ok(schedule_matrix(cov, cfg))
}

/// Metropolis decision for a log acceptance ratio.
pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptCounts {
    pub atm_accepted: u64,
    pub atm_proposed: u64,
    pub refl_accepted: u64,
    pub refl_proposed: u64,
}

impl AcceptCounts {
    pub fn atm_rate(&self) -> f64 {
        ratio(self.atm_accepted, self.atm_proposed)
    }

    pub fn refl_rate(&self) -> f64 {
        ratio(self.refl_accepted, self.refl_proposed)
    }

    /// Accepted over proposed, pooled across both blocks.
    pub fn overall_rate(&self) -> f64 {
        ratio(
            self.atm_accepted + self.refl_accepted,
            self.atm_proposed + self.refl_proposed,
        )
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Incremental sampler state: the current point plus every cached piece of
/// its log posterior.
pub struct BlockSampler<'a> {
    post: Posterior<'a>,
    state: StateVector,
    atm_spec: AtmSpectra,
    y_model: Vec<f64>,
    refl_quad: f64,
    atm_quad: f64,
    misfit: f64,
    // scratch
    cand_refl: Vec<f64>,
    cand_y: Vec<f64>,
    cand_spec: AtmSpectra,
    noise: Vec<f64>,
    pub counts: AcceptCounts,
    pub truncation_fallbacks: u64,
}

impl<'a> BlockSampler<'a> {
    pub fn new(post: Posterior<'a>, start: StateVector) -> Result<Self> {
        let n = post.n_channels();
        if start.n_channels() != n {
            return Err(RetrievalError::Dimension("start state does not match model".into()));
        }
        let atm_spec = post.model.lut().interpolate(start.aod, start.h2o)?;
        let mut y_model = vec![0.0; n];
        post.model.radiance_from(&atm_spec, &start.refl, &mut y_model)?;
        let misfit = post.misfit(&y_model);
        Ok(BlockSampler {
            refl_quad: post.prior.refl_quad(&start.refl),
            atm_quad: post.prior.atm_quad(start.atm()),
            cand_refl: vec![0.0; n],
            cand_y: vec![0.0; n],
            cand_spec: atm_spec.clone(),
            noise: vec![0.0; n],
            post,
            state: start,
            atm_spec,
            y_model,
            misfit,
            counts: AcceptCounts::default(),
            truncation_fallbacks: 0,
        })
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    /// Unnormalized log posterior at the current state.
    pub fn log_posterior(&self) -> f64 {
        -(0.5 * (self.refl_quad + self.atm_quad) + self.misfit)
    }

    /// Atmospheric half-step with a nonnegativity-truncated Gaussian proposal
    /// centred at the current atmosphere.
    pub fn step_atm<R: Rng + ?Sized>(&mut self, gamma: &SpdMatrix, hastings: bool, rng: &mut R) -> Result<bool> {
        self.counts.atm_proposed += 1;
        let draw = linalg::sample_truncated_mvn_nonneg(self.state.atm(), gamma, rng)?;
        if draw.fallback {
            self.truncation_fallbacks += 1;
        }
        let z = draw.value;
        let lut = self.post.model.lut();
        if !lut.contains(z[0], z[1]) {
            // Outside the support: log posterior −∞. Consume the uniform anyway
            // so the random stream does not depend on the support test.
            let _: f64 = rng.random();
            return Ok(false);
        }
        lut.interpolate_into(z[0], z[1], Boundary::Strict, &mut self.cand_spec)?;
        if self
            .post
            .model
            .radiance_from(&self.cand_spec, &self.state.refl, &mut self.cand_y)
            .is_err()
        {
            let _: f64 = rng.random();
            return Ok(false);
        }
        let misfit = self.post.misfit(&self.cand_y);
        let atm_quad = self.post.prior.atm_quad(z);
        let mut log_ratio = -(0.5 * atm_quad + misfit) + (0.5 * self.atm_quad + self.misfit);
        if hastings {
            let reverse = linalg::orthant_mass(z, gamma);
            log_ratio += draw.mass.ln() - reverse.ln();
        }
        if metropolis_accept(log_ratio, rng) {
            self.counts.atm_accepted += 1;
            self.state.aod = z[0];
            self.state.h2o = z[1];
            std::mem::swap(&mut self.atm_spec, &mut self.cand_spec);
            std::mem::swap(&mut self.y_model, &mut self.cand_y);
            self.misfit = misfit;
            self.atm_quad = atm_quad;
            return Ok(true);
        }
        Ok(false)
    }

    /// Reflectance half-step with a symmetric Gaussian proposal whose
    /// covariance has lower Cholesky factor `factor`.
    pub fn step_refl<R: Rng + ?Sized>(&mut self, factor: &DMatrix<f64>, rng: &mut R) -> bool {
        self.counts.refl_proposed += 1;
        self.cand_refl.copy_from_slice(&self.state.refl);
        add_correlated_normal(factor, &mut self.noise, &mut self.cand_refl, rng);
        if self
            .post
            .model
            .radiance_from(&self.atm_spec, &self.cand_refl, &mut self.cand_y)
            .is_err()
        {
            let _: f64 = rng.random();
            return false;
        }
        let misfit = self.post.misfit(&self.cand_y);
        let refl_quad = self.post.prior.refl_quad(&self.cand_refl);
        let log_ratio = -(0.5 * refl_quad + misfit) + (0.5 * self.refl_quad + self.misfit);
        if metropolis_accept(log_ratio, rng) {
            self.counts.refl_accepted += 1;
            std::mem::swap(&mut self.state.refl, &mut self.cand_refl);
            std::mem::swap(&mut self.y_model, &mut self.cand_y);
            self.misfit = misfit;
            self.refl_quad = refl_quad;
            return true;
        }
        false
    }

    fn linear_inversion_factor(&self, eps1: f64) -> Result<DMatrix<f64>> {
        let sub = self.post.model.linearize_from(&self.atm_spec);
        let glin = linalg::linear_posterior_cov(
            &sub.a_diag,
            self.post.prior.refl_cov(),
            self.post.obs_cov.variances(),
            Some(self.post.obs_cov.retained()),
        )?;
        Ok(glin.scaled(eps1)?.cholesky_factor())
    }
}

/// Unnormalized log posterior; `−∞` outside the lookup table.
pub fn log_posterior(state: &StateVector, post: &Posterior<'_>) -> f64 {
    post.log_posterior(state)
}

/// How the chain's starting point was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainInit {
    pub start: Vec<f64>,
    /// The MAP had an infeasible atmospheric coordinate and was projected.
    pub projected: bool,
}

/// Thinned post-burn-in samples with run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    n_params: usize,
    samples: Vec<f64>,
    log_posterior: Vec<f64>,
    pub accept: AcceptCounts,
    pub config: McmcConfig,
    pub init: ChainInit,
    pub truncation_fallbacks: u64,
}

impl Chain {
    /// Builds a chain from row-major samples, e.g. when loading from disk.
    pub fn from_parts(
        n_params: usize,
        samples: Vec<f64>,
        log_posterior: Vec<f64>,
        accept: AcceptCounts,
        config: McmcConfig,
        init: ChainInit,
    ) -> Result<Self> {
        if n_params == 0 || !samples.len().is_multiple_of(n_params) || samples.len() / n_params != log_posterior.len() {
            return Err(RetrievalError::Dimension(format!(
                "{} values for {} parameters and {} trace entries",
                samples.len(),
                n_params,
                log_posterior.len()
            )));
        }
        Ok(Chain {
            n_params,
            samples,
            log_posterior,
            accept,
            config,
            init,
            truncation_fallbacks: 0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_channels(&self) -> usize {
        self.n_params - N_ATM
    }

    pub fn len(&self) -> usize {
        self.log_posterior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_posterior.is_empty()
    }

    /// Row-major `kept × (n + 2)` sample matrix.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.samples[k * self.n_params..(k + 1) * self.n_params]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.n_params)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn log_posterior_trace(&self) -> &[f64] {
        &self.log_posterior
    }

    /// Drops the first `skip` kept samples.
    pub fn windowed(&self, skip: usize) -> Chain {
        let skip = skip.min(self.len());
        Chain {
            samples: self.samples[skip * self.n_params..].to_vec(),
            log_posterior: self.log_posterior[skip..].to_vec(),
            ..self.clone()
        }
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.n_params, &self.samples)
    }
}

/// Starting point from the MAP, projected into the support if needed.
pub fn initial_state(x_map: &StateVector, post: &Posterior<'_>) -> ChainInit {
    let (a0, a1) = post.model.lut().aod_range();
    let (h0, h1) = post.model.lut().h2o_range();
    let aod = x_map.aod.max(INIT_FLOOR).max(a0).min(a1);
    let h2o = x_map.h2o.max(INIT_FLOOR).max(h0).min(h1);
    let projected = aod != x_map.aod || h2o != x_map.h2o;
    let start = StateVector::new(x_map.refl.clone(), aod, h2o);
    ChainInit {
        start: start.to_vector().as_slice().to_vec(),
        projected,
    }
}

/// Runs the block Metropolis chain from the optimal-estimation result.
pub fn run_chain(post: &Posterior<'_>, oe: &OeResult, cfg: &McmcConfig) -> Result<Chain> {
    cfg.validate()?;
    if !oe.converged && !cfg.allow_unconverged {
        return Err(RetrievalError::Input(
            "optimal estimation did not converge; set allow_unconverged to sample anyway".into(),
        ));
    }
    let n = post.n_channels();
    let init = initial_state(&oe.x_map, post);
    let start = StateVector::from_slice(&init.start)?;
    let mut sampler = BlockSampler::new(*post, start)?;
    if !sampler.log_posterior().is_finite() {
        return Err(RetrievalError::Input("log posterior is not finite at the starting point".into()));
    }

    let refl_idx: Vec<usize> = (0..n).collect();
    let mut refl_factor = match cfg.refl_proposal {
        ReflProposal::Laplace => oe
            .gamma_laplace
            .submatrix(&refl_idx)?
            .scaled(cfg.eps2)?
            .cholesky_factor(),
        ReflProposal::LinearInversion => sampler.linear_inversion_factor(cfg.eps1)?,
    };
    let mut factor_atm = sampler.state().atm();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapt = AdaptiveCov::new();
    adapt.push(sampler.state().atm());
    let kept = cfg.kept();
    let mut samples = Vec::with_capacity(kept * (n + N_ATM));
    let mut trace = Vec::with_capacity(kept);

    for i in 1..=cfg.n_samples {
        if !cfg.fix_atm {
            let gamma = adapt.proposal(i, cfg);
            sampler.step_atm(&gamma, cfg.hastings_correction, &mut rng)?;
        }
        if cfg.refl_proposal == ReflProposal::LinearInversion && sampler.state().atm() != factor_atm {
            refl_factor = sampler.linear_inversion_factor(cfg.eps1)?;
            factor_atm = sampler.state().atm();
        }
        sampler.step_refl(&refl_factor, &mut rng);
        adapt.push(sampler.state().atm());
        if i > cfg.burn_in && (i - cfg.burn_in).is_multiple_of(cfg.thin) {
            let s = sampler.state();
            debug_assert!(s.aod >= 0.0 && s.h2o >= 0.0);
            samples.extend_from_slice(&s.refl);
            samples.push(s.aod);
            samples.push(s.h2o);
            trace.push(sampler.log_posterior());
        }
    }
    Ok(Chain {
        n_params: n + N_ATM,
        samples,
        log_posterior: trace,
        accept: sampler.counts,
        config: cfg.clone(),
        init,
        truncation_fallbacks: sampler.truncation_fallbacks,
    })
}

/// Outcome of [`tune_refl_scale`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub scale: f64,
    /// `(scale, overall acceptance)` per pilot round.
    pub rounds: Vec<(f64, f64)>,
}

/// Tunes the active reflectance proposal scale (`eps2` or `eps1`) so that the
/// pooled acceptance rate approaches `target`.
///
/// Runs `rounds` pilot chains of `pilot_len` iterations. Only the
/// reflectance block is tunable, so each round aims its rate at
/// `2·target − a_atm` (the pooled rate is the mean of the two) with a
/// Robbins–Monro step `log ε ← log ε + 4(a_refl − aim)/√k`.
pub fn tune_refl_scale(
    post: &Posterior<'_>,
    oe: &OeResult,
    cfg: &McmcConfig,
    target: f64,
    rounds: usize,
    pilot_len: usize,
) -> Result<TuneReport> {
    let mut pilot = cfg.clone();
    pilot.n_samples = pilot_len;
    pilot.burn_in = 0;
    pilot.thin = pilot_len;
    let mut log_scale = cfg.refl_scale().ln();
    let mut history = Vec::with_capacity(rounds);
    for k in 1..=rounds {
        let scale = log_scale.exp();
        match pilot.refl_proposal {
            ReflProposal::Laplace => pilot.eps2 = scale,
            ReflProposal::LinearInversion => pilot.eps1 = scale,
        }
        pilot.seed = cfg.seed.wrapping_add(k as u64);
        let chain = run_chain(post, oe, &pilot)?;
        let acc = chain.accept;
        history.push((scale, acc.overall_rate()));
        let aim = if pilot.fix_atm {
            target
        } else {
            (2.0 * target - acc.atm_rate()).clamp(0.05, 0.95)
        };
        log_scale += TUNE_GAIN * (acc.refl_rate() - aim) / (k as f64).sqrt();
    }
    Ok(TuneReport {
        scale: log_scale.exp(),
        rounds: history,
    })
}
