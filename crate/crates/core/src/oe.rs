//! Optimal estimation: MAP by Gauss–Newton with Levenberg–Marquardt damping,
//! and the Laplace covariance at the MAP.
//!
//! Iterates are not constrained to nonnegative atmosphere. Lookup-table
//! queries outside the grid follow [`OeOptions::boundary`] and are counted.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RetrievalError};
use crate::linalg::SpdMatrix;
use crate::model::{Boundary, ForwardModel, StateVector, N_ATM};
use crate::posterior::Posterior;
use crate::prior::{GaussianPrior, ObsCovariance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OeOptions {
    pub max_iter: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_cost_tol: f64,
    pub grad_tol: f64,
    pub initial_damping: f64,
    pub boundary: Boundary,
    /// Starting point; the prior mean when absent.
    pub initial: Option<StateVector>,
}

impl Default for OeOptions {
    fn default() -> Self {
        OeOptions {
            max_iter: 200,
            rel_cost_tol: 1e-8,
            grad_tol: 1e-6,
            initial_damping: 1e-3,
            boundary: Boundary::Extrapolate,
            initial: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SmallGradient,
    SmallCostDecrease,
    /// No damped step lowers the cost; the iterate is a numerical minimum.
    Stalled,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct OeResult {
    pub x_map: StateVector,
    pub gamma_laplace: SpdMatrix,
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Number of cost evaluations whose atmosphere fell outside the LUT grid.
    pub outside_grid_queries: usize,
}

/// Negative log posterior `½‖x − μ‖²_Γpr + ½‖y − f(x)‖²_Γobs`, masked
/// channels excluded.
pub fn cost(
    state: &StateVector,
    prior: &GaussianPrior,
    obs_cov: &ObsCovariance,
    y_obs: &[f64],
    model: &ForwardModel,
) -> Result<f64> {
    Posterior::new(model, prior, obs_cov, y_obs)?.cost(state)
}

fn prior_precision(prior: &GaussianPrior) -> DMatrix<f64> {
    let n = prior.n_channels();
    let mut p = DMatrix::zeros(n + N_ATM, n + N_ATM);
    p.view_mut((0, 0), (n, n)).copy_from(prior.refl_precision());
    p.view_mut((n, n), (N_ATM, N_ATM)).copy_from(prior.atm_precision());
    p
}

/// `JᵀWJ` with `W` the masked inverse noise variances.
fn weighted_gram(jac: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut wj = jac.clone();
    for (i, w) in weights.iter().enumerate() {
        wj.row_mut(i).scale_mut(*w);
    }
    jac.transpose() * wj
}

/// Gradient and Gauss–Newton Hessian of the cost.
fn linearize(
    post: &Posterior<'_>,
    precision: &DMatrix<f64>,
    weights: &[f64],
    x: &StateVector,
    boundary: Boundary,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (y, _) = post.model.forward_with(x, boundary)?;
    let jac = post.model.jacobian_with(x, boundary)?;
    let resid = DVector::from_iterator(y.len(), (0..y.len()).map(|i| weights[i] * (post.y_obs[i] - y[i])));
    let dx = x.to_vector() - post.prior.mean();
    let grad = precision * dx - jac.transpose() * resid;
    let hess = precision + weighted_gram(&jac, weights);
    Ok((grad, hess))
}

/// MAP estimate by damped Gauss–Newton, plus the Laplace covariance.
pub fn solve_map(
    y_obs: &[f64],
    prior: &GaussianPrior,
    obs_cov: &ObsCovariance,
    model: &ForwardModel,
    opts: &OeOptions,
) -> Result<OeResult> {
    let post = Posterior::new(model, prior, obs_cov, y_obs)?;
    let precision = prior_precision(prior);
    let weights = obs_cov.weights();
    let mut x = opts.initial.clone().unwrap_or_else(|| prior.mean_state());
    if x.n_channels() != prior.n_channels() {
        return Err(RetrievalError::Dimension("initial state does not match prior".into()));
    }
    let mut outside_count = 0;
    let (mut c, outside) = post.cost_with(&x, opts.boundary)?;
    outside_count += outside as usize;
    if !c.is_finite() {
        return Err(RetrievalError::Diverged {
            iterations: 0,
            reason: "non-finite cost at the initial state".into(),
        });
    }
    let mut trace = vec![c];
    let mut lambda = opts.initial_damping;
    let mut termination = Termination::MaxIterations;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let (grad, hess) = linearize(&post, &precision, &weights, &x, opts.boundary)?;
        grad_norm = grad.norm();
        if grad_norm < opts.grad_tol {
            termination = Termination::SmallGradient;
            break;
        }
        iterations += 1;
        let mut accepted = None;
        while lambda < 1e16 {
            let mut damped = hess.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * hess[(i, i)];
            }
            if let Some(ch) = Cholesky::new(damped) {
                let step = ch.solve(&(-&grad));
                let cand = StateVector::from_slice((x.to_vector() + step).as_slice())?;
                if let Ok((cc, outside)) = post.cost_with(&cand, opts.boundary) {
                    outside_count += outside as usize;
                    if cc.is_finite() && cc < c {
                        accepted = Some((cand, cc));
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        let Some((cand, cc)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        lambda = (lambda * 0.1).max(1e-15);
        let rel = (c - cc) / c.abs().max(f64::MIN_POSITIVE);
        debug!("oe iter {iterations}: cost {cc:.6e} rel decrease {rel:.3e} damping {lambda:.1e}");
        x = cand;
        c = cc;
        trace.push(c);
        if rel < opts.rel_cost_tol {
            termination = Termination::SmallCostDecrease;
            break;
        }
    }

    if termination == Termination::Stalled {
        // A stall is only acceptable where the model is locally quadratic
        // enough that the predicted decrease is at rounding level.
        let (grad, hess) = linearize(&post, &precision, &weights, &x, opts.boundary)?;
        grad_norm = grad.norm();
        let predicted = Cholesky::new(hess)
            .map(|ch| 0.5 * grad.dot(&ch.solve(&grad)))
            .unwrap_or(f64::INFINITY);
        if predicted > 1e-8 * c.abs().max(1.0) {
            return Err(RetrievalError::Diverged {
                iterations,
                reason: format!("no damped step decreases the cost (predicted decrease {predicted:.3e})"),
            });
        }
    }
    let converged = termination != Termination::MaxIterations;
    let gamma_laplace = laplace_cov_with(&x, prior, obs_cov, model, opts.boundary)?;
    Ok(OeResult {
        x_map: x,
        gamma_laplace,
        cost_trace: trace,
        converged,
        termination,
        iterations,
        grad_norm,
        outside_grid_queries: outside_count,
    })
}

/// Laplace covariance `(∇fᵀ Γ_obs⁻¹ ∇f + Γ_pr⁻¹)⁻¹` at `x_map`, masked
/// channels excluded.
pub fn laplace_cov(
    x_map: &StateVector,
    prior: &GaussianPrior,
    obs_cov: &ObsCovariance,
    model: &ForwardModel,
) -> Result<SpdMatrix> {
    laplace_cov_with(x_map, prior, obs_cov, model, Boundary::Strict)
}

pub fn laplace_cov_with(
    x_map: &StateVector,
    prior: &GaussianPrior,
    obs_cov: &ObsCovariance,
    model: &ForwardModel,
    boundary: Boundary,
) -> Result<SpdMatrix> {
    let jac = model.jacobian_with(x_map, boundary)?;
    laplace_from_jacobian(&jac, prior, obs_cov)
}

/// Laplace covariance for a given Jacobian.
pub fn laplace_from_jacobian(jac: &DMatrix<f64>, prior: &GaussianPrior, obs_cov: &ObsCovariance) -> Result<SpdMatrix> {
    if jac.ncols() != prior.dim() || jac.nrows() != obs_cov.len() {
        return Err(RetrievalError::Dimension(format!(
            "Jacobian {}x{} vs prior {} and noise {}",
            jac.nrows(),
            jac.ncols(),
            prior.dim(),
            obs_cov.len()
        )));
    }
    let info = prior_precision(prior) + weighted_gram(jac, &obs_cov.weights());
    let info = (&info + info.transpose()) * 0.5;
    let ill = |info: &DMatrix<f64>| {
        let sv = info.singular_values();
        let cond = sv.max() / sv.min();
        RetrievalError::IllConditioned {
            condition: cond,
            context: "Laplace information matrix".into(),
        }
    };
    let ch = Cholesky::new(info.clone()).ok_or_else(|| ill(&info))?;
    SpdMatrix::from_symmetrized(ch.inverse()).map_err(|_| ill(&info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::linear_posterior_cov;
    use crate::model::{AtmLookupTable, Geometry};
    use crate::prior::{assemble_prior, build_noise_cov, MixtureComponent, NoiseModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// s ≡ 0 and ρ_a, t independent of the atmosphere: a linear model.
    fn linear_setup(n: usize, seed: u64) -> (ForwardModel, GaussianPrior, ObsCovariance, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..n).map(|_| 0.4 + 0.5 * rng.random::<f64>()).collect();
        let rho: Vec<f64> = (0..n).map(|_| 0.05 * rng.random::<f64>()).collect();
        let wl = (0..n).map(|i| 400.0 + 20.0 * i as f64).collect();
        let lut = AtmLookupTable::from_fn(vec![0.0, 1.0], vec![0.0, 5.0], wl, |_, _, c| (rho[c], 0.0, t[c])).unwrap();
        let model = ForwardModel::new(lut, Geometry::new(0.8, vec![10.0; n]).unwrap()).unwrap();
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let cov = SpdMatrix::from_symmetrized(&g * g.transpose() * 0.01 + DMatrix::identity(n, n) * 0.002).unwrap();
        let mean = (0..n).map(|_| 0.2 + 0.2 * rng.random::<f64>()).collect();
        let surf = MixtureComponent::new("test", mean, cov).unwrap();
        let prior = assemble_prior(&surf, [0.5, 2.0], &SpdMatrix::from_diagonal(&[0.01, 0.04]).unwrap()).unwrap();
        let truth: Vec<f64> = (0..n).map(|_| 0.1 + 0.5 * rng.random::<f64>()).collect();
        let y = model.forward(&StateVector::new(truth, 0.5, 2.0)).unwrap();
        let y: Vec<f64> = y.iter().map(|v| v * (1.0 + 0.01 * (rng.random::<f64>() - 0.5))).collect();
        let obs = build_noise_cov(&y, &NoiseModel::standard(n), &vec![true; n]).unwrap();
        (model, prior, obs, y)
    }

    #[test]
    fn cost_zero_at_perfect_fit() {
        let (model, prior, obs, _) = linear_setup(4, 1);
        let x = prior.mean_state();
        let y = model.forward(&x).unwrap();
        assert_eq!(cost(&x, &prior, &obs, &y, &model).unwrap(), 0.0);
    }

    #[test]
    fn cost_scalar_hand_arithmetic() {
        // f(x) = x, μ = 0, y = 2, unit variances, atmosphere at its prior mean.
        let lut = AtmLookupTable::from_fn(vec![0.0, 1.0], vec![0.0, 1.0], vec![500.0], |_, _, _| (0.0, 0.0, 1.0))
            .unwrap();
        let model = ForwardModel::new(lut, Geometry::new(1.0, vec![std::f64::consts::PI]).unwrap()).unwrap();
        let surf = MixtureComponent::new("u", vec![0.0], SpdMatrix::identity(1)).unwrap();
        let prior = assemble_prior(&surf, [0.5, 0.5], &SpdMatrix::identity(2)).unwrap();
        let obs = ObsCovariance::from_variances(vec![1.0], vec![true]).unwrap();
        let c = cost(&StateVector::new(vec![1.0], 0.5, 0.5), &prior, &obs, &[2.0], &model).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cost_composes_prior_and_likelihood() {
        let (model, prior, obs, y) = linear_setup(5, 2);
        let x = StateVector::new(vec![0.3, 0.2, 0.4, 0.1, 0.5], 0.4, 1.7);
        let c = cost(&x, &prior, &obs, &y, &model).unwrap();
        let lp = crate::prior::log_prior(&x, &prior).unwrap();
        let norm = 0.5 * (7.0 * (2.0 * std::f64::consts::PI).ln() + prior.cov().log_det());
        let f = model.forward(&x).unwrap();
        let misfit: f64 = (0..5).map(|i| (y[i] - f[i]).powi(2) / obs.variances()[i]).sum::<f64>() * 0.5;
        assert!((c - (-(lp + norm) + misfit)).abs() < 1e-10);
    }

    #[test]
    fn linear_model_map_matches_conjugate_mean() {
        let n = 8;
        let (model, prior, obs, y) = linear_setup(n, 3);
        let res = solve_map(&y, &prior, &obs, &model, &OeOptions::default()).unwrap();
        assert!(res.converged);
        let sub = model.linearize_given_atm(0.5, 2.0).unwrap();
        // μ + Γ Aᵀ (A Γ Aᵀ + Γ_obs)⁻¹ (y − A μ − b)
        let g = prior.refl_cov().matrix();
        let a = DMatrix::from_diagonal(&DVector::from_vec(sub.a_diag.clone()));
        let mu = DVector::from_iterator(n, prior.mean().iter().take(n).copied());
        let gy = &a * g * &a + DMatrix::from_diagonal(&DVector::from_vec(obs.variances().to_vec()));
        let innov = DVector::from_vec(y.clone()) - &a * &mu - DVector::from_vec(sub.b.clone());
        let post_mean = &mu + g * &a * gy.lu().solve(&innov).unwrap();
        for i in 0..n {
            assert!(
                (res.x_map.refl[i] - post_mean[i]).abs() < 1e-8 * post_mean[i].abs().max(1.0),
                "channel {i}: {} vs {}",
                res.x_map.refl[i],
                post_mean[i]
            );
        }
        assert!((res.x_map.aod - 0.5).abs() < 1e-8 && (res.x_map.h2o - 2.0).abs() < 1e-8);
        for w in res.cost_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn linear_model_laplace_equals_linear_posterior() {
        let n = 6;
        let (model, prior, obs, y) = linear_setup(n, 4);
        let res = solve_map(&y, &prior, &obs, &model, &OeOptions::default()).unwrap();
        let sub = model.linearize_given_atm(0.5, 2.0).unwrap();
        let glin = linear_posterior_cov(&sub.a_diag, prior.refl_cov(), obs.variances(), None).unwrap();
        let padded = SpdMatrix::block_diag(&glin, prior.atm_cov());
        let rel = (res.gamma_laplace.matrix() - padded.matrix()).norm() / padded.frobenius();
        assert!(rel < 1e-10, "relative error {rel:e}");
    }

    #[test]
    fn laplace_trivial_cases() {
        let (model, prior, obs, _) = linear_setup(3, 5);
        let zero = DMatrix::zeros(3, 5);
        let g = laplace_from_jacobian(&zero, &prior, &obs).unwrap();
        assert!((g.matrix() - prior.cov().matrix()).amax() < 1e-12);
        let _ = model;

        let surf = MixtureComponent::new("u", vec![0.0], SpdMatrix::identity(1)).unwrap();
        let p1 = assemble_prior(&surf, [0.0, 0.0], &SpdMatrix::identity(2)).unwrap();
        let o1 = ObsCovariance::from_variances(vec![1.0], vec![true]).unwrap();
        let j = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let g1 = laplace_from_jacobian(&j, &p1, &o1).unwrap();
        assert!((g1.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prior_dominated_limit_returns_prior_mean() {
        let (model, prior, obs, y) = linear_setup(5, 6);
        let huge = obs.scaled(1e14);
        let res = solve_map(&y, &prior, &huge, &model, &OeOptions::default()).unwrap();
        let mean = prior.mean_state();
        for (a, b) in res.x_map.refl.iter().zip(&mean.refl) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_wide_prior_recovers_truth() {
        let n = 6;
        let (model, _, _, _) = linear_setup(n, 7);
        let truth = StateVector::new(vec![0.15, 0.3, 0.45, 0.2, 0.6, 0.35], 0.5, 2.0);
        let y = model.forward(&truth).unwrap();
        let surf = MixtureComponent::new("wide", vec![0.3; n], SpdMatrix::from_diagonal(&vec![1e4; n]).unwrap()).unwrap();
        let prior = assemble_prior(&surf, [0.5, 2.0], &SpdMatrix::identity(2)).unwrap();
        let obs = build_noise_cov(&y, &NoiseModel::standard(n), &vec![true; n]).unwrap();
        let res = solve_map(&y, &prior, &obs, &model, &OeOptions::default()).unwrap();
        for (a, b) in res.x_map.refl.iter().zip(&truth.refl) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn laplace_invariant_to_mask_reordering() {
        let (model, prior, obs, y) = linear_setup(5, 8);
        let mask = vec![true, false, true, true, false];
        let o1 = ObsCovariance::from_variances(obs.variances().to_vec(), mask).unwrap();
        let x = StateVector::new(y.iter().map(|_| 0.3).collect(), 0.5, 2.0);
        let g1 = laplace_cov(&x, &prior, &o1, &model).unwrap();
        // Zero-information on the masked rows is equivalent to excluding them.
        let mut vars = obs.variances().to_vec();
        vars[1] = 1e300;
        vars[4] = 1e300;
        let o2 = ObsCovariance::from_variances(vars, vec![true; 5]).unwrap();
        let g2 = laplace_cov(&x, &prior, &o2, &model).unwrap();
        assert!((g1.matrix() - g2.matrix()).amax() < 1e-12);
    }
}
