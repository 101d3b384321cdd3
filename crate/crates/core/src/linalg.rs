//! Symmetric positive-definite matrix services: factorization, Gaussian
//! sampling, generalized symmetric eigenproblems and the linear-Gaussian
//! posterior covariance.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, RetrievalError};
use crate::special;

/// Relative tolerance on `|m_ij - m_ji|` accepted by [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Orthant mass below which the truncated sampler abandons rejection.
pub const MIN_REJECTION_MASS: f64 = 1e-6;

/// A symmetric positive-definite matrix with its Cholesky factor.
///
/// The factor is computed at construction, so holding an `SpdMatrix` is
/// proof that the factorization exists.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    values: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(RetrievalError::Dimension(format!(
                "covariance must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NotSpd("non-finite entry".into()));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        let d = values.nrows();
        for i in 0..d {
            for j in 0..i {
                let gap = (values[(i, j)] - values[(j, i)]).abs();
                if gap > SYMMETRY_TOL * scale {
                    return Err(RetrievalError::NotSpd(format!(
                        "asymmetric at ({i}, {j}): gap {gap:.3e}"
                    )));
                }
            }
        }
        let chol = Cholesky::new(values.clone())
            .ok_or_else(|| RetrievalError::NotSpd(format!("Cholesky failed for {d}x{d} matrix")))?;
        Ok(SpdMatrix { values, chol })
    }

    /// Replaces `m` with `(m + mᵀ)/2` before validating.
    pub fn from_symmetrized(m: DMatrix<f64>) -> Result<Self> {
        let sym = (&m + m.transpose()) * 0.5;
        Self::new(sym)
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Block-diagonal embedding `[[a, 0], [0, b]]`.
    pub fn block_diag(a: &SpdMatrix, b: &SpdMatrix) -> Self {
        let (n, m) = (a.dim(), b.dim());
        let mut out = DMatrix::zeros(n + m, n + m);
        out.view_mut((0, 0), (n, n)).copy_from(a.matrix());
        out.view_mut((n, n), (m, m)).copy_from(b.matrix());
        Self::new(out).expect("block diagonal of SPD blocks is SPD")
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    /// Lower-triangular factor `L` with `LLᵀ = self`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub(crate) fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..self.dim()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `vᵀ self⁻¹ v`, via a single triangular solve.
    pub fn mahalanobis_sq(&self, v: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.values * c)
    }

    /// Principal submatrix on `idx`.
    pub fn submatrix(&self, idx: &[usize]) -> Result<Self> {
        let m = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.values[(idx[i], idx[j])]);
        Self::new(m)
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    pub fn frobenius(&self) -> f64 {
        self.values.norm()
    }

    /// Reciprocal-free 2-norm condition estimate from the Cholesky diagonal.
    pub fn condition_estimate(&self) -> f64 {
        let l = self.chol.l_dirty();
        let diag: Vec<f64> = (0..self.dim()).map(|i| l[(i, i)] * l[(i, i)]).collect();
        let max = diag.iter().cloned().fold(f64::MIN, f64::max);
        let min = diag.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }
}

/// One draw from `N(mean, cov)` as `mean + L z`.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &SpdMatrix, rng: &mut R) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(RetrievalError::Dimension(format!(
            "mean has {} entries, covariance is {}x{}",
            mean.len(),
            cov.dim(),
            cov.dim()
        )));
    }
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + cov.cholesky().l_dirty().lower_triangle() * z)
}

/// Draws `L z` for a precomputed lower factor into `out`, allocation free.
pub(crate) fn add_correlated_normal<R: Rng + ?Sized>(
    factor: &DMatrix<f64>,
    scratch: &mut [f64],
    out: &mut [f64],
    rng: &mut R,
) {
    let d = out.len();
    for z in scratch.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += factor[(i, j)] * scratch[j];
        }
        out[i] += acc;
    }
}

/// Result of [`sample_truncated_mvn_nonneg`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedDraw {
    pub value: [f64; 2],
    /// `P(N(mean, cov) ≥ 0)`, the normalizing mass of the truncated density.
    pub mass: f64,
    /// True if rejection was abandoned for sequential inverse-CDF sampling.
    pub fallback: bool,
}

/// Probability that `N(mean, cov)` lies in the nonnegative quadrant.
pub fn orthant_mass(mean: [f64; 2], cov: &SpdMatrix) -> f64 {
    let m = cov.matrix();
    let (s1, s2) = (m[(0, 0)].sqrt(), m[(1, 1)].sqrt());
    let rho = (m[(0, 1)] / (s1 * s2)).clamp(-1.0, 1.0);
    special::bivariate_upper(-mean[0] / s1, -mean[1] / s2, rho)
}

/// Draw from `N(mean, cov)` restricted to both coordinates ≥ 0.
///
/// Rejection from the untruncated proposal; the returned mass is computed
/// exactly from the bivariate normal CDF. When the mass is below
/// [`MIN_REJECTION_MASS`] the draw falls back to sampling the first
/// coordinate from its truncated marginal and the second from its truncated
/// conditional, which is only approximately the bivariate truncated law.
pub fn sample_truncated_mvn_nonneg<R: Rng + ?Sized>(
    mean: [f64; 2],
    cov: &SpdMatrix,
    rng: &mut R,
) -> Result<TruncatedDraw> {
    if cov.dim() != 2 {
        return Err(RetrievalError::Dimension(format!(
            "truncated sampler needs a 2x2 covariance, got {}x{}",
            cov.dim(),
            cov.dim()
        )));
    }
    let mass = orthant_mass(mean, cov);
    let l = cov.cholesky_factor();
    if mass >= MIN_REJECTION_MASS {
        loop {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let x0 = mean[0] + l[(0, 0)] * z0;
            let x1 = mean[1] + l[(1, 0)] * z0 + l[(1, 1)] * z1;
            if x0 >= 0.0 && x1 >= 0.0 {
                return Ok(TruncatedDraw {
                    value: [x0, x1],
                    mass,
                    fallback: false,
                });
            }
        }
    }
    warn!("truncation mass {mass:.3e} below {MIN_REJECTION_MASS:e}; using sequential inverse-CDF sampling");
    let m = cov.matrix();
    let s0 = m[(0, 0)].sqrt();
    let x0 = truncated_normal_nonneg(mean[0], s0, rng);
    let cond_mean = mean[1] + m[(1, 0)] / m[(0, 0)] * (x0 - mean[0]);
    let cond_sd = (m[(1, 1)] - m[(1, 0)] * m[(1, 0)] / m[(0, 0)]).max(0.0).sqrt();
    let x1 = truncated_normal_nonneg(cond_mean, cond_sd, rng);
    Ok(TruncatedDraw {
        value: [x0, x1],
        mass,
        fallback: true,
    })
}

/// Univariate `N(mu, sd²)` truncated to `[0, ∞)` by inverse CDF.
pub fn truncated_normal_nonneg<R: Rng + ?Sized>(mu: f64, sd: f64, rng: &mut R) -> f64 {
    if sd == 0.0 {
        return mu.max(0.0);
    }
    let alpha = -mu / sd;
    let u: f64 = rng.random();
    (mu + sd * special::truncated_std_normal_ppf(alpha, u)).max(0.0)
}

/// Generalized eigenvalues `σ` of `A v = σ B v`, descending.
///
/// Reduces to the standard symmetric problem `L⁻¹ A L⁻ᵀ` with `B = LLᵀ`.
pub fn generalized_eigvals(a: &SpdMatrix, b: &SpdMatrix) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::Dimension(format!(
            "pencil dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let l = b.cholesky().l();
    let left = l
        .solve_lower_triangular(a.matrix())
        .ok_or_else(|| RetrievalError::NotSpd("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| RetrievalError::NotSpd("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let mut vals: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.total_cmp(x));
    Ok(vals)
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Posterior covariance of the diagonal linear model `y = A x + b + e`,
/// `x ~ N(·, prior)`, `e ~ N(0, diag(obs_var))`:
///
/// `Γ_lin = (I − Γ_pr Aᵀ Γ_y⁻¹ A) Γ_pr`, `Γ_y = A Γ_pr Aᵀ + Γ_obs`.
///
/// Only channels with `retained[i] == true` enter `Γ_y`. The product is
/// symmetrized before the SPD check.
pub fn linear_posterior_cov(
    a_diag: &[f64],
    prior: &SpdMatrix,
    obs_var: &[f64],
    retained: Option<&[bool]>,
) -> Result<SpdMatrix> {
    let n = prior.dim();
    if a_diag.len() != n || obs_var.len() != n || retained.is_some_and(|r| r.len() != n) {
        return Err(RetrievalError::Dimension(format!(
            "linear posterior: prior {n}, A {}, obs {}",
            a_diag.len(),
            obs_var.len()
        )));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| retained.is_none_or(|r| r[i])).collect();
    let m = rows.len();
    if m == 0 {
        return Ok(prior.clone());
    }
    let gp = prior.matrix();
    // A_u Γ_pr, with A_u the retained rows of diag(a).
    let a_gp = DMatrix::from_fn(m, n, |r, c| a_diag[rows[r]] * gp[(rows[r], c)]);
    let mut gy = DMatrix::from_fn(m, m, |r, c| a_gp[(r, rows[c])] * a_diag[rows[c]]);
    for (r, &i) in rows.iter().enumerate() {
        gy[(r, r)] += obs_var[i];
    }
    let gy = Cholesky::new((&gy + gy.transpose()) * 0.5).ok_or_else(|| {
        RetrievalError::NotSpd("data marginal covariance Γ_y is not positive definite".into())
    })?;
    // Γ_pr Aᵀ Γ_y⁻¹ A Γ_pr = (A Γ_pr)ᵀ Γ_y⁻¹ (A Γ_pr).
    let solved = gy.solve(&a_gp);
    let reduction = a_gp.transpose() * solved;
    SpdMatrix::from_symmetrized(gp - reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let g = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        SpdMatrix::from_symmetrized(&g * g.transpose() + DMatrix::identity(d, d) * 0.5).unwrap()
    }

    #[test]
    fn rejects_non_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(SpdMatrix::new(m), Err(RetrievalError::NotSpd(_))));
        assert!(SpdMatrix::new(DMatrix::zeros(3, 3)).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.0, 2.0]);
        assert!(SpdMatrix::new(asym).is_err());
    }

    #[test]
    fn log_det_and_mahalanobis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(5, &mut rng);
        assert!((s.log_det() - s.matrix().determinant().ln()).abs() < 1e-10);
        let v = DVector::from_fn(5, |i, _| i as f64 - 2.0);
        let direct = (v.transpose() * s.matrix().clone().try_inverse().unwrap() * &v)[(0, 0)];
        assert!((s.mahalanobis_sq(&v) - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn mvn_identity_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let cov = SpdMatrix::identity(3);
        let n = 100_000;
        let mut acc = DVector::zeros(3);
        for _ in 0..n {
            acc += sample_mvn(&mean, &cov, &mut rng).unwrap();
        }
        let est = acc / n as f64;
        for i in 0..3 {
            assert!((est[i] - mean[i]).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn mvn_variance_diag4() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mean = DVector::zeros(2);
        let cov = SpdMatrix::from_diagonal(&[4.0, 4.0]).unwrap();
        let n = 100_000;
        let mut ss = [0.0; 2];
        for _ in 0..n {
            let x = sample_mvn(&mean, &cov, &mut rng).unwrap();
            ss[0] += x[0] * x[0];
            ss[1] += x[1] * x[1];
        }
        for s in ss {
            assert!((s / n as f64 - 4.0).abs() < 0.2);
        }
    }

    #[test]
    fn mvn_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_mvn(&DVector::zeros(3), &SpdMatrix::identity(2), &mut rng);
        assert!(matches!(r, Err(RetrievalError::Dimension(_))));
    }

    #[test]
    fn truncation_inactive_far_from_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cov = SpdMatrix::identity(2);
        let d = sample_truncated_mvn_nonneg([10.0, 10.0], &cov, &mut rng).unwrap();
        assert!((d.mass - 1.0).abs() < 1e-15);
        assert!(!d.fallback);
    }

    #[test]
    fn truncation_at_origin_stays_in_quadrant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cov = SpdMatrix::identity(2);
        for _ in 0..5000 {
            let d = sample_truncated_mvn_nonneg([0.0, 0.0], &cov, &mut rng).unwrap();
            assert!(d.value[0] >= 0.0 && d.value[1] >= 0.0);
            assert!((d.mass - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_marginal_moments_match_quadrature() {
        // Diagonal covariance: each coordinate is an independent truncated normal.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mean = [-1.0, 0.5];
        let sds = [1.0, 0.7];
        let cov = SpdMatrix::from_diagonal(&[sds[0] * sds[0], sds[1] * sds[1]]).unwrap();
        let n = 200_000;
        let mut m1 = [0.0; 2];
        let mut m2 = [0.0; 2];
        for _ in 0..n {
            let d = sample_truncated_mvn_nonneg(mean, &cov, &mut rng).unwrap();
            for k in 0..2 {
                m1[k] += d.value[k];
                m2[k] += d.value[k] * d.value[k];
            }
        }
        for k in 0..2 {
            // Oracle: trapezoid quadrature of x·φ and x²·φ on [0, mu + 12 sd].
            let (mu, sd) = (mean[k], sds[k]);
            let dens = |x: f64| (-(x - mu).powi(2) / (2.0 * sd * sd)).exp();
            let steps = 200_000;
            let hi = mu.max(0.0) + 12.0 * sd;
            let h = hi / steps as f64;
            let (mut z, mut e1, mut e2) = (0.0, 0.0, 0.0);
            for i in 0..=steps {
                let x = i as f64 * h;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                z += w * dens(x);
                e1 += w * x * dens(x);
                e2 += w * x * x * dens(x);
            }
            let (mean_q, second_q) = (e1 / z, e2 / z);
            let mean_s = m1[k] / n as f64;
            let var_s = m2[k] / n as f64 - mean_s * mean_s;
            let var_q = second_q - mean_q * mean_q;
            assert!((mean_s - mean_q).abs() / mean_q < 0.02, "mean {mean_s} vs {mean_q}");
            assert!((var_s - var_q).abs() / var_q < 0.02, "var {var_s} vs {var_q}");
        }
    }

    #[test]
    fn orthant_mass_matches_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cov = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, -0.3, -0.3, 0.4])).unwrap();
        let mean = DVector::from_vec(vec![0.2, 0.1]);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| {
                let x = sample_mvn(&mean, &cov, &mut rng).unwrap();
                x[0] >= 0.0 && x[1] >= 0.0
            })
            .count();
        let freq = hits as f64 / n as f64;
        let mass = orthant_mass([0.2, 0.1], &cov);
        assert!((freq - mass).abs() < 4.0 * (mass * (1.0 - mass) / n as f64).sqrt());
    }

    #[test]
    fn fallback_for_tiny_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cov = SpdMatrix::identity(2);
        let d = sample_truncated_mvn_nonneg([-6.0, -6.0], &cov, &mut rng).unwrap();
        assert!(d.fallback);
        assert!(d.value[0] >= 0.0 && d.value[1] >= 0.0);
    }

    #[test]
    fn generalized_eigvals_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_spd(6, &mut rng);
        for v in generalized_eigvals(&a, &a).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let a2 = a.scaled(2.0).unwrap();
        for v in generalized_eigvals(&a2, &a).unwrap() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generalized_eigvals_match_characteristic_roots() {
        // Oracle: roots of det(A − σB) located by sign scan + bisection, with
        // determinants from LU. Independent of the Cholesky reduction.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_spd(4, &mut rng);
        let b = random_spd(4, &mut rng);
        let det = |s: f64| (a.matrix() - b.matrix() * s).determinant();
        let vals = generalized_eigvals(&a, &b).unwrap();
        let hi = vals[0] * 2.0;
        let steps = 200_000;
        let mut roots = Vec::new();
        let mut prev = det(0.0);
        for i in 1..=steps {
            let s = hi * i as f64 / steps as f64;
            let cur = det(s);
            if prev.signum() != cur.signum() {
                let (mut lo, mut up) = (hi * (i - 1) as f64 / steps as f64, s);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + up);
                    if det(mid).signum() == det(lo).signum() {
                        lo = mid;
                    } else {
                        up = mid;
                    }
                }
                roots.push(0.5 * (lo + up));
            }
            prev = cur;
        }
        roots.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(roots.len(), 4);
        for (r, v) in roots.iter().zip(&vals) {
            assert!((r - v).abs() < 1e-9 * v.abs(), "{r} vs {v}");
        }
    }

    #[test]
    fn linear_posterior_trivial_cases() {
        let id = SpdMatrix::identity(3);
        let g = linear_posterior_cov(&[1.0; 3], &id, &[1.0; 3], None).unwrap();
        assert!((g.matrix() - DMatrix::identity(3, 3) * 0.5).amax() < 1e-15);
        let g0 = linear_posterior_cov(&[0.0; 3], &id, &[1.0; 3], None).unwrap();
        assert!((g0.matrix() - id.matrix()).amax() < 1e-15);
    }

    #[test]
    fn linear_posterior_matches_information_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let prior = random_spd(6, &mut rng);
        let a: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 3.0).collect();
        let obs: Vec<f64> = (0..6).map(|_| 0.1 + rng.random::<f64>()).collect();
        let g = linear_posterior_cov(&a, &prior, &obs, None).unwrap();
        let info = DMatrix::from_fn(6, 6, |i, j| if i == j { a[i] * a[i] / obs[i] } else { 0.0 })
            + prior.matrix().clone().try_inverse().unwrap();
        let oracle = info.try_inverse().unwrap();
        assert!((g.matrix() - &oracle).norm() / oracle.norm() < 1e-10);
    }

    #[test]
    fn masked_channels_carry_no_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let prior = random_spd(4, &mut rng);
        let a = [1.0, 2.0, 3.0, 4.0];
        let obs = [0.5; 4];
        let mask = [true, false, true, false];
        let g = linear_posterior_cov(&a, &prior, &obs, Some(&mask)).unwrap();
        let a_eff = [1.0, 0.0, 3.0, 0.0];
        let g2 = linear_posterior_cov(&a_eff, &prior, &obs, None).unwrap();
        assert!((g.matrix() - g2.matrix()).amax() < 1e-12);
    }
}
