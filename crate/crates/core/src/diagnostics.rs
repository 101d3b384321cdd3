//! Chain diagnostics and posterior comparison.

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RetrievalError};
use crate::linalg::{generalized_eigvals, symmetric_eigen_desc, SpdMatrix};
use crate::mcmc::Chain;
use crate::special::{inverse_mills, norm_cdf, norm_ppf, truncated_std_normal_cdf, truncated_std_normal_ppf};

/// Minimum series length accepted by [`autocorr_time`].
pub const MIN_AUTOCORR_LEN: usize = 100;
/// Eigenvalues below this fraction of the largest give unreliable quotients.
pub const EIGEN_RELIABILITY: f64 = 1e-12;
/// Means with magnitude below this make the relative difference meaningless.
pub const NEAR_ZERO_MEAN: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocorrTime {
    pub tau: f64,
    /// Set for a constant series, where `tau` is defined as the length.
    pub degenerate: bool,
}

/// Normalized autocorrelation `ρ(0..N)` via zero-padded FFT.
pub fn autocorrelation(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|&x| Complex::new(x - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let c0 = buf[0].re;
    if c0 <= 0.0 {
        return vec![1.0; n];
    }
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Integrated autocorrelation time `1 + 2 Σ ρ(k)` truncated by Geyer's
/// initial positive sequence, clamped to ≥ 1.
pub fn autocorr_time(series: &[f64]) -> Result<AutocorrTime> {
    let n = series.len();
    if n < MIN_AUTOCORR_LEN {
        return Err(RetrievalError::Input(format!(
            "autocorrelation needs at least {MIN_AUTOCORR_LEN} samples, got {n}"
        )));
    }
    if let Some(bad) = series.iter().find(|x| !x.is_finite()) {
        return Err(RetrievalError::Input(format!("non-finite value {bad} in series")));
    }
    let first = series[0];
    if series.iter().all(|&x| x == first) {
        return Ok(AutocorrTime {
            tau: n as f64,
            degenerate: true,
        });
    }
    let rho = autocorrelation(series);
    // Pairs Γ_m = ρ(2m) + ρ(2m+1), summed while positive.
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho[2 * m] + rho[2 * m + 1];
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0);
    Ok(AutocorrTime { tau, degenerate: false })
}

/// Monte Carlo standard error of the mean, `sd · √(τ / N)`.
pub fn mcse(series: &[f64]) -> Result<f64> {
    let tau = autocorr_time(series)?.tau;
    let n = series.len() as f64;
    let (_, var) = mean_var(series);
    Ok((var * tau / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub refl_min: f64,
    pub refl_med: f64,
    pub refl_max: f64,
    pub aod: f64,
    pub h2o: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub n: usize,
    pub tau: Vec<f64>,
    pub ess: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub summary: EssSummary,
}

/// Per-parameter ESS, `N / τ`, over all `n + 2` chain parameters.
pub fn ess(chain: &Chain) -> Result<EssReport> {
    if chain.is_empty() {
        return Err(RetrievalError::Input("empty chain".into()));
    }
    let p = chain.n_params();
    let n = chain.len();
    let mut tau = Vec::with_capacity(p);
    let mut degenerate = Vec::with_capacity(p);
    for j in 0..p {
        let t = autocorr_time(&chain.column(j))?;
        tau.push(t.tau);
        degenerate.push(t.degenerate);
    }
    let ess: Vec<f64> = tau.iter().map(|t| n as f64 / t).collect();
    let mut refl = ess[..p - 2].to_vec();
    refl.sort_by(f64::total_cmp);
    let summary = EssSummary {
        refl_min: refl[0],
        refl_med: median_sorted(&refl),
        refl_max: refl[refl.len() - 1],
        aod: ess[p - 2],
        h2o: ess[p - 1],
    };
    Ok(EssReport {
        n,
        tau,
        ess,
        degenerate,
        summary,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.iter().all(|&v| v == x[0]) {
        return (x[0], 0.0);
    }
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Unbiased sample mean and covariance of the chain.
pub fn sample_moments(chain: &Chain) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if chain.len() < 2 {
        return Err(RetrievalError::Input("need at least two samples".into()));
    }
    let x = chain.as_matrix();
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered) / (n - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// Sample covariance as an SPD matrix, `Γ_M`.
pub fn sample_covariance(chain: &Chain) -> Result<SpdMatrix> {
    SpdMatrix::new(sample_moments(chain)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovCompare {
    pub d_tr: f64,
    pub d_norm: f64,
    pub d_f_raw: f64,
    pub d_f_normalized: f64,
}

/// Förstner distance `√Σ ln² σ_i` over the generalized eigenvalues of `(a, b)`.
pub fn forstner(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    let sig = generalized_eigvals(a, b)?;
    Ok(sig.iter().map(|s| s.ln().powi(2)).sum::<f64>().sqrt())
}

/// Distances between the sampled covariance `Γ_M` and the Laplace covariance
/// `Γ_L`; the Förstner distance is also normalized by `d_f(Γ_M, Γ_pr)`.
pub fn cov_compare(gamma_m: &SpdMatrix, gamma_l: &SpdMatrix, gamma_pr: &SpdMatrix) -> Result<CovCompare> {
    let d = gamma_m.dim();
    if gamma_l.dim() != d || gamma_pr.dim() != d {
        return Err(RetrievalError::Dimension(format!(
            "covariances of size {d}, {} and {}",
            gamma_l.dim(),
            gamma_pr.dim()
        )));
    }
    let tr_m = gamma_m.trace();
    let d_tr = (tr_m - gamma_l.trace()).abs() / tr_m;
    let d_norm = (gamma_m.matrix() - gamma_l.matrix()).norm() / gamma_m.frobenius();
    let d_f_raw = forstner(gamma_m, gamma_l)?;
    let to_prior = forstner(gamma_m, gamma_pr)?;
    let d_f_normalized = if to_prior > 0.0 {
        d_f_raw / to_prior
    } else if d_f_raw == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(CovCompare {
        d_tr,
        d_norm,
        d_f_raw,
        d_f_normalized,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenQuotient {
    pub lambda: f64,
    /// `vᵀ Γ_L v / λ`.
    pub quotient: f64,
    pub eigvec: Vec<f64>,
    pub reliable: bool,
}

/// Directional variance ratio of `Γ_L` along each eigenvector of `Γ_M`,
/// ranked by descending eigenvalue.
pub fn eigen_quotient(gamma_m: &SpdMatrix, gamma_l: &SpdMatrix) -> Result<Vec<EigenQuotient>> {
    if gamma_m.dim() != gamma_l.dim() {
        return Err(RetrievalError::Dimension("eigen quotient needs equal dimensions".into()));
    }
    let (vals, vecs) = symmetric_eigen_desc(gamma_m.matrix());
    let lmax = vals.first().copied().unwrap_or(0.0);
    Ok(vals
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let v = vecs.column(i);
            let q = (v.transpose() * gamma_l.matrix() * v)[(0, 0)] / lambda;
            EigenQuotient {
                lambda,
                quotient: q,
                eigvec: v.iter().copied().collect(),
                reliable: lambda > EIGEN_RELIABILITY * lmax,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullFamily {
    #[default]
    Normal,
    /// Normal truncated below at zero; `loc` and `scale` refer to the parent.
    TruncatedNormalAtZero,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NullParams {
    /// Moments matched to the series itself.
    #[default]
    Fitted,
    Fixed { loc: f64, scale: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KsNull {
    pub family: NullFamily,
    pub params: NullParams,
}

impl KsNull {
    pub fn normal() -> Self {
        KsNull::default()
    }

    pub fn truncated() -> Self {
        KsNull {
            family: NullFamily::TruncatedNormalAtZero,
            params: NullParams::Fitted,
        }
    }

    pub fn fixed(family: NullFamily, loc: f64, scale: f64) -> Self {
        KsNull {
            family,
            params: NullParams::Fixed { loc, scale },
        }
    }
}

/// A fully specified null distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedNull {
    pub family: NullFamily,
    pub loc: f64,
    pub scale: f64,
    /// Parameters were estimated from the data under test.
    pub fitted: bool,
    /// Moment matching hit its bound: the sample is more skewed than any
    /// truncated normal (mean/sd ≤ 1).
    pub at_bound: bool,
}

impl FittedNull {
    fn alpha(&self) -> f64 {
        -self.loc / self.scale
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.loc) / self.scale;
        match self.family {
            NullFamily::Normal => norm_cdf(z),
            NullFamily::TruncatedNormalAtZero => truncated_std_normal_cdf(self.alpha(), z),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let z = match self.family {
            NullFamily::Normal => norm_ppf(p),
            NullFamily::TruncatedNormalAtZero => truncated_std_normal_ppf(self.alpha(), p),
        };
        self.loc + self.scale * z
    }
}

/// Lower bound of the truncation parameter `α = −μ/σ` searched when moment
/// matching; below it the truncation is negligible.
const ALPHA_MIN: f64 = -40.0;
const ALPHA_MAX: f64 = 30.0;

fn truncated_ratio(alpha: f64) -> f64 {
    let lam = inverse_mills(alpha);
    (lam - alpha) / (1.0 + alpha * lam - lam * lam).max(f64::MIN_POSITIVE).sqrt()
}

/// Parent `(μ, σ)` of a zero-truncated normal with the given mean and
/// standard deviation. Returns the bound flag when the ratio is not
/// attainable.
pub fn match_truncated_normal(mean: f64, sd: f64) -> Result<(f64, f64, bool)> {
    if !(sd > 0.0) {
        return Err(RetrievalError::Degenerate("zero variance".into()));
    }
    let r = mean / sd;
    let (alpha, at_bound) = if r >= truncated_ratio(ALPHA_MIN) {
        (-r, false)
    } else if r <= truncated_ratio(ALPHA_MAX) {
        (ALPHA_MAX, true)
    } else {
        // truncated_ratio decreases in α.
        let (mut lo, mut hi) = (ALPHA_MIN, ALPHA_MAX);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if truncated_ratio(mid) > r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi), false)
    };
    let lam = inverse_mills(alpha);
    let sigma = sd / (1.0 + alpha * lam - lam * lam).max(f64::MIN_POSITIVE).sqrt();
    Ok((-alpha * sigma, sigma, at_bound))
}

/// Resolves a null specification against the data.
pub fn fit_null(series: &[f64], null: &KsNull) -> Result<FittedNull> {
    match null.params {
        NullParams::Fixed { loc, scale } => {
            if !(scale > 0.0) {
                return Err(RetrievalError::Input(format!("null scale must be positive, got {scale}")));
            }
            Ok(FittedNull {
                family: null.family,
                loc,
                scale,
                fitted: false,
                at_bound: false,
            })
        }
        NullParams::Fitted => {
            let (m, v) = mean_var(series);
            if !(v > 0.0) {
                return Err(RetrievalError::Degenerate("series has zero variance".into()));
            }
            let (loc, scale, at_bound) = match null.family {
                NullFamily::Normal => (m, v.sqrt(), false),
                NullFamily::TruncatedNormalAtZero => match_truncated_normal(m, v.sqrt())?,
            };
            Ok(FittedNull {
                family: null.family,
                loc,
                scale,
                fitted: true,
                at_bound,
            })
        }
    }
}

/// Upper tail of the Kolmogorov distribution, `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Theta-function form converges fast for small λ.
        let t = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut acc = 0.0;
        for k in 1..=50 {
            let j = (2 * k - 1) as f64;
            acc += (j * j * t).exp();
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * acc;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut acc = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        acc += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * acc).clamp(0.0, 1.0)
}

/// One-sample KS statistic `sup |F_n − F|`.
pub fn ks_statistic<F: Fn(f64) -> f64>(series: &[f64], cdf: F) -> f64 {
    let mut x = series.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic p-value for statistic `d` at sample size `n`, with Stephens'
/// finite-sample scaling.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// KS test against an arbitrary continuous CDF; returns `(D, p)`.
pub fn ks_test<F: Fn(f64) -> f64>(series: &[f64], cdf: F) -> (f64, f64) {
    let d = ks_statistic(series, cdf);
    (d, ks_pvalue(d, series.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
    pub n: usize,
    pub null: FittedNull,
}

/// KS goodness of fit against a normal or zero-truncated normal null.
///
/// With fitted parameters the p-value is the plain Kolmogorov one and is
/// conservative (the Lilliefors effect); `null.fitted` records this.
pub fn ks_normality(series: &[f64], null: &KsNull) -> Result<KsResult> {
    if series.len() < 50 {
        return Err(RetrievalError::Input(format!(
            "KS test needs at least 50 samples, got {}",
            series.len()
        )));
    }
    let fitted = fit_null(series, null)?;
    let (d, p_value) = ks_test(series, |x| fitted.cdf(x));
    Ok(KsResult {
        d,
        p_value,
        n: series.len(),
        null: fitted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QqData {
    /// `(theoretical, sample)` pairs in increasing order.
    pub points: Vec<(f64, f64)>,
    pub null: FittedNull,
}

impl QqData {
    /// Mean of `(sample − theoretical) / scale` over the top `frac` of points;
    /// positive when the sample's right tail is heavier than the null's.
    pub fn upper_tail_deviation(&self, frac: f64) -> f64 {
        let k = ((self.points.len() as f64 * frac).ceil() as usize).clamp(1, self.points.len());
        let tail = &self.points[self.points.len() - k..];
        tail.iter().map(|(t, s)| (s - t) / self.null.scale).sum::<f64>() / k as f64
    }
}

/// Ordered sample against null quantiles at plotting positions `(k − ½)/N`.
pub fn qq_data(series: &[f64], null: &KsNull) -> Result<QqData> {
    if series.len() < 10 {
        return Err(RetrievalError::Input(format!("Q-Q needs at least 10 samples, got {}", series.len())));
    }
    let fitted = fit_null(series, null)?;
    let mut x = series.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let points = x
        .iter()
        .enumerate()
        .map(|(k, &s)| (fitted.quantile((k as f64 + 0.5) / n), s))
        .collect();
    Ok(QqData { points, null: fitted })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub variance: f64,
    /// `|mean − reference| / |mean|`, when a reference is given.
    pub rel_diff: Option<f64>,
    /// The mean is too close to zero for a meaningful relative difference.
    pub near_zero_mean: bool,
}

/// Per-parameter chain mean and marginal variance, with optional relative
/// difference against a reference vector (e.g. the MAP).
pub fn posterior_summary(chain: &Chain, reference: Option<&[f64]>) -> Result<Vec<ParamSummary>> {
    if chain.is_empty() {
        return Err(RetrievalError::Input("empty chain".into()));
    }
    if let Some(r) = reference {
        if r.len() != chain.n_params() {
            return Err(RetrievalError::Dimension(format!(
                "reference has {} entries, chain has {} parameters",
                r.len(),
                chain.n_params()
            )));
        }
    }
    Ok((0..chain.n_params())
        .map(|j| {
            let (mean, variance) = mean_var(&chain.column(j));
            let near_zero_mean = mean.abs() < NEAR_ZERO_MEAN;
            ParamSummary {
                mean,
                variance,
                rel_diff: reference.map(|r| (mean - r[j]).abs() / mean.abs()),
                near_zero_mean,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub aod_edges: Vec<f64>,
    pub h2o_edges: Vec<f64>,
    /// Row-major `aod_bins × h2o_bins`.
    pub counts: Vec<u64>,
}

/// Joint histogram of the atmospheric marginal over the sample range.
pub fn atm_histogram(chain: &Chain, aod_bins: usize, h2o_bins: usize) -> Result<Histogram2d> {
    if chain.is_empty() || aod_bins == 0 || h2o_bins == 0 {
        return Err(RetrievalError::Input("histogram needs samples and bins".into()));
    }
    let p = chain.n_params();
    let aod = chain.column(p - 2);
    let h2o = chain.column(p - 1);
    let edges = |v: &[f64], bins: usize| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect::<Vec<_>>()
    };
    let aod_edges = edges(&aod, aod_bins);
    let h2o_edges = edges(&h2o, h2o_bins);
    let bin = |x: f64, e: &[f64]| {
        let b = e.len() - 1;
        (((x - e[0]) / (e[b] - e[0]) * b as f64) as usize).min(b - 1)
    };
    let mut counts = vec![0u64; aod_bins * h2o_bins];
    for (a, h) in aod.iter().zip(&h2o) {
        counts[bin(*a, &aod_edges) * h2o_bins + bin(*h, &h2o_edges)] += 1;
    }
    Ok(Histogram2d {
        aod_edges,
        h2o_edges,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::{AcceptCounts, ChainInit, McmcConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Exp, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|_| {
                x = phi * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    fn chain_from_columns(cols: &[Vec<f64>]) -> Chain {
        let n = cols[0].len();
        let p = cols.len();
        let mut samples = Vec::with_capacity(n * p);
        for i in 0..n {
            for c in cols {
                samples.push(c[i]);
            }
        }
        Chain::from_parts(
            p,
            samples,
            vec![0.0; n],
            AcceptCounts::default(),
            McmcConfig::default(),
            ChainInit {
                start: vec![0.0; p],
                projected: false,
            },
        )
        .unwrap()
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        SpdMatrix::from_symmetrized(&a * a.transpose() + DMatrix::identity(d, d) * 0.5).unwrap()
    }

    #[test]
    fn autocorrelation_matches_direct_sum() {
        let x = ar1(500, 0.6, 1);
        let rho = autocorrelation(&x);
        let m = x.iter().sum::<f64>() / 500.0;
        let c = |k: usize| (0..500 - k).map(|i| (x[i] - m) * (x[i + k] - m)).sum::<f64>();
        for k in [0, 1, 5, 40] {
            assert!((rho[k] - c(k) / c(0)).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_tau_near_one() {
        let t = autocorr_time(&normals(100_000, 2)).unwrap();
        assert!((0.9..=1.2).contains(&t.tau), "tau {}", t.tau);
    }

    #[test]
    fn ar1_tau_matches_analytic() {
        let t = autocorr_time(&ar1(1_000_000, 0.9, 3)).unwrap();
        assert!((t.tau / 19.0 - 1.0).abs() < 0.15, "tau {}", t.tau);
    }

    #[test]
    fn repetition_doubles_tau() {
        let x = ar1(200_000, 0.5, 4);
        let doubled: Vec<f64> = x.iter().flat_map(|&v| [v, v]).collect();
        let (a, b) = (autocorr_time(&x).unwrap().tau, autocorr_time(&doubled).unwrap().tau);
        assert!((b / a - 2.0).abs() < 0.2, "{a} -> {b}");
    }

    #[test]
    fn constant_series_degenerate() {
        let t = autocorr_time(&[0.5; 300]).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.tau, 300.0);
        assert!(autocorr_time(&[0.0; 20]).is_err());
    }

    #[test]
    fn ess_report_shape() {
        let cols: Vec<Vec<f64>> = (0..5).map(|s| normals(20_000, 10 + s)).collect();
        let r = ess(&chain_from_columns(&cols)).unwrap();
        assert_eq!(r.ess.len(), 5);
        for e in &r.ess {
            assert!(*e <= r.n as f64 && *e / r.n as f64 > 0.8);
        }
        assert!(r.summary.refl_min <= r.summary.refl_med && r.summary.refl_med <= r.summary.refl_max);
        assert_eq!(r.summary.aod, r.ess[3]);
        let json = serde_json::to_value(&r.summary).unwrap();
        for key in ["refl_min", "refl_med", "refl_max", "aod", "h2o"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn thinning_raises_per_sample_ess() {
        let x = ar1(400_000, 0.9, 5);
        let thinned: Vec<f64> = x.iter().step_by(10).copied().collect();
        let per_full = 1.0 / autocorr_time(&x).unwrap().tau;
        let per_thin = 1.0 / autocorr_time(&thinned).unwrap().tau;
        assert!(per_thin >= per_full);
    }

    #[test]
    fn cov_compare_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_spd(4, &mut rng);
        let pr = random_spd(4, &mut rng);
        let c = cov_compare(&m, &m, &pr).unwrap();
        assert_eq!((c.d_tr, c.d_norm), (0.0, 0.0));
        assert!(c.d_f_raw < 1e-12);
        let l = m.scaled(2.0).unwrap();
        let c = cov_compare(&m, &l, &pr).unwrap();
        assert!((c.d_tr - 1.0).abs() < 1e-12);
        assert!((c.d_norm - 1.0).abs() < 1e-12);
        assert!((c.d_f_raw - (4.0 * 2f64.ln().powi(2)).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn cov_compare_dense_oracle() {
        // Oracle: eigenvalues of B⁻¹A via a general (nonsymmetric) solve.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(5, &mut rng);
        let b = random_spd(5, &mut rng);
        let pr = random_spd(5, &mut rng);
        let ev = |x: &SpdMatrix, y: &SpdMatrix| {
            let m = y.matrix().clone().try_inverse().unwrap() * x.matrix();
            let e = m.complex_eigenvalues();
            e.iter().map(|z| z.re.ln().powi(2)).sum::<f64>().sqrt()
        };
        let c = cov_compare(&a, &b, &pr).unwrap();
        assert!((c.d_f_raw - ev(&a, &b)).abs() < 1e-9);
        assert!((c.d_f_normalized - ev(&a, &b) / ev(&a, &pr)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn forstner_symmetric(seed in 0u64..1000, d in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(d, &mut rng);
            let b = random_spd(d, &mut rng);
            let (ab, ba) = (forstner(&a, &b).unwrap(), forstner(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-10 * ab.max(1.0));
        }

        #[test]
        fn quotient_of_scaled_is_constant(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(6, &mut rng);
            for q in eigen_quotient(&a, &a.scaled(c).unwrap()).unwrap() {
                prop_assert!((q.quotient - c).abs() < 1e-10 * c);
            }
        }

        #[test]
        fn ess_affine_invariant(seed in 0u64..200, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
            let x = ar1(2000, 0.7, seed);
            let y: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
            let (a, b) = (autocorr_time(&x).unwrap().tau, autocorr_time(&y).unwrap().tau);
            prop_assert!((a - b).abs() < 1e-8 * a);
        }
    }

    #[test]
    fn diagonal_quotients_ranked() {
        let m = SpdMatrix::from_diagonal(&[1.0, 4.0]).unwrap();
        let l = SpdMatrix::identity(2);
        let q = eigen_quotient(&m, &l).unwrap();
        assert_eq!(q[0].lambda, 4.0);
        assert!((q[0].quotient - 0.25).abs() < 1e-14);
        assert!((q[1].quotient - 1.0).abs() < 1e-14);
        assert!(q.iter().all(|e| e.reliable));
    }

    #[test]
    fn tiny_eigenvalue_flagged() {
        let m = SpdMatrix::from_diagonal(&[1.0, 1e-14]).unwrap();
        let q = eigen_quotient(&m, &m).unwrap();
        assert!(q[0].reliable && !q[1].reliable);
    }

    #[test]
    fn ks_three_point_statistic() {
        // Uniform null, sample {0.1, 0.5, 0.9}: gaps at each step are
        // 1/3−0.1, 0.5−1/3, 2/3−0.5, 0.9−2/3, 1−0.9; the sup is 0.2333….
        let d = ks_statistic(&[0.9, 0.1, 0.5], |x| x.clamp(0.0, 1.0));
        assert!((d - (0.9 - 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Reference values of the Kolmogorov distribution.
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
        assert!((kolmogorov_sf(0.8276) - 0.5).abs() < 1e-3);
        // The two series agree where they hand over.
        let lo = 1.0 - 1e-9;
        assert!((kolmogorov_sf(lo) - kolmogorov_sf(1.0)).abs() < 1e-8);
    }

    #[test]
    fn exponential_rejected_as_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = Exp::new(1.0).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(e)).collect();
        assert!(ks_normality(&x, &KsNull::normal()).unwrap().p_value < 1e-6);
    }

    #[test]
    fn ks_fixed_null_pvalues_uniform() {
        let p: Vec<f64> = (0..200)
            .map(|t| {
                ks_normality(&normals(10_000, 100 + t), &KsNull::fixed(NullFamily::Normal, 0.0, 1.0))
                    .unwrap()
                    .p_value
            })
            .collect();
        let (_, pu) = ks_test(&p, |x| x.clamp(0.0, 1.0));
        assert!(pu > 0.01, "uniformity p {pu}");
    }

    #[test]
    fn zero_variance_is_degenerate() {
        assert!(matches!(
            ks_normality(&[1.0; 60], &KsNull::normal()),
            Err(RetrievalError::Degenerate(_))
        ));
    }

    #[test]
    fn truncated_moment_matching_round_trip() {
        for &(mu, sigma) in &[(0.3, 1.0), (-0.5, 0.2), (2.0, 0.5), (-2.0, 1.0)] {
            let a: f64 = -mu / sigma;
            let lam = inverse_mills(a);
            let mean = mu + sigma * lam;
            let sd = sigma * (1.0 + a * lam - lam * lam).sqrt();
            let (m2, s2, bound) = match_truncated_normal(mean, sd).unwrap();
            assert!(!bound);
            assert!((m2 - mu).abs() < 1e-7 && (s2 - sigma).abs() < 1e-7, "{mu},{sigma} -> {m2},{s2}");
        }
        assert!(match_truncated_normal(0.5, 1.0).unwrap().2);
    }

    #[test]
    fn truncated_null_accepts_truncated_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..5000)
            .map(|_| crate::linalg::truncated_normal_nonneg(0.05, 0.1, &mut rng))
            .collect();
        let fixed = KsNull::fixed(NullFamily::TruncatedNormalAtZero, 0.05, 0.1);
        assert!(ks_normality(&x, &fixed).unwrap().p_value > 0.01);
        assert!(ks_normality(&x, &KsNull::normal()).unwrap().p_value < 1e-6);
        let fit = fit_null(&x, &KsNull::truncated()).unwrap();
        assert!((fit.loc - 0.05).abs() < 0.02 && (fit.scale - 0.1).abs() < 0.02);
    }

    #[test]
    fn qq_identity_and_affine() {
        let n = 200;
        let q: Vec<f64> = (0..n).map(|k| norm_ppf((k as f64 + 0.5) / n as f64)).collect();
        let d = qq_data(&q, &KsNull::fixed(NullFamily::Normal, 0.0, 1.0)).unwrap();
        assert!(d.points.iter().all(|(t, s)| (t - s).abs() < 1e-12));
        let y: Vec<f64> = q.iter().map(|v| 3.0 * v - 1.0).collect();
        let d = qq_data(&y, &KsNull::fixed(NullFamily::Normal, 0.0, 1.0)).unwrap();
        assert!(d.points.iter().all(|(t, s)| (s - (3.0 * t - 1.0)).abs() < 1e-12));
    }

    #[test]
    fn lognormal_right_tail_above_line() {
        let x: Vec<f64> = normals(5000, 11).iter().map(|v| (0.8 * v).exp()).collect();
        let d = qq_data(&x, &KsNull::normal()).unwrap();
        assert!(d.upper_tail_deviation(0.02) > 0.5);
        let (t, s) = d.points[d.points.len() - 1];
        assert!(s > t);
    }

    #[test]
    fn summary_cases() {
        let x = normals(50_000, 12);
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let c = chain_from_columns(&[y, vec![0.7; 50_000]]);
        let s = posterior_summary(&c, None).unwrap();
        assert!((s[0].mean - 2.0).abs() < 4.0 * 0.5 / (50_000f64).sqrt());
        assert!((s[0].variance - 0.25).abs() < 0.25 * 0.03);
        assert_eq!(s[1].variance, 0.0);
        let reference = [s[0].mean, s[1].mean];
        let s = posterior_summary(&c, Some(&reference)).unwrap();
        assert!(s.iter().all(|p| p.rel_diff == Some(0.0)));
    }

    #[test]
    fn histogram_counts_everything() {
        let c = chain_from_columns(&[normals(1000, 13), normals(1000, 14), normals(1000, 15)]);
        let h = atm_histogram(&c, 10, 7).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 1000);
        assert_eq!(h.aod_edges.len(), 11);
    }
}
