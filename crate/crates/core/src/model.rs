//! Radiative-transfer forward model.
//!
//! Atmospheric intermediates (path reflectance `ρ_a`, spherical albedo `s`,
//! transmission `t`) are bilinearly interpolated from a lookup table indexed
//! by aerosol optical depth and water vapour, then combined with the surface
//! reflectance per channel:
//!
//! ```text
//! y_i = (φ₀/π) e₀ᵢ [ ρ_a,i + t_i x_i / (1 − s_i x_i) ]
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, RetrievalError};

/// Number of atmospheric parameters appended to the reflectance block.
pub const N_ATM: usize = 2;

/// Relative step (fraction of the grid span) for atmospheric finite differences.
pub const ATM_FD_REL_STEP: f64 = 1e-4;

/// Channel centers and the retrieval mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    wavelengths: Vec<f64>,
    mask: Vec<bool>,
}

impl WavelengthGrid {
    pub const MIN_NM: f64 = 380.0;
    pub const MAX_NM: f64 = 2500.0;

    pub fn new(wavelengths: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(RetrievalError::Input("empty wavelength grid".into()));
        }
        if mask.len() != wavelengths.len() {
            return Err(RetrievalError::Dimension(format!(
                "mask has {} entries for {} channels",
                mask.len(),
                wavelengths.len()
            )));
        }
        for (i, w) in wavelengths.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(RetrievalError::Input(format!(
                    "wavelengths not strictly increasing at index {}: {} then {}",
                    i + 1,
                    w[0],
                    w[1]
                )));
            }
        }
        if let Some(bad) = wavelengths
            .iter()
            .find(|&&w| !(Self::MIN_NM..=Self::MAX_NM).contains(&w))
        {
            return Err(RetrievalError::Input(format!(
                "wavelength {bad} nm outside [{}, {}]",
                Self::MIN_NM,
                Self::MAX_NM
            )));
        }
        Ok(WavelengthGrid { wavelengths, mask })
    }

    /// All channels retained.
    pub fn unmasked(wavelengths: Vec<f64>) -> Result<Self> {
        let n = wavelengths.len();
        Self::new(wavelengths, vec![true; n])
    }

    /// `n` equally spaced channels spanning `[lo, hi]` nm.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 2 {
            return Err(RetrievalError::Input("need at least two channels".into()));
        }
        let step = (hi - lo) / (n - 1) as f64;
        Self::unmasked((0..n).map(|i| lo + step * i as f64).collect())
    }

    /// Masks every channel whose center falls in one of `bands` (closed intervals, nm).
    pub fn with_masked_bands(mut self, bands: &[(f64, f64)]) -> Self {
        for (w, m) in self.wavelengths.iter().zip(self.mask.iter_mut()) {
            if bands.iter().any(|&(lo, hi)| (lo..=hi).contains(w)) {
                *m = false;
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn retained(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Concatenated state `[x_refl, aod, h2o]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub refl: Vec<f64>,
    pub aod: f64,
    pub h2o: f64,
}

impl StateVector {
    pub fn new(refl: Vec<f64>, aod: f64, h2o: f64) -> Self {
        StateVector { refl, aod, h2o }
    }

    pub fn n_channels(&self) -> usize {
        self.refl.len()
    }

    pub fn dim(&self) -> usize {
        self.refl.len() + N_ATM
    }

    pub fn atm(&self) -> [f64; 2] {
        [self.aod, self.h2o]
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.refl.iter().copied().chain([self.aod, self.h2o]),
        )
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() < N_ATM + 1 {
            return Err(RetrievalError::Dimension(format!(
                "state needs at least {} entries, got {}",
                N_ATM + 1,
                x.len()
            )));
        }
        let n = x.len() - N_ATM;
        Ok(StateVector {
            refl: x[..n].to_vec(),
            aod: x[n],
            h2o: x[n + 1],
        })
    }
}

/// What to do with lookup-table queries outside the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Out-of-range queries are errors.
    #[default]
    Strict,
    /// Queries are projected onto the grid.
    Clamp,
    /// The edge cell's bilinear form is continued past the grid.
    Extrapolate,
}

/// Interpolated atmospheric intermediates for one `(aod, h2o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtmSpectra {
    pub rho_a: Vec<f64>,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

/// Lookup table of `(ρ_a, s, t)` spectra on an `(aod, h2o)` grid.
///
/// Each cube is stored column-major with shape `(n_aod, n_h2o, n)`: the
/// AOD index varies fastest, then H2O, then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AtmLookupTable {
    aod_grid: Vec<f64>,
    h2o_grid: Vec<f64>,
    wavelengths: Vec<f64>,
    rho_a: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    i: usize,
    w: f64,
}

fn locate(grid: &[f64], x: f64) -> Cell {
    let last = grid.len() - 2;
    let i = match grid.binary_search_by(|g| g.total_cmp(&x)) {
        Ok(k) => k.min(last),
        Err(0) => 0,
        Err(k) => (k - 1).min(last),
    };
    Cell {
        i,
        w: (x - grid[i]) / (grid[i + 1] - grid[i]),
    }
}

impl AtmLookupTable {
    pub fn new(
        aod_grid: Vec<f64>,
        h2o_grid: Vec<f64>,
        wavelengths: Vec<f64>,
        rho_a: Vec<f64>,
        s: Vec<f64>,
        t: Vec<f64>,
    ) -> Result<Self> {
        for (name, g) in [("aod_grid", &aod_grid), ("h2o_grid", &h2o_grid)] {
            if g.len() < 2 {
                return Err(RetrievalError::Input(format!("{name} needs at least 2 knots")));
            }
            if g.windows(2).any(|w| w[1] <= w[0]) || g.iter().any(|v| !v.is_finite()) {
                return Err(RetrievalError::Input(format!("{name} must be strictly increasing")));
            }
        }
        let size = aod_grid.len() * h2o_grid.len() * wavelengths.len();
        for (name, cube) in [("rho_a", &rho_a), ("s", &s), ("t", &t)] {
            if cube.len() != size {
                return Err(RetrievalError::Dimension(format!(
                    "{name} has {} values, expected {size}",
                    cube.len()
                )));
            }
        }
        if rho_a.iter().any(|&v| !(v >= 0.0)) {
            return Err(RetrievalError::Input("rho_a must be nonnegative".into()));
        }
        if t.iter().any(|&v| !(v >= 0.0)) {
            return Err(RetrievalError::Input("t must be nonnegative".into()));
        }
        if s.iter().any(|&v| !(0.0..1.0).contains(&v)) {
            return Err(RetrievalError::Input("s must lie in [0, 1)".into()));
        }
        Ok(AtmLookupTable {
            aod_grid,
            h2o_grid,
            wavelengths,
            rho_a,
            s,
            t,
        })
    }

    /// Builds a table by evaluating `f(aod, h2o, channel) -> (ρ_a, s, t)` on the grid.
    pub fn from_fn<F>(aod_grid: Vec<f64>, h2o_grid: Vec<f64>, wavelengths: Vec<f64>, f: F) -> Result<Self>
    where
        F: Fn(f64, f64, usize) -> (f64, f64, f64),
    {
        let (na, nh, n) = (aod_grid.len(), h2o_grid.len(), wavelengths.len());
        let mut rho_a = vec![0.0; na * nh * n];
        let mut s = rho_a.clone();
        let mut t = rho_a.clone();
        for c in 0..n {
            for (j, &h) in h2o_grid.iter().enumerate() {
                for (i, &a) in aod_grid.iter().enumerate() {
                    let k = i + na * (j + nh * c);
                    (rho_a[k], s[k], t[k]) = f(a, h, c);
                }
            }
        }
        Self::new(aod_grid, h2o_grid, wavelengths, rho_a, s, t)
    }

    pub fn aod_grid(&self) -> &[f64] {
        &self.aod_grid
    }

    pub fn h2o_grid(&self) -> &[f64] {
        &self.h2o_grid
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn n_channels(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn rho_a(&self) -> &[f64] {
        &self.rho_a
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    #[inline]
    fn index(&self, i_aod: usize, i_h2o: usize, ch: usize) -> usize {
        i_aod + self.aod_grid.len() * (i_h2o + self.h2o_grid.len() * ch)
    }

    /// Stored `(ρ_a, s, t)` at a knot.
    pub fn knot(&self, i_aod: usize, i_h2o: usize, ch: usize) -> (f64, f64, f64) {
        let k = self.index(i_aod, i_h2o, ch);
        (self.rho_a[k], self.s[k], self.t[k])
    }

    pub fn aod_range(&self) -> (f64, f64) {
        (self.aod_grid[0], *self.aod_grid.last().unwrap())
    }

    pub fn h2o_range(&self) -> (f64, f64) {
        (self.h2o_grid[0], *self.h2o_grid.last().unwrap())
    }

    pub fn contains(&self, aod: f64, h2o: f64) -> bool {
        let (a0, a1) = self.aod_range();
        let (h0, h1) = self.h2o_range();
        (a0..=a1).contains(&aod) && (h0..=h1).contains(&h2o)
    }

    /// Bilinear interpolation; out-of-range queries are errors.
    pub fn interpolate(&self, aod: f64, h2o: f64) -> Result<AtmSpectra> {
        self.interpolate_with(aod, h2o, Boundary::Strict).map(|(s, _)| s)
    }

    /// Bilinear interpolation under a boundary policy. The flag reports
    /// whether the query fell outside the grid.
    pub fn interpolate_with(&self, aod: f64, h2o: f64, boundary: Boundary) -> Result<(AtmSpectra, bool)> {
        let n = self.n_channels();
        let mut out = AtmSpectra {
            rho_a: vec![0.0; n],
            s: vec![0.0; n],
            t: vec![0.0; n],
        };
        let outside = self.interpolate_into(aod, h2o, boundary, &mut out)?;
        Ok((out, outside))
    }

    pub(crate) fn interpolate_into(
        &self,
        aod: f64,
        h2o: f64,
        boundary: Boundary,
        out: &mut AtmSpectra,
    ) -> Result<bool> {
        let mut query = [aod, h2o];
        let mut outside = false;
        for (k, (name, (lo, hi))) in [("aod", self.aod_range()), ("h2o", self.h2o_range())]
            .into_iter()
            .enumerate()
        {
            let v = query[k];
            if !v.is_finite() {
                return Err(RetrievalError::OutOfRange {
                    param: name,
                    value: v,
                    lo,
                    hi,
                });
            }
            if v < lo || v > hi {
                outside = true;
                match boundary {
                    Boundary::Strict => {
                        return Err(RetrievalError::OutOfRange {
                            param: name,
                            value: v,
                            lo,
                            hi,
                        })
                    }
                    Boundary::Clamp => query[k] = v.clamp(lo, hi),
                    Boundary::Extrapolate => {}
                }
            }
        }
        let ca = locate(&self.aod_grid, query[0]);
        let ch = locate(&self.h2o_grid, query[1]);
        let w00 = (1.0 - ca.w) * (1.0 - ch.w);
        let w10 = ca.w * (1.0 - ch.w);
        let w01 = (1.0 - ca.w) * ch.w;
        let w11 = ca.w * ch.w;
        let stride_h = self.aod_grid.len();
        for c in 0..self.n_channels() {
            let k00 = self.index(ca.i, ch.i, c);
            let (k10, k01, k11) = (k00 + 1, k00 + stride_h, k00 + stride_h + 1);
            let mix = |cube: &[f64]| w00 * cube[k00] + w10 * cube[k10] + w01 * cube[k01] + w11 * cube[k11];
            out.rho_a[c] = mix(&self.rho_a);
            out.s[c] = mix(&self.s);
            out.t[c] = mix(&self.t);
        }
        Ok(outside)
    }
}

/// Illumination geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub cos_solar_zenith: f64,
    pub solar_irradiance: Vec<f64>,
}

impl Geometry {
    pub fn new(cos_solar_zenith: f64, solar_irradiance: Vec<f64>) -> Result<Self> {
        if !(cos_solar_zenith > 0.0 && cos_solar_zenith <= 1.0) {
            return Err(RetrievalError::Input(format!(
                "cos_solar_zenith {cos_solar_zenith} outside (0, 1]"
            )));
        }
        if solar_irradiance.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(RetrievalError::Input("solar irradiance must be positive".into()));
        }
        Ok(Geometry {
            cos_solar_zenith,
            solar_irradiance,
        })
    }

    /// Per-channel radiance scale `(φ₀/π) e₀ᵢ`.
    pub fn radiance_scale(&self) -> Vec<f64> {
        self.solar_irradiance
            .iter()
            .map(|e| self.cos_solar_zenith / PI * e)
            .collect()
    }
}

/// Diagonal linear model `A x + b` of the reflectance block at fixed atmosphere.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSubmodel {
    pub a_diag: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearSubmodel {
    pub fn apply(&self, refl: &[f64]) -> Vec<f64> {
        refl.iter()
            .zip(&self.a_diag)
            .zip(&self.b)
            .map(|((x, a), b)| a * x + b)
            .collect()
    }
}

/// The forward model: a lookup table plus illumination geometry.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    lut: AtmLookupTable,
    geometry: Geometry,
    scale: Vec<f64>,
}

impl ForwardModel {
    pub fn new(lut: AtmLookupTable, geometry: Geometry) -> Result<Self> {
        if geometry.solar_irradiance.len() != lut.n_channels() {
            return Err(RetrievalError::Dimension(format!(
                "irradiance has {} channels, LUT has {}",
                geometry.solar_irradiance.len(),
                lut.n_channels()
            )));
        }
        let scale = geometry.radiance_scale();
        Ok(ForwardModel { lut, geometry, scale })
    }

    pub fn lut(&self) -> &AtmLookupTable {
        &self.lut
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn n_channels(&self) -> usize {
        self.lut.n_channels()
    }

    pub fn radiance_scale(&self) -> &[f64] {
        &self.scale
    }

    fn check_dim(&self, refl: &[f64]) -> Result<()> {
        if refl.len() != self.n_channels() {
            return Err(RetrievalError::Dimension(format!(
                "state has {} reflectances, model has {} channels",
                refl.len(),
                self.n_channels()
            )));
        }
        Ok(())
    }

    /// Radiance from already-interpolated atmospheric spectra.
    pub fn radiance_from(&self, atm: &AtmSpectra, refl: &[f64], out: &mut [f64]) -> Result<()> {
        for i in 0..refl.len() {
            let denom = 1.0 - atm.s[i] * refl[i];
            if !(denom > 0.0) {
                return Err(RetrievalError::Singularity {
                    channel: i,
                    denominator: denom,
                });
            }
            out[i] = self.scale[i] * (atm.rho_a[i] + atm.t[i] * refl[i] / denom);
        }
        Ok(())
    }

    pub fn forward(&self, state: &StateVector) -> Result<Vec<f64>> {
        self.forward_with(state, Boundary::Strict).map(|(y, _)| y)
    }

    /// Forward model under a LUT boundary policy; the flag reports whether
    /// the atmospheric query left the grid.
    pub fn forward_with(&self, state: &StateVector, boundary: Boundary) -> Result<(Vec<f64>, bool)> {
        self.check_dim(&state.refl)?;
        let (atm, outside) = self.lut.interpolate_with(state.aod, state.h2o, boundary)?;
        let mut y = vec![0.0; state.refl.len()];
        self.radiance_from(&atm, &state.refl, &mut y)?;
        Ok((y, outside))
    }

    /// Jacobian `∂y/∂x`, `n × (n + 2)`.
    pub fn jacobian(&self, state: &StateVector) -> Result<DMatrix<f64>> {
        self.jacobian_with(state, Boundary::Strict)
    }

    /// Reflectance block analytic; atmospheric columns by central differences
    /// of the interpolated intermediates with step `1e-4 × grid span`. The
    /// difference stencil continues the edge cells past the grid so that
    /// states on the boundary get one-cell slopes.
    pub fn jacobian_with(&self, state: &StateVector, boundary: Boundary) -> Result<DMatrix<f64>> {
        self.check_dim(&state.refl)?;
        let n = self.n_channels();
        let (atm, _) = self.lut.interpolate_with(state.aod, state.h2o, boundary)?;
        let mut jac = DMatrix::zeros(n, n + N_ATM);
        for i in 0..n {
            let denom = 1.0 - atm.s[i] * state.refl[i];
            if !(denom > 0.0) {
                return Err(RetrievalError::Singularity {
                    channel: i,
                    denominator: denom,
                });
            }
            jac[(i, i)] = self.scale[i] * atm.t[i] / (denom * denom);
        }
        let (a0, a1) = self.lut.aod_range();
        let (h0, h1) = self.lut.h2o_range();
        let (q_aod, q_h2o) = match boundary {
            Boundary::Clamp => (state.aod.clamp(a0, a1), state.h2o.clamp(h0, h1)),
            _ => (state.aod, state.h2o),
        };
        let steps = [ATM_FD_REL_STEP * (a1 - a0), ATM_FD_REL_STEP * (h1 - h0)];
        let mut buf = vec![0.0; n];
        for (k, &h) in steps.iter().enumerate() {
            for sign in [1.0, -1.0] {
                let (qa, qh) = if k == 0 {
                    (q_aod + sign * h, q_h2o)
                } else {
                    (q_aod, q_h2o + sign * h)
                };
                let (spec, _) = self.lut.interpolate_with(qa, qh, Boundary::Extrapolate)?;
                self.radiance_from(&spec, &state.refl, &mut buf)?;
                for i in 0..n {
                    jac[(i, n + k)] += sign * buf[i] / (2.0 * h);
                }
            }
        }
        Ok(jac)
    }

    /// The conditional-linear submodel at fixed atmosphere:
    /// `A_ii = (φ₀/π) e₀ᵢ tᵢ`, `bᵢ = (φ₀/π) e₀ᵢ ρ_a,i`.
    pub fn linearize_given_atm(&self, aod: f64, h2o: f64) -> Result<LinearSubmodel> {
        let atm = self.lut.interpolate(aod, h2o)?;
        Ok(self.linearize_from(&atm))
    }

    pub(crate) fn linearize_from(&self, atm: &AtmSpectra) -> LinearSubmodel {
        LinearSubmodel {
            a_diag: self.scale.iter().zip(&atm.t).map(|(c, t)| c * t).collect(),
            b: self.scale.iter().zip(&atm.rho_a).map(|(c, r)| c * r).collect(),
        }
    }

    /// Closed-form per-channel inversion of the forward model at a given
    /// atmosphere, used as the starting estimate for prior selection.
    /// Channels where the inversion is undefined (no transmission) are filled
    /// by linear interpolation from valid neighbours, and the result is
    /// clipped to `[0, 1]`.
    pub fn invert_reflectance(&self, y: &[f64], aod: f64, h2o: f64, retained: &[bool]) -> Result<Vec<f64>> {
        self.check_dim(y)?;
        let (atm, _) = self.lut.interpolate_with(aod, h2o, Boundary::Clamp)?;
        let n = y.len();
        let mut x: Vec<Option<f64>> = (0..n)
            .map(|i| {
                let r = y[i] / self.scale[i] - atm.rho_a[i];
                let denom = atm.t[i] + atm.s[i] * r;
                (retained[i] && atm.t[i] > 1e-3 && denom > 0.0).then(|| (r / denom).clamp(0.0, 1.0))
            })
            .collect();
        let known: Vec<usize> = (0..n).filter(|&i| x[i].is_some()).collect();
        if known.is_empty() {
            return Err(RetrievalError::Input("no channel admits an algebraic inversion".into()));
        }
        let w = self.lut.wavelengths();
        for i in 0..n {
            if x[i].is_some() {
                continue;
            }
            let right = known.iter().copied().find(|&k| k > i);
            let left = known.iter().copied().rev().find(|&k| k < i);
            x[i] = Some(match (left, right) {
                (Some(l), Some(r)) => {
                    let f = (w[i] - w[l]) / (w[r] - w[l]);
                    x[l].unwrap() * (1.0 - f) + x[r].unwrap() * f
                }
                (Some(l), None) => x[l].unwrap(),
                (None, Some(r)) => x[r].unwrap(),
                (None, None) => unreachable!(),
            });
        }
        Ok(x.into_iter().map(Option::unwrap).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_lut(n: usize, rho_a: f64, s: f64, t: f64) -> AtmLookupTable {
        let wl = (0..n).map(|i| 400.0 + 10.0 * i as f64).collect();
        AtmLookupTable::from_fn(vec![0.0, 1.0], vec![0.0, 5.0], wl, |_, _, _| (rho_a, s, t)).unwrap()
    }

    fn random_lut(seed: u64, na: usize, nh: usize, n: usize) -> AtmLookupTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aod = (0..na).map(|i| i as f64 * 0.25).collect();
        let h2o = (0..nh).map(|i| 0.5 + i as f64 * 1.0).collect();
        let wl = (0..n).map(|i| 400.0 + 50.0 * i as f64).collect();
        let vals: Vec<(f64, f64, f64)> = (0..na * nh * n)
            .map(|_| (0.1 * rng.random::<f64>(), 0.25 * rng.random::<f64>(), 0.3 + 0.6 * rng.random::<f64>()))
            .collect();
        AtmLookupTable::from_fn(aod, h2o, wl, |a, h, c| {
            let i = (a / 0.25).round() as usize;
            let j = (h - 0.5).round() as usize;
            vals[i + na * (j + nh * c)]
        })
        .unwrap()
    }

    #[test]
    fn wavelength_grid_validation() {
        assert!(WavelengthGrid::unmasked(vec![400.0, 500.0, 450.0]).is_err());
        assert!(WavelengthGrid::unmasked(vec![300.0, 500.0]).is_err());
        assert!(WavelengthGrid::new(vec![400.0, 500.0], vec![true]).is_err());
        let g = WavelengthGrid::uniform(5, 400.0, 800.0)
            .unwrap()
            .with_masked_bands(&[(550.0, 650.0)]);
        assert_eq!(g.retained(), vec![0, 1, 3, 4]);
    }

    #[test]
    fn lut_rejects_bad_tables() {
        let wl = vec![400.0];
        let r = AtmLookupTable::from_fn(vec![0.0, 1.0], vec![0.0, 1.0], wl.clone(), |_, _, _| (0.0, 1.0, 1.0));
        assert!(r.is_err(), "s = 1 must be rejected");
        let r = AtmLookupTable::from_fn(vec![0.0], vec![0.0, 1.0], wl.clone(), |_, _, _| (0.0, 0.0, 1.0));
        assert!(r.is_err(), "single knot must be rejected");
        let r = AtmLookupTable::from_fn(vec![0.0, 1.0], vec![1.0, 0.0], wl, |_, _, _| (0.0, 0.0, 1.0));
        assert!(r.is_err());
    }

    #[test]
    fn interpolation_exact_at_knots() {
        let lut = random_lut(1, 3, 4, 5);
        for (i, &a) in lut.aod_grid().iter().enumerate() {
            for (j, &h) in lut.h2o_grid().iter().enumerate() {
                let spec = lut.interpolate(a, h).unwrap();
                for c in 0..5 {
                    let (r, s, t) = lut.knot(i, j, c);
                    assert_eq!(spec.rho_a[c], r);
                    assert_eq!(spec.s[c], s);
                    assert_eq!(spec.t[c], t);
                }
            }
        }
    }

    #[test]
    fn interpolation_cell_midpoint() {
        // Corner values 0, 1, 1, 2 for t.
        let lut = AtmLookupTable::from_fn(vec![0.0, 1.0], vec![0.0, 1.0], vec![500.0], |a, h, _| (0.0, 0.0, a + h))
            .unwrap();
        let spec = lut.interpolate(0.5, 0.5).unwrap();
        assert_eq!(spec.t[0], 1.0);
    }

    #[test]
    fn interpolation_matches_direct_bilinear_formula() {
        let lut = random_lut(7, 3, 3, 4);
        let (qa, qh) = (0.3, 1.7);
        let spec = lut.interpolate(qa, qh).unwrap();
        // Independent evaluation: cell [0.25, 0.5] x [1.5, 2.5].
        let (x0, x1, y0, y1) = (0.25, 0.5, 1.5, 2.5);
        for c in 0..4 {
            let f = |i: usize, j: usize| lut.knot(i, j, c).2;
            let direct = (f(1, 1) * (x1 - qa) * (y1 - qh)
                + f(2, 1) * (qa - x0) * (y1 - qh)
                + f(1, 2) * (x1 - qa) * (qh - y0)
                + f(2, 2) * (qa - x0) * (qh - y0))
                / ((x1 - x0) * (y1 - y0));
            assert!((spec.t[c] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn interpolation_out_of_range_names_parameter() {
        let lut = random_lut(2, 3, 3, 2);
        match lut.interpolate(-0.1, 1.0) {
            Err(RetrievalError::OutOfRange { param, lo, hi, .. }) => {
                assert_eq!(param, "aod");
                assert_eq!((lo, hi), (0.0, 0.5));
            }
            other => panic!("unexpected {other:?}"),
        }
        match lut.interpolate(0.1, 9.0) {
            Err(RetrievalError::OutOfRange { param, .. }) => assert_eq!(param, "h2o"),
            other => panic!("unexpected {other:?}"),
        }
        let (clamped, outside) = lut.interpolate_with(-0.1, 1.0, Boundary::Clamp).unwrap();
        assert!(outside);
        assert_eq!(clamped, lut.interpolate(0.0, 1.0).unwrap());
    }

    #[test]
    fn extrapolation_continues_edge_cell() {
        let lut = AtmLookupTable::from_fn(vec![0.0, 0.5, 1.0], vec![0.0, 1.0], vec![500.0], |a, _, _| {
            (0.1 + 0.2 * a, 0.0, 0.9 - 0.3 * a)
        })
        .unwrap();
        let (spec, outside) = lut.interpolate_with(-0.1, 0.5, Boundary::Extrapolate).unwrap();
        assert!(outside);
        assert!((spec.t[0] - 0.93).abs() < 1e-14);
        assert!((spec.rho_a[0] - 0.08).abs() < 1e-14);
    }

    fn geom(n: usize, phi: f64, e0: f64) -> Geometry {
        Geometry::new(phi, vec![e0; n]).unwrap()
    }

    #[test]
    fn forward_pure_path_radiance() {
        let m = ForwardModel::new(flat_lut(3, 0.05, 0.1, 0.7), geom(3, 0.8, 1.5)).unwrap();
        let y = m.forward(&StateVector::new(vec![0.0; 3], 0.2, 1.0)).unwrap();
        for v in y {
            assert!((v - 0.8 / PI * 1.5 * 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_identity_transmission() {
        let m = ForwardModel::new(flat_lut(3, 0.0, 0.0, 1.0), geom(3, 1.0, PI)).unwrap();
        let x = vec![0.1, 0.37, 0.9];
        let y = m.forward(&StateVector::new(x.clone(), 0.5, 2.0)).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_scalar_evaluation() {
        let m = ForwardModel::new(flat_lut(1, 0.05, 0.2, 0.6), geom(1, 0.8, 1.5)).unwrap();
        let y = m.forward(&StateVector::new(vec![0.4], 0.1, 1.0)).unwrap();
        // 0.8/π · 1.5 · (0.05 + 0.24/0.92)
        let expect = 0.381_971_863_420_549_3 * (0.05 + 0.24 / 0.92);
        assert!((y[0] - expect).abs() < 1e-14, "{} vs {expect}", y[0]);
    }

    #[test]
    fn forward_singularity_reports_channel() {
        let m = ForwardModel::new(flat_lut(3, 0.0, 0.25, 0.7), geom(3, 0.8, 1.0)).unwrap();
        let r = m.forward(&StateVector::new(vec![0.1, 4.0, 0.2], 0.1, 1.0));
        assert!(matches!(r, Err(RetrievalError::Singularity { channel: 1, .. })));
    }

    #[test]
    fn jacobian_zero_albedo_diagonal() {
        let m = ForwardModel::new(flat_lut(4, 0.02, 0.0, 0.8), geom(4, 0.9, 2.0)).unwrap();
        let j = m.jacobian(&StateVector::new(vec![0.3; 4], 0.3, 2.0)).unwrap();
        for i in 0..4 {
            assert!((j[(i, i)] - 0.9 / PI * 2.0 * 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let lut = random_lut(11, 4, 4, 6);
        let m = ForwardModel::new(lut, Geometry::new(0.7, vec![1.0, 1.5, 2.0, 1.2, 0.8, 1.1]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let refl: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            let state = StateVector::new(refl, 0.1 + 0.5 * rng.random::<f64>(), 0.8 + 2.0 * rng.random::<f64>());
            let j = m.jacobian(&state).unwrap();
            for k in 0..6 {
                let h = 1e-6;
                let mut plus = state.clone();
                plus.refl[k] += h;
                let mut minus = state.clone();
                minus.refl[k] -= h;
                let yp = m.forward(&plus).unwrap();
                let ym = m.forward(&minus).unwrap();
                for i in 0..6 {
                    let fd = (yp[i] - ym[i]) / (2.0 * h);
                    let an = j[(i, k)];
                    let err = (fd - an).abs() / an.abs().max(1e-8);
                    assert!(if i == k { err < 1e-5 } else { an == 0.0 && fd.abs() < 1e-9 });
                }
            }
        }
    }

    #[test]
    fn jacobian_atm_columns_recover_linear_slope() {
        // ρ_a linear in aod, t linear in h2o: exact slopes at a knot.
        let wl = vec![500.0, 600.0];
        let lut = AtmLookupTable::from_fn(vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 3.0], wl, |a, h, c| {
            (0.02 + 0.1 * a * (c + 1) as f64, 0.0, 0.9 - 0.1 * h)
        })
        .unwrap();
        let m = ForwardModel::new(lut, Geometry::new(PI / 4.0, vec![4.0, 4.0]).unwrap()).unwrap();
        let state = StateVector::new(vec![0.3, 0.5], 0.5, 2.0);
        let j = m.jacobian(&state).unwrap();
        for c in 0..2 {
            // scale = 1; dy/daod = 0.1(c+1); dy/dh2o = -0.1 x.
            assert!((j[(c, 2)] - 0.1 * (c + 1) as f64).abs() < 1e-10);
            assert!((j[(c, 3)] + 0.1 * state.refl[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_submodel_exact_without_albedo() {
        let m = ForwardModel::new(random_lut_zero_s(), geom(3, 0.6, 1.3)).unwrap();
        let state = StateVector::new(vec![0.2, 0.5, 0.8], 0.3, 1.2);
        let sub = m.linearize_given_atm(0.3, 1.2).unwrap();
        let y = m.forward(&state).unwrap();
        let ylin = sub.apply(&state.refl);
        for (a, b) in y.iter().zip(&ylin) {
            assert!((a - b).abs() < 1e-14);
        }
        let b = sub.apply(&[0.0; 3]);
        assert_eq!(b, sub.b);
    }

    fn random_lut_zero_s() -> AtmLookupTable {
        AtmLookupTable::from_fn(vec![0.0, 0.5], vec![0.5, 2.0], vec![450.0, 550.0, 650.0], |a, h, c| {
            (0.01 + 0.05 * a, 0.0, 0.9 - 0.1 * h - 0.02 * c as f64)
        })
        .unwrap()
    }

    #[test]
    fn linear_submodel_gap_matches_expansion() {
        let m = ForwardModel::new(flat_lut(1, 0.05, 0.2, 0.6), geom(1, 0.8, 1.5)).unwrap();
        let sub = m.linearize_given_atm(0.1, 1.0).unwrap();
        let y = m.forward(&StateVector::new(vec![0.3], 0.1, 1.0)).unwrap()[0];
        let reflected_true = y - sub.b[0];
        let reflected_lin = sub.a_diag[0] * 0.3;
        let gap = (reflected_true - reflected_lin) / reflected_lin;
        assert!((gap - 0.06 / 0.94).abs() < 1e-12);
        assert!((gap - 0.0638).abs() < 1e-4);
    }

    #[test]
    fn linearization_equals_jacobian_at_zero_reflectance() {
        let lut = random_lut(5, 3, 3, 4);
        let m = ForwardModel::new(lut, geom(4, 0.9, 1.7)).unwrap();
        let state = StateVector::new(vec![0.0; 4], 0.33, 1.9);
        let j = m.jacobian(&state).unwrap();
        let sub = m.linearize_given_atm(0.33, 1.9).unwrap();
        for i in 0..4 {
            assert!((j[(i, i)] - sub.a_diag[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn algebraic_inversion_round_trip() {
        let lut = random_lut(8, 3, 3, 4);
        let m = ForwardModel::new(lut, geom(4, 0.9, 1.7)).unwrap();
        let state = StateVector::new(vec![0.1, 0.4, 0.6, 0.25], 0.2, 1.4);
        let y = m.forward(&state).unwrap();
        let x = m.invert_reflectance(&y, 0.2, 1.4, &[true; 4]).unwrap();
        for (a, b) in x.iter().zip(&state.refl) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn forward_monotone_in_reflectance(x in 0.0f64..1.5, dx in 1e-4f64..0.5, aod in 0.0f64..0.5, h2o in 0.5f64..2.5) {
            let lut = random_lut(3, 3, 3, 1);
            let m = ForwardModel::new(lut, geom(1, 0.7, 1.2)).unwrap();
            let y0 = m.forward(&StateVector::new(vec![x], aod, h2o)).unwrap()[0];
            let y1 = m.forward(&StateVector::new(vec![x + dx], aod, h2o)).unwrap()[0];
            prop_assert!(y1 > y0);
        }

        #[test]
        fn analytic_refl_jacobian_agrees_with_fd(refl in proptest::collection::vec(0.0f64..2.0, 4), aod in 0.0f64..0.5, h2o in 0.5f64..2.5) {
            let lut = random_lut(9, 3, 3, 4);
            let m = ForwardModel::new(lut, geom(4, 0.8, 1.0)).unwrap();
            let state = StateVector::new(refl, aod, h2o);
            let spec = m.lut().interpolate(aod, h2o).unwrap();
            prop_assume!(state.refl.iter().zip(&spec.s).all(|(x, s)| x * s <= 0.5));
            let j = m.jacobian(&state).unwrap();
            for k in 0..4 {
                let h = 1e-6 * state.refl[k].max(1e-2);
                let mut p = state.clone();
                p.refl[k] += h;
                let mut q = state.clone();
                q.refl[k] -= h;
                let fd = (m.forward(&p).unwrap()[k] - m.forward(&q).unwrap()[k]) / (2.0 * h);
                prop_assert!((fd - j[(k, k)]).abs() / j[(k, k)] < 1e-5);
            }
        }
    }
}
