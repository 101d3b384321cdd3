//! Synthetic lookup tables, surface priors and scenes for testing and demos.
//!
//! The atmosphere is a toy two-stream model: Rayleigh and Ångström aerosol
//! optical depths plus Gaussian water-vapour bands. It is smooth and has
//! the right qualitative shape, nothing more.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RetrievalError};
use crate::linalg::{sample_mvn, SpdMatrix};
use crate::model::{AtmLookupTable, ForwardModel, Geometry, StateVector, WavelengthGrid};
use crate::prior::{build_noise_cov, MixtureComponent, NoiseModel};

pub const DEMO_CHANNELS: usize = 64;
pub const DEMO_RANGE: (f64, f64) = (380.0, 2500.0);
/// Approximate deep water-absorption gaps excluded from the fit.
pub const DEMO_MASKED_BANDS: [(f64, f64); 2] = [(1350.0, 1450.0), (1800.0, 1950.0)];
/// Cosine of a 30° solar zenith.
pub const DEMO_COS_SZA: f64 = 0.866_025_403_784_438_6;

/// Water-vapour absorption bands `(centre nm, strength per cm, width nm)`.
const WATER_BANDS: [(f64, f64, f64); 6] = [
    (720.0, 0.01, 10.0),
    (820.0, 0.02, 15.0),
    (940.0, 0.12, 25.0),
    (1140.0, 0.15, 30.0),
    (1380.0, 1.2, 45.0),
    (1880.0, 1.6, 55.0),
];

/// Surface prior sd is `PRIOR_SD_FRACTION · mean + PRIOR_SD_OFFSET`.
pub const PRIOR_SD_FRACTION: f64 = 0.2;
pub const PRIOR_SD_OFFSET: f64 = 0.01;
/// Correlation length of the squared-exponential surface covariance.
pub const PRIOR_CORR_LENGTH_NM: f64 = 300.0;
pub const PRIOR_NUGGET: f64 = 1e-6;
/// Radiative-transfer model error of the bundled scenes, as a fraction of
/// radiance (standard deviation).
pub const DEMO_RT_ERROR_FRAC: f64 = 0.05;

pub fn default_aod_grid() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0]
}

pub fn default_h2o_grid() -> Vec<f64> {
    vec![0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0]
}

pub fn demo_grid() -> WavelengthGrid {
    WavelengthGrid::uniform(DEMO_CHANNELS, DEMO_RANGE.0, DEMO_RANGE.1)
        .expect("demo range is valid")
        .with_masked_bands(&DEMO_MASKED_BANDS)
}

/// Top-of-atmosphere solar irradiance: a 5778 K blackbody scaled to peak
/// near 190 µW cm⁻² nm⁻¹.
pub fn solar_irradiance(wavelengths: &[f64]) -> Vec<f64> {
    const C2: f64 = 1.438_776_877e7; // nm·K
    let planck = |wl: f64| wl.powi(-5) / ((C2 / (wl * 5778.0)).exp() - 1.0);
    let peak = planck(501.5);
    wavelengths.iter().map(|&wl| 190.0 * planck(wl) / peak).collect()
}

pub fn demo_geometry(wavelengths: &[f64]) -> Geometry {
    Geometry::new(DEMO_COS_SZA, solar_irradiance(wavelengths)).expect("positive irradiance")
}

/// Toy optical properties `(ρ_a, s, t)` at one wavelength.
pub fn atm_optics(wl: f64, aod: f64, h2o: f64) -> (f64, f64, f64) {
    let um = wl / 1000.0;
    let tau_r = 0.0088 * um.powf(-4.05);
    let tau_a = aod * (wl / 550.0).powf(-1.3);
    let tau_w = h2o
        * WATER_BANDS
            .iter()
            .map(|(c, k, w)| k * (-0.5 * ((wl - c) / w).powi(2)).exp())
            .sum::<f64>();
    let airmass = 1.0 / DEMO_COS_SZA + 1.0;
    let t = (-airmass * (0.5 * tau_r + 0.3 * tau_a + tau_w)).exp();
    let rho_a = (0.5 * tau_r + 0.1 * tau_a) / airmass * (-0.5 * tau_w).exp();
    let s = 0.25 * (1.0 - (-(tau_r + tau_a)).exp());
    (rho_a, s, t)
}

/// LUT from the toy model. With `spherical_albedo = false` the table has
/// `s ≡ 0`, making radiance linear in reflectance.
pub fn synthetic_lut(
    wavelengths: &[f64],
    aod_grid: Vec<f64>,
    h2o_grid: Vec<f64>,
    spherical_albedo: bool,
) -> Result<AtmLookupTable> {
    let wl = wavelengths.to_vec();
    AtmLookupTable::from_fn(aod_grid, h2o_grid, wavelengths.to_vec(), |a, h, c| {
        let (rho, s, t) = atm_optics(wl[c], a, h);
        (rho, if spherical_albedo { s } else { 0.0 }, t)
    })
}

pub fn demo_model(grid: &WavelengthGrid, spherical_albedo: bool) -> Result<ForwardModel> {
    let lut = synthetic_lut(grid.wavelengths(), default_aod_grid(), default_h2o_grid(), spherical_albedo)?;
    ForwardModel::new(lut, demo_geometry(grid.wavelengths()))
}

fn gauss(x: f64, c: f64, w: f64) -> f64 {
    (-0.5 * ((x - c) / w).powi(2)).exp()
}

fn water_dips(wl: f64, depth: f64) -> f64 {
    1.0 - depth * (0.4 * gauss(wl, 1450.0, 60.0) + 0.5 * gauss(wl, 1940.0, 80.0))
}

/// Mean reflectance of a bundled surface type.
pub fn terrain_mean(label: &str, wl: f64) -> Option<f64> {
    let r = match label {
        "vegetation" => {
            let vis = 0.04 + 0.05 * gauss(wl, 550.0, 35.0);
            let edge = 0.42 / (1.0 + (-(wl - 715.0) / 12.0).exp());
            let decay = if wl < 1100.0 { 1.0 } else { (-(wl - 1100.0) / 1200.0).exp() };
            (vis + edge * decay) * water_dips(wl, 1.0)
        }
        "soil" => {
            let base = 0.08 + 0.25 * (1.0 - (-(wl - 380.0) / 600.0).exp());
            base * (1.0 - 0.1 * gauss(wl, 2200.0, 30.0)) * water_dips(wl, 0.3)
        }
        "urban" => (0.12 + 0.03 * (wl - 380.0) / 2120.0) * water_dips(wl, 0.15),
        _ => return None,
    };
    Some(r.clamp(0.005, 0.95))
}

pub const TERRAINS: [&str; 3] = ["vegetation", "soil", "urban"];

/// Prior for one surface type: squared-exponential covariance in
/// wavelength plus a small nugget.
pub fn terrain_component(label: &str, wavelengths: &[f64]) -> Result<MixtureComponent> {
    let mean = wavelengths
        .iter()
        .map(|&wl| terrain_mean(label, wl))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| RetrievalError::Input(format!("unknown terrain {label:?}")))?;
    let n = wavelengths.len();
    let sd: Vec<f64> = mean.iter().map(|m| PRIOR_SD_FRACTION * m + PRIOR_SD_OFFSET).collect();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let d = wavelengths[i] - wavelengths[j];
        let nugget = if i == j { PRIOR_NUGGET } else { 0.0 };
        sd[i] * sd[j] * (-0.5 * (d / PRIOR_CORR_LENGTH_NM).powi(2)).exp() + nugget
    });
    MixtureComponent::new(label, mean, SpdMatrix::from_symmetrized(cov)?)
}

pub fn surface_components(wavelengths: &[f64]) -> Result<Vec<MixtureComponent>> {
    TERRAINS.iter().map(|t| terrain_component(t, wavelengths)).collect()
}

/// Noise model of the bundled scenes: SNR 500, 1% calibration and a
/// model-error term of `DEMO_RT_ERROR_FRAC` of the reference radiance.
pub fn demo_noise(reference_radiance: &[f64]) -> NoiseModel {
    NoiseModel::with_rt_fraction(500.0, 0.01, DEMO_RT_ERROR_FRAC, reference_radiance)
        .expect("valid demo noise parameters")
}

/// A synthetic observation with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub terrain: String,
    pub wavelengths: Vec<f64>,
    pub mask: Vec<bool>,
    pub y_obs: Vec<f64>,
    pub x_true: StateVector,
}

/// Draws a reflectance from the terrain component (clipped to `[0, 1]`),
/// runs the forward model at `atm_true`, and adds Gaussian noise with the
/// variances `noise` assigns to the noiseless radiance.
pub fn generate_synthetic_scene(
    model: &ForwardModel,
    grid: &WavelengthGrid,
    components: &[MixtureComponent],
    terrain: &str,
    atm_true: [f64; 2],
    noise: Option<&NoiseModel>,
    seed: u64,
) -> Result<Scene> {
    let comp = components
        .iter()
        .find(|c| c.label == terrain)
        .ok_or_else(|| RetrievalError::Input(format!("unknown terrain {terrain:?}")))?;
    if grid.len() != model.n_channels() || comp.mean.len() != grid.len() {
        return Err(RetrievalError::Dimension("scene grid, model and prior differ in size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = nalgebra::DVector::from_column_slice(&comp.mean);
    let refl: Vec<f64> = sample_mvn(&mean, &comp.cov, &mut rng)?
        .iter()
        .map(|r| r.clamp(0.0, 1.0))
        .collect();
    let x_true = StateVector::new(refl, atm_true[0], atm_true[1]);
    let mut y_obs = model.forward(&x_true)?;
    if let Some(noise) = noise {
        let cov = build_noise_cov(&y_obs, noise, &vec![true; y_obs.len()])?;
        for (y, v) in y_obs.iter_mut().zip(cov.variances()) {
            *y += v.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Scene {
        terrain: terrain.to_string(),
        wavelengths: grid.wavelengths().to_vec(),
        mask: grid.mask().to_vec(),
        y_obs,
        x_true,
    })
}
