//! Benchmark fixtures shared by the criterion targets.

use vswir_core::oe::solve_map;
use vswir_core::pipeline::DemoSpec;
use vswir_core::prior::{assemble_prior, build_noise_cov, default_atm_prior, NoiseModel};
use vswir_core::synth;
use vswir_core::{ForwardModel, GaussianPrior, ObsCovariance, OeOptions, OeResult, StateVector, WavelengthGrid};

pub struct Fixture {
    pub model: ForwardModel,
    pub prior: GaussianPrior,
    pub obs: ObsCovariance,
    pub y: Vec<f64>,
    pub truth: StateVector,
    pub oe: OeResult,
}

/// Noiseless vegetation scene on `n` channels with the demo masked bands.
pub fn fixture(n: usize) -> Fixture {
    let spec = DemoSpec::nonlinear();
    let (lo, hi) = synth::DEMO_RANGE;
    let grid = WavelengthGrid::uniform(n, lo, hi)
        .unwrap()
        .with_masked_bands(&synth::DEMO_MASKED_BANDS);
    let model = synth::demo_model(&grid, true).unwrap();
    let comp = synth::terrain_component(&spec.terrain, grid.wavelengths()).unwrap();
    let (atm_mean, atm_cov) = default_atm_prior();
    let prior = assemble_prior(&comp, atm_mean, &atm_cov).unwrap();
    let truth = StateVector::new(comp.mean.clone(), 0.1, spec.atm_true[1]);
    let y = model.forward(&truth).unwrap();
    let noise = NoiseModel::with_rt_fraction(500.0, 0.01, synth::DEMO_RT_ERROR_FRAC, &y).unwrap();
    let obs = build_noise_cov(&y, &noise, grid.mask()).unwrap();
    let oe = solve_map(&y, &prior, &obs, &model, &OeOptions::default()).unwrap();
    Fixture {
        model,
        prior,
        obs,
        y,
        truth,
        oe,
    }
}
