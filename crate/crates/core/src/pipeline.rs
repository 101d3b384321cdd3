//! End-to-end retrieval driver: configuration, OE, MCMC and the report bundle.
//!
//! # Configuration
//!
//! Configs are TOML key-value files. Relative paths are resolved against the
//! directory holding the config file.
//!
//! ```toml
//! mode = "compare"              # oe_only | mcmc_only | compare
//! radiance = "radiance.csv"     # wavelength_nm,value (+ radiance.mask.csv)
//! lut = "lut.vsw"
//! components = "components.vsw"
//! output = "out"
//! cos_solar_zenith = 0.866
//! # irradiance = "e0.csv"       # optional; else taken from the LUT file
//! # truth = "truth.json"        # optional scene file with x_true
//! # oe_result = "out/oe.json"   # mcmc_only: OE result to start from
//!
//! [noise]
//! snr = 500.0
//! calib_frac = 0.01
//! rt_model_frac = 0.05
//!
//! [atm_prior]
//! mean = [0.2, 1.5]
//! var = [1.0, 1.0]
//!
//! [oe]
//! max_iter = 200
//! boundary = "extrapolate"      # strict | clamp | extrapolate
//!
//! [mcmc]
//! n_samples = 200000
//! burn_in = 20000
//! thin = 10
//! eps2 = 0.11
//! seed = 1
//!
//! [report]
//! hist_bins = [40, 40]
//! tune = false
//! ```
//!
//! # Report bundle
//!
//! `summary.json` (schema in `schema/summary.schema.json`), `manifest.json`,
//! and the CSV files `trace`, `ess`, `variance`, `quotient`, `qq_aod`,
//! `qq_h2o`, `ks` and `atm_hist`. OE writes `oe.json` + `oe_cov.vsw`; MCMC
//! writes `chain.json`, `chain.bin` and `chain.logpost.bin`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    atm_histogram, cov_compare, eigen_quotient, ess, ks_normality, posterior_summary, qq_data,
    sample_covariance, CovCompare, EssSummary, KsNull, KsResult, NullFamily,
};
use crate::error::{Result, RetrievalError};
use crate::io::{self, Spectrum};
use crate::linalg::SpdMatrix;
use crate::mcmc::{run_chain, tune_refl_scale, Chain, McmcConfig, ReflProposal, TuneReport};
use crate::model::{Boundary, ForwardModel, Geometry, StateVector, WavelengthGrid};
use crate::oe::{solve_map, OeOptions, OeResult};
use crate::posterior::Posterior;
use crate::prior::{
    assemble_prior, build_noise_cov, select_component, GaussianPrior, MixtureComponent, NoiseModel, ObsCovariance,
};
use crate::synth;

pub const SCHEMA_VERSION: &str = "1";

/// JSON schema of `summary.json`.
pub const SUMMARY_SCHEMA: &str = include_str!("../schema/summary.schema.json");

const WAVELENGTH_TOL: f64 = 1e-6;
const KS_LEVEL: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OeOnly,
    McmcOnly,
    #[default]
    Compare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub snr: f64,
    pub calib_frac: f64,
    /// Radiative-transfer model error as a fraction of observed radiance (sd).
    pub rt_model_frac: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            snr: 500.0,
            calib_frac: 0.01,
            rt_model_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtmPriorConfig {
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl Default for AtmPriorConfig {
    fn default() -> Self {
        AtmPriorConfig {
            mean: [0.2, 1.5],
            var: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OeConfig {
    pub max_iter: usize,
    pub rel_cost_tol: f64,
    pub grad_tol: f64,
    pub initial_damping: f64,
    pub boundary: Boundary,
}

impl Default for OeConfig {
    fn default() -> Self {
        let o = OeOptions::default();
        OeConfig {
            max_iter: o.max_iter,
            rel_cost_tol: o.rel_cost_tol,
            grad_tol: o.grad_tol,
            initial_damping: o.initial_damping,
            boundary: o.boundary,
        }
    }
}

impl OeConfig {
    pub fn options(&self) -> OeOptions {
        OeOptions {
            max_iter: self.max_iter,
            rel_cost_tol: self.rel_cost_tol,
            grad_tol: self.grad_tol,
            initial_damping: self.initial_damping,
            boundary: self.boundary,
            initial: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Bins of the 2-D atmospheric histogram, `[aod, h2o]`.
    pub hist_bins: [usize; 2],
    /// Fraction of Q-Q points counted as the upper tail.
    pub qq_tail_frac: f64,
    /// Tune the reflectance proposal scale before the main chain.
    pub tune: bool,
    pub tune_target: f64,
    pub tune_rounds: usize,
    pub tune_pilot: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            hist_bins: [40, 40],
            qq_tail_frac: 0.05,
            tune: false,
            tune_target: 0.234,
            tune_rounds: 8,
            tune_pilot: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default)]
    pub mode: Mode,
    pub radiance: PathBuf,
    pub lut: PathBuf,
    pub components: PathBuf,
    pub output: PathBuf,
    pub cos_solar_zenith: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irradiance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oe_result: Option<PathBuf>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub atm_prior: AtmPriorConfig,
    #[serde(default)]
    pub oe: OeConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub report: ReportConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn toml_error(origin: &str, text: &str, e: &toml::de::Error) -> RetrievalError {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    RetrievalError::Parse {
        path: origin.to_string(),
        line,
        msg: e.message().to_string(),
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RetrievalError::Input(format!("bad config key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| RetrievalError::Input(format!("config key {p:?} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl RetrievalConfig {
    /// Parses config text; `overrides` are `key=value` pairs with dotted keys
    /// (`mcmc.seed=3`) applied on top.
    pub fn parse(text: &str, origin: &str, base_dir: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_error(origin, text, &e))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v)?;
        }
        let mut cfg: RetrievalConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| RetrievalError::Input(format!("{origin}: {}", e.message())))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &path.display().to_string(), &base, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cos_solar_zenith > 0.0 && self.cos_solar_zenith <= 1.0) {
            return Err(RetrievalError::Input(format!(
                "cos_solar_zenith must lie in (0, 1], got {}",
                self.cos_solar_zenith
            )));
        }
        let n = &self.noise;
        if !(n.snr > 0.0) || !(n.calib_frac >= 0.0) || !(n.rt_model_frac >= 0.0) {
            return Err(RetrievalError::Input("noise: snr must be positive, fractions nonnegative".into()));
        }
        if self.atm_prior.var.iter().any(|v| !(*v > 0.0)) {
            return Err(RetrievalError::Input("atm_prior.var must be positive".into()));
        }
        let r = &self.report;
        if r.hist_bins.contains(&0) || !(r.qq_tail_frac > 0.0 && r.qq_tail_frac <= 1.0) {
            return Err(RetrievalError::Input("report: hist_bins > 0 and qq_tail_frac in (0, 1]".into()));
        }
        if r.tune && (r.tune_rounds == 0 || r.tune_pilot == 0 || !(r.tune_target > 0.0 && r.tune_target < 1.0)) {
            return Err(RetrievalError::Input("report: bad tuning settings".into()));
        }
        self.mcmc.validate()
    }

    /// SHA-256 of the canonical JSON form, excluding the output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }
}

/// Loaded inputs of one retrieval.
#[derive(Clone, Debug)]
pub struct Problem {
    pub grid: WavelengthGrid,
    pub y_obs: Vec<f64>,
    pub model: ForwardModel,
    pub components: Vec<MixtureComponent>,
    pub truth: Option<StateVector>,
}

fn same_wavelengths(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= WAVELENGTH_TOL * x.abs().max(1.0))
}

fn read_truth(path: &Path) -> Result<StateVector> {
    let v: serde_json::Value = io::read_json(path)?;
    let state = v.get("x_true").cloned().unwrap_or(v);
    serde_json::from_value(state).map_err(|e| RetrievalError::Format(format!("{}: {e}", path.display())))
}

pub fn load_problem(cfg: &RetrievalConfig) -> Result<Problem> {
    let spectrum = io::load_spectrum(&cfg.resolve(&cfg.radiance))?;
    let grid = spectrum.grid()?;
    let lut_file = io::read_lut(&cfg.resolve(&cfg.lut))?;
    if !same_wavelengths(lut_file.lut.wavelengths(), grid.wavelengths()) {
        return Err(RetrievalError::Input("LUT wavelengths differ from the radiance grid".into()));
    }
    let e0 = match &cfg.irradiance {
        Some(p) => {
            let s = io::load_spectrum(&cfg.resolve(p))?;
            if !same_wavelengths(&s.wavelengths, grid.wavelengths()) {
                return Err(RetrievalError::Input("irradiance wavelengths differ from the radiance grid".into()));
            }
            s.values
        }
        None => lut_file
            .solar_irradiance
            .ok_or_else(|| RetrievalError::Input("no irradiance: set `irradiance` or use a LUT that stores it".into()))?,
    };
    let model = ForwardModel::new(lut_file.lut, Geometry::new(cfg.cos_solar_zenith, e0)?)?;
    let (cwl, components) = io::read_components(&cfg.resolve(&cfg.components))?;
    if !same_wavelengths(&cwl, grid.wavelengths()) {
        return Err(RetrievalError::Input("component wavelengths differ from the radiance grid".into()));
    }
    let truth = cfg.truth.as_ref().map(|p| read_truth(&cfg.resolve(p))).transpose()?;
    if let Some(t) = &truth {
        if t.n_channels() != grid.len() {
            return Err(RetrievalError::Dimension("truth state vs radiance grid".into()));
        }
    }
    Ok(Problem {
        grid,
        y_obs: spectrum.values,
        model,
        components,
        truth,
    })
}

/// Prior and noise chosen for one observation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub prior: GaussianPrior,
    pub obs: ObsCovariance,
    pub noise: NoiseModel,
    pub component: usize,
    pub mahalanobis_sq: Vec<f64>,
    /// Algebraic reflectance inversion at the prior atmosphere.
    pub x0_refl: Vec<f64>,
}

impl Prepared {
    pub fn posterior<'a>(&'a self, problem: &'a Problem) -> Result<Posterior<'a>> {
        Posterior::new(&problem.model, &self.prior, &self.obs, &problem.y_obs)
    }
}

/// Inverts at the prior atmosphere, picks the nearest surface component,
/// and builds the prior and observation covariance.
pub fn prepare(problem: &Problem, cfg: &RetrievalConfig) -> Result<Prepared> {
    let [aod0, h2o0] = cfg.atm_prior.mean;
    let x0 = problem
        .model
        .invert_reflectance(&problem.y_obs, aod0, h2o0, problem.grid.mask())?;
    let (component, dists) = select_component(&problem.components, &x0)?;
    let atm_cov = SpdMatrix::from_diagonal(&cfg.atm_prior.var)?;
    let prior = assemble_prior(&problem.components[component], cfg.atm_prior.mean, &atm_cov)?;
    let n = &cfg.noise;
    let noise = NoiseModel::with_rt_fraction(n.snr, n.calib_frac, n.rt_model_frac, &problem.y_obs)?;
    let obs = build_noise_cov(&problem.y_obs, &noise, problem.grid.mask())?;
    Ok(Prepared {
        prior,
        obs,
        noise,
        component,
        mahalanobis_sq: dists,
        x0_refl: x0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceReport {
    pub label: String,
    pub index: usize,
    pub labels: Vec<String>,
    pub mahalanobis_sq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OeReport {
    pub converged: bool,
    pub termination: crate::oe::Termination,
    pub iterations: usize,
    pub final_cost: f64,
    pub grad_norm: f64,
    pub outside_grid_queries: usize,
    pub aod: f64,
    pub h2o: f64,
    /// The MAP has a negative atmospheric coordinate.
    pub negative_atm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcReport {
    pub n_kept: usize,
    pub seed: u64,
    pub refl_proposal: ReflProposal,
    pub refl_scale: f64,
    pub atm_acceptance: f64,
    pub refl_acceptance: f64,
    pub overall_acceptance: f64,
    pub truncation_fallbacks: u64,
    pub start_projected: bool,
    pub min_aod: f64,
    pub min_h2o: f64,
    pub tuning: Option<TuneReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssSection {
    pub n: usize,
    pub summary: EssSummary,
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuotientSection {
    pub n_reliable: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmGaussianity {
    pub mean: f64,
    pub sd: f64,
    pub ks_normal: KsResult,
    pub ks_truncated: KsResult,
    pub qq_tail_normal: f64,
    pub qq_tail_truncated: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianitySection {
    pub aod: AtmGaussianity,
    pub h2o: AtmGaussianity,
    pub ks_level: f64,
    /// Reflectance channels whose KS normality p-value is below `ks_level`.
    pub refl_rejected: usize,
    pub refl_min_p: f64,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: String,
    pub mode: Mode,
    pub status: Status,
    pub error: Option<String>,
    pub n_channels: usize,
    pub n_retained: usize,
    pub surface: Option<SurfaceReport>,
    pub oe: Option<OeReport>,
    pub mcmc: Option<McmcReport>,
    pub ess: Option<EssSection>,
    pub covariance: Option<CovCompare>,
    pub quotient: Option<QuotientSection>,
    pub gaussianity: Option<GaussianitySection>,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
}

impl ReportSummary {
    fn new(mode: Mode, grid: Option<&WavelengthGrid>) -> Self {
        ReportSummary {
            schema_version: SCHEMA_VERSION.into(),
            mode,
            status: Status::Complete,
            error: None,
            n_channels: grid.map_or(0, |g| g.len()),
            n_retained: grid.map_or(0, |g| g.retained().len()),
            surface: None,
            oe: None,
            mcmc: None,
            ess: None,
            covariance: None,
            quotient: None,
            gaussianity: None,
            warnings: Vec::new(),
            files: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub tool: String,
    pub version: String,
    pub mode: Mode,
    pub status: Status,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// SHA-256 of every file in the bundle except the manifest.
    pub files: BTreeMap<String, String>,
}

/// Result of a pipeline run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: ReportSummary,
    pub oe: Option<OeResult>,
    pub chain: Option<Chain>,
}

struct Bundle {
    dir: PathBuf,
    summary: ReportSummary,
}

impl Bundle {
    fn file(&mut self, name: &str) -> PathBuf {
        if !self.summary.files.iter().any(|f| f == name) {
            self.summary.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.file(name);
        let err = |e: csv::Error| RetrievalError::Format(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    fn finish(mut self, cfg: &RetrievalConfig) -> Result<ReportSummary> {
        let path = self.file("summary.json");
        io::write_json(&path, &self.summary)?;
        let mut files = BTreeMap::new();
        for f in &self.summary.files {
            let bytes = std::fs::read(self.dir.join(f))?;
            files.insert(f.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        let mut config = serde_json::to_value(cfg)?;
        if let Some(m) = config.as_object_mut() {
            m.remove("output");
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION.into(),
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            mode: self.summary.mode,
            status: self.summary.status,
            seed: cfg.mcmc.seed,
            config_sha256: cfg.hash(),
            config,
            files,
        };
        io::write_json(&self.dir.join("manifest.json"), &manifest)?;
        Ok(self.summary)
    }

    /// Records the failure and writes what exists so far.
    fn fail(mut self, cfg: &RetrievalConfig, err: RetrievalError) -> RetrievalError {
        self.summary.status = Status::Failed;
        self.summary.error = Some(err.to_string());
        if let Err(e) = self.finish(cfg) {
            log::error!("could not write partial report: {e}");
        }
        err
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn param_names(grid: &WavelengthGrid) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = grid
        .wavelengths()
        .iter()
        .map(|w| ("refl".to_string(), w.to_string()))
        .collect();
    v.push(("aod".into(), String::new()));
    v.push(("h2o".into(), String::new()));
    v
}

fn oe_report(oe: &OeResult) -> OeReport {
    OeReport {
        converged: oe.converged,
        termination: oe.termination,
        iterations: oe.iterations,
        final_cost: oe.cost_trace.last().copied().unwrap_or(f64::NAN),
        grad_norm: oe.grad_norm,
        outside_grid_queries: oe.outside_grid_queries,
        aod: oe.x_map.aod,
        h2o: oe.x_map.h2o,
        negative_atm: oe.x_map.aod < 0.0 || oe.x_map.h2o < 0.0,
    }
}

fn surface_report(problem: &Problem, prep: &Prepared) -> SurfaceReport {
    SurfaceReport {
        label: problem.components[prep.component].label.clone(),
        index: prep.component,
        labels: problem.components.iter().map(|c| c.label.clone()).collect(),
        mahalanobis_sq: prep.mahalanobis_sq.clone(),
    }
}

/// Runs the configured mode and writes the bundle into the output directory.
pub fn run(cfg: &RetrievalConfig) -> Result<RunOutput> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    let problem = load_problem(cfg)?;
    let prep = prepare(&problem, cfg)?;
    let mut bundle = Bundle {
        dir: dir.clone(),
        summary: ReportSummary::new(cfg.mode, Some(&problem.grid)),
    };
    bundle.summary.surface = Some(surface_report(&problem, &prep));
    let label = problem.components[prep.component].label.clone();

    let oe = match cfg.mode {
        Mode::OeOnly | Mode::Compare => {
            log::info!("OE with surface component {label}");
            let oe = match solve_map(&problem.y_obs, &prep.prior, &prep.obs, &problem.model, &cfg.oe.options()) {
                Ok(oe) => oe,
                Err(e) => return Err(bundle.fail(cfg, e)),
            };
            bundle.file("oe.json");
            bundle.file("oe_cov.vsw");
            io::write_oe_result(&dir, "oe", &oe, Some(&label))?;
            bundle.summary.oe = Some(oe_report(&oe));
            if !oe.converged && cfg.mode == Mode::Compare && !cfg.mcmc.allow_unconverged {
                let e = RetrievalError::Diverged {
                    iterations: oe.iterations,
                    reason: format!("OE stopped with {:?}", oe.termination),
                };
                return Err(bundle.fail(cfg, e));
            }
            oe
        }
        Mode::McmcOnly => {
            let (oe, _) = io::read_oe_result(&oe_source(cfg))?;
            if oe.x_map.n_channels() != problem.grid.len() {
                return Err(RetrievalError::Dimension("OE result vs radiance grid".into()));
            }
            bundle.summary.oe = Some(oe_report(&oe));
            oe
        }
    };

    if cfg.mode == Mode::OeOnly {
        let summary = bundle.finish(cfg)?;
        return Ok(RunOutput {
            summary,
            oe: Some(oe),
            chain: None,
        });
    }

    let post = prep.posterior(&problem)?;
    let mut mcfg = cfg.mcmc.clone();
    let mut tuning = None;
    if cfg.report.tune {
        let r = &cfg.report;
        let t = match tune_refl_scale(&post, &oe, &mcfg, r.tune_target, r.tune_rounds, r.tune_pilot) {
            Ok(t) => t,
            Err(e) => return Err(bundle.fail(cfg, e)),
        };
        log::info!("tuned reflectance proposal scale to {:.4}", t.scale);
        match mcfg.refl_proposal {
            ReflProposal::Laplace => mcfg.eps2 = t.scale,
            ReflProposal::LinearInversion => mcfg.eps1 = t.scale,
        }
        tuning = Some(t);
    }
    log::info!("MCMC: {} iterations, keeping {}", mcfg.n_samples, mcfg.kept());
    let chain = match run_chain(&post, &oe, &mcfg) {
        Ok(c) => c,
        Err(e) => return Err(bundle.fail(cfg, e)),
    };
    for f in ["chain.json", "chain.bin", "chain.logpost.bin"] {
        bundle.file(f);
    }
    io::write_chain(&dir, "chain", &chain)?;
    if let Err(e) = diagnose(&mut bundle, cfg, &problem, &prep, &oe, &chain, tuning) {
        return Err(bundle.fail(cfg, e));
    }
    let summary = bundle.finish(cfg)?;
    Ok(RunOutput {
        summary,
        oe: Some(oe),
        chain: Some(chain),
    })
}

/// OE result read by `mcmc_only` runs.
fn oe_source(cfg: &RetrievalConfig) -> PathBuf {
    cfg.oe_result
        .as_ref()
        .map(|p| cfg.resolve(p))
        .unwrap_or_else(|| cfg.output_dir().join("oe.json"))
}

/// Rebuilds the report from the OE result and chain already in the output
/// directory, without sampling.
pub fn rebuild_report(cfg: &RetrievalConfig) -> Result<ReportSummary> {
    let dir = cfg.output_dir();
    let problem = load_problem(cfg)?;
    let prep = prepare(&problem, cfg)?;
    let oe_path = if cfg.mode == Mode::McmcOnly { oe_source(cfg) } else { dir.join("oe.json") };
    let (oe, _) = io::read_oe_result(&oe_path)?;
    let chain = io::read_chain(&dir.join("chain.json"))?;
    if chain.n_channels() != problem.grid.len() || oe.x_map.n_channels() != problem.grid.len() {
        return Err(RetrievalError::Dimension("stored results vs radiance grid".into()));
    }
    let mut bundle = Bundle {
        dir,
        summary: ReportSummary::new(cfg.mode, Some(&problem.grid)),
    };
    bundle.summary.surface = Some(surface_report(&problem, &prep));
    bundle.summary.oe = Some(oe_report(&oe));
    // In mcmc_only mode the OE files are inputs, not part of the bundle.
    if cfg.mode != Mode::McmcOnly {
        bundle.file("oe.json");
        bundle.file("oe_cov.vsw");
    }
    for f in ["chain.json", "chain.bin", "chain.logpost.bin"] {
        bundle.file(f);
    }
    diagnose(&mut bundle, cfg, &problem, &prep, &oe, &chain, None)?;
    bundle.finish(cfg)
}

fn atm_gaussianity(series: &[f64], tail: f64) -> Result<(AtmGaussianity, Vec<Vec<String>>)> {
    let normal = KsNull::normal();
    let trunc = KsNull::truncated();
    let ks_n = ks_normality(series, &normal)?;
    let ks_t = ks_normality(series, &trunc)?;
    let qn = qq_data(series, &normal)?;
    let qt = qq_data(series, &trunc)?;
    let n = series.len() as f64;
    let rows = qn
        .points
        .iter()
        .zip(&qt.points)
        .enumerate()
        .map(|(k, ((tn, s), (tt, _)))| {
            vec![
                ((k as f64 + 0.5) / n).to_string(),
                s.to_string(),
                tn.to_string(),
                tt.to_string(),
            ]
        })
        .collect();
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((
        AtmGaussianity {
            mean,
            sd: var.sqrt(),
            ks_normal: ks_n,
            ks_truncated: ks_t,
            qq_tail_normal: qn.upper_tail_deviation(tail),
            qq_tail_truncated: qt.upper_tail_deviation(tail),
        },
        rows,
    ))
}

fn family_name(f: NullFamily) -> &'static str {
    match f {
        NullFamily::Normal => "normal",
        NullFamily::TruncatedNormalAtZero => "truncated_normal",
    }
}

fn diagnose(
    bundle: &mut Bundle,
    cfg: &RetrievalConfig,
    problem: &Problem,
    prep: &Prepared,
    oe: &OeResult,
    chain: &Chain,
    tuning: Option<TuneReport>,
) -> Result<()> {
    let n = problem.grid.len();
    let names = param_names(&problem.grid);
    let (aod, h2o) = (chain.column(n), chain.column(n + 1));
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    bundle.summary.mcmc = Some(McmcReport {
        n_kept: chain.len(),
        seed: chain.config.seed,
        refl_proposal: chain.config.refl_proposal,
        refl_scale: match chain.config.refl_proposal {
            ReflProposal::Laplace => chain.config.eps2,
            ReflProposal::LinearInversion => chain.config.eps1,
        },
        atm_acceptance: chain.accept.atm_rate(),
        refl_acceptance: chain.accept.refl_rate(),
        overall_acceptance: chain.accept.overall_rate(),
        truncation_fallbacks: chain.truncation_fallbacks,
        start_projected: chain.init.projected,
        min_aod: min(&aod),
        min_h2o: min(&h2o),
        tuning,
    });

    bundle.csv(
        "trace.csv",
        &["sample", "log_posterior", "aod", "h2o"],
        chain
            .log_posterior_trace()
            .iter()
            .zip(aod.iter().zip(&h2o))
            .enumerate()
            .map(|(k, (lp, (a, h)))| vec![k.to_string(), lp.to_string(), a.to_string(), h.to_string()]),
    )?;

    let e = ess(chain)?;
    bundle.csv(
        "ess.csv",
        &["parameter", "wavelength_nm", "tau", "ess", "degenerate"],
        names.iter().enumerate().map(|(i, (p, w))| {
            vec![
                p.clone(),
                w.clone(),
                e.tau[i].to_string(),
                e.ess[i].to_string(),
                e.degenerate[i].to_string(),
            ]
        }),
    )?;
    bundle.summary.ess = Some(EssSection {
        n: e.n,
        summary: e.summary.clone(),
        degenerate: e.degenerate.iter().filter(|d| **d).count(),
    });

    let x_map = oe.x_map.to_vector();
    let truth = problem.truth.as_ref().map(|t| t.to_vector());
    let vs_map = posterior_summary(chain, Some(x_map.as_slice()))?;
    let vs_truth = truth.as_ref().map(|t| posterior_summary(chain, Some(t.as_slice()))).transpose()?;
    let gl = oe.gamma_laplace.matrix();
    let gp = prep.prior.cov().matrix();
    bundle.csv(
        "variance.csv",
        &[
            "parameter",
            "wavelength_nm",
            "retained",
            "map",
            "mcmc_mean",
            "mcmc_var",
            "laplace_var",
            "prior_var",
            "rel_diff_map",
            "truth",
            "rel_diff_truth",
        ],
        names.iter().enumerate().map(|(i, (p, w))| {
            let retained = i >= n || problem.grid.mask()[i];
            vec![
                p.clone(),
                w.clone(),
                retained.to_string(),
                x_map[i].to_string(),
                vs_map[i].mean.to_string(),
                vs_map[i].variance.to_string(),
                gl[(i, i)].to_string(),
                gp[(i, i)].to_string(),
                fmt_opt(vs_map[i].rel_diff),
                fmt_opt(truth.as_ref().map(|t| t[i])),
                fmt_opt(vs_truth.as_ref().and_then(|v| v[i].rel_diff)),
            ]
        }),
    )?;

    match sample_covariance(chain) {
        Ok(gm) => {
            let cmp = cov_compare(&gm, &oe.gamma_laplace, prep.prior.cov())?;
            bundle.summary.covariance = Some(cmp);
            let q = eigen_quotient(&gm, &oe.gamma_laplace)?;
            bundle.csv(
                "quotient.csv",
                &["rank", "lambda", "quotient", "reliable"],
                q.iter().enumerate().map(|(k, e)| {
                    vec![
                        (k + 1).to_string(),
                        e.lambda.to_string(),
                        e.quotient.to_string(),
                        e.reliable.to_string(),
                    ]
                }),
            )?;
            let mut rel: Vec<f64> = q.iter().filter(|e| e.reliable).map(|e| e.quotient).collect();
            rel.sort_by(f64::total_cmp);
            if !rel.is_empty() {
                bundle.summary.quotient = Some(QuotientSection {
                    n_reliable: rel.len(),
                    min: rel[0],
                    median: rel[rel.len() / 2],
                    max: rel[rel.len() - 1],
                });
            }
        }
        Err(e) => bundle
            .summary
            .warnings
            .push(format!("sample covariance unusable, skipping comparison: {e}")),
    }

    let tail = cfg.report.qq_tail_frac;
    let mut ks_rows = Vec::new();
    let mut refl_rejected = 0;
    let mut refl_min_p = f64::INFINITY;
    for i in 0..n {
        match ks_normality(&chain.column(i), &KsNull::normal()) {
            Ok(r) => {
                if r.p_value < KS_LEVEL {
                    refl_rejected += 1;
                }
                refl_min_p = refl_min_p.min(r.p_value);
                ks_rows.push(vec![
                    "refl".into(),
                    names[i].1.clone(),
                    "normal".into(),
                    r.d.to_string(),
                    r.p_value.to_string(),
                    r.null.loc.to_string(),
                    r.null.scale.to_string(),
                ]);
            }
            Err(e) => bundle.summary.warnings.push(format!("KS skipped at {} nm: {e}", names[i].1)),
        }
    }
    let mut atm = Vec::new();
    for (name, series) in [("aod", &aod), ("h2o", &h2o)] {
        match atm_gaussianity(series, tail) {
            Ok((g, qq_rows)) => {
                for r in [&g.ks_normal, &g.ks_truncated] {
                    ks_rows.push(vec![
                        name.into(),
                        String::new(),
                        family_name(r.null.family).into(),
                        r.d.to_string(),
                        r.p_value.to_string(),
                        r.null.loc.to_string(),
                        r.null.scale.to_string(),
                    ]);
                }
                bundle.csv(
                    &format!("qq_{name}.csv"),
                    &["p", "sample", "normal", "truncated_normal"],
                    qq_rows,
                )?;
                atm.push(g);
            }
            Err(e) => bundle.summary.warnings.push(format!("{name} Gaussianity skipped: {e}")),
        }
    }
    bundle.csv(
        "ks.csv",
        &["parameter", "wavelength_nm", "null", "d", "p_value", "loc", "scale"],
        ks_rows,
    )?;
    if atm.len() == 2 {
        let h2o_g = atm.pop().expect("two entries");
        let aod_g = atm.pop().expect("two entries");
        bundle.summary.gaussianity = Some(GaussianitySection {
            aod: aod_g,
            h2o: h2o_g,
            ks_level: KS_LEVEL,
            refl_rejected,
            refl_min_p: if refl_min_p.is_finite() { refl_min_p } else { f64::NAN },
        });
    }

    let [ba, bh] = cfg.report.hist_bins;
    let hist = atm_histogram(chain, ba, bh)?;
    let mut rows = Vec::with_capacity(ba * bh);
    for i in 0..ba {
        for j in 0..bh {
            rows.push(vec![
                hist.aod_edges[i].to_string(),
                hist.aod_edges[i + 1].to_string(),
                hist.h2o_edges[j].to_string(),
                hist.h2o_edges[j + 1].to_string(),
                hist.counts[i * bh + j].to_string(),
            ]);
        }
    }
    bundle.csv("atm_hist.csv", &["aod_lo", "aod_hi", "h2o_lo", "h2o_hi", "count"], rows)?;
    Ok(())
}

/// A synthetic retrieval case written by [`write_demo`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSpec {
    pub n_channels: usize,
    /// `false` gives `s ≡ 0`, i.e. radiance linear in reflectance.
    pub spherical_albedo: bool,
    pub terrain: String,
    pub atm_true: [f64; 2],
    pub seed: u64,
    pub noise: NoiseConfig,
    pub add_noise: bool,
    pub atm_prior: AtmPriorConfig,
}

impl DemoSpec {
    /// Nonlinear scene with AOD near zero.
    pub fn nonlinear() -> Self {
        DemoSpec {
            n_channels: synth::DEMO_CHANNELS,
            spherical_albedo: true,
            terrain: "vegetation".into(),
            atm_true: [0.02, 1.5],
            seed: 7,
            noise: NoiseConfig {
                snr: 500.0,
                calib_frac: 0.01,
                rt_model_frac: synth::DEMO_RT_ERROR_FRAC,
            },
            add_noise: true,
            atm_prior: AtmPriorConfig::default(),
        }
    }

    /// Scene whose radiance is linear in reflectance (`s ≡ 0`), with a
    /// well-constrained atmosphere centred inside LUT cells. Knots are kinks
    /// of the bilinear interpolant, so they are avoided.
    pub fn linear() -> Self {
        DemoSpec {
            spherical_albedo: false,
            terrain: "soil".into(),
            atm_true: [0.4, 1.25],
            atm_prior: AtmPriorConfig {
                mean: [0.4, 1.25],
                var: [1e-3, 1e-2],
            },
            ..Self::nonlinear()
        }
    }
}

/// Writes LUT, components, radiance (+ mask), truth and a ready-to-run
/// `retrieval.toml` into `dir`; returns the config path.
pub fn write_demo(dir: &Path, spec: &DemoSpec, mcmc: McmcConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let (lo, hi) = synth::DEMO_RANGE;
    let grid = WavelengthGrid::uniform(spec.n_channels, lo, hi)?.with_masked_bands(&synth::DEMO_MASKED_BANDS);
    let model = synth::demo_model(&grid, spec.spherical_albedo)?;
    let components = synth::surface_components(grid.wavelengths())?;
    io::write_lut(&dir.join("lut.vsw"), model.lut(), Some(&model.geometry().solar_irradiance))?;
    io::write_components(&dir.join("components.vsw"), grid.wavelengths(), &components)?;
    let noise = if spec.add_noise {
        // Noise variances follow the noiseless radiance.
        let clean = synth::generate_synthetic_scene(&model, &grid, &components, &spec.terrain, spec.atm_true, None, spec.seed)?;
        Some(NoiseModel::with_rt_fraction(
            spec.noise.snr,
            spec.noise.calib_frac,
            spec.noise.rt_model_frac,
            &clean.y_obs,
        )?)
    } else {
        None
    };
    let scene = synth::generate_synthetic_scene(
        &model,
        &grid,
        &components,
        &spec.terrain,
        spec.atm_true,
        noise.as_ref(),
        spec.seed,
    )?;
    io::write_spectrum(
        &dir.join("radiance.csv"),
        &Spectrum {
            wavelengths: scene.wavelengths.clone(),
            values: scene.y_obs.clone(),
            mask: scene.mask.clone(),
        },
    )?;
    io::write_json(&dir.join("truth.json"), &scene)?;
    let cfg = RetrievalConfig {
        mode: Mode::Compare,
        radiance: "radiance.csv".into(),
        lut: "lut.vsw".into(),
        components: "components.vsw".into(),
        output: "out".into(),
        cos_solar_zenith: model.geometry().cos_solar_zenith,
        irradiance: None,
        truth: Some("truth.json".into()),
        oe_result: None,
        noise: spec.noise.clone(),
        atm_prior: spec.atm_prior.clone(),
        oe: OeConfig::default(),
        mcmc,
        report: ReportConfig::default(),
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("retrieval.toml");
    std::fs::write(&path, cfg.to_toml())?;
    Ok(path)
}

/// Desk-scale chain settings for the demo scenes.
pub fn demo_mcmc(seed: u64) -> McmcConfig {
    McmcConfig {
        n_samples: 200_000,
        burn_in: 20_000,
        thin: 10,
        seed,
        ..McmcConfig::default()
    }
}
