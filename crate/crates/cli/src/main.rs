use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use vswir_core::io;
use vswir_core::pipeline::{self, demo_mcmc, DemoSpec, ReportSummary, RetrievalConfig, Status};
use vswir_core::synth;
use vswir_core::{RetrievalError, WavelengthGrid};

/// Bayesian VSWIR surface-reflectance retrieval: optimal estimation, MCMC
/// and the comparison report.
#[derive(Parser, Debug)]
#[command(name = "vswir", version)]
struct Cli {
    /// Worker threads for fan-out over several configs or scenes.
    #[arg(long, short = 'j', global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic lookup table and surface prior components.
    GenLut(GenLutArgs),
    /// Write synthetic scenes, each with a ready-to-run retrieval.toml.
    GenScene(GenSceneArgs),
    /// Optimal estimation only.
    Oe(RunArgs),
    /// MCMC started from a stored OE result.
    Mcmc(RunArgs),
    /// OE, then MCMC from the MAP, then the comparison report.
    Compare(RunArgs),
    /// Rebuild the report from stored OE and chain files.
    Report(RunArgs),
}

#[derive(Args, Debug)]
struct GenLutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Spherical albedo s ≡ 0 (radiance linear in reflectance).
    #[arg(long)]
    linear: bool,
    #[arg(long, default_value_t = synth::DEMO_CHANNELS)]
    channels: usize,
    /// Also export the table as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct GenSceneArgs {
    /// Output directory; with --count > 1 scenes go to `scene_NNN` below it.
    #[arg(long)]
    out: PathBuf,
    /// Bundled linear scene instead of the nonlinear one.
    #[arg(long)]
    linear: bool,
    #[arg(long)]
    terrain: Option<String>,
    #[arg(long)]
    aod: Option<f64>,
    #[arg(long)]
    h2o: Option<f64>,
    #[arg(long)]
    channels: Option<usize>,
    /// Scene noise seed; the chain seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_noise: bool,
    /// Number of scenes; scene k uses seed + k.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Retrieval config (TOML). Repeat to run several retrievals.
    #[arg(long = "config", short = 'c', required = true)]
    configs: Vec<PathBuf>,
    /// Override a config value, e.g. `--set mcmc.n_samples=100000`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    /// Output directory relative to the working directory (single config only).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Shorthand for `--set mcmc.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<RetrievalError>() {
        Some(r) if r.is_numerical() => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn gen_lut(a: &GenLutArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let (lo, hi) = synth::DEMO_RANGE;
    let grid = WavelengthGrid::uniform(a.channels, lo, hi)?;
    let model = synth::demo_model(&grid, !a.linear)?;
    io::write_lut(&a.out.join("lut.vsw"), model.lut(), Some(&model.geometry().solar_irradiance))?;
    io::write_components(
        &a.out.join("components.vsw"),
        grid.wavelengths(),
        &synth::surface_components(grid.wavelengths())?,
    )?;
    if a.csv {
        io::export_lut_csv(&a.out.join("lut.csv"), model.lut())?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gen_scene(a: &GenSceneArgs) -> anyhow::Result<()> {
    let mut spec = if a.linear { DemoSpec::linear() } else { DemoSpec::nonlinear() };
    if let Some(t) = &a.terrain {
        if !synth::TERRAINS.contains(&t.as_str()) {
            return Err(RetrievalError::Input(format!("unknown terrain {t:?}; known: {:?}", synth::TERRAINS)).into());
        }
        spec.terrain = t.clone();
    }
    if let Some(v) = a.aod {
        spec.atm_true[0] = v;
    }
    if let Some(v) = a.h2o {
        spec.atm_true[1] = v;
    }
    if let Some(n) = a.channels {
        spec.n_channels = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.add_noise = !a.no_noise;
    let base_seed = spec.seed;
    (0..a.count).into_par_iter().try_for_each(|k| -> anyhow::Result<()> {
        let dir = if a.count == 1 { a.out.clone() } else { a.out.join(format!("scene_{k:03}")) };
        let spec = DemoSpec {
            seed: base_seed + k as u64,
            ..spec.clone()
        };
        let cfg = pipeline::write_demo(&dir, &spec, demo_mcmc(spec.seed + 1))?;
        println!("wrote {}", cfg.display());
        Ok(())
    })
}

fn print_summary(cfg_path: &Path, s: &ReportSummary) {
    let mut parts = vec![format!("{:?}", s.status).to_lowercase()];
    if let Some(oe) = &s.oe {
        parts.push(format!("oe converged={} aod={:.4} h2o={:.4}", oe.converged, oe.aod, oe.h2o));
    }
    if let Some(m) = &s.mcmc {
        parts.push(format!("acceptance={:.3} kept={}", m.overall_acceptance, m.n_kept));
    }
    if let Some(c) = &s.covariance {
        parts.push(format!("d_norm={:.4}", c.d_norm));
    }
    if let Some(g) = &s.gaussianity {
        parts.push(format!("ks_p(aod)={:.3e}", g.aod.ks_normal.p_value));
    }
    println!("{}: {}", cfg_path.display(), parts.join(" "));
    for w in &s.warnings {
        log::warn!("{}: {w}", cfg_path.display());
    }
}

fn run_one(path: &Path, a: &RunArgs, mode: Option<&str>, rebuild: bool) -> anyhow::Result<()> {
    let mut ov = a.overrides.clone();
    if let Some(o) = &a.output {
        let abs = std::path::absolute(o)?;
        ov.push(("output".into(), format!("{:?}", abs.display().to_string())));
    }
    if let Some(s) = a.seed {
        ov.push(("mcmc.seed".into(), s.to_string()));
    }
    if let Some(m) = mode {
        ov.push(("mode".into(), format!("{m:?}")));
    }
    let cfg = RetrievalConfig::load(path, &ov)?;
    let summary = if rebuild {
        pipeline::rebuild_report(&cfg)?
    } else {
        pipeline::run(&cfg)?.summary
    };
    print_summary(path, &summary);
    if summary.status == Status::Failed {
        return Err(anyhow!("{}: run failed", path.display()));
    }
    Ok(())
}

fn run_many(a: &RunArgs, mode: Option<&str>, rebuild: bool) -> anyhow::Result<()> {
    if a.output.is_some() && a.configs.len() > 1 {
        return Err(RetrievalError::Input("--output needs a single --config".into()).into());
    }
    let results: Vec<anyhow::Result<()>> = a
        .configs
        .par_iter()
        .map(|p| run_one(p, a, mode, rebuild).with_context(|| format!("retrieval {}", p.display())))
        .collect();
    let mut worst: Option<anyhow::Error> = None;
    for e in results.into_iter().filter_map(|r| r.err()) {
        if a.configs.len() > 1 {
            log::error!("{e:#}");
        }
        if worst.as_ref().is_none_or(|w| exit_code(&e) > exit_code(w)) {
            worst = Some(e);
        }
    }
    worst.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global() {
        log::warn!("thread pool: {e}");
    }
    let result = match &cli.command {
        Command::GenLut(a) => gen_lut(a),
        Command::GenScene(a) => gen_scene(a),
        Command::Oe(a) => run_many(a, Some("oe_only"), false),
        Command::Mcmc(a) => run_many(a, Some("mcmc_only"), false),
        Command::Compare(a) => run_many(a, Some("compare"), false),
        Command::Report(a) => run_many(a, None, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
