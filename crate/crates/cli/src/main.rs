//! Command-line driver for the mean-field SDE engine.
//!
//! Subcommands mirror the verification pipelines: `constants`,
//! `simulate`, `girsanov`, `kop`, `fixpoint`, `density`, `nvortex`,
//! `chaos` and `verify-all`. All tabular artifacts are CSV with
//! documented headers, reports are JSON, and each embeds the config hash
//! and seed.
//!
//! Exit codes: 0 pass, 1 check failure, 2 configuration error,
//! 3 numerical abort.

use clap::{Args, Parser, Subcommand};
use mvsde::accept;
use mvsde::density::{
    estimate_density, verify_aronson, verify_perturbation_bound, BinGrid, ReferenceDensity,
};
use mvsde::diffusion::{simulate_paths, DriftField, SpaceGrid};
use mvsde::error::Error;
use mvsde::export;
use mvsde::girsanov::{compute_weights, moment_check, reweighted_expectation};
use mvsde::meanfield::{apply_kernel_operator, picard, McBudget, OperatorGrids};
use mvsde::particles::{chaos_error, VortexEnsemble};
use mvsde_cli::artifacts::{self, wrap};
use mvsde_cli::config::RunConfig;
use mvsde_cli::{DETERMINISM_SCENARIO, DETERMINISM_SUBCOMMANDS};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "mvsde",
    about = "Monte Carlo engine and verification pipelines for mean-field SDEs \
             with singular interaction kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); the bundled desk scenario when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Default)]
struct ConstantOverrides {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    a_stroock: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    kappa_prime: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    w_l1: Option<f64>,
    #[arg(long)]
    w_linf: Option<f64>,
    #[arg(long)]
    r_cutoff: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

impl ConstantOverrides {
    fn any(&self) -> bool {
        self.d.is_some()
            || self.xi.is_some()
            || self.a_stroock.is_some()
            || self.kappa.is_some()
            || self.kappa_prime.is_some()
            || self.q.is_some()
            || self.alpha.is_some()
            || self.gamma.is_some()
            || self.w_l1.is_some()
            || self.w_linf.is_some()
            || self.r_cutoff.is_some()
            || self.tau.is_some()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute the explicit constants bundle (flags override the config)
    Constants {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: ConstantOverrides,
    },
    /// Simulate a path ensemble and export it as CSV and PENS binary
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Girsanov weight checks: unit mean and exponential moment bounds
    Girsanov {
        #[command(flatten)]
        common: Common,
    },
    /// One application of the velocity operator to the zero drift
    Kop {
        #[command(flatten)]
        common: Common,
    },
    /// Picard fixed-point iteration with the contraction report
    Fixpoint {
        #[command(flatten)]
        common: Common,
    },
    /// Density estimation plus envelope and perturbation-bound checks
    Density {
        #[command(flatten)]
        common: Common,
    },
    /// Interacting N-vortex run with snapshot export
    Nvortex {
        #[command(flatten)]
        common: Common,
    },
    /// Mean-field convergence table over a ladder of ensemble sizes
    Chaos {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full desk-scale verification suite
    VerifyAll {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(dispatch(cli));
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Constants { common, over } => cmd_constants(&common, &over),
        Command::Simulate { common } => cmd_simulate(&common),
        Command::Girsanov { common } => cmd_girsanov(&common),
        Command::Kop { common } => cmd_kop(&common),
        Command::Fixpoint { common } => cmd_fixpoint(&common),
        Command::Density { common } => cmd_density(&common),
        Command::Nvortex { common } => cmd_nvortex(&common),
        Command::Chaos { common } => cmd_chaos(&common),
        Command::VerifyAll { common } => cmd_verify_all(&common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn load_config(common: &Common) -> mvsde::Result<RunConfig> {
    match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn ensure_out(common: &Common) -> mvsde::Result<&Path> {
    std::fs::create_dir_all(&common.out)?;
    Ok(common.out.as_path())
}

fn cmd_constants(common: &Common, over: &ConstantOverrides) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let bundle = if over.any() {
        // flag-driven bundle: defaults mirror the desk scenario
        let kappa = over.kappa.unwrap_or(1.0);
        mvsde::constants::build_bundle(&mvsde::constants::BundleInputs {
            d: over.d.unwrap_or(2),
            xi: over.xi.unwrap_or(1.0),
            a_stroock: over.a_stroock.unwrap_or(1.0),
            kappa,
            kappa_prime: over.kappa_prime.unwrap_or(0.01 * kappa),
            q: over.q,
            alpha: over.alpha.unwrap_or(1.0 / (2.0 * std::f64::consts::PI)),
            gamma: over.gamma.unwrap_or(1.0),
            w_l1: over.w_l1.unwrap_or(1.0),
            w_linf: over.w_linf.unwrap_or(1.0),
            r_cutoff: over.r_cutoff,
            tau: over.tau,
            empirical_envelopes: false,
        })?
    } else {
        cfg.bundle()?
    };
    let artifact = wrap(&cfg, &bundle);
    artifacts::write_json(out, "constants.json", &artifact)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&bundle).map_err(|e| Error::Config(e.to_string()))?
    );
    Ok(0)
}

#[derive(Serialize)]
struct SimulateSummary {
    n_paths: usize,
    steps: usize,
    horizon: f64,
    final_mean: Vec<f64>,
}

fn cmd_simulate(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let spec = cfg.diffusion_spec()?;
    let ens = simulate_paths(
        &spec,
        None,
        &cfg.simulate.starts,
        cfg.simulate.horizon,
        cfg.mc.steps,
        cfg.simulate.paths_per_start,
        cfg.seed,
    )?;
    let mut csv = Vec::new();
    export::write_ensemble_csv(&ens, &mut csv)?;
    artifacts::write_bytes(out, "ensemble.csv", &csv)?;
    let mut bin = Vec::new();
    export::write_ensemble_binary(&ens, &mut bin)?;
    artifacts::write_bytes(out, "ensemble.pens", &bin)?;

    let last = ens.steps();
    let d = ens.dim();
    let mut mean = vec![0.0; d];
    for p in 0..ens.n_paths() {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += ens.position(p, last)[k] / ens.n_paths() as f64;
        }
    }
    let summary = SimulateSummary {
        n_paths: ens.n_paths(),
        steps: ens.steps(),
        horizon: ens.horizon(),
        final_mean: mean,
    };
    artifacts::write_json(out, "simulate.json", &wrap(&cfg, &summary))?;
    println!(
        "simulated {} paths x {} steps to t = {}",
        summary.n_paths, summary.steps, summary.horizon
    );
    Ok(0)
}

#[derive(Serialize)]
struct GirsanovReport {
    unit_mean: Vec<UnitMeanRecord>,
    moments: Vec<mvsde::girsanov::MomentRecord>,
    pass: bool,
}

#[derive(Serialize)]
struct UnitMeanRecord {
    time: f64,
    mean: f64,
    stderr: f64,
    pass: bool,
}

fn cmd_girsanov(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let spec = cfg.diffusion_spec()?;
    let horizon = cfg.girsanov.horizon;
    let ens = Arc::new(simulate_paths(
        &spec,
        None,
        &[vec![0.0; spec.dim()]],
        horizon,
        cfg.mc.steps,
        cfg.mc.path_budget,
        cfg.seed,
    )?);
    let b = DriftField::constant(cfg.girsanov.drift.clone(), horizon, 3.0)?;
    let w = compute_weights(ens, &b, &spec)?;
    let mut unit_mean = Vec::new();
    let mut pass = true;
    for &t in &cfg.girsanov.times {
        let (m, se) = reweighted_expectation(&w, |_| 1.0, t)?;
        let ok = (m - 1.0).abs() <= 4.0 * se;
        pass &= ok;
        unit_mean.push(UnitMeanRecord {
            time: t,
            mean: m,
            stderr: se,
            pass: ok,
        });
    }
    let mut moments = Vec::new();
    for &p in &cfg.girsanov.p_values {
        for rec in moment_check(&w, p, &cfg.girsanov.times)? {
            pass &= rec.pass;
            moments.push(rec);
        }
    }
    let report = GirsanovReport {
        unit_mean,
        moments,
        pass,
    };
    artifacts::write_json(out, "girsanov.json", &wrap(&cfg, &report))?;
    println!(
        "girsanov checks: {}",
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(if report.pass { 0 } else { 1 })
}

type OperatorSetup = (
    mvsde::constants::ConstantsBundle,
    mvsde::kernels::KernelSpec,
    mvsde::meanfield::VorticitySpec,
    mvsde::diffusion::DiffusionSpec,
    OperatorGrids,
    McBudget,
);

fn operator_setup(cfg: &RunConfig) -> mvsde::Result<OperatorSetup> {
    let bundle = cfg.bundle()?;
    let kernel = cfg.kernel_spec(bundle.r_cutoff)?;
    let w = cfg.vorticity_spec()?;
    let spec = cfg.diffusion_spec()?;
    let horizon = if cfg.grid.horizon > 0.0 {
        cfg.grid.horizon
    } else {
        bundle.tau
    };
    let d = spec.dim();
    let space = SpaceGrid::new(
        vec![-cfg.grid.box_half_width; d],
        vec![cfg.grid.box_half_width; d],
        vec![cfg.grid.nodes_per_axis; d],
    )?;
    let grids = OperatorGrids::uniform(horizon, cfg.grid.time_nodes, space, cfg.grid.substeps)?;
    let mc = McBudget {
        samples: cfg.mc.samples,
        paths: cfg.mc.paths,
        seed: cfg.seed,
    };
    Ok((bundle, kernel, w, spec, grids, mc))
}

/// Fixed-point iteration is only contractive below the admissible
/// horizon; reject configurations outside it.
fn guard_contraction_horizon(
    grids: &OperatorGrids,
    bundle: &mvsde::constants::ConstantsBundle,
) -> mvsde::Result<()> {
    if grids.horizon() >= bundle.tau_max {
        return Err(Error::Config(format!(
            "grid.horizon = {} must stay below tau_max = {} for the fixed-point map",
            grids.horizon(),
            bundle.tau_max
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct KopReport {
    sup_norm: f64,
    max_se: f64,
    singular_hits: usize,
    singular_rate: f64,
    quality_warning: bool,
}

fn cmd_kop(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let (_bundle, kernel, w, spec, grids, mc) = operator_setup(&cfg)?;
    let res = apply_kernel_operator(None, &kernel, &w, &spec, &grids, &mc, false)?;
    let mut csv = Vec::new();
    export::write_drift_csv(&res.field, &mut csv)?;
    artifacts::write_bytes(out, "kop_field.csv", &csv)?;
    let report = KopReport {
        sup_norm: res.field.sup_norm(),
        max_se: res.max_se,
        singular_hits: res.singular_hits,
        singular_rate: res.singular_rate,
        quality_warning: res.quality_warning,
    };
    artifacts::write_json(out, "kop.json", &wrap(&cfg, &report))?;
    println!(
        "operator applied: |K(0)| = {:.6}, max se {:.2e}",
        report.sup_norm, report.max_se
    );
    Ok(0)
}

#[derive(Serialize)]
struct FixpointSummary {
    iterations: usize,
    sup_diffs: Vec<f64>,
    ratios: Vec<f64>,
    theoretical_factor: f64,
    noise_floor: f64,
    converged: bool,
    singular_rates: Vec<f64>,
}

fn cmd_fixpoint(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let (bundle, kernel, w, spec, grids, mc) = operator_setup(&cfg)?;
    guard_contraction_horizon(&grids, &bundle)?;
    let b0 = DriftField::from_fn(grids.times.clone(), grids.space.clone(), |_t, _x| {
        vec![0.0; spec.dim()]
    })?;
    let rep = picard(&b0, 0.0, 8, &kernel, &w, &spec, &grids, &mc, bundle.factor)?;
    let summary = FixpointSummary {
        iterations: rep.sup_diffs.len(),
        sup_diffs: rep.sup_diffs.clone(),
        ratios: rep.ratios.clone(),
        theoretical_factor: rep.theoretical_factor,
        noise_floor: rep.noise_floor,
        converged: rep.converged,
        singular_rates: rep.singular_rates.clone(),
    };
    let mut csv = Vec::new();
    export::write_drift_csv(rep.iterates.last().unwrap(), &mut csv)?;
    artifacts::write_bytes(out, "fixpoint_field.csv", &csv)?;
    artifacts::write_json(out, "fixpoint.json", &wrap(&cfg, &summary))?;
    println!(
        "fixpoint: {} iterations, converged = {}, floor = {:.2e}",
        summary.iterations, summary.converged, summary.noise_floor
    );
    Ok(if summary.converged { 0 } else { 1 })
}

#[derive(Serialize)]
struct DensityReport {
    aronson: mvsde::density::AronsonReport,
    perturbation: mvsde::density::PerturbationReport,
    pass: bool,
}

fn cmd_density(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let spec = cfg.diffusion_spec()?;
    let var_rate = spec.constant_isotropic_rate().ok_or_else(|| {
        Error::Config("density subcommand needs a constant isotropic sigma".into())
    })?;
    let bundle = cfg.bundle()?;
    let d = spec.dim();
    let t = cfg.density.time;
    let grid = BinGrid::centered(&vec![0.0; d], cfg.density.half_width, cfg.density.bins)?;

    let ens0 = simulate_paths(
        &spec,
        None,
        &[vec![0.0; d]],
        t,
        cfg.mc.steps,
        cfg.mc.path_budget,
        cfg.seed,
    )?;
    let est0 = estimate_density(&ens0, t, grid.clone())?;
    let aronson = verify_aronson(&est0, bundle.kappa, bundle.kappa_prime, None)?;

    let b = DriftField::constant(cfg.density.drift.clone(), t, cfg.density.half_width)?;
    let ens_b = simulate_paths(
        &spec,
        Some(&b),
        &[vec![0.0; d]],
        t,
        cfg.mc.steps,
        cfg.mc.path_budget,
        cfg.seed ^ 0x5a5a,
    )?;
    let est_b = estimate_density(&ens_b, t, grid)?;
    let perturbation = verify_perturbation_bound(
        &est_b,
        ReferenceDensity::ExactGaussian { var_rate },
        &bundle,
        b.sup_norm(),
    )?;

    // plot-ready CSV with the upper envelope column
    let bounds: Vec<f64> = (0..est0.grid.bin_count())
        .map(|bin| {
            let c = est0.grid.center(bin);
            mvsde::constants::aronson_envelope(bundle.kappa, None, t, &est0.start, &c)
                .map(|(_, up)| up)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let mut csv = Vec::new();
    export::write_density_csv(&est0, Some(&bounds), &mut csv)?;
    artifacts::write_bytes(out, "density.csv", &csv)?;

    let pass = aronson.pass && perturbation.pass;
    let report = DensityReport {
        aronson,
        perturbation,
        pass,
    };
    artifacts::write_json(out, "density.json", &wrap(&cfg, &report))?;
    println!("density checks: {}", if pass { "pass" } else { "FAIL" });
    Ok(if pass { 0 } else { 1 })
}

#[derive(Serialize)]
struct NvortexReport {
    n: usize,
    time: f64,
    total_intensity: f64,
    clamp_tally: usize,
}

fn cmd_nvortex(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let spec = cfg.diffusion_spec()?;
    let w = cfg.vorticity_spec()?;
    let kernel = cfg.kernel_spec(f64::INFINITY)?;
    let eps = if cfg.kernel.epsilon > 0.0 {
        cfg.kernel.epsilon
    } else {
        1e-8 * cfg.vorticity.radius
    };
    let ens = VortexEnsemble::init_from_vorticity(&w, cfg.nvortex.n, eps, cfg.seed)?.run(
        cfg.nvortex.dt,
        cfg.nvortex.steps,
        &spec,
        &kernel,
    )?;
    let mut csv = Vec::new();
    export::write_vortex_csv(&ens, &mut csv)?;
    artifacts::write_bytes(out, "vortices.csv", &csv)?;
    let report = NvortexReport {
        n: ens.len(),
        time: ens.time(),
        total_intensity: ens.total_intensity(),
        clamp_tally: ens.clamp_tally(),
    };
    artifacts::write_json(out, "nvortex.json", &wrap(&cfg, &report))?;
    println!(
        "simulated {} vortices to t = {} ({} clamped evaluations)",
        report.n, report.time, report.clamp_tally
    );
    Ok(0)
}

fn cmd_chaos(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let (bundle, kernel, w, spec, grids, mc) = operator_setup(&cfg)?;
    guard_contraction_horizon(&grids, &bundle)?;
    let b0 = DriftField::from_fn(grids.times.clone(), grids.space.clone(), |_t, _x| {
        vec![0.0; spec.dim()]
    })?;
    let fix = picard(&b0, 0.0, 4, &kernel, &w, &spec, &grids, &mc, bundle.factor)?;
    let reference = fix.iterates.last().unwrap();
    let half = cfg.grid.box_half_width;
    let probes: Vec<Vec<f64>> = vec![
        vec![0.0, 0.0],
        vec![0.3 * half, 0.15 * half],
        vec![-0.25 * half, 0.4 * half],
        vec![0.15 * half, -0.45 * half],
        vec![-0.4 * half, -0.3 * half],
    ];
    let eps = if cfg.kernel.epsilon > 0.0 {
        cfg.kernel.epsilon
    } else if bundle.r_cutoff.is_finite() {
        1e-8 * bundle.r_cutoff
    } else {
        1e-8 * cfg.vorticity.radius
    };
    let rows = chaos_error(
        &cfg.chaos.ns,
        cfg.chaos.replicas,
        &w,
        &kernel,
        &spec,
        eps,
        grids.horizon(),
        cfg.chaos.steps,
        reference,
        &probes,
        cfg.seed,
    )?;
    let mut csv = Vec::new();
    export::write_chaos_csv(&rows, &mut csv)?;
    artifacts::write_bytes(out, "chaos.csv", &csv)?;
    artifacts::write_json(out, "chaos.json", &wrap(&cfg, &rows))?;
    println!("chaos table over {:?} written", cfg.chaos.ns);
    Ok(0)
}

#[derive(Serialize)]
struct VerifySummary {
    name: String,
    pass: bool,
    lines: Vec<String>,
}

fn cmd_verify_all(common: &Common) -> mvsde::Result<i32> {
    let cfg = load_config(common)?;
    let out = ensure_out(common)?;
    let mut reports = accept::all_in_process();
    let bin = std::env::current_exe()?;
    reports.push(accept::determinism(
        &bin,
        DETERMINISM_SCENARIO,
        DETERMINISM_SUBCOMMANDS,
    ));
    let mut all = true;
    let mut summaries = Vec::new();
    for rep in &reports {
        println!("{}", rep.summary());
        for line in &rep.lines {
            println!("    {line}");
        }
        all &= rep.pass;
        summaries.push(VerifySummary {
            name: rep.name.to_string(),
            pass: rep.pass,
            lines: rep.lines.clone(),
        });
    }
    artifacts::write_json(out, "verify.json", &wrap(&cfg, &summaries))?;
    println!("{}", if all { "ALL CHECKS PASS" } else { "CHECKS FAILED" });
    Ok(if all { 0 } else { 1 })
}
