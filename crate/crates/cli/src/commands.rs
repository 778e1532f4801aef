//! Subcommand implementations. Each returns the process exit code on success
//! paths that are not errors (e.g. a failed invariant).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use epnozzle::domainmap::{solve_perturbed_with_method, MapSummary};
use epnozzle::driver::{log_log_slope, perturb_data, FieldPair, FixedPointSolver, SolveReport, SweepEntry};
use epnozzle::elliptic::GridBackground;
use epnozzle::io::{write_fields_csv, write_fields_csv_at, write_fields_vtk, write_fields_vtk_at};
use epnozzle::ode1d::{
    monotone_orbit_admissible, atlas, background_from_triple, integrate_ivp, write_atlas_csv, write_profiles_csv,
    AdmissibilityMargins, OrbitCheck, OneDParams, ShootOptions,
};
use epnozzle::verify::{run_battery, InvariantResult};
use epnozzle::{build_grid, BackgroundSolution, BoundaryTriple, Nozzle, ScalarField};
use serde::Serialize;

use crate::config::{Background, Format, RunConfig};

pub struct Run<'a> {
    pub config: &'a RunConfig,
    pub out: PathBuf,
    pub format: Format,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn background(cfg: &RunConfig) -> Result<BackgroundSolution> {
    let length = cfg.nozzle.length;
    let sol = match cfg.background {
        Background::Entrance { j0, rho0, e0, steps } => {
            integrate_ivp(&OneDParams { law: cfg.gas, charge: cfg.charge, j0, rho0, e0, length }, steps)?
        }
        Background::Triple { phi_en0, b00, pex0, steps } => {
            let opts = ShootOptions { n_steps: steps, ..ShootOptions::default() };
            background_from_triple(&cfg.gas, cfg.charge, length, &BoundaryTriple { phi_en0, b00, pex0 }, &opts)?
        }
    };
    Ok(sol)
}

#[derive(Serialize)]
struct BackgroundReport {
    command: &'static str,
    config_hash: String,
    j0: f64,
    rho0: f64,
    e0: f64,
    triple: BoundaryTriple,
    /// `min_x p'(rho) - u^2`
    subsonic_margin: f64,
    mass_flux_defect: f64,
    entrance_check: OrbitCheck,
}

pub fn background_cmd(ctx: &Run) -> Result<i32> {
    let cfg = ctx.config;
    let sol = background(cfg)?;
    let p = sol.params;
    write_profiles_csv(&sol, create(&ctx.out.join("profiles.csv"))?)?;
    let rows = atlas(&cfg.gas, cfg.charge, p.length, &[p.j0], &[p.rho0], &[p.e0], sol.xs.len() - 1);
    write_atlas_csv(&rows, create(&ctx.out.join("atlas.csv"))?)?;
    let report = BackgroundReport {
        command: "background",
        config_hash: cfg.hash()?,
        j0: p.j0,
        rho0: p.rho0,
        e0: p.e0,
        triple: sol.triple,
        subsonic_margin: sol.nu0,
        mass_flux_defect: sol.mass_flux_defect(),
        entrance_check: monotone_orbit_admissible(&cfg.gas, cfg.charge, p.rho0, p.e0, p.j0, &AdmissibilityMargins::default()),
    };
    write_json(&ctx.out.join("background.json"), &report)?;
    println!(
        "background: J0 = {}, Phi_en0 = {}, B00 = {}, pex0 = {}, subsonic margin {:e}",
        p.j0, sol.triple.phi_en0, sol.triple.b00, sol.triple.pex0, sol.nu0
    );
    Ok(if sol.nu0 > 0.0 { 0 } else { 2 })
}

struct Setup {
    grid: Nozzle,
    bg: GridBackground,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let grid = build_grid(&cfg.nozzle)?;
    let bg = GridBackground::for_grid(&background(cfg)?, &grid)?;
    Ok(Setup { grid, bg })
}

fn write_fields(ctx: &Run, grid: &Nozzle, stem: &str, pair: &FieldPair, positions: Option<&[Vec<f64>]>) -> Result<()> {
    let fields: [(&str, &ScalarField); 2] = [("psi", &pair.velocity), ("Psi", &pair.electric)];
    let pos = |k: usize| positions.map(|p| p.iter().map(|axis| axis[k]).collect()).unwrap_or_else(|| grid.coords(k));
    match ctx.format {
        Format::Csv => {
            let w = create(&ctx.out.join(format!("{stem}.csv")))?;
            match positions {
                Some(_) => write_fields_csv_at(grid, pos, &fields, w)?,
                None => write_fields_csv(grid, &fields, w)?,
            }
        }
        Format::Vtk => {
            let w = create(&ctx.out.join(format!("{stem}.vtk")))?;
            match positions {
                Some(_) => write_fields_vtk_at(grid, pos, &fields, w)?,
                None => write_fields_vtk(grid, &fields, w)?,
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    command: &'static str,
    config_hash: String,
    seed: u64,
    nodes: &'a [usize],
    report: &'a SolveReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<&'a MapSummary>,
}

fn solve_status(report: &SolveReport) -> i32 {
    if report.converged && report.subsonic_margin > 0.0 {
        0
    } else {
        1
    }
}

fn print_solve(report: &SolveReport) {
    println!(
        "solve: sigma = {:e}, {} iterations, converged {}, subsonic margin {:.6}, residual {:e}",
        report.sigma, report.iterations, report.converged, report.subsonic_margin, report.nonlinear_residual
    );
    println!("contraction factors: {:?}", report.contraction_factors);
}

pub fn solve_cmd(ctx: &Run) -> Result<i32> {
    let cfg = ctx.config;
    let Setup { grid, bg } = setup(cfg)?;
    let sigma = cfg.perturbation.sigma;
    let data = perturb_data(&bg, &grid, sigma, &cfg.perturbation.shapes)?;
    let solver = FixedPointSolver::new(&grid, &bg)?;
    let mut snapshot_err = Ok(());
    let mut observer = |it: usize, pair: &FieldPair| {
        if cfg.output.snapshots && snapshot_err.is_ok() {
            snapshot_err = write_fields(ctx, &grid, &format!("iterate-{it:03}"), pair, None);
        }
    };
    let (pair, report) = solver.run(&cfg.iteration_config(sigma), &data, None, None, &mut observer)?;
    snapshot_err?;
    write_fields(ctx, &grid, "fields", &pair, None)?;
    let out = SolveOutput {
        command: "solve",
        config_hash: cfg.hash()?,
        seed: cfg.iteration.seed,
        nodes: &cfg.nozzle.nodes,
        report: &report,
        domain: None,
    };
    write_json(&ctx.out.join("report.json"), &out)?;
    print_solve(&report);
    Ok(solve_status(&report))
}

#[derive(Serialize)]
struct SweepOutput {
    command: &'static str,
    config_hash: String,
    entries: Vec<SweepFile>,
    solution_slope: f64,
    contraction_slope: f64,
    /// `solution_norm / sigma` per entry.
    constants: Vec<f64>,
}

#[derive(Serialize)]
struct SweepFile {
    #[serde(flatten)]
    entry: SweepEntry,
    fields: String,
    report: String,
}

pub fn sweep_cmd(ctx: &Run) -> Result<i32> {
    let cfg = ctx.config;
    let Setup { grid, bg } = setup(cfg)?;
    let solver = FixedPointSolver::new(&grid, &bg)?;
    let jobs: Vec<Result<SweepFile>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .sweep
            .sigmas
            .iter()
            .map(|&sigma| {
                let (solver, grid, bg) = (&solver, &grid, &bg);
                scope.spawn(move || -> Result<SweepFile> {
                    let mut job = cfg.clone();
                    job.perturbation.sigma = sigma;
                    let stem = format!("sweep-{}", job.hash()?);
                    let data = perturb_data(bg, grid, sigma, &job.perturbation.shapes)?;
                    let (pair, report) = solver.run(&job.iteration_config(sigma), &data, None, None, &mut |_, _| {})?;
                    write_fields(ctx, grid, &stem, &pair, None)?;
                    let out = SolveOutput {
                        command: "sweep",
                        config_hash: job.hash()?,
                        seed: job.iteration.seed,
                        nodes: &job.nozzle.nodes,
                        report: &report,
                        domain: None,
                    };
                    write_json(&ctx.out.join(format!("{stem}.json")), &out)?;
                    let contraction = report.contraction_factors.first().copied().unwrap_or(0.0);
                    let ext = match ctx.format {
                        Format::Csv => "csv",
                        Format::Vtk => "vtk",
                    };
                    Ok(SweepFile {
                        entry: SweepEntry {
                            sigma,
                            solution_norm: pair.velocity.sup() + pair.electric.sup(),
                            contraction,
                            iterations: report.iterations,
                        },
                        fields: format!("{stem}.{ext}"),
                        report: format!("{stem}.json"),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep job panicked")).collect()
    });
    let entries = jobs.into_iter().collect::<Result<Vec<_>>>()?;
    let s: Vec<f64> = entries.iter().map(|e| e.entry.sigma).collect();
    let norms: Vec<f64> = entries.iter().map(|e| e.entry.solution_norm).collect();
    let kappa: Vec<f64> = entries.iter().map(|e| e.entry.contraction).collect();
    let solution_slope = log_log_slope(&s, &norms)?;
    // a sweep that converges before a ratio is measured has no contraction slope
    let contraction_slope = log_log_slope(&s, &kappa).unwrap_or(f64::NAN);
    let out = SweepOutput {
        command: "sweep",
        config_hash: cfg.hash()?,
        constants: entries.iter().map(|e| e.entry.solution_norm / e.entry.sigma).collect(),
        entries,
        solution_slope,
        contraction_slope,
    };
    write_json(&ctx.out.join("sweep.json"), &out)?;
    println!("sweep: solution slope {solution_slope:.4}, contraction slope {contraction_slope:.4}");
    Ok(if (solution_slope - 1.0).abs() <= 0.1 { 0 } else { 1 })
}

pub fn perturb_domain_cmd(ctx: &Run) -> Result<i32> {
    let cfg = ctx.config;
    let Setup { grid, bg } = setup(cfg)?;
    let sigma = cfg.perturbation.sigma;
    let data = perturb_data(&bg, &grid, sigma, &cfg.perturbation.shapes)?;
    let solver = FixedPointSolver::new(&grid, &bg)?;
    let map = cfg.domain_map();
    let (pair, report, summary) = solve_perturbed_with_method(
        &solver,
        &map,
        cfg.domain.jacobian,
        &cfg.iteration_config(sigma),
        &data,
        &mut |_, _| {},
    )?;
    let positions = (map.epsilon != 0.0).then(|| map.physical_coords(&grid));
    write_fields(ctx, &grid, "fields", &pair, positions.as_deref())?;
    let out = SolveOutput {
        command: "perturb-domain",
        config_hash: cfg.hash()?,
        seed: cfg.iteration.seed,
        nodes: &cfg.nozzle.nodes,
        report: &report,
        domain: Some(&summary),
    };
    write_json(&ctx.out.join("report.json"), &out)?;
    print_solve(&report);
    println!(
        "domain: epsilon = {:e}, deviation {:e}, correction sup {:e}",
        summary.epsilon, summary.deviation, summary.correction_sup
    );
    Ok(solve_status(&report))
}

#[derive(Serialize)]
struct VerifyOutput {
    command: &'static str,
    seed: u64,
    passed: bool,
    invariants: Vec<InvariantResult>,
}

pub fn verify_cmd(ctx: &Run) -> Result<i32> {
    let cfg = ctx.config;
    let rows = run_battery(&cfg.gas, cfg.iteration.seed)?;
    for r in &rows {
        println!("{}: {} ({:e}, required {})", r.name, if r.passed { "PASS" } else { "FAIL" }, r.value, r.threshold);
    }
    let passed = rows.iter().all(|r| r.passed);
    write_json(&ctx.out.join("verify.json"), &VerifyOutput { command: "verify", seed: cfg.iteration.seed, passed, invariants: rows })?;
    Ok(if passed { 0 } else { 1 })
}

pub fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
