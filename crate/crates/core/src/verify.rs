//! Invariant battery behind the `verify` command.
//!
//! Each check runs at a fixed desk-scale size and reports a measured value
//! against its threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::PI;

use crate::coeffs::derivatives;
use crate::elliptic::{
    assemble, assemble_operator, coercivity_check, cross_term_sum, random_test_pair, solve, FrozenCoefficients,
    GridBackground, Sources, TestPairs,
};
use crate::error::Result;
use crate::gas::GasLaw;
use crate::grid::{build_grid, Nozzle, NozzleSpec};
use crate::ode1d::{integrate_ivp, ChargeProfile, OneDParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: String,
}

fn result(name: &str, passed: bool, value: f64, threshold: &str) -> InvariantResult {
    InvariantResult { name: name.into(), passed, value, threshold: threshold.into() }
}

/// `max |d_z A + d_q B|` over random subsonic states with density in `[0.1, 3]`.
pub fn structural_identity(law: &GasLaw, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let rho: f64 = rng.random_range(0.1..3.0);
        let dim = rng.random_range(2..4);
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let speed = law.sound_speed(rho)? * rng.random_range(0.0..0.95);
        let q: Vec<f64> = dir.iter().map(|v| v / norm * speed).collect();
        let z = 0.5 * speed * speed + law.enthalpy(rho)?;
        let d = derivatives(law, z, &q)?;
        for (a, b) in d.da_dz.iter().zip(&d.db_dq) {
            worst = worst.max((a + b).abs());
        }
    }
    Ok(worst)
}

/// `max |h(h^-1(s)) - s|` for `s` between `h(1e-3)` and `h(10)`.
pub fn enthalpy_roundtrip(law: &GasLaw, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (lo, hi) = (law.enthalpy(1e-3)?, law.enthalpy(10.0)?);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let s = rng.random_range(lo..hi);
        worst = worst.max((law.enthalpy(law.enthalpy_inverse(s)?)? - s).abs());
    }
    Ok(worst)
}

/// Observed order of the 1D integrator from end densities at 16, 32 and 64 steps.
pub fn rk4_order(params: &OneDParams) -> Result<f64> {
    let end = |n| -> Result<f64> { Ok(*integrate_ivp(params, n)?.rho.last().unwrap()) };
    let (a, b, c) = (end(16)?, end(32)?, end(64)?);
    Ok(((a - b) / (b - c)).abs().log2())
}

fn unit_case(law: GasLaw, cross: usize, axial: usize) -> Result<(Nozzle, GridBackground)> {
    let grid = build_grid(&NozzleSpec::unit_2d(cross, axial))?;
    let params = OneDParams { law, charge: ChargeProfile::Uniform { value: 1.0 }, j0: 0.5, rho0: 1.0, e0: 0.0, length: 1.0 };
    let bg = GridBackground::for_grid(&integrate_ivp(&params, 1024)?, &grid)?;
    Ok((grid, bg))
}

/// Max-norm error of the linear solve against `v = cos(pi x') x_n^2`,
/// `W = x_n (1 - x_n) cos(pi x')` at a constant background.
pub fn manufactured_error(law: GasLaw, cross: usize, axial: usize) -> Result<f64> {
    let (grid, bg) = unit_case(law, cross, axial)?;
    let fc = FrozenCoefficients::new(&bg, &grid)?;
    let p = &fc.exit.point;
    let (rho, a_nn, c, bz) = (p.rho_bg, fc.exit.a_nn, fc.exit.coupling, p.db_dz());
    let exit_scale = -fc.j0 / p.sound_sq;
    let v = |x: &[f64]| (PI * x[0]).cos() * x[1] * x[1];
    let w = |x: &[f64]| x[1] * (1.0 - x[1]) * (PI * x[0]).cos();
    let gv = |x: &[f64]| [-PI * (PI * x[0]).sin() * x[1] * x[1], 2.0 * x[1] * (PI * x[0]).cos()];
    let xs: Vec<Vec<f64>> = (0..grid.num_nodes()).map(|k| grid.coords(k)).collect();
    let flux = vec![
        xs.iter().map(|x| rho * gv(x)[0]).collect(),
        xs.iter().map(|x| a_nn * gv(x)[1] + c * w(x)).collect(),
    ];
    let charge: Vec<f64> = xs
        .iter()
        .map(|x| {
            let cx = (PI * x[0]).cos();
            -PI * PI * x[1] * (1.0 - x[1]) * cx - 2.0 * cx - bz * w(x) + c * gv(x)[1]
        })
        .collect();
    let g: Vec<f64> = grid.exit_nodes().map(|k| exit_scale * gv(&xs[k])[1]).collect();
    let zero = vec![0.0; grid.cross_len()];
    let sources = Sources::from_nodal(&grid, &flux, &charge, &g, &zero, &zero)?;
    let (pair, _) = solve(&grid, &assemble(&fc, &grid, &sources)?)?;
    Ok(xs.iter().enumerate().fold(0.0, |m: f64, (k, x)| {
        m.max((pair.velocity.values[k] - v(x)).abs()).max((pair.electric.values[k] - w(x)).abs())
    }))
}

/// Runs every invariant; the gas law is taken from the configuration.
pub fn run_battery(law: &GasLaw, seed: u64) -> Result<Vec<InvariantResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let id = structural_identity(law, 10_000, &mut rng)?;
    out.push(result("structural identity", id < 1e-13, id, "< 1e-13"));
    let rt = enthalpy_roundtrip(law, 10_000, &mut rng)?;
    out.push(result("enthalpy roundtrip", rt < 1e-12, rt, "< 1e-12"));

    let orbit = OneDParams {
        law: *law,
        charge: ChargeProfile::Sine { base: 1.0, amplitude: 0.05 },
        j0: 0.5,
        rho0: 1.3,
        e0: 0.1,
        length: 1.0,
    };
    let order = rk4_order(&orbit)?;
    out.push(result("ODE integrator order", (3.7..=4.3).contains(&order), order, "in [3.7, 4.3]"));

    let (grid, bg) = unit_case(*law, 33, 65)?;
    let fc = FrozenCoefficients::new(&bg, &grid)?;
    let op = assemble_operator(&fc, &grid)?;
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let (xi, eta) = random_test_pair(&grid, &op, &mut rng, t % 2 == 1);
        worst = worst.max(cross_term_sum(&op, &xi, &eta).abs());
    }
    out.push(result("coupling cancellation", worst < 1e-12, worst, "< 1e-12"));
    let ratio = coercivity_check(&grid, &op, 100, seed, TestPairs::Mixed)?;
    let bound = 0.9 * fc.lambda.min(1.0);
    out.push(result("discrete coercivity", ratio >= bound, ratio, &format!(">= {bound:.6}")));

    let errs = [manufactured_error(*law, 17, 33)?, manufactured_error(*law, 33, 65)?, manufactured_error(*law, 65, 129)?];
    let orders = [(errs[0] / errs[1]).log2(), (errs[1] / errs[2]).log2()];
    let low = orders[0].min(orders[1]);
    let ok = orders.iter().all(|o| (1.7..=2.3).contains(o));
    out.push(result("manufactured convergence order", ok, low, "in [1.7, 2.3]"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manufactured_error_shrinks_fourfold() {
        let law = GasLaw::default();
        let a = manufactured_error(law, 9, 17).unwrap();
        let b = manufactured_error(law, 17, 33).unwrap();
        assert!((a / b - 4.0).abs() < 0.6, "{a} {b}");
    }

    #[test]
    fn battery_passes_for_default_gas() {
        let rows = run_battery(&GasLaw::default(), 42).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows {
            assert!(r.passed, "{r:?}");
        }
    }
}
