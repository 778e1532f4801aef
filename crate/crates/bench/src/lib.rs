//! Shared fixtures for the benchmarks.

use epnozzle::elliptic::GridBackground;
use epnozzle::ode1d::{integrate_ivp, ChargeProfile, OneDParams};
use epnozzle::{build_grid, GasLaw, Nozzle, NozzleSpec};

/// Unit 2D nozzle around the constant state `rho = b = 1`, `J0 = 0.5`.
pub fn constant_case(cross: usize, axial: usize) -> (Nozzle, GridBackground) {
    let grid = build_grid(&NozzleSpec::unit_2d(cross, axial)).expect("grid");
    let params = OneDParams {
        law: GasLaw::default(),
        charge: ChargeProfile::Uniform { value: 1.0 },
        j0: 0.5,
        rho0: 1.0,
        e0: 0.0,
        length: 1.0,
    };
    let sol = integrate_ivp(&params, 1024).expect("background");
    let bg = GridBackground::for_grid(&sol, &grid).expect("background on grid");
    (grid, bg)
}
