#![allow(dead_code)]

use epnozzle::driver::FieldPair;
use epnozzle::elliptic::{assemble, solve, FrozenCoefficients, GridBackground, Sources};
use epnozzle::ode1d::{integrate_ivp, ChargeProfile, OneDParams};
use epnozzle::{build_grid, GasLaw, Nozzle, NozzleSpec};
use std::f64::consts::PI;

pub fn constant_params() -> OneDParams {
    OneDParams {
        law: GasLaw::default(),
        charge: ChargeProfile::Uniform { value: 1.0 },
        j0: 0.5,
        rho0: 1.0,
        e0: 0.0,
        length: 1.0,
    }
}

/// Monotone orbit with a sinusoidal doping profile.
pub fn varying_params() -> OneDParams {
    OneDParams {
        charge: ChargeProfile::Sine { base: 1.0, amplitude: 0.05 },
        rho0: 1.3,
        e0: 0.1,
        ..constant_params()
    }
}

/// Unit 2D nozzle with `cross x axial` nodes around the constant state.
pub fn constant_case(cross: usize, axial: usize) -> (Nozzle, GridBackground) {
    case(cross, axial, &constant_params())
}

pub fn case(cross: usize, axial: usize, params: &OneDParams) -> (Nozzle, GridBackground) {
    let grid = build_grid(&NozzleSpec::unit_2d(cross, axial)).unwrap();
    let sol = integrate_ivp(params, 1024).unwrap();
    let bg = GridBackground::for_grid(&sol, &grid).unwrap();
    (grid, bg)
}

/// Manufactured pair `v = cos(pi x') x_n^2`, `W = x_n (1 - x_n) cos(pi x')` for the
/// linear problem frozen at a constant background on the unit nozzle.
pub struct Manufactured {
    pub rho: f64,
    pub a_nn: f64,
    pub c: f64,
    pub bz: f64,
    pub j0: f64,
    pub sound_sq: f64,
}

impl Manufactured {
    pub fn new(fc: &FrozenCoefficients) -> Self {
        let p = &fc.exit.point;
        Manufactured {
            rho: p.rho_bg,
            a_nn: fc.exit.a_nn,
            c: fc.exit.coupling,
            bz: p.db_dz(),
            j0: fc.j0,
            sound_sq: p.sound_sq,
        }
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        (PI * x[0]).cos() * x[1] * x[1]
    }

    pub fn w(&self, x: &[f64]) -> f64 {
        x[1] * (1.0 - x[1]) * (PI * x[0]).cos()
    }

    fn grad_v(&self, x: &[f64]) -> [f64; 2] {
        [-PI * (PI * x[0]).sin() * x[1] * x[1], 2.0 * x[1] * (PI * x[0]).cos()]
    }

    pub fn flux(&self, x: &[f64]) -> [f64; 2] {
        let g = self.grad_v(x);
        [self.rho * g[0], self.a_nn * g[1] + self.c * self.w(x)]
    }

    pub fn charge(&self, x: &[f64]) -> f64 {
        let cx = (PI * x[0]).cos();
        let lap_w = -PI * PI * x[1] * (1.0 - x[1]) * cx - 2.0 * cx;
        lap_w - self.bz * self.w(x) + self.c * self.grad_v(x)[1]
    }

    pub fn exit_g(&self, x: &[f64]) -> f64 {
        -self.j0 / self.sound_sq * self.grad_v(x)[1]
    }

    pub fn sources(&self, grid: &Nozzle) -> Sources {
        let n = grid.num_nodes();
        let xs: Vec<Vec<f64>> = (0..n).map(|k| grid.coords(k)).collect();
        let flux: Vec<Vec<f64>> = (0..2).map(|a| xs.iter().map(|x| self.flux(x)[a]).collect()).collect();
        let charge: Vec<f64> = xs.iter().map(|x| self.charge(x)).collect();
        let g: Vec<f64> = grid.exit_nodes().map(|k| self.exit_g(&xs[k])).collect();
        let zero = vec![0.0; grid.cross_len()];
        Sources::from_nodal(grid, &flux, &charge, &g, &zero, &zero).unwrap()
    }

    /// Max-norm errors of the discrete solution in `(v, W)`.
    pub fn errors(&self, grid: &Nozzle, pair: &FieldPair) -> (f64, f64) {
        let mut ev: f64 = 0.0;
        let mut ew: f64 = 0.0;
        for k in 0..grid.num_nodes() {
            let x = grid.coords(k);
            ev = ev.max((pair.velocity.values[k] - self.v(&x)).abs());
            ew = ew.max((pair.electric.values[k] - self.w(&x)).abs());
        }
        (ev, ew)
    }
}

/// Solves the manufactured problem on a `cross x axial` grid; returns the max error.
pub fn manufactured_error(cross: usize, axial: usize) -> f64 {
    let (grid, bg) = constant_case(cross, axial);
    let fc = FrozenCoefficients::new(&bg, &grid).unwrap();
    let m = Manufactured::new(&fc);
    let sys = assemble(&fc, &grid, &m.sources(&grid)).unwrap();
    let (pair, _) = solve(&grid, &sys).unwrap();
    let (ev, ew) = m.errors(&grid, &pair);
    ev.max(ew)
}
