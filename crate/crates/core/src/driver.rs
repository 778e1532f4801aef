//! Picard iteration for the nonlinear problem around a one-dimensional background.
//!
//! Each step freezes the current iterate inside the quadratic remainders, solves the
//! linearized problem with the factorization of the (background-only) operator, and
//! records the successive difference. The exit trace `s = d_n psi` produced by the
//! conormal row is carried to the next step, where it closes the exit gradient.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffs::{dot, exit_g_unchecked, remainder_kernel, Deltas};
use crate::elliptic::{
    assemble_operator, assemble_rhs, dirichlet_energy, load_vector, CrossProfile, Factorization, FrozenCoefficients,
    GridBackground, LinearOperator, Sources,
};
use crate::error::{Error, Result};
use crate::grid::{Nozzle, ScalarField};

/// Perturbation pair `(psi, Psi) = (phi, Phi) - (phi0, Phi0)` and the exit trace of `d_n psi`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub velocity: ScalarField,
    pub electric: ScalarField,
    /// Exit normal derivative of the velocity perturbation, per cross-section node.
    pub exit_slope: Vec<f64>,
}

impl FieldPair {
    pub fn zeros(grid: &Nozzle) -> Self {
        FieldPair {
            velocity: ScalarField::zeros(grid),
            electric: ScalarField::zeros(grid),
            exit_slope: vec![0.0; grid.cross_len()],
        }
    }

    /// `max(sup|psi - psi'|, sup|Psi - Psi'|)`
    pub fn sup_distance(&self, other: &FieldPair) -> f64 {
        let d = |a: &ScalarField, b: &ScalarField| {
            a.values.iter().zip(&b.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        d(&self.velocity, &other.velocity).max(d(&self.electric, &other.electric))
    }

    fn h1_distance(&self, grid: &Nozzle, other: &FieldPair) -> f64 {
        let diff = |a: &ScalarField, b: &ScalarField| -> Vec<f64> {
            a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect()
        };
        (dirichlet_energy(grid, &diff(&self.velocity, &other.velocity))
            + dirichlet_energy(grid, &diff(&self.electric, &other.electric)))
        .sqrt()
    }
}

/// Shape of the doping perturbation `b - b0 = sigma * amplitude * cos(m pi x_n / L) * prod_j cos(m_j pi x_j')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeShape {
    pub amplitude: f64,
    pub axial_mode: u32,
    pub cross_modes: Vec<u32>,
}

/// Unit-size shapes of the boundary and doping perturbations; all are scaled by `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationShapes {
    /// `Phi_en - Phi_en0`
    pub entrance: CrossProfile,
    /// `Phi_ex`
    pub exit: CrossProfile,
    /// `p_ex - p_ex0`
    pub pressure: CrossProfile,
    /// `B0 - B00`
    pub bernoulli_shift: f64,
    pub charge: ChargeShape,
}

impl Default for PerturbationShapes {
    fn default() -> Self {
        PerturbationShapes {
            entrance: CrossProfile::cosine(1.0, vec![1]),
            exit: CrossProfile::cosine(1.0, vec![1]),
            pressure: CrossProfile::cosine(1.0, vec![1]),
            bernoulli_shift: 0.0,
            charge: ChargeShape { amplitude: 1.0, axial_mode: 1, cross_modes: vec![1] },
        }
    }
}

/// Boundary data and doping of the perturbed problem, sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub sigma: f64,
    /// `Phi_en - Phi_en0` per cross-section node.
    pub entrance: Vec<f64>,
    /// `Phi_ex` per cross-section node.
    pub exit: Vec<f64>,
    pub pex: Vec<f64>,
    /// Bernoulli constant `B0`.
    pub bernoulli: f64,
    /// Doping `b` per node.
    pub charge: Vec<f64>,
    /// Dirichlet data of `Psi` on the entrance and exit faces.
    pub psi_en: Vec<f64>,
    pub psi_ex: Vec<f64>,
}

fn check_unit(name: &str, p: &CrossProfile) -> Result<()> {
    if !(p.offset.abs() + p.amplitude.abs() <= 1.0 + 1e-15) {
        return Err(Error::Domain(format!("{name} shape exceeds unit size")));
    }
    Ok(())
}

/// Samples the perturbed data of size `sigma` on the grid.
pub fn perturb_data(bg: &GridBackground, grid: &Nozzle, sigma: f64, shapes: &PerturbationShapes) -> Result<BoundaryData> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma = {sigma} must be finite and nonnegative")));
    }
    check_unit("entrance", &shapes.entrance)?;
    check_unit("exit", &shapes.exit)?;
    check_unit("pressure", &shapes.pressure)?;
    if !(shapes.bernoulli_shift.abs() <= 1.0) || !(shapes.charge.amplitude.abs() <= 1.0) {
        return Err(Error::Domain("Bernoulli and doping shapes must have unit size".into()));
    }
    for (name, p) in [("entrance", &shapes.entrance), ("exit", &shapes.exit)] {
        let d = p.wall_defect(grid);
        if d > crate::elliptic::COMPATIBILITY_TOL {
            return Err(Error::Compatibility(format!("{name} potential has wall-normal derivative {d:e}")));
        }
    }
    let scale = |v: Vec<f64>| v.into_iter().map(|x| sigma * x).collect::<Vec<_>>();
    let entrance = scale(shapes.entrance.sample(grid));
    let exit = scale(shapes.exit.sample(grid));
    let pex0 = bg.triple.pex0;
    let pex: Vec<f64> = shapes.pressure.sample(grid).into_iter().map(|x| pex0 + sigma * x).collect();
    if pex.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Domain("exit pressure must stay positive".into()));
    }
    let shift = sigma * shapes.bernoulli_shift;
    let pi = std::f64::consts::PI;
    let cs = &shapes.charge;
    let charge = (0..grid.num_nodes())
        .map(|k| {
            let x = grid.coords(k);
            let mut w = (cs.axial_mode as f64 * pi * x[grid.axial()] / grid.length()).cos();
            for j in 0..grid.axial() {
                let m = cs.cross_modes.get(j).copied().unwrap_or(0) as f64;
                w *= (m * pi * (x[j] - grid.lower[j]) / (grid.upper[j] - grid.lower[j])).cos();
            }
            bg.charge[grid.axial_index(k)] + sigma * cs.amplitude * w
        })
        .collect();
    Ok(BoundaryData {
        sigma,
        psi_en: entrance.iter().map(|v| shift + v).collect(),
        psi_ex: exit.iter().map(|v| shift + v).collect(),
        entrance,
        exit,
        pex,
        bernoulli: bg.triple.b00 + shift,
        charge,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub sigma: f64,
    /// Iteration-ball radius multiplier `M`; `M sigma <= delta3` is required.
    pub m: f64,
    pub max_iter: usize,
    /// Successive-difference stop; `None` selects `max(1e-10, 1e-3 sigma h^2)`.
    pub tol: Option<f64>,
    /// Admissibility radii; `None` takes them from the background.
    pub deltas: Option<Deltas>,
    pub seed: u64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig { sigma: 1e-3, m: 10.0, max_iter: 50, tol: None, deltas: None, seed: 42 }
    }
}

impl IterationConfig {
    pub fn tolerance(&self, grid: &Nozzle) -> f64 {
        self.tol.unwrap_or_else(|| {
            let h = grid.spacing.iter().cloned().fold(0.0, f64::max);
            1e-10f64.max(1e-3 * self.sigma * h * h)
        })
    }
}

/// Residual of the discrete nonlinear problem, split by equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualBreakdown {
    /// Mass conservation rows (interior, wall and exit nodes), strong scaling.
    pub flow: f64,
    /// Poisson rows strictly between the end faces.
    pub charge: f64,
    /// `max |p(rho) - p_ex|` on the exit face.
    pub exit_pressure: f64,
    pub dirichlet: f64,
    /// Rounding allowance of the row evaluations (`16 eps` times the summed term sizes).
    pub roundoff: f64,
    pub exit_roundoff: f64,
}

impl ResidualBreakdown {
    pub fn total(&self) -> f64 {
        self.flow.max(self.charge).max(self.exit_pressure).max(self.dirichlet)
    }

    /// Discretization floor when evaluated on the unperturbed problem: the measured
    /// residual or the rounding allowance, whichever is larger.
    pub fn floor(&self) -> ResidualFloor {
        ResidualFloor {
            total: self.total().max(self.roundoff).max(self.exit_roundoff),
            exit_pressure: self.exit_pressure.max(self.exit_roundoff),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualFloor {
    pub total: f64,
    pub exit_pressure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldNorms {
    pub sup: f64,
    /// Discrete `H^1` seminorm.
    pub h1: f64,
    /// Largest sampled Hölder quotient of exponent `alpha`.
    pub holder: f64,
    /// `max d^(1+alpha) |D^2 u|` with `d` the distance to the corner set; heuristic.
    pub corner_weighted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub alpha: f64,
    pub velocity: FieldNorms,
    pub electric: FieldNorms,
    pub velocity_gradient_sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub sigma: f64,
    pub m: f64,
    pub delta3: f64,
    pub tolerance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Successive sup differences.
    pub diffs: Vec<f64>,
    /// Successive discrete `H^1` differences.
    pub h1_diffs: Vec<f64>,
    pub contraction_factors: Vec<f64>,
    pub subsonic_margin: f64,
    pub nonlinear_residual: f64,
    pub residual: ResidualBreakdown,
    pub residual_floor: ResidualFloor,
    pub norm_summary: NormSummary,
    /// `(sup|psi| + sup|D psi| + sup|Psi|) / (M sigma)`, diagnostic.
    pub ball_ratio: f64,
}

/// State handed to source corrections at each step.
pub struct IterateView<'a> {
    pub grid: &'a Nozzle,
    pub background: &'a GridBackground,
    pub data: &'a BoundaryData,
    pub pair: &'a FieldPair,
    /// Nodal gradient of `psi`, one array per axis.
    pub gradient: &'a [Vec<f64>],
}

/// Extra source terms, added to the remainders every step.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTerms {
    /// Flux correction along the edge axis, per edge.
    pub flux: Vec<f64>,
    /// Divergence-form charge correction along the edge axis, per edge.
    pub charge_flux: Vec<f64>,
    pub charge_node: Vec<f64>,
    /// Shift of the exit pressure, per cross-section node.
    pub exit_pressure: Vec<f64>,
}

impl CorrectionTerms {
    pub fn zeros(grid: &Nozzle) -> Self {
        CorrectionTerms {
            flux: vec![0.0; grid.edges.len()],
            charge_flux: vec![0.0; grid.edges.len()],
            charge_node: vec![0.0; grid.num_nodes()],
            exit_pressure: vec![0.0; grid.cross_len()],
        }
    }
}

pub trait SourceCorrection: Sync {
    fn corrections(&self, view: &IterateView<'_>) -> Result<CorrectionTerms>;
}

/// Nodal gradient of `psi`: central differences inside, zero wall-normal derivative,
/// second-order one-sided at the entrance and the carried exit trace on the exit face.
pub fn nodal_gradient(grid: &Nozzle, psi: &[f64], exit_slope: &[f64]) -> Vec<Vec<f64>> {
    let ax = grid.axial();
    (0..grid.dim())
        .map(|a| {
            let h = grid.spacing[a];
            let st = grid.strides[a];
            (0..grid.num_nodes())
                .map(|k| {
                    if a == ax {
                        if grid.on_entrance(k) {
                            (-3.0 * psi[k] + 4.0 * psi[k + st] - psi[k + 2 * st]) / (2.0 * h)
                        } else if grid.on_exit(k) {
                            exit_slope[grid.cross_index(k)]
                        } else {
                            (psi[k + st] - psi[k - st]) / (2.0 * h)
                        }
                    } else if grid.on_low(k, a) || grid.on_high(k, a) {
                        0.0
                    } else {
                        (psi[k + st] - psi[k - st]) / (2.0 * h)
                    }
                })
                .collect()
        })
        .collect()
}

fn edge_perturbation(grid: &Nozzle, e: &crate::grid::Edge, pair: &FieldPair, grad: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let psi = &pair.velocity.values;
    let big = &pair.electric.values;
    let z = 0.5 * (big[e.lo] + big[e.hi]);
    let q = (0..grid.dim())
        .map(|j| {
            if j == e.axis {
                (psi[e.hi] - psi[e.lo]) / grid.spacing[j]
            } else {
                0.5 * (grad[j][e.lo] + grad[j][e.hi])
            }
        })
        .collect();
    (z, q)
}

fn exit_perturbation(grid: &Nozzle, k: usize, grad: &[Vec<f64>]) -> Vec<f64> {
    (0..grid.dim()).map(|j| grad[j][k]).collect()
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Background-dependent part of the iteration: frozen coefficients and the factored operator.
pub struct FixedPointSolver<'a> {
    pub grid: &'a Nozzle,
    pub background: &'a GridBackground,
    pub coeffs: FrozenCoefficients,
    factor: Factorization,
}

impl<'a> FixedPointSolver<'a> {
    pub fn new(grid: &'a Nozzle, background: &'a GridBackground) -> Result<Self> {
        if grid.counts[grid.axial()] < 3 {
            return Err(Error::DegenerateGrid("the iteration needs at least 3 axial nodes".into()));
        }
        let coeffs = FrozenCoefficients::new(background, grid)?;
        let op = Arc::new(assemble_operator(&coeffs, grid)?);
        let factor = Factorization::new(op)?;
        Ok(FixedPointSolver { grid, background, coeffs, factor })
    }

    pub fn operator(&self) -> &Arc<LinearOperator> {
        self.factor.operator()
    }

    pub fn deltas(&self, config: &IterationConfig) -> Deltas {
        config.deltas.unwrap_or(self.coeffs.deltas)
    }

    /// Checks that the iterate stays where the remainders are defined.
    pub fn check_admissible(&self, pair: &FieldPair, grad: &[Vec<f64>], deltas: &Deltas) -> Result<()> {
        let gsup = gradient_sup(grad);
        let size = pair.velocity.sup() + pair.electric.sup() + gsup;
        if !(size < 3.0 * deltas.delta1) {
            return Err(Error::AdmissibilityExit(format!(
                "sup|Psi| + sup|psi| + sup|D psi| = {size:e} reached 3 delta1 = {:e}",
                3.0 * deltas.delta1
            )));
        }
        if !(gsup < 2.0 * deltas.delta2) {
            return Err(Error::AdmissibilityExit(format!(
                "sup|D psi| = {gsup:e} reached 2 delta2 = {:e}",
                2.0 * deltas.delta2
            )));
        }
        Ok(())
    }

    /// Right-hand side of the linearized problem frozen at `current`.
    pub fn sources(
        &self,
        current: &FieldPair,
        grad: &[Vec<f64>],
        data: &BoundaryData,
        correction: Option<&dyn SourceCorrection>,
    ) -> Result<Sources> {
        let grid = self.grid;
        let law = &self.coeffs.law;
        let ax = grid.axial();
        let mut s = Sources::zeros(grid);
        let mut pex = data.pex.clone();
        let terms = match correction {
            Some(corr) => {
                let view = IterateView { grid, background: self.background, data, pair: current, gradient: grad };
                Some(corr.corrections(&view)?)
            }
            None => None,
        };
        if let Some(t) = &terms {
            for (p, d) in pex.iter_mut().zip(&t.exit_pressure) {
                *p += d;
            }
        }
        for (i, e) in grid.edges.iter().enumerate() {
            let point = &self.coeffs.edge_points[i];
            let (z, q) = edge_perturbation(grid, e, current, grad);
            let kern = remainder_kernel(law, point, z, &q)?;
            s.flux[i] = kern.flux(point, &q, e.axis);
            if e.axis == ax {
                s.charge_edge[i] = kern.charge(point);
            }
        }
        let point = &self.coeffs.exit.point;
        for (c, k) in grid.exit_nodes().enumerate() {
            let q = exit_perturbation(grid, k, grad);
            let z = data.psi_ex[c];
            s.exit_flux[c] = remainder_kernel(law, point, z, &q)?.flux(point, &q, ax);
            s.exit_g[c] = exit_g_unchecked(law, point, &q, pex[c], z)?;
        }
        for k in 0..grid.num_nodes() {
            s.charge_node[k] = self.background.charge[grid.axial_index(k)] - data.charge[k];
        }
        s.w_en = data.psi_en.clone();
        s.w_ex = data.psi_ex.clone();
        if let Some(t) = terms {
            for (a, b) in s.flux.iter_mut().zip(&t.flux) {
                *a += b;
            }
            for (a, b) in s.charge_node.iter_mut().zip(&t.charge_node) {
                *a += b;
            }
            s.charge_flux = t.charge_flux;
        }
        Ok(s)
    }

    /// One application of the iteration map.
    pub fn step(
        &self,
        current: &FieldPair,
        data: &BoundaryData,
        deltas: &Deltas,
        correction: Option<&dyn SourceCorrection>,
    ) -> Result<FieldPair> {
        let grad = nodal_gradient(self.grid, &current.velocity.values, &current.exit_slope);
        self.check_admissible(current, &grad, deltas)?;
        let sources = self.sources(current, &grad, data, correction)?;
        let system = assemble_rhs(self.operator().clone(), self.grid, &sources)?;
        Ok(self.factor.solve(self.grid, &system)?.0)
    }

    /// Picard iteration from `start` (the origin when `None`).
    pub fn run(
        &self,
        config: &IterationConfig,
        data: &BoundaryData,
        start: Option<&FieldPair>,
        correction: Option<&dyn SourceCorrection>,
        observer: &mut dyn FnMut(usize, &FieldPair),
    ) -> Result<(FieldPair, SolveReport)> {
        let grid = self.grid;
        let deltas = self.deltas(config);
        let delta3 = deltas.delta3();
        if !(config.m > 0.0) {
            return Err(Error::Domain("M must be positive".into()));
        }
        if config.m * config.sigma > delta3 {
            return Err(Error::AdmissibilityExit(format!(
                "M sigma = {:e} exceeds delta3 = {delta3:e}",
                config.m * config.sigma
            )));
        }
        let tol = config.tolerance(grid);
        let bg = self.background;
        let background_scale = bg.rho.iter().chain(&bg.u).fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut current = start.cloned().unwrap_or_else(|| FieldPair::zeros(grid));
        let mut diffs = Vec::new();
        let mut h1_diffs = Vec::new();
        let mut factors = Vec::new();
        let mut streak = 0;
        let mut converged = false;
        for it in 1..=config.max_iter {
            let next = self.step(&current, data, &deltas, correction)?;
            let diff = next.sup_distance(&current);
            h1_diffs.push(next.h1_distance(grid, &current));
            observer(it, &next);
            let scale = next.velocity.sup().max(next.electric.sup()) + background_scale;
            current = next;
            // the remainders subtract O(background) quantities, so iterates cannot agree
            // closer than the rounding at that size
            let stalled = diff <= 1024.0 * f64::EPSILON * scale;
            if let Some(&prev) = diffs.last() {
                if !stalled {
                    let ratio: f64 = diff / prev;
                    factors.push(ratio);
                    streak = if ratio >= 1.0 { streak + 1 } else { 0 };
                    if streak >= 3 {
                        return Err(Error::NonContraction { ratios: factors });
                    }
                }
            }
            diffs.push(diff);
            if diff < tol || stalled {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::MaxIterations { iterations: config.max_iter, last_diff: *diffs.last().unwrap_or(&f64::NAN) });
        }
        let grad = nodal_gradient(grid, &current.velocity.values, &current.exit_slope);
        self.check_admissible(&current, &grad, &deltas)?;
        let residual = self.residual(&current, data, correction)?;
        let zero_data = BoundaryData {
            sigma: 0.0,
            entrance: vec![0.0; grid.cross_len()],
            exit: vec![0.0; grid.cross_len()],
            pex: vec![self.background.triple.pex0; grid.cross_len()],
            bernoulli: self.background.triple.b00,
            charge: (0..grid.num_nodes()).map(|k| self.background.charge[grid.axial_index(k)]).collect(),
            psi_en: vec![0.0; grid.cross_len()],
            psi_ex: vec![0.0; grid.cross_len()],
        };
        let floor = self.residual(&FieldPair::zeros(grid), &zero_data, None)?.floor();
        let norm_summary = norms(grid, &current, 0.5, config.seed);
        let ball = (current.velocity.sup() + current.electric.sup() + gradient_sup(&grad)) / (config.m * config.sigma);
        let report = SolveReport {
            sigma: config.sigma,
            m: config.m,
            delta3,
            tolerance: tol,
            iterations: diffs.len(),
            converged,
            diffs,
            h1_diffs,
            contraction_factors: factors,
            subsonic_margin: self.subsonic_margin(&current)?,
            nonlinear_residual: residual.total(),
            residual,
            residual_floor: floor,
            norm_summary,
            ball_ratio: if ball.is_finite() { ball } else { 0.0 },
        };
        Ok((current, report))
    }

    /// `min_nodes p'(rho) - |D phi|^2` of the full flow.
    pub fn subsonic_margin(&self, pair: &FieldPair) -> Result<f64> {
        let grid = self.grid;
        let law = &self.coeffs.law;
        let grad = nodal_gradient(grid, &pair.velocity.values, &pair.exit_slope);
        let mut margin = f64::INFINITY;
        for k in 0..grid.num_nodes() {
            let i = grid.axial_index(k);
            let mut q: Vec<f64> = (0..grid.dim()).map(|j| grad[j][k]).collect();
            q[grid.axial()] += self.background.u[i];
            let speed_sq = dot(&q, &q);
            let rho = crate::coeffs::density(law, self.background.potential[i] + pair.electric.values[k], speed_sq)?;
            margin = margin.min(law.dp(rho) - speed_sq);
        }
        Ok(margin)
    }

    /// Residual of the discrete nonlinear equations at `(phi0 + psi, Phi0 + Psi)`.
    ///
    /// Rows are the weak rows of the scheme divided by the nodal weight, so a smooth
    /// exact solution leaves a consistency error of second order.
    pub fn residual(
        &self,
        pair: &FieldPair,
        data: &BoundaryData,
        correction: Option<&dyn SourceCorrection>,
    ) -> Result<ResidualBreakdown> {
        let grid = self.grid;
        let bg = self.background;
        let law = &self.coeffs.law;
        let n = grid.num_nodes();
        let ax = grid.axial();
        let psi = &pair.velocity.values;
        let big = &pair.electric.values;
        let grad = nodal_gradient(grid, psi, &pair.exit_slope);
        let phi_full: Vec<f64> = (0..n).map(|k| bg.velocity_potential[grid.axial_index(k)] + psi[k]).collect();
        let pot_full: Vec<f64> = (0..n).map(|k| bg.potential[grid.axial_index(k)] + big[k]).collect();

        let mut rows = vec![0.0; 2 * n];
        let mut scale = vec![0.0; 2 * n];
        for (i, e) in grid.edges.iter().enumerate() {
            let h = grid.spacing[e.axis];
            let wh = e.weight / h;
            let point = &self.coeffs.edge_points[i];
            let (_, mut q) = edge_perturbation(grid, e, pair, &grad);
            for (qj, q0) in q.iter_mut().zip(&point.dphi0) {
                *qj += q0;
            }
            q[e.axis] = (phi_full[e.hi] - phi_full[e.lo]) / h;
            let zf = 0.5 * (pot_full[e.lo] + pot_full[e.hi]);
            let rho = crate::coeffs::density(law, zf, dot(&q, &q))?;
            let flux = rho * q[e.axis];
            let fs = wh * (flux.abs() + rho * (phi_full[e.lo].abs() + phi_full[e.hi].abs()) / h);
            rows[e.hi] += wh * flux;
            rows[e.lo] -= wh * flux;
            scale[e.hi] += fs;
            scale[e.lo] += fs;
            let dpot = (pot_full[e.hi] - pot_full[e.lo]) / h;
            let cs = wh * (pot_full[e.lo].abs() + pot_full[e.hi].abs()) / h;
            rows[n + e.hi] += wh * dpot;
            rows[n + e.lo] -= wh * dpot;
            scale[n + e.hi] += cs;
            scale[n + e.lo] += cs;
            if e.axis == ax {
                let m = 0.5 * e.weight * rho;
                rows[n + e.lo] += m;
                rows[n + e.hi] += m;
                scale[n + e.lo] += m.abs();
                scale[n + e.hi] += m.abs();
            }
        }
        for k in 0..n {
            let b = grid.node_weights[k] * data.charge[k];
            rows[n + k] -= b;
            scale[n + k] += b.abs();
        }
        let terms = match correction {
            Some(corr) => Some(corr.corrections(&IterateView { grid, background: bg, data, pair, gradient: &grad })?),
            None => None,
        };
        let mut exit_pressure: f64 = 0.0;
        let mut exit_roundoff: f64 = 0.0;
        let u_l = *bg.u.last().expect("axial nodes");
        let pot_l = *bg.potential.last().expect("axial nodes");
        for (c, k) in grid.exit_nodes().enumerate() {
            let mut q = exit_perturbation(grid, k, &grad);
            q[ax] += u_l;
            let rho = crate::coeffs::density(law, pot_l + data.psi_ex[c], dot(&q, &q))?;
            let w = grid.face_weight(k);
            rows[k] -= w * rho * q[ax];
            scale[k] += w * (rho * q[ax]).abs();
            let p = law.p(rho);
            let target = data.pex[c] + terms.as_ref().map_or(0.0, |t| t.exit_pressure[c]);
            exit_pressure = exit_pressure.max((p - target).abs());
            exit_roundoff = exit_roundoff.max(16.0 * f64::EPSILON * p.abs().max(target.abs()));
        }
        if let Some(t) = &terms {
            let zeros = vec![0.0; grid.edges.len()];
            let load = load_vector(grid, &t.flux, &t.charge_flux, &zeros, &t.charge_node);
            for (r, l) in rows.iter_mut().zip(&load) {
                *r -= l;
            }
        }

        let mut out = ResidualBreakdown {
            flow: 0.0,
            charge: 0.0,
            exit_pressure,
            dirichlet: 0.0,
            roundoff: 0.0,
            exit_roundoff,
        };
        for k in 0..n {
            let hk = grid.node_weights[k];
            let c = grid.cross_index(k);
            if grid.on_entrance(k) {
                out.dirichlet = out.dirichlet.max(psi[k].abs()).max((big[k] - data.psi_en[c]).abs());
                continue;
            }
            out.flow = out.flow.max(rows[k].abs() / hk);
            out.roundoff = out.roundoff.max(16.0 * f64::EPSILON * scale[k] / hk);
            if grid.on_exit(k) {
                out.dirichlet = out.dirichlet.max((big[k] - data.psi_ex[c]).abs());
            } else {
                out.charge = out.charge.max(rows[n + k].abs() / hk);
                out.roundoff = out.roundoff.max(16.0 * f64::EPSILON * scale[n + k] / hk);
            }
        }
        Ok(out)
    }
}

fn gradient_sup(grad: &[Vec<f64>]) -> f64 {
    let n = grad.first().map_or(0, |g| g.len());
    (0..n).map(|k| grad.iter().map(|g| g[k] * g[k]).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

/// One application of the iteration map, building the solver on the spot.
pub fn iteration_step(
    current: &FieldPair,
    data: &BoundaryData,
    background: &GridBackground,
    grid: &Nozzle,
) -> Result<FieldPair> {
    let solver = FixedPointSolver::new(grid, background)?;
    let deltas = solver.coeffs.deltas;
    solver.step(current, data, &deltas, None)
}

pub fn run_fixed_point(
    config: &IterationConfig,
    data: &BoundaryData,
    background: &GridBackground,
    grid: &Nozzle,
) -> Result<(FieldPair, SolveReport)> {
    FixedPointSolver::new(grid, background)?.run(config, data, None, None, &mut |_, _| {})
}

pub fn nonlinear_residual(
    pair: &FieldPair,
    data: &BoundaryData,
    background: &GridBackground,
    grid: &Nozzle,
) -> Result<f64> {
    Ok(FixedPointSolver::new(grid, background)?.residual(pair, data, None)?.total())
}

/// Smooth admissible starting pair of size about `M sigma / 4`, vanishing on the Dirichlet faces.
pub fn probe_start(grid: &Nozzle, config: &IterationConfig) -> FieldPair {
    let a = 0.25 * config.m * config.sigma;
    let pi = std::f64::consts::PI;
    let len = grid.length();
    let ax = grid.axial();
    let cross = |x: &[f64]| {
        (0..ax).map(|j| (pi * (x[j] - grid.lower[j]) / (grid.upper[j] - grid.lower[j])).cos()).product::<f64>()
    };
    let velocity = ScalarField::from_fn(grid, |x| a * (0.5 * pi * x[ax] / len).sin() * cross(x));
    let electric = ScalarField::from_fn(grid, |x| a * (pi * x[ax] / len).sin() * cross(x));
    let exit_slope = vec![0.0; grid.cross_len()];
    FieldPair { velocity, electric, exit_slope }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub sigma: f64,
    /// `sup|psi| + sup|Psi|` at the fixed point.
    pub solution_norm: f64,
    /// First measured contraction factor.
    pub contraction: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub solution_slope: f64,
    pub contraction_slope: f64,
    /// `solution_norm / sigma` per entry.
    pub constants: Vec<f64>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("slope fit needs at least two points".into()));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("slope fit needs distinct abscissae".into()));
    }
    Ok(sxy / sxx)
}

/// Runs the fixed point for each positive `sigma` concurrently and fits the scalings.
pub fn stability_sweep(
    config: &IterationConfig,
    sigmas: &[f64],
    shapes: &PerturbationShapes,
    background: &GridBackground,
    grid: &Nozzle,
) -> Result<SweepReport> {
    let solver = FixedPointSolver::new(grid, background)?;
    let sigmas: Vec<f64> = sigmas.iter().copied().filter(|&s| s > 0.0).collect();
    let results: Vec<Result<SweepEntry>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sigmas
            .iter()
            .map(|&sigma| {
                let solver = &solver;
                scope.spawn(move || -> Result<SweepEntry> {
                    let cfg = IterationConfig { sigma, ..config.clone() };
                    let data = perturb_data(background, grid, sigma, shapes)?;
                    let (pair, report) = solver.run(&cfg, &data, None, None, &mut |_, _| {})?;
                    let contraction = *report.contraction_factors.first().ok_or_else(|| {
                        Error::Domain(format!("sigma = {sigma:e} converged before a contraction factor was measured"))
                    })?;
                    Ok(SweepEntry {
                        sigma,
                        solution_norm: pair.velocity.sup() + pair.electric.sup(),
                        contraction,
                        iterations: report.iterations,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep job panicked")).collect()
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let s: Vec<f64> = entries.iter().map(|e| e.sigma).collect();
    let norms: Vec<f64> = entries.iter().map(|e| e.solution_norm).collect();
    let kappa: Vec<f64> = entries.iter().map(|e| e.contraction).collect();
    Ok(SweepReport {
        solution_slope: log_log_slope(&s, &norms)?,
        contraction_slope: log_log_slope(&s, &kappa)?,
        constants: entries.iter().map(|e| e.solution_norm / e.sigma).collect(),
        entries,
    })
}

/// Diagnostic norms of one nodal field.
pub fn field_norms(grid: &Nozzle, u: &[f64], alpha: f64, rng: &mut ChaCha8Rng) -> FieldNorms {
    let n = grid.num_nodes();
    let mut holder: f64 = 0.0;
    for _ in 0..4096.min(n * n) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let xa = grid.coords(a);
        let xb = grid.coords(b);
        let d = xa.iter().zip(&xb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        holder = holder.max((u[a] - u[b]).abs() / d.powf(alpha));
    }
    let mut weighted: f64 = 0.0;
    for k in 0..n {
        let mut second: f64 = 0.0;
        for a in 0..grid.dim() {
            if grid.on_low(k, a) || grid.on_high(k, a) {
                continue;
            }
            let st = grid.strides[a];
            let h = grid.spacing[a];
            second = second.max(((u[k + st] - 2.0 * u[k] + u[k - st]) / (h * h)).abs());
        }
        weighted = weighted.max(grid.corner_distance(k).powf(1.0 + alpha) * second);
    }
    FieldNorms { sup: sup_abs(u), h1: dirichlet_energy(grid, u).sqrt(), holder, corner_weighted: weighted }
}

pub fn norms(grid: &Nozzle, pair: &FieldPair, alpha: f64, seed: u64) -> NormSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad = nodal_gradient(grid, &pair.velocity.values, &pair.exit_slope);
    NormSummary {
        alpha,
        velocity: field_norms(grid, &pair.velocity.values, alpha, &mut rng),
        electric: field_norms(grid, &pair.electric.values, alpha, &mut rng),
        velocity_gradient_sup: gradient_sup(&grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::ProfileShape;
    use crate::gas::GasLaw;
    use crate::grid::{build_grid, NozzleSpec};
    use crate::ode1d::{integrate_ivp, ChargeProfile, OneDParams};

    fn setup(cross: usize, axial: usize) -> (Nozzle, GridBackground) {
        let grid = build_grid(&NozzleSpec::unit_2d(cross, axial)).unwrap();
        let p = OneDParams {
            law: GasLaw::default(),
            charge: ChargeProfile::Uniform { value: 1.0 },
            j0: 0.5,
            rho0: 1.0,
            e0: 0.0,
            length: 1.0,
        };
        let bg = GridBackground::for_grid(&integrate_ivp(&p, 1024).unwrap(), &grid).unwrap();
        (grid, bg)
    }

    #[test]
    fn zero_sigma_fixes_origin() {
        let (grid, bg) = setup(9, 17);
        let data = perturb_data(&bg, &grid, 0.0, &PerturbationShapes::default()).unwrap();
        let next = iteration_step(&FieldPair::zeros(&grid), &data, &bg, &grid).unwrap();
        assert_eq!(next.sup_distance(&FieldPair::zeros(&grid)), 0.0);
        let cfg = IterationConfig { sigma: 0.0, ..Default::default() };
        let (pair, report) = run_fixed_point(&cfg, &data, &bg, &grid).unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(pair.velocity.sup(), 0.0);
        assert!(report.subsonic_margin > 0.0);
    }

    #[test]
    fn perturbed_data_is_bounded_and_compatible() {
        let (grid, bg) = setup(9, 17);
        let sigma = 1e-3;
        let d = perturb_data(&bg, &grid, sigma, &PerturbationShapes::default()).unwrap();
        assert!(sup_abs(&d.exit) <= sigma * (1.0 + 1e-12));
        assert!(d.charge.iter().all(|b| (b - 1.0).abs() <= sigma * (1.0 + 1e-12)));
        let mut bad = PerturbationShapes::default();
        bad.exit.shape = ProfileShape::Sine;
        assert!(matches!(perturb_data(&bg, &grid, sigma, &bad), Err(Error::Compatibility(_))));
        bad = PerturbationShapes::default();
        bad.entrance.amplitude = 2.0;
        assert!(perturb_data(&bg, &grid, sigma, &bad).is_err());
    }

    #[test]
    fn oversized_sigma_is_refused() {
        let (grid, bg) = setup(9, 17);
        let cfg = IterationConfig { sigma: 0.05, ..Default::default() };
        let data = perturb_data(&bg, &grid, cfg.sigma, &PerturbationShapes::default()).unwrap();
        assert!(matches!(run_fixed_point(&cfg, &data, &bg, &grid), Err(Error::AdmissibilityExit(_))));
    }

    #[test]
    fn small_sigma_converges_geometrically() {
        let (grid, bg) = setup(17, 33);
        let cfg = IterationConfig { sigma: 1e-3, tol: Some(0.0), ..Default::default() };
        let data = perturb_data(&bg, &grid, cfg.sigma, &PerturbationShapes::default()).unwrap();
        let (pair, report) = run_fixed_point(&cfg, &data, &bg, &grid).unwrap();
        assert!(report.converged);
        assert!(report.contraction_factors.iter().all(|&r| r < 1.0), "{:?}", report.contraction_factors);
        assert!(report.subsonic_margin > 0.0);
        let size = pair.velocity.sup() + pair.electric.sup();
        assert!(size > 1e-4 && size < 1e-2, "{size}");
        assert!(report.residual.exit_pressure <= 10.0 * report.residual_floor.exit_pressure, "{report:?}");
    }

    #[test]
    fn slope_fit_recovers_power() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((log_log_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
        assert!(log_log_slope(&[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn norms_of_simple_fields() {
        let grid = build_grid(&NozzleSpec::unit_2d(9, 17)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = vec![2.5; grid.num_nodes()];
        let n = field_norms(&grid, &c, 0.5, &mut rng);
        assert_eq!((n.sup, n.h1, n.holder, n.corner_weighted), (2.5, 0.0, 0.0, 0.0));
        let xn: Vec<f64> = (0..grid.num_nodes()).map(|k| grid.coord(k, 1)).collect();
        let n = field_norms(&grid, &xn, 0.5, &mut rng);
        assert!((n.h1 * n.h1 - grid.volume()).abs() < 1e-12);
        assert!(n.holder <= 2f64.sqrt().powf(0.5) + 1e-12);
    }
}
