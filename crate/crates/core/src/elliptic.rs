//! Linearized mixed boundary-value problem on the grid.
//!
//! Unknowns are stacked as `(v_0..v_N, W_0..W_N)`. The weak form is written edge by
//! edge: on an edge along axis `i` the difference quotient `delta_i` is exact and the
//! quadrature weight is the edge weight of [`crate::grid::Edge`]. Zeroth-order charge
//! terms live on axial edges and are lumped half to each endpoint. With that choice
//! the flux coupling `W d_zA . D xi` and the charge coupling `d_qB . D v eta` assemble
//! into blocks that are exact negative transposes, so they cancel in the quadratic
//! form just as in the continuous energy estimate.
//!
//! `v` has Dirichlet data on the entrance face and a conormal condition on the exit
//! face; `W` has Dirichlet data on both end faces. Wall conditions are natural.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Col;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffs::{aij_at, conormal_scale, Deltas, LinPoint};
use crate::driver::FieldPair;
use crate::error::{Error, Result};
use crate::gas::GasLaw;
use crate::grid::{Nozzle, ScalarField};
use crate::ode1d::{BackgroundSolution, BoundaryTriple};

/// One-dimensional background sampled on the grid's axial nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBackground {
    pub law: GasLaw,
    pub j0: f64,
    pub triple: BoundaryTriple,
    /// Electric potential per axial node.
    pub potential: Vec<f64>,
    /// Velocity potential per axial node.
    pub velocity_potential: Vec<f64>,
    pub u: Vec<f64>,
    pub rho: Vec<f64>,
    pub charge: Vec<f64>,
}

impl GridBackground {
    pub fn new(sol: &BackgroundSolution, grid: &Nozzle) -> Result<Self> {
        let n = grid.counts[grid.axial()];
        if sol.xs.len() != n || (sol.length() - grid.length()).abs() > 1e-12 * grid.length() {
            return Err(Error::ShapeMismatch(format!(
                "background has {} nodes on [0, {}], grid axis has {n} on [0, {}]",
                sol.xs.len(),
                sol.length(),
                grid.length()
            )));
        }
        Ok(GridBackground {
            law: *sol.law(),
            j0: sol.j0,
            triple: sol.triple,
            potential: sol.electric_potential.clone(),
            velocity_potential: sol.velocity_potential.clone(),
            u: sol.u.clone(),
            rho: sol.rho.clone(),
            charge: sol.charge.clone(),
        })
    }

    /// Integrates the 1D problem so that its samples land on the grid's axial nodes.
    pub fn for_grid(sol: &BackgroundSolution, grid: &Nozzle) -> Result<Self> {
        Self::new(&sol.on_axial_nodes(grid.counts[grid.axial()], 1024)?, grid)
    }

    pub fn axial_velocity(&self, dim: usize, i: usize) -> Vec<f64> {
        let mut q = vec![0.0; dim];
        q[dim - 1] = self.u[i];
        q
    }

    /// Background state at axial node `i`.
    pub fn node_point(&self, dim: usize, i: usize) -> Result<LinPoint> {
        LinPoint::new(&self.law, self.potential[i], self.axial_velocity(dim, i))
    }
}

/// Exit-face coefficients (identical across the face for a 1D background).
#[derive(Debug, Clone, PartialEq)]
pub struct ExitCoefficients {
    pub point: LinPoint,
    pub a_nn: f64,
    /// `d_z A_n`
    pub coupling: f64,
    /// `a_nn p' / J0`
    pub scale: f64,
}

/// Linearization of the discrete fluxes about the background, edge by edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenCoefficients {
    pub law: GasLaw,
    pub j0: f64,
    /// Background state `(Z0, Q0)` on every edge.
    pub edge_points: Vec<LinPoint>,
    /// `a_ii` along the edge axis.
    pub edge_a: Vec<f64>,
    /// `d_z A_n` on axial edges, zero on transverse edges.
    pub edge_coupling: Vec<f64>,
    /// `d_z B` on axial edges, zero on transverse edges.
    pub edge_bz: Vec<f64>,
    /// Background state at each axial node.
    pub node_points: Vec<LinPoint>,
    pub exit: ExitCoefficients,
    pub lambda: f64,
    pub lambda_max: f64,
    pub deltas: Deltas,
}

impl FrozenCoefficients {
    pub fn new(bg: &GridBackground, grid: &Nozzle) -> Result<Self> {
        let dim = grid.dim();
        let ax = grid.axial();
        let law = bg.law;
        let node_points = (0..grid.counts[ax]).map(|i| bg.node_point(dim, i)).collect::<Result<Vec<_>>>()?;
        let h = grid.spacing[ax];
        let mut edge_points = Vec::with_capacity(grid.edges.len());
        let mut edge_a = Vec::with_capacity(grid.edges.len());
        let mut edge_coupling = Vec::with_capacity(grid.edges.len());
        let mut edge_bz = Vec::with_capacity(grid.edges.len());
        let mut lambda = f64::INFINITY;
        let mut lambda_max: f64 = 0.0;
        for e in &grid.edges {
            let i = grid.axial_index(e.lo);
            if e.axis == ax {
                let z = 0.5 * (bg.potential[i] + bg.potential[i + 1]);
                let mut q = vec![0.0; dim];
                q[ax] = (bg.velocity_potential[i + 1] - bg.velocity_potential[i]) / h;
                let p = LinPoint::new(&law, z, q)?;
                let a = aij_at(&p)?;
                let a_nn = a.matrix[(ax, ax)];
                edge_a.push(a_nn);
                edge_coupling.push(p.db_dz() * p.dphi0[ax]);
                edge_bz.push(p.db_dz());
                lambda = lambda.min(a.lambda);
                lambda_max = lambda_max.max(a.lambda_max);
                edge_points.push(p);
            } else {
                let p = node_points[i].clone();
                edge_a.push(p.rho_bg);
                edge_coupling.push(0.0);
                edge_bz.push(0.0);
                lambda_max = lambda_max.max(p.rho_bg);
                edge_points.push(p);
            }
        }
        for p in &node_points {
            let a = aij_at(p)?;
            lambda = lambda.min(a.lambda);
            lambda_max = lambda_max.max(a.lambda_max);
        }
        let point = node_points.last().expect("axial nodes").clone();
        let exit = ExitCoefficients {
            a_nn: aij_at(&point)?.lambda,
            coupling: point.db_dz() * point.dphi0[ax],
            scale: conormal_scale(&point, bg.j0)?,
            point,
        };
        let deltas = Deltas::from_background(&law, node_points.iter().chain(edge_points.iter()));
        Ok(FrozenCoefficients {
            law,
            j0: bg.j0,
            edge_points,
            edge_a,
            edge_coupling,
            edge_bz,
            node_points,
            exit,
            lambda,
            lambda_max,
            deltas,
        })
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Duplicate entries are summed in insertion order.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; rows + 1];
        for &(r, _, _) in entries {
            counts[r + 1] += 1;
        }
        for r in 0..rows {
            counts[r + 1] += counts[r];
        }
        let mut order = vec![0usize; entries.len()];
        let mut next = counts.clone();
        for (idx, &(r, _, _)) in entries.iter().enumerate() {
            order[next[r]] = idx;
            next[r] += 1;
        }
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut row_cols: Vec<(usize, f64)> = Vec::new();
        for r in 0..rows {
            row_cols.clear();
            for &idx in &order[counts[r]..counts[r + 1]] {
                let (_, c, v) = entries[idx];
                row_cols.push((c, v));
            }
            row_cols.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row_cols.len() {
                let c = row_cols[i].0;
                let mut v = 0.0;
                while i < row_cols.len() && row_cols[i].0 == c {
                    v += row_cols[i].1;
                    i += 1;
                }
                indices.push(c);
                values.push(v);
            }
            indptr[r + 1] = indices.len();
        }
        CsrMatrix { rows, cols, indptr, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| (self.indptr[r]..self.indptr[r + 1]).map(|j| self.values[j] * x[self.indices[j]]).sum())
            .collect()
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.rows)
            .map(|r| x[r] * (self.indptr[r]..self.indptr[r + 1]).map(|j| self.values[j] * y[self.indices[j]]).sum::<f64>())
            .sum()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for j in self.indptr[r]..self.indptr[r + 1] {
                out.push((r, self.indices[j], self.values[j]));
            }
        }
        out
    }

    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.values[self.indptr[r]..self.indptr[r + 1]].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Linear-in-`x_n` extension of the end-face values of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftField {
    pub values: ScalarField,
    /// Largest wall-normal derivative of the end-face data at the wall (zero when compatible).
    pub compatibility_defect: f64,
    pub warning: Option<String>,
}

/// Smooth cross-section profile `offset + amplitude * prod_j trig(m_j pi (x_j - lo_j) / len_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossProfile {
    pub offset: f64,
    pub amplitude: f64,
    /// Mode number per cross-section axis.
    pub modes: Vec<u32>,
    pub shape: ProfileShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileShape {
    Cosine,
    Sine,
}

impl CrossProfile {
    pub fn constant(value: f64) -> Self {
        CrossProfile { offset: value, amplitude: 0.0, modes: Vec::new(), shape: ProfileShape::Cosine }
    }

    pub fn cosine(amplitude: f64, modes: Vec<u32>) -> Self {
        CrossProfile { offset: 0.0, amplitude, modes, shape: ProfileShape::Cosine }
    }

    fn factor(&self, grid: &Nozzle, j: usize, x: f64) -> (f64, f64) {
        let m = self.modes.get(j).copied().unwrap_or(0) as f64;
        let len = grid.upper[j] - grid.lower[j];
        let k = m * std::f64::consts::PI / len;
        let t = k * (x - grid.lower[j]);
        match self.shape {
            ProfileShape::Cosine => (t.cos(), -k * t.sin()),
            ProfileShape::Sine => (t.sin(), k * t.cos()),
        }
    }

    pub fn value(&self, grid: &Nozzle, x: &[f64]) -> f64 {
        if self.amplitude == 0.0 {
            return self.offset;
        }
        let prod: f64 = (0..grid.axial()).map(|j| self.factor(grid, j, x[j]).0).product();
        self.offset + self.amplitude * prod
    }

    pub fn gradient(&self, grid: &Nozzle, x: &[f64]) -> Vec<f64> {
        let n = grid.axial();
        if self.amplitude == 0.0 {
            return vec![0.0; n];
        }
        let f: Vec<(f64, f64)> = (0..n).map(|j| self.factor(grid, j, x[j])).collect();
        (0..n)
            .map(|j| self.amplitude * (0..n).map(|i| if i == j { f[i].1 } else { f[i].0 }).product::<f64>())
            .collect()
    }

    /// Samples on the nodes of one cross-section.
    pub fn sample(&self, grid: &Nozzle) -> Vec<f64> {
        (0..grid.cross_len()).map(|k| self.value(grid, &grid.coords(k))).collect()
    }

    /// Largest `|d_{n_w} profile|` over wall nodes of the cross-section.
    pub fn wall_defect(&self, grid: &Nozzle) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..grid.cross_len() {
            let x = grid.coords(k);
            let g = self.gradient(grid, &x);
            for n in grid.wall_normals(k) {
                let d: f64 = g.iter().zip(&n).map(|(a, b)| a * b).sum();
                worst = worst.max(d.abs());
            }
        }
        worst
    }
}

/// Wall-compatibility tolerance for end-face data.
pub const COMPATIBILITY_TOL: f64 = 1e-10;

pub fn lift_boundary(grid: &Nozzle, w_en: &CrossProfile, w_ex: &CrossProfile) -> Result<LiftField> {
    let mut lift = lift_from_samples(grid, &w_en.sample(grid), &w_ex.sample(grid))?;
    let defect = w_en.wall_defect(grid).max(w_ex.wall_defect(grid));
    lift.compatibility_defect = defect;
    if defect > COMPATIBILITY_TOL {
        lift.warning = Some(format!("end-face data has wall-normal derivative {defect:e} at the wall"));
    }
    Ok(lift)
}

pub fn lift_from_samples(grid: &Nozzle, w_en: &[f64], w_ex: &[f64]) -> Result<LiftField> {
    let m = grid.cross_len();
    if w_en.len() != m || w_ex.len() != m {
        return Err(Error::ShapeMismatch(format!("end-face data needs {m} samples")));
    }
    let len = grid.length();
    let values = (0..grid.num_nodes())
        .map(|k| {
            let c = grid.cross_index(k);
            if grid.on_entrance(k) {
                w_en[c]
            } else if grid.on_exit(k) {
                w_ex[c]
            } else {
                let t = grid.coord(k, grid.axial()) / len;
                (1.0 - t) * w_en[c] + t * w_ex[c]
            }
        })
        .collect();
    Ok(LiftField { values: ScalarField::from_values(grid, values)?, compatibility_defect: 0.0, warning: None })
}

/// Right-hand side data of one linearized solve.
///
/// Strong form: `div(a Dv + W d_zA) = div F` and `Delta W - W d_zB - d_qB . Dv = f`,
/// with `B_q . Dv = g` on the exit face and `W = W_en, W_ex` on the end faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Sources {
    /// `F` along the edge axis, per edge.
    pub flux: Vec<f64>,
    /// Axial `F` on the exit face, per cross-section node.
    pub exit_flux: Vec<f64>,
    /// Charge source carried by axial edges (lumped to endpoints), per edge.
    pub charge_edge: Vec<f64>,
    /// Nodal charge source.
    pub charge_node: Vec<f64>,
    /// Divergence-form charge source `f = div G`: `G` along the edge axis, per edge.
    pub charge_flux: Vec<f64>,
    /// Exit datum `g`, per cross-section node.
    pub exit_g: Vec<f64>,
    pub w_en: Vec<f64>,
    pub w_ex: Vec<f64>,
}

impl Sources {
    pub fn zeros(grid: &Nozzle) -> Self {
        let e = grid.edges.len();
        let m = grid.cross_len();
        Sources {
            flux: vec![0.0; e],
            exit_flux: vec![0.0; m],
            charge_edge: vec![0.0; e],
            charge_node: vec![0.0; grid.num_nodes()],
            charge_flux: vec![0.0; e],
            exit_g: vec![0.0; m],
            w_en: vec![0.0; m],
            w_ex: vec![0.0; m],
        }
    }

    /// Sources from nodal fields: `F` (one array per axis), `f`, and exit data.
    ///
    /// Edge fluxes are endpoint averages. `F` must have no normal component on the wall.
    pub fn from_nodal(
        grid: &Nozzle,
        flux: &[Vec<f64>],
        charge: &[f64],
        exit_g: &[f64],
        w_en: &[f64],
        w_ex: &[f64],
    ) -> Result<Self> {
        let n = grid.num_nodes();
        let m = grid.cross_len();
        if flux.len() != grid.dim()
            || flux.iter().any(|c| c.len() != n)
            || charge.len() != n
            || exit_g.len() != m
            || w_en.len() != m
            || w_ex.len() != m
        {
            return Err(Error::ShapeMismatch("nodal sources do not conform to the grid".into()));
        }
        let scale = flux.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for k in 0..n {
            for a in 0..grid.axial() {
                if (grid.on_low(k, a) || grid.on_high(k, a)) && flux[a][k].abs() > 1e-10 * scale {
                    return Err(Error::Compatibility(format!(
                        "flux source has wall-normal component {} at node {k}",
                        flux[a][k]
                    )));
                }
            }
        }
        let ax = grid.axial();
        let mut s = Sources::zeros(grid);
        for (i, e) in grid.edges.iter().enumerate() {
            s.flux[i] = 0.5 * (flux[e.axis][e.lo] + flux[e.axis][e.hi]);
        }
        for (c, k) in grid.exit_nodes().enumerate() {
            s.exit_flux[c] = flux[ax][k];
        }
        s.charge_node = charge.to_vec();
        s.exit_g = exit_g.to_vec();
        s.w_en = w_en.to_vec();
        s.w_ex = w_ex.to_vec();
        Ok(s)
    }

    fn check(&self, grid: &Nozzle) -> Result<()> {
        let e = grid.edges.len();
        let m = grid.cross_len();
        let ok = self.flux.len() == e
            && self.charge_edge.len() == e
            && self.charge_flux.len() == e
            && self.charge_node.len() == grid.num_nodes()
            && [&self.exit_flux, &self.exit_g, &self.w_en, &self.w_ex].iter().all(|v| v.len() == m);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("sources do not conform to the grid".into()))
        }
    }
}

/// Discrete operator of the linearized problem, independent of the data.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    pub n_nodes: usize,
    /// Weak form on all rows and columns before boundary conditions.
    pub weak: CsrMatrix,
    /// `v`-rows by `W`-columns block from `W d_zA . D xi`.
    pub coupling_flux: CsrMatrix,
    /// `W`-rows by `v`-columns block from `d_qB . Dv eta`.
    pub coupling_charge: CsrMatrix,
    /// Final system: Dirichlet rows replaced by identity, Dirichlet columns removed.
    pub matrix: CsrMatrix,
    /// Stacked Dirichlet mask.
    pub dirichlet: Vec<bool>,
    pub exit: ExitCoefficients,
    pub j0: f64,
    pub lambda: f64,
}

pub fn assemble_operator(coeffs: &FrozenCoefficients, grid: &Nozzle) -> Result<LinearOperator> {
    let n = grid.num_nodes();
    let ax = grid.axial();
    if coeffs.edge_a.len() != grid.edges.len() {
        return Err(Error::ShapeMismatch("coefficients were frozen on a different grid".into()));
    }
    let mut weak = Vec::with_capacity(grid.edges.len() * 16);
    let mut cflux = Vec::with_capacity(grid.edges.len() * 4);
    let mut ccharge = Vec::with_capacity(grid.edges.len() * 4);
    let stiff = |out: &mut Vec<(usize, usize, f64)>, a: usize, b: usize, s: f64| {
        out.push((a, a, s));
        out.push((a, b, -s));
        out.push((b, a, -s));
        out.push((b, b, s));
    };
    for (i, e) in grid.edges.iter().enumerate() {
        let h = grid.spacing[e.axis];
        let alpha = e.weight / (h * h);
        let (k, kp) = (e.lo, e.hi);
        stiff(&mut weak, k, kp, coeffs.edge_a[i] * alpha);
        stiff(&mut weak, n + k, n + kp, alpha);
        if e.axis == ax {
            let half = 0.5 * e.weight / h * coeffs.edge_coupling[i];
            // W d_zA_n (W_k + W_k')/2 * (xi_k' - xi_k)/h
            for (r, sign) in [(kp, 1.0), (k, -1.0)] {
                for c in [k, kp] {
                    cflux.push((r, c, sign * half));
                }
            }
            // -d_zA_n (v_k' - v_k)/h * (eta_k + eta_k')/2, using d_qB_n = -d_zA_n
            for r in [k, kp] {
                ccharge.push((r, k, half));
                ccharge.push((r, kp, -half));
            }
            let mass = 0.25 * e.weight * coeffs.edge_bz[i];
            for r in [k, kp] {
                for c in [k, kp] {
                    weak.push((n + r, n + c, mass));
                }
            }
        }
    }
    weak.extend(cflux.iter().map(|&(r, c, v)| (r, n + c, v)));
    weak.extend(ccharge.iter().map(|&(r, c, v)| (n + r, c, v)));

    let mut dirichlet = vec![false; 2 * n];
    for k in 0..n {
        if grid.on_entrance(k) {
            dirichlet[k] = true;
        }
        if grid.on_entrance(k) || grid.on_exit(k) {
            dirichlet[n + k] = true;
        }
    }
    let mut fin: Vec<(usize, usize, f64)> =
        weak.iter().copied().filter(|&(r, c, _)| !dirichlet[r] && !dirichlet[c]).collect();
    fin.extend((0..2 * n).filter(|&r| dirichlet[r]).map(|r| (r, r, 1.0)));

    Ok(LinearOperator {
        n_nodes: n,
        weak: CsrMatrix::from_triplets(2 * n, 2 * n, &weak),
        coupling_flux: CsrMatrix::from_triplets(n, n, &cflux),
        coupling_charge: CsrMatrix::from_triplets(n, n, &ccharge),
        matrix: CsrMatrix::from_triplets(2 * n, 2 * n, &fin),
        dirichlet,
        exit: coeffs.exit.clone(),
        j0: coeffs.j0,
        lambda: coeffs.lambda,
    })
}

/// Weak-form load of the interior sources, stacked like the unknowns.
pub(crate) fn load_vector(
    grid: &Nozzle,
    flux: &[f64],
    charge_flux: &[f64],
    charge_edge: &[f64],
    charge_node: &[f64],
) -> Vec<f64> {
    let n = grid.num_nodes();
    let ax = grid.axial();
    let mut rhs = vec![0.0; 2 * n];
    for (i, e) in grid.edges.iter().enumerate() {
        let wh = e.weight / grid.spacing[e.axis];
        let f = wh * flux[i];
        rhs[e.hi] += f;
        rhs[e.lo] -= f;
        let g = wh * charge_flux[i];
        rhs[n + e.hi] += g;
        rhs[n + e.lo] -= g;
        if e.axis == ax {
            let c = 0.5 * e.weight * charge_edge[i];
            rhs[n + e.lo] -= c;
            rhs[n + e.hi] -= c;
        }
    }
    for k in 0..n {
        rhs[n + k] -= grid.node_weights[k] * charge_node[k];
    }
    rhs
}

/// Assembled linear system for one solve.
#[derive(Debug, Clone)]
pub struct WeakSystem {
    pub operator: Arc<LinearOperator>,
    pub rhs: Vec<f64>,
    pub lift: LiftField,
    /// Exit normal derivative `d_n v = -p' g / J0` imposed through the conormal row.
    pub exit_slope: Vec<f64>,
}

pub fn assemble(coeffs: &FrozenCoefficients, grid: &Nozzle, sources: &Sources) -> Result<WeakSystem> {
    let op = Arc::new(assemble_operator(coeffs, grid)?);
    assemble_rhs(op, grid, sources)
}

pub fn assemble_rhs(op: Arc<LinearOperator>, grid: &Nozzle, sources: &Sources) -> Result<WeakSystem> {
    sources.check(grid)?;
    let n = grid.num_nodes();
    let mut rhs = load_vector(grid, &sources.flux, &sources.charge_flux, &sources.charge_edge, &sources.charge_node);
    let ex = &op.exit;
    let p_prime = ex.point.sound_sq;
    let exit_slope: Vec<f64> = sources.exit_g.iter().map(|g| -p_prime * g / op.j0).collect();
    for (c, k) in grid.exit_nodes().enumerate() {
        let conormal = ex.a_nn * exit_slope[c] + ex.coupling * sources.w_ex[c];
        rhs[k] += grid.face_weight(k) * (conormal - sources.exit_flux[c]);
    }
    let lift = lift_from_samples(grid, &sources.w_en, &sources.w_ex)?;
    let mut lifted = vec![0.0; 2 * n];
    lifted[n..].copy_from_slice(&lift.values.values);
    let shift = op.weak.matvec(&lifted);
    for r in 0..2 * n {
        rhs[r] = if op.dirichlet[r] { 0.0 } else { rhs[r] - shift[r] };
    }
    Ok(WeakSystem { operator: op, rhs, lift, exit_slope })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveStats {
    pub unknowns: usize,
    pub nonzeros: usize,
    /// `|Ax - b|_inf / (|A|_inf |x|_inf + |b|_inf)`
    pub relative_residual: f64,
    pub refinements: usize,
}

/// Sparse LU factors of a [`LinearOperator`], reusable across right-hand sides.
pub struct Factorization {
    lu: Lu<usize, f64>,
    op: Arc<LinearOperator>,
}

impl Factorization {
    pub fn new(op: Arc<LinearOperator>) -> Result<Self> {
        let m = &op.matrix;
        let trips: Vec<Triplet<usize, usize, f64>> =
            m.triplets().into_iter().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(m.rows, m.cols, &trips)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let lu = a.sp_lu().map_err(|e| Error::Solver(format!("factorization failed: {e:?}")))?;
        Ok(Factorization { lu, op })
    }

    pub fn operator(&self) -> &Arc<LinearOperator> {
        &self.op
    }

    fn raw_solve(&self, b: &[f64]) -> Vec<f64> {
        let col = Col::<f64>::from_fn(b.len(), |i| b[i]);
        let x = self.lu.solve(&col);
        (0..b.len()).map(|i| x[i]).collect()
    }

    /// Solves with up to two steps of iterative refinement.
    pub fn solve_vec(&self, b: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        let m = &self.op.matrix;
        let norm_a = m.norm_inf();
        let norm_b = b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut x = self.raw_solve(b);
        let mut refinements = 0;
        loop {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver("non-finite solution".into()));
            }
            let ax = m.matvec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let norm_x = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let denom = norm_a * norm_x + norm_b;
            let rel = if denom == 0.0 { 0.0 } else { r.iter().fold(0.0f64, |a, v| a.max(v.abs())) / denom };
            if rel < 1e-13 || refinements == 2 {
                if rel >= 1e-11 {
                    return Err(Error::Solver(format!("relative residual {rel:e} after refinement")));
                }
                let stats = SolveStats { unknowns: m.rows, nonzeros: m.nnz(), relative_residual: rel, refinements };
                return Ok((x, stats));
            }
            let dx = self.raw_solve(&r);
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi += d;
            }
            refinements += 1;
        }
    }

    pub fn solve(&self, grid: &Nozzle, system: &WeakSystem) -> Result<(FieldPair, SolveStats)> {
        if !Arc::ptr_eq(&self.op, &system.operator) {
            return Err(Error::Solver("system was assembled with a different operator".into()));
        }
        let (x, stats) = self.solve_vec(&system.rhs)?;
        let n = self.op.n_nodes;
        let v = x[..n].to_vec();
        let w: Vec<f64> = x[n..].iter().zip(&system.lift.values.values).map(|(a, b)| a + b).collect();
        let pair = FieldPair {
            velocity: ScalarField::from_values(grid, v)?,
            electric: ScalarField::from_values(grid, w)?,
            exit_slope: system.exit_slope.clone(),
        };
        Ok((pair, stats))
    }
}

/// Factors and solves one system; returns `(v, W)` with the lift added back.
pub fn solve(grid: &Nozzle, system: &WeakSystem) -> Result<(FieldPair, SolveStats)> {
    Factorization::new(system.operator.clone())?.solve(grid, system)
}

/// Discrete `H^1` seminorm squared: `sum_e w_e (delta_e u)^2`.
pub fn dirichlet_energy(grid: &Nozzle, u: &[f64]) -> f64 {
    grid.edges
        .iter()
        .map(|e| {
            let d = (u[e.hi] - u[e.lo]) / grid.spacing[e.axis];
            e.weight * d * d
        })
        .sum()
}

/// Coupling contributions `xi^T C_flux eta + eta^T C_charge xi`; zero up to rounding.
pub fn cross_term_sum(op: &LinearOperator, xi: &[f64], eta: &[f64]) -> f64 {
    op.coupling_flux.bilinear(xi, eta) + op.coupling_charge.bilinear(eta, xi)
}

/// `Q(xi, eta) / (|D xi|^2 + |D eta|^2)` for a test pair vanishing on the Dirichlet sets.
pub fn rayleigh_ratio(grid: &Nozzle, op: &LinearOperator, xi: &[f64], eta: &[f64]) -> Result<f64> {
    let n = op.n_nodes;
    if xi.len() != n || eta.len() != n {
        return Err(Error::ShapeMismatch("test pair does not conform".into()));
    }
    let mut z = Vec::with_capacity(2 * n);
    z.extend_from_slice(xi);
    z.extend_from_slice(eta);
    if z.iter().zip(&op.dirichlet).any(|(v, &d)| d && *v != 0.0) {
        return Err(Error::Domain("test pair must vanish where Dirichlet data is imposed".into()));
    }
    let denom = dirichlet_energy(grid, xi) + dirichlet_energy(grid, eta);
    if !(denom > 0.0) {
        return Err(Error::Domain("degenerate (zero) test pair".into()));
    }
    Ok(op.weak.bilinear(&z, &z) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestPairs {
    Mixed,
    /// `xi = 0`
    ChargeOnly,
}

/// Random admissible test pairs: `z` in `{v, W}`, half rough (i.i.d.) and half smooth (low modes).
pub fn random_test_pair(grid: &Nozzle, op: &LinearOperator, rng: &mut ChaCha8Rng, smooth: bool) -> (Vec<f64>, Vec<f64>) {
    let n = op.n_nodes;
    let mut z = vec![0.0; 2 * n];
    if smooth {
        let modes: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0..4) as f64, rng.random_range(1..4) as f64))
            .collect();
        for (r, zr) in z.iter_mut().enumerate() {
            let k = r % n;
            let x = grid.coords(k);
            let s = x[grid.axial()] / grid.length();
            let c = (x[0] - grid.lower[0]) / (grid.upper[0] - grid.lower[0]);
            *zr = modes
                .iter()
                .map(|(a, mc, ma)| a * (mc * std::f64::consts::PI * c).cos() * (ma * std::f64::consts::PI * s).sin())
                .sum();
        }
    } else {
        for v in z.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    for (v, &d) in z.iter_mut().zip(&op.dirichlet) {
        if d {
            *v = 0.0;
        }
    }
    let eta = z.split_off(n);
    (z, eta)
}

/// Smallest Rayleigh ratio over random admissible test pairs.
pub fn coercivity_check(grid: &Nozzle, op: &LinearOperator, trials: usize, seed: u64, pairs: TestPairs) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for t in 0..trials {
        let (mut xi, eta) = random_test_pair(grid, op, &mut rng, t % 2 == 1);
        if pairs == TestPairs::ChargeOnly {
            xi.iter_mut().for_each(|v| *v = 0.0);
        }
        worst = worst.min(rayleigh_ratio(grid, op, &xi, &eta)?);
    }
    Ok(worst)
}

/// Coordinate dump of the final system matrix followed by the right-hand side.
pub fn write_system_coo<W: std::io::Write>(system: &WeakSystem, mut out: W) -> Result<()> {
    let m = &system.operator.matrix;
    crate::io::write_coo(m.rows, m.cols, &m.triplets(), &mut out)?;
    writeln!(out, "rhs {}", system.rhs.len())?;
    for v in &system.rhs {
        writeln!(out, "{}", crate::io::fmt17(*v))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, NozzleSpec};
    use crate::ode1d::{integrate_ivp, ChargeProfile, OneDParams};

    pub(crate) fn uniform_setup(cross: usize, axial: usize) -> (Nozzle, GridBackground, FrozenCoefficients) {
        let grid = build_grid(&NozzleSpec::unit_2d(cross, axial)).unwrap();
        let p = OneDParams {
            law: GasLaw::default(),
            charge: ChargeProfile::Uniform { value: 1.0 },
            j0: 0.5,
            rho0: 1.0,
            e0: 0.0,
            length: 1.0,
        };
        let sol = integrate_ivp(&p, 1024).unwrap();
        let bg = GridBackground::for_grid(&sol, &grid).unwrap();
        let fc = FrozenCoefficients::new(&bg, &grid).unwrap();
        (grid, bg, fc)
    }

    #[test]
    fn csr_sums_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 2.0), (0, 1, 3.0), (0, 0, -1.0)]);
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 2.0]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.bilinear(&[1.0, 2.0], &[3.0, 4.0]), -3.0 + 16.0 + 12.0);
    }

    #[test]
    fn frozen_coefficients_on_uniform_background() {
        let (grid, _, fc) = uniform_setup(9, 17);
        assert!((fc.lambda - 0.875).abs() < 1e-12);
        assert!((fc.exit.scale - 3.5).abs() < 1e-12);
        for (i, e) in grid.edges.iter().enumerate() {
            if e.axis == 1 {
                assert!((fc.edge_a[i] - 0.875).abs() < 1e-12);
                assert!((fc.edge_coupling[i] - 0.25).abs() < 1e-12);
            } else {
                assert!((fc.edge_a[i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lift_examples() {
        let g = build_grid(&NozzleSpec::unit_2d(9, 17)).unwrap();
        let l = lift_boundary(&g, &CrossProfile::constant(0.1), &CrossProfile::constant(0.2)).unwrap();
        let mid = 3 + 9 * 8;
        assert!((l.values.values[mid] - 0.15).abs() < 1e-15);
        let z = lift_boundary(&g, &CrossProfile::constant(0.0), &CrossProfile::constant(0.0)).unwrap();
        assert!(z.values.values.iter().all(|&v| v == 0.0));

        let cos = CrossProfile::cosine(0.01, vec![1]);
        let l = lift_boundary(&g, &cos, &CrossProfile::constant(0.0)).unwrap();
        assert!(l.warning.is_none());
        assert!(l.compatibility_defect < 1e-10);
        let sin = CrossProfile { shape: ProfileShape::Sine, ..cos };
        let l = lift_boundary(&g, &sin, &CrossProfile::constant(0.0)).unwrap();
        assert!(l.warning.is_some());
        assert!(lift_from_samples(&g, &[0.0; 3], &[0.0; 9]).is_err());
    }

    #[test]
    fn trivial_data_gives_zero() {
        let (grid, _, fc) = uniform_setup(9, 17);
        let sys = assemble(&fc, &grid, &Sources::zeros(&grid)).unwrap();
        let (pair, stats) = solve(&grid, &sys).unwrap();
        assert!(pair.velocity.values.iter().all(|&v| v == 0.0));
        assert!(pair.electric.values.iter().all(|&v| v == 0.0));
        assert!(stats.relative_residual < 1e-11);
    }

    #[test]
    fn dirichlet_rows_are_exact() {
        let (grid, _, fc) = uniform_setup(9, 17);
        let mut s = Sources::zeros(&grid);
        s.w_en = CrossProfile::cosine(0.01, vec![1]).sample(&grid);
        s.w_ex = vec![0.02; grid.cross_len()];
        s.charge_node = vec![0.3; grid.num_nodes()];
        let sys = assemble(&fc, &grid, &s).unwrap();
        let (pair, _) = solve(&grid, &sys).unwrap();
        for k in 0..grid.num_nodes() {
            let c = grid.cross_index(k);
            if grid.on_entrance(k) {
                assert_eq!(pair.velocity.values[k], 0.0);
                assert_eq!(pair.electric.values[k], s.w_en[c]);
            }
            if grid.on_exit(k) {
                assert_eq!(pair.electric.values[k], s.w_ex[c]);
            }
        }
    }

    #[test]
    fn coupling_blocks_are_negative_transposes() {
        let (grid, _, fc) = uniform_setup(9, 17);
        let op = assemble_operator(&fc, &grid).unwrap();
        let t = CsrMatrix::from_triplets(
            op.n_nodes,
            op.n_nodes,
            &op.coupling_charge.triplets().into_iter().map(|(r, c, v)| (c, r, -v)).collect::<Vec<_>>(),
        );
        assert_eq!(t, op.coupling_flux);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (xi, eta) = random_test_pair(&grid, &op, &mut rng, false);
            assert!(cross_term_sum(&op, &xi, &eta).abs() < 1e-12);
        }
    }

    #[test]
    fn coercivity_bounds() {
        let (grid, _, fc) = uniform_setup(9, 17);
        let op = assemble_operator(&fc, &grid).unwrap();
        let mixed = coercivity_check(&grid, &op, 20, 42, TestPairs::Mixed).unwrap();
        assert!(mixed >= 0.9 * 0.875, "{mixed}");
        let charge = coercivity_check(&grid, &op, 20, 42, TestPairs::ChargeOnly).unwrap();
        assert!(charge >= 1.0);
        let zero = vec![0.0; grid.num_nodes()];
        assert!(rayleigh_ratio(&grid, &op, &zero, &zero).is_err());
    }

    #[test]
    fn coo_dump_has_header() {
        let (grid, _, fc) = uniform_setup(8, 8);
        let sys = assemble(&fc, &grid, &Sources::zeros(&grid)).unwrap();
        let mut buf = Vec::new();
        write_system_coo(&sys, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let head: Vec<usize> = text.lines().next().unwrap().split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(head[0], 128);
        assert_eq!(head[2], sys.operator.matrix.nnz());
    }
}
