//! Nozzles whose walls are perturbed by a smooth map `T(x', x_n) = (G(x', x_n), x_n)`.
//!
//! The problem on the deformed nozzle is pulled back to the reference box. Its principal
//! part is kept flat and the difference between the flat and pulled-back operators is
//! fed to the driver as extra sources, recomputed at every iterate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeffs::{density, dot};
use crate::driver::{
    BoundaryData, CorrectionTerms, FieldPair, FixedPointSolver, IterateView, IterationConfig, SolveReport,
    SourceCorrection,
};
use crate::elliptic::GridBackground;
use crate::error::{Error, Result};
use crate::gas::GasLaw;
use crate::grid::Nozzle;

/// `G_i(x) = x_i + epsilon * cos(m_i pi (x_i - a_i) / l_i) * sin^2(pi x_n / L)`.
///
/// Mode 0 gives a rigid shift of the cross-section; every mode keeps the
/// wall-normal derivative of the displacement at zero, and `sin^2` makes the map
/// the identity to first order at both end caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMap {
    pub epsilon: f64,
    /// Cosine mode per cross-section axis.
    pub modes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    Analytic,
    /// Central differences of `G` with step `1e-6` times the axis length.
    Numeric,
}

impl DomainMap {
    pub fn identity() -> Self {
        DomainMap { epsilon: 0.0, modes: Vec::new() }
    }

    fn mode(&self, j: usize) -> f64 {
        self.modes.get(j).copied().unwrap_or(1) as f64
    }

    fn profile(&self, grid: &Nozzle, j: usize, xj: f64) -> (f64, f64) {
        let k = self.mode(j) * std::f64::consts::PI / (grid.upper[j] - grid.lower[j]);
        let t = k * (xj - grid.lower[j]);
        (t.cos(), -k * t.sin())
    }

    fn axial(&self, grid: &Nozzle, xn: f64) -> (f64, f64) {
        let w = std::f64::consts::PI / grid.length();
        let s = (w * xn).sin();
        (s * s, w * (2.0 * w * xn).sin())
    }

    /// Physical position `T(x)`.
    pub fn apply(&self, grid: &Nozzle, x: &[f64]) -> Vec<f64> {
        let ax = grid.axial();
        let (s, _) = self.axial(grid, x[ax]);
        let mut y = x.to_vec();
        for j in 0..ax {
            y[j] += self.epsilon * self.profile(grid, j, x[j]).0 * s;
        }
        y
    }

    /// `D_x T` at `x`.
    pub fn forward_jacobian(&self, grid: &Nozzle, x: &[f64], method: JacobianMethod) -> DMatrix<f64> {
        let n = grid.dim();
        let ax = grid.axial();
        match method {
            JacobianMethod::Analytic => {
                let (s, ds) = self.axial(grid, x[ax]);
                let mut d = DMatrix::identity(n, n);
                for j in 0..ax {
                    let (w, dw) = self.profile(grid, j, x[j]);
                    d[(j, j)] += self.epsilon * dw * s;
                    d[(j, ax)] = self.epsilon * w * ds;
                }
                d
            }
            JacobianMethod::Numeric => {
                let mut d = DMatrix::zeros(n, n);
                for c in 0..n {
                    let h = 1e-6 * (grid.upper[c] - grid.lower[c]);
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[c] += h;
                    xm[c] -= h;
                    let (yp, ym) = (self.apply(grid, &xp), self.apply(grid, &xm));
                    for r in 0..n {
                        d[(r, c)] = (yp[r] - ym[r]) / (2.0 * h);
                    }
                }
                d
            }
        }
    }

    /// `sup |G(., x_n) - Id|` over the grid nodes.
    pub fn sup_deviation(&self, grid: &Nozzle) -> f64 {
        (0..grid.num_nodes())
            .map(|k| {
                let x = grid.coords(k);
                let y = self.apply(grid, &x);
                x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0, f64::max)
    }

    /// Node positions on the deformed nozzle, one coordinate array per axis.
    pub fn physical_coords(&self, grid: &Nozzle) -> Vec<Vec<f64>> {
        let pts: Vec<Vec<f64>> = (0..grid.num_nodes()).map(|k| self.apply(grid, &grid.coords(k))).collect();
        (0..grid.dim()).map(|a| pts.iter().map(|p| p[a]).collect()).collect()
    }
}

/// `J_T = (D_x T)^{-T}` with `det J_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeJacobian {
    pub jt: DMatrix<f64>,
    pub det: f64,
}

pub fn jacobian_jt(map: &DomainMap, grid: &Nozzle, x: &[f64], method: JacobianMethod) -> Result<NodeJacobian> {
    let d = map.forward_jacobian(grid, x, method);
    let det_d = d.determinant();
    if !(det_d > 0.0) {
        return Err(Error::FoldOver { point: x.to_vec(), det: det_d });
    }
    let inv = d.try_inverse().ok_or_else(|| Error::FoldOver { point: x.to_vec(), det: det_d })?;
    Ok(NodeJacobian { jt: inv.transpose(), det: 1.0 / det_d })
}

/// `A1 = rho(z, |M q1|^2) M^T M q1 / det M` and `A2 = M^T M q2 / det M`.
pub fn pullback_operators(law: &GasLaw, z: f64, q1: &[f64], q2: &[f64], m: &NodeJacobian) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = q1.len();
    let mq: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m.jt[(i, j)] * q1[j]).sum()).collect();
    let rho = density(law, z, dot(&mq, &mq))?;
    let metric = |q: &[f64]| -> Vec<f64> {
        let mq: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m.jt[(i, j)] * q[j]).sum()).collect();
        (0..n).map(|i| (0..n).map(|j| m.jt[(j, i)] * mq[j]).sum::<f64>() / m.det).collect()
    };
    let a1 = metric(q1).into_iter().map(|v| rho * v).collect();
    Ok((a1, metric(q2)))
}

/// Pulled-back geometry of a map, cached per node.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGeometry {
    pub map: DomainMap,
    pub nodes: Vec<NodeJacobian>,
}

impl MapGeometry {
    pub fn new(map: &DomainMap, grid: &Nozzle, method: JacobianMethod) -> Result<Self> {
        let nodes = (0..grid.num_nodes())
            .map(|k| jacobian_jt(map, grid, &grid.coords(k), method))
            .collect::<Result<Vec<_>>>()?;
        Ok(MapGeometry { map: map.clone(), nodes })
    }

    /// `max_k |I - J_T|` (entrywise) over nodes.
    pub fn deviation(&self) -> f64 {
        self.nodes
            .iter()
            .map(|m| {
                let n = m.jt.nrows();
                (m.jt.clone() - DMatrix::<f64>::identity(n, n)).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Correction fields of the pulled-back problem at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionFields {
    /// `A1(I) - A1(J_T)` per node, one array per axis.
    pub h1: Vec<Vec<f64>>,
    /// `A2(I) - A2(J_T)` per node.
    pub h2: Vec<Vec<f64>>,
    /// `(rho(J_T) - b) / det J_T - (rho(I) - b)` per node.
    pub charge: Vec<f64>,
    /// `H1 . n_w` and `H2 . n_w` at wall nodes (zero elsewhere).
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    /// `p(rho(I)) - p(rho(J_T))` per exit node.
    pub g3: Vec<f64>,
}

impl CorrectionFields {
    pub fn sup(&self) -> f64 {
        let s = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        self.h1
            .iter()
            .chain(&self.h2)
            .map(|v| s(v))
            .fold(0.0, f64::max)
            .max(s(&self.charge))
            .max(s(&self.g3))
    }
}

/// Nodal gradient with one-sided second-order differences at every boundary except
/// the wall, where the normal derivative is set to zero.
fn full_gradient(grid: &Nozzle, u: &[f64]) -> Vec<Vec<f64>> {
    let ax = grid.axial();
    (0..grid.dim())
        .map(|a| {
            let h = grid.spacing[a];
            let st = grid.strides[a];
            (0..grid.num_nodes())
                .map(|k| {
                    if a != ax && (grid.on_low(k, a) || grid.on_high(k, a)) {
                        0.0
                    } else if grid.on_low(k, a) {
                        (-3.0 * u[k] + 4.0 * u[k + st] - u[k + 2 * st]) / (2.0 * h)
                    } else if grid.on_high(k, a) {
                        (3.0 * u[k] - 4.0 * u[k - st] + u[k - 2 * st]) / (2.0 * h)
                    } else {
                        (u[k + st] - u[k - st]) / (2.0 * h)
                    }
                })
                .collect()
        })
        .collect()
}

/// Corrections at the state `(phi, Phi) = (phi0 + psi, Phi0 + Psi)` given by nodal
/// potential `pot`, nodal velocity `vel` (one array per axis) and doping `b`.
pub fn correction_terms(
    law: &GasLaw,
    grid: &Nozzle,
    geometry: &MapGeometry,
    pot: &[f64],
    vel: &[Vec<f64>],
    b: &[f64],
) -> Result<CorrectionFields> {
    let n = grid.num_nodes();
    let dim = grid.dim();
    let gpot = full_gradient(grid, pot);
    let mut out = CorrectionFields {
        h1: vec![vec![0.0; n]; dim],
        h2: vec![vec![0.0; n]; dim],
        charge: vec![0.0; n],
        g1: vec![0.0; n],
        g2: vec![0.0; n],
        g3: vec![0.0; grid.cross_len()],
    };
    let ident = NodeJacobian { jt: DMatrix::identity(dim, dim), det: 1.0 };
    for k in 0..n {
        let q1: Vec<f64> = (0..dim).map(|a| vel[a][k]).collect();
        let q2: Vec<f64> = (0..dim).map(|a| gpot[a][k]).collect();
        let m = &geometry.nodes[k];
        let (a1i, a2i) = pullback_operators(law, pot[k], &q1, &q2, &ident)?;
        let (a1j, a2j) = pullback_operators(law, pot[k], &q1, &q2, m)?;
        for a in 0..dim {
            out.h1[a][k] = a1i[a] - a1j[a];
            out.h2[a][k] = a2i[a] - a2j[a];
        }
        let mq: Vec<f64> = (0..dim).map(|i| (0..dim).map(|j| m.jt[(i, j)] * q1[j]).sum()).collect();
        let rho_i = density(law, pot[k], dot(&q1, &q1))?;
        let rho_j = density(law, pot[k], dot(&mq, &mq))?;
        out.charge[k] = (rho_j - b[k]) / m.det - (rho_i - b[k]);
        if let Some(nw) = grid.wall_normals(k).first() {
            out.g1[k] = (0..dim).map(|a| out.h1[a][k] * nw[a]).sum();
            out.g2[k] = (0..dim).map(|a| out.h2[a][k] * nw[a]).sum();
        }
        if grid.on_exit(k) {
            out.g3[grid.cross_index(k)] = law.p(rho_i) - law.p(rho_j);
        }
    }
    Ok(out)
}

/// Corrections of a fixed map, evaluated at the driver's current iterate.
pub struct MapCorrection {
    pub law: GasLaw,
    pub geometry: MapGeometry,
}

impl MapCorrection {
    pub fn fields(&self, view: &IterateView<'_>) -> Result<CorrectionFields> {
        let grid = view.grid;
        let bg = view.background;
        let n = grid.num_nodes();
        let ax = grid.axial();
        let pot: Vec<f64> = (0..n).map(|k| bg.potential[grid.axial_index(k)] + view.pair.electric.values[k]).collect();
        let mut vel: Vec<Vec<f64>> = view.gradient.to_vec();
        for k in 0..n {
            vel[ax][k] += bg.u[grid.axial_index(k)];
        }
        correction_terms(&self.law, grid, &self.geometry, &pot, &vel, &view.data.charge)
    }
}

impl SourceCorrection for MapCorrection {
    fn corrections(&self, view: &IterateView<'_>) -> Result<CorrectionTerms> {
        let grid = view.grid;
        let f = self.fields(view)?;
        let mut t = CorrectionTerms::zeros(grid);
        for (i, e) in grid.edges.iter().enumerate() {
            t.flux[i] = 0.5 * (f.h1[e.axis][e.lo] + f.h1[e.axis][e.hi]);
            t.charge_flux[i] = 0.5 * (f.h2[e.axis][e.lo] + f.h2[e.axis][e.hi]);
        }
        t.charge_node = f.charge;
        t.exit_pressure = f.g3;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub epsilon: f64,
    /// `sup |G - Id|` over nodes.
    pub deviation: f64,
    /// `max |I - J_T|` over nodes.
    pub jacobian_deviation: f64,
    /// `max |det J_T - 1|` over nodes.
    pub det_deviation: f64,
    /// Sup of the correction fields at the fixed point.
    pub correction_sup: f64,
}

/// Fixed point of the pulled-back problem on the reference grid.
pub fn solve_perturbed(
    map: &DomainMap,
    config: &IterationConfig,
    data: &BoundaryData,
    background: &GridBackground,
    grid: &Nozzle,
) -> Result<(FieldPair, SolveReport, MapSummary)> {
    let solver = FixedPointSolver::new(grid, background)?;
    solve_perturbed_with(&solver, map, config, data, &mut |_, _| {})
}

pub fn solve_perturbed_with(
    solver: &FixedPointSolver<'_>,
    map: &DomainMap,
    config: &IterationConfig,
    data: &BoundaryData,
    observer: &mut dyn FnMut(usize, &FieldPair),
) -> Result<(FieldPair, SolveReport, MapSummary)> {
    solve_perturbed_with_method(solver, map, JacobianMethod::Analytic, config, data, observer)
}

pub fn solve_perturbed_with_method(
    solver: &FixedPointSolver<'_>,
    map: &DomainMap,
    method: JacobianMethod,
    config: &IterationConfig,
    data: &BoundaryData,
    observer: &mut dyn FnMut(usize, &FieldPair),
) -> Result<(FieldPair, SolveReport, MapSummary)> {
    let grid = solver.grid;
    let geometry = MapGeometry::new(map, grid, method)?;
    let corr = MapCorrection { law: solver.coeffs.law, geometry };
    let (pair, report) = solver.run(config, data, None, Some(&corr), observer)?;
    let grad = crate::driver::nodal_gradient(grid, &pair.velocity.values, &pair.exit_slope);
    let view = IterateView { grid, background: solver.background, data, pair: &pair, gradient: &grad };
    let fields = corr.fields(&view)?;
    let summary = MapSummary {
        epsilon: map.epsilon,
        deviation: map.sup_deviation(grid),
        jacobian_deviation: corr.geometry.deviation(),
        det_deviation: corr.geometry.nodes.iter().map(|m| (m.det - 1.0).abs()).fold(0.0, f64::max),
        correction_sup: fields.sup(),
    };
    Ok((pair, report, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, NozzleSpec};

    fn grid() -> Nozzle {
        build_grid(&NozzleSpec::unit_2d(9, 17)).unwrap()
    }

    #[test]
    fn identity_map_is_exact() {
        let g = grid();
        let geo = MapGeometry::new(&DomainMap::identity(), &g, JacobianMethod::Analytic).unwrap();
        for m in &geo.nodes {
            assert_eq!(m.jt, DMatrix::identity(2, 2));
            assert_eq!(m.det, 1.0);
        }
        assert_eq!(DomainMap::identity().sup_deviation(&g), 0.0);
    }

    #[test]
    fn shear_matches_closed_form_inverse() {
        let g = grid();
        let map = DomainMap { epsilon: 0.05, modes: vec![0] };
        let pi = std::f64::consts::PI;
        for k in 0..g.num_nodes() {
            let x = g.coords(k);
            // T = (x1 + eps s(x2), x2): D T = [[1, eps s'], [0, 1]], J_T = [[1, 0], [-eps s', 1]]
            let ds = pi * (2.0 * pi * x[1]).sin();
            let want = [[1.0, 0.0], [-0.05 * ds, 1.0]];
            for method in [JacobianMethod::Analytic, JacobianMethod::Numeric] {
                let j = jacobian_jt(&map, &g, &x, method).unwrap();
                for r in 0..2 {
                    for c in 0..2 {
                        assert!((j.jt[(r, c)] - want[r][c]).abs() < 1e-8, "{method:?} {r}{c}");
                    }
                }
                assert!((j.det - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn end_caps_are_rigid() {
        let g = grid();
        let map = DomainMap { epsilon: 0.05, modes: vec![1] };
        for k in 0..g.num_nodes() {
            if g.on_entrance(k) || g.on_exit(k) {
                let j = jacobian_jt(&map, &g, &g.coords(k), JacobianMethod::Analytic).unwrap();
                assert!((j.jt.clone() - DMatrix::identity(2, 2)).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn diagonal_metric_scaling() {
        let law = GasLaw::default();
        let eps = 0.1;
        let m = NodeJacobian { jt: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0 + eps, 1.0])), det: 1.0 + eps };
        let (_, a2) = pullback_operators(&law, 0.1, &[0.0, 0.5], &[0.3, -0.7], &m).unwrap();
        assert!((a2[0] - (1.0 + eps) * 0.3).abs() < 1e-15);
        assert!((a2[1] + 0.7 / (1.0 + eps)).abs() < 1e-15);
        let ident = NodeJacobian { jt: DMatrix::identity(2, 2), det: 1.0 };
        let (a1, a2) = pullback_operators(&law, 0.1, &[0.0, 0.5], &[0.3, -0.7], &ident).unwrap();
        assert_eq!(a2, vec![0.3, -0.7]);
        assert_eq!(a1, crate::coeffs::flux_a(&law, 0.1, &[0.0, 0.5]).unwrap());
    }

    #[test]
    fn fold_over_is_rejected() {
        let g = grid();
        let map = DomainMap { epsilon: 1.0, modes: vec![1] };
        let bad = (0..g.num_nodes()).any(|k| jacobian_jt(&map, &g, &g.coords(k), JacobianMethod::Analytic).is_err());
        assert!(bad);
    }

    #[test]
    fn det_deviation_is_linear_in_epsilon() {
        let g = grid();
        for eps in [1e-3, 1e-2, 5e-2] {
            let geo = MapGeometry::new(&DomainMap { epsilon: eps, modes: vec![1] }, &g, JacobianMethod::Analytic).unwrap();
            let d = geo.nodes.iter().map(|m| (m.det - 1.0).abs()).fold(0.0, f64::max);
            assert!(d <= 4.0 * eps, "{eps} {d}");
        }
    }
}
