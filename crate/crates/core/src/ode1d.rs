//! One-dimensional subsonic background flows.
//!
//! The reduced system in the axial variable is
//! `rho' = rho^3 E / (rho^2 p'(rho) - J0^2)`, `E' = rho - b(x)`, with velocity
//! `u = J0 / rho`, integrated by fixed-step RK4 from entrance data `(rho0, E0)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas::GasLaw;

/// Relative width of the sonic exclusion band around `rho^2 p'(rho) = J0^2`.
pub const SONIC_GUARD: f64 = 1e-6;

/// Background (doping) charge along the nozzle axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChargeProfile {
    Uniform { value: f64 },
    /// `base + amplitude * sin(pi x / L)`
    Sine { base: f64, amplitude: f64 },
}

impl ChargeProfile {
    pub fn eval(&self, x: f64, length: f64) -> f64 {
        match *self {
            ChargeProfile::Uniform { value } => value,
            ChargeProfile::Sine { base, amplitude } => {
                base + amplitude * (std::f64::consts::PI * x / length).sin()
            }
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            ChargeProfile::Uniform { value } => value,
            ChargeProfile::Sine { base, amplitude } => base + amplitude.max(0.0),
        }
    }

    pub fn inf(&self) -> f64 {
        match *self {
            ChargeProfile::Uniform { value } => value,
            ChargeProfile::Sine { base, amplitude } => base + amplitude.min(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneDParams {
    pub law: GasLaw,
    pub charge: ChargeProfile,
    pub j0: f64,
    pub rho0: f64,
    pub e0: f64,
    pub length: f64,
}

impl OneDParams {
    pub fn validate(&self) -> Result<()> {
        self.law.validate()?;
        if !(self.j0 > 0.0 && self.rho0 > 0.0 && self.length > 0.0) {
            return Err(Error::Domain("J0, rho0 and L must be positive".into()));
        }
        if !(self.charge.inf() > 0.0) {
            return Err(Error::Domain("background charge must be positive".into()));
        }
        Ok(())
    }
}

/// Boundary data `(Phi_en0, B00, pex0)` equivalent to a 1D flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTriple {
    pub phi_en0: f64,
    pub b00: f64,
    pub pex0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSolution {
    pub params: OneDParams,
    pub xs: Vec<f64>,
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
    pub field: Vec<f64>,
    /// Velocity potential, zero at the entrance.
    pub velocity_potential: Vec<f64>,
    /// Electric potential.
    pub electric_potential: Vec<f64>,
    pub charge: Vec<f64>,
    pub j0: f64,
    /// `min_x p'(rho) - u^2`
    pub nu0: f64,
    pub triple: BoundaryTriple,
}

impl BackgroundSolution {
    pub fn law(&self) -> &GasLaw {
        &self.params.law
    }

    pub fn length(&self) -> f64 {
        self.params.length
    }

    /// Every `stride`-th node, keeping both ends.
    pub fn subsample(&self, stride: usize) -> Result<BackgroundSolution> {
        let n = self.xs.len() - 1;
        if stride == 0 || !n.is_multiple_of(stride) {
            return Err(Error::ShapeMismatch(format!("stride {stride} does not divide {n} steps")));
        }
        let pick = |v: &Vec<f64>| v.iter().step_by(stride).copied().collect::<Vec<_>>();
        Ok(BackgroundSolution {
            xs: pick(&self.xs),
            rho: pick(&self.rho),
            u: pick(&self.u),
            field: pick(&self.field),
            velocity_potential: pick(&self.velocity_potential),
            electric_potential: pick(&self.electric_potential),
            charge: pick(&self.charge),
            ..self.clone()
        })
    }

    /// Re-integrates with at least `min_steps` steps and samples exactly `nodes` axial nodes.
    pub fn on_axial_nodes(&self, nodes: usize, min_steps: usize) -> Result<BackgroundSolution> {
        if nodes < 2 {
            return Err(Error::DegenerateGrid("need at least 2 axial nodes".into()));
        }
        let cells = nodes - 1;
        let stride = min_steps.div_ceil(cells).max(1);
        let fine = integrate_ivp(&self.params, cells * stride)?;
        fine.subsample(stride)
    }

    /// `max_x |rho u - J0|`
    pub fn mass_flux_defect(&self) -> f64 {
        self.rho
            .iter()
            .zip(&self.u)
            .map(|(r, u)| (r * u - self.j0).abs())
            .fold(0.0, f64::max)
    }
}

/// `H(rho) = (J0/rho)^2 / 2 + h(rho)`; equals the electric potential along a 1D flow.
pub fn bernoulli_1d(law: &GasLaw, j0: f64, rho: f64) -> f64 {
    0.5 * (j0 / rho).powi(2) + law.h(rho)
}

pub fn ode_rhs(params: &OneDParams, x: f64, rho: f64, e: f64) -> Result<(f64, f64)> {
    let law = &params.law;
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("density must be positive, got {rho}")));
    }
    let j2 = params.j0 * params.j0;
    let gap = rho * rho * law.dp(rho) - j2;
    if gap.abs() < SONIC_GUARD * j2 {
        return Err(Error::SonicProximity { gap });
    }
    Ok((rho.powi(3) * e / gap, rho - params.charge.eval(x, params.length)))
}

pub fn integrate_ivp(params: &OneDParams, n_steps: usize) -> Result<BackgroundSolution> {
    params.validate()?;
    if n_steps < 16 {
        return Err(Error::Domain(format!("n_steps must be >= 16, got {n_steps}")));
    }
    let law = &params.law;
    let len = params.length;
    let h = len / n_steps as f64;
    let j2 = params.j0 * params.j0;

    let check = |x: f64, rho: f64| -> Result<()> {
        if !(rho > law.rho_floor) || !rho.is_finite() {
            return Err(Error::VacuumBreakdown { x });
        }
        if rho * rho * law.dp(rho) - j2 < SONIC_GUARD * j2 {
            return Err(Error::SonicBreakdown { x });
        }
        Ok(())
    };
    let rhs = |x: f64, rho: f64, e: f64| -> Result<(f64, f64)> {
        if !(rho > law.rho_floor) || !rho.is_finite() {
            return Err(Error::VacuumBreakdown { x });
        }
        ode_rhs(params, x, rho, e).map_err(|err| match err {
            Error::SonicProximity { .. } => Error::SonicBreakdown { x },
            other => other,
        })
    };

    let mut xs = Vec::with_capacity(n_steps + 1);
    let mut rho = Vec::with_capacity(n_steps + 1);
    let mut field = Vec::with_capacity(n_steps + 1);
    let (mut r, mut e) = (params.rho0, params.e0);
    check(0.0, r)?;
    xs.push(0.0);
    rho.push(r);
    field.push(e);
    for k in 0..n_steps {
        let x = k as f64 * h;
        let (k1r, k1e) = rhs(x, r, e)?;
        let (k2r, k2e) = rhs(x + 0.5 * h, r + 0.5 * h * k1r, e + 0.5 * h * k1e)?;
        let (k3r, k3e) = rhs(x + 0.5 * h, r + 0.5 * h * k2r, e + 0.5 * h * k2e)?;
        let (k4r, k4e) = rhs(x + h, r + h * k3r, e + h * k3e)?;
        r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        e += h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
        let xn = if k + 1 == n_steps { len } else { (k + 1) as f64 * h };
        check(xn, r)?;
        xs.push(xn);
        rho.push(r);
        field.push(e);
    }

    let u: Vec<f64> = rho.iter().map(|r| params.j0 / r).collect();
    let mut nu0 = f64::INFINITY;
    for (i, (&r, &v)) in rho.iter().zip(&u).enumerate() {
        let m = law.dp(r) - v * v;
        if !(m > 0.0) {
            return Err(Error::SonicBreakdown { x: xs[i] });
        }
        nu0 = nu0.min(m);
    }
    let charge = xs.iter().map(|&x| params.charge.eval(x, len)).collect();
    let mut sol = BackgroundSolution {
        params: *params,
        xs,
        rho,
        u,
        field,
        velocity_potential: Vec::new(),
        electric_potential: Vec::new(),
        charge,
        j0: params.j0,
        nu0,
        triple: BoundaryTriple { phi_en0: 0.0, b00: 0.0, pex0: 0.0 },
    };
    sol.triple = params_to_boundary_data(&sol);
    let (phi, big_phi) = build_background(&sol.xs, &sol.u, &sol.field, &sol.triple);
    sol.velocity_potential = phi;
    sol.electric_potential = big_phi;
    Ok(sol)
}

pub fn params_to_boundary_data(sol: &BackgroundSolution) -> BoundaryTriple {
    let law = sol.law();
    let rho_l = *sol.rho.last().expect("nonempty profile");
    let b00 = bernoulli_1d(law, sol.j0, rho_l);
    BoundaryTriple {
        phi_en0: bernoulli_1d(law, sol.j0, sol.rho[0]) - b00,
        b00,
        pex0: law.p(rho_l),
    }
}

/// Running integral of samples on a uniform grid: Simpson on even nodes,
/// Simpson 3/8 to reach odd nodes, quadratic interpolation for the first cell.
pub fn cumulative_integral(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    if n < 3 {
        if n == 2 {
            out[1] = 0.5 * h * (values[0] + values[1]);
        }
        return out;
    }
    out[1] = h / 12.0 * (5.0 * values[0] + 8.0 * values[1] - values[2]);
    for k in 2..n {
        out[k] = if k % 2 == 0 {
            out[k - 2] + h / 3.0 * (values[k - 2] + 4.0 * values[k - 1] + values[k])
        } else {
            out[k - 3]
                + 3.0 * h / 8.0
                    * (values[k - 3] + 3.0 * values[k - 2] + 3.0 * values[k - 1] + values[k])
        };
    }
    out
}

/// Velocity and electric potentials of a 1D flow.
pub fn build_background(
    xs: &[f64],
    u: &[f64],
    field: &[f64],
    triple: &BoundaryTriple,
) -> (Vec<f64>, Vec<f64>) {
    let h = if xs.len() > 1 { xs[1] - xs[0] } else { 0.0 };
    let phi = cumulative_integral(u, h);
    let offset = triple.b00 + triple.phi_en0;
    let big_phi = cumulative_integral(field, h).into_iter().map(|v| offset + v).collect();
    (phi, big_phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootOptions {
    pub e_lo: f64,
    pub e_hi: f64,
    pub probes: usize,
    pub n_steps: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ShootOptions {
    fn default() -> Self {
        ShootOptions { e_lo: -5.0, e_hi: 5.0, probes: 64, n_steps: 1024, tol: 1e-10, max_iter: 100 }
    }
}

/// Solves `rho(0) = rho_en`, `rho(L) = rho_ex` for the entrance field `E0`.
pub fn shoot_bvp(
    law: &GasLaw,
    charge: ChargeProfile,
    length: f64,
    rho_en: f64,
    rho_ex: f64,
    j0: f64,
    opts: &ShootOptions,
) -> Result<BackgroundSolution> {
    let mut roots = shoot_brackets(law, charge, length, rho_en, rho_ex, j0, opts, true)?;
    Ok(roots.remove(0))
}

/// Refines every sign change found in the scan; used to probe uniqueness.
pub fn shoot_all(
    law: &GasLaw,
    charge: ChargeProfile,
    length: f64,
    rho_en: f64,
    rho_ex: f64,
    j0: f64,
    opts: &ShootOptions,
) -> Result<Vec<BackgroundSolution>> {
    shoot_brackets(law, charge, length, rho_en, rho_ex, j0, opts, false)
}

#[allow(clippy::too_many_arguments)]
fn shoot_brackets(
    law: &GasLaw,
    charge: ChargeProfile,
    length: f64,
    rho_en: f64,
    rho_ex: f64,
    j0: f64,
    opts: &ShootOptions,
    first_only: bool,
) -> Result<Vec<BackgroundSolution>> {
    let no_bracket = Error::NoBracket { lo: opts.e_lo, hi: opts.e_hi };
    let rho_s = law.sonic_density(j0);
    if !(rho_en > rho_s && rho_ex > rho_s) {
        return Err(no_bracket);
    }
    let params = |e0: f64| OneDParams { law: *law, charge, j0, rho0: rho_en, e0, length };
    let forward = |e0: f64| -> Option<(f64, BackgroundSolution)> {
        integrate_ivp(&params(e0), opts.n_steps)
            .ok()
            .map(|s| (s.rho.last().unwrap() - rho_ex, s))
    };

    let probes = opts.probes.max(2);
    let samples: Vec<(f64, Option<f64>)> = (0..probes)
        .map(|i| {
            let e0 = opts.e_lo + (opts.e_hi - opts.e_lo) * i as f64 / (probes - 1) as f64;
            (e0, forward(e0).map(|(m, _)| m))
        })
        .collect();

    let mut found = Vec::new();
    for w in samples.windows(2) {
        let ((a, ma), (b, mb)) = (w[0], w[1]);
        let (Some(ma), Some(mb)) = (ma, mb) else { continue };
        if ma == 0.0 {
            found.push(forward(a).unwrap().1);
        } else if ma * mb < 0.0 {
            found.push(refine(&forward, (a, ma), (b, mb), opts)?);
        } else {
            continue;
        }
        if first_only {
            break;
        }
    }
    if found.is_empty() {
        if let Some(&(e, Some(m))) = samples.last() {
            if m == 0.0 {
                found.push(forward(e).unwrap().1);
            }
        }
    }
    if found.is_empty() {
        return Err(no_bracket);
    }
    Ok(found)
}

/// Secant iteration kept inside the bracket (Illinois variant of regula falsi).
fn refine(
    forward: &dyn Fn(f64) -> Option<(f64, BackgroundSolution)>,
    mut lo: (f64, f64),
    mut hi: (f64, f64),
    opts: &ShootOptions,
) -> Result<BackgroundSolution> {
    let mut side = 0i8;
    let mut last = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let e = (lo.0 * hi.1 - hi.0 * lo.1) / (hi.1 - lo.1);
        let e = if e > lo.0.min(hi.0) && e < lo.0.max(hi.0) { e } else { 0.5 * (lo.0 + hi.0) };
        let Some((m, sol)) = forward(e) else {
            return Err(Error::SonicBreakdown { x: f64::NAN });
        };
        last = m.abs();
        if m.abs() < opts.tol {
            return Ok(sol);
        }
        if m * lo.1 < 0.0 {
            hi = (e, m);
            if side == -1 {
                lo.1 *= 0.5;
            }
            side = -1;
        } else {
            lo = (e, m);
            if side == 1 {
                hi.1 *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::MaxIterations { iterations: opts.max_iter, last_diff: last })
}

/// Recovers `(rho_en, rho_ex, J0)` from boundary data and shoots for the background.
pub fn background_from_triple(
    law: &GasLaw,
    charge: ChargeProfile,
    length: f64,
    triple: &BoundaryTriple,
    opts: &ShootOptions,
) -> Result<BackgroundSolution> {
    if !(triple.pex0 > 0.0) {
        return Err(Error::Domain("exit pressure must be positive".into()));
    }
    let rho_ex = if law.is_isothermal() { triple.pex0 } else { triple.pex0.powf(1.0 / law.gamma) };
    let half_u2 = triple.b00 - law.h(rho_ex);
    if !(half_u2 > 0.0) {
        return Err(Error::Domain("B00 - h(rho_ex) must be positive for a positive mass flux".into()));
    }
    let j0 = rho_ex * (2.0 * half_u2).sqrt();
    let rho_s = law.sonic_density(j0);
    let target = triple.phi_en0 + triple.b00;
    // H increases on (rho_s, inf); bisect for the subsonic preimage.
    let mut lo = rho_s;
    let mut hi = rho_s.max(1.0) * 2.0;
    while bernoulli_1d(law, j0, hi) < target {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Domain("entrance data unreachable".into()));
        }
    }
    if bernoulli_1d(law, j0, lo) > target {
        return Err(Error::Domain("entrance data below the sonic level".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bernoulli_1d(law, j0, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    shoot_bvp(law, charge, length, 0.5 * (lo + hi), rho_ex, j0, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityMargins {
    pub eps0: f64,
    pub eps1: f64,
    pub nu1: f64,
}

impl Default for AdmissibilityMargins {
    fn default() -> Self {
        AdmissibilityMargins { eps0: 0.05, eps1: 0.05, nu1: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrbitCheck {
    pub admissible: bool,
    /// `rho0 - sup b - eps0`
    pub density_margin: f64,
    /// `E0 - eps1`
    pub field_margin: f64,
    /// `p'(rho0) - (J0/rho0)^2 - nu1`
    pub subsonic_margin: f64,
}

/// Sufficient entrance conditions for a monotone subsonic orbit with variable charge.
pub fn monotone_orbit_admissible(
    law: &GasLaw,
    charge: ChargeProfile,
    rho0: f64,
    e0: f64,
    j0: f64,
    margins: &AdmissibilityMargins,
) -> OrbitCheck {
    let density_margin = rho0 - charge.sup() - margins.eps0;
    let field_margin = e0 - margins.eps1;
    let subsonic_margin = if rho0 > 0.0 {
        law.dp(rho0) - (j0 / rho0).powi(2) - margins.nu1
    } else {
        f64::NEG_INFINITY
    };
    OrbitCheck {
        admissible: density_margin >= 0.0 && field_margin >= 0.0 && subsonic_margin >= 0.0,
        density_margin,
        field_margin,
        subsonic_margin,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtlasRow {
    pub j0: f64,
    pub rho0: f64,
    pub e0: f64,
    pub phi_en0: f64,
    pub b00: f64,
    pub pex0: f64,
    pub nu0: f64,
    pub status: String,
}

/// Integrates every entrance state of a parameter grid; breakdowns are recorded, not fatal.
pub fn atlas(
    law: &GasLaw,
    charge: ChargeProfile,
    length: f64,
    j0s: &[f64],
    rho0s: &[f64],
    e0s: &[f64],
    n_steps: usize,
) -> Vec<AtlasRow> {
    let mut rows = Vec::with_capacity(j0s.len() * rho0s.len() * e0s.len());
    for &j0 in j0s {
        for &rho0 in rho0s {
            for &e0 in e0s {
                let params = OneDParams { law: *law, charge, j0, rho0, e0, length };
                let row = match integrate_ivp(&params, n_steps) {
                    Ok(s) => AtlasRow {
                        j0,
                        rho0,
                        e0,
                        phi_en0: s.triple.phi_en0,
                        b00: s.triple.b00,
                        pex0: s.triple.pex0,
                        nu0: s.nu0,
                        status: "ok".into(),
                    },
                    Err(err) => AtlasRow {
                        j0,
                        rho0,
                        e0,
                        phi_en0: f64::NAN,
                        b00: f64::NAN,
                        pex0: f64::NAN,
                        nu0: f64::NAN,
                        status: match err {
                            Error::SonicBreakdown { x } => format!("sonic@{x}"),
                            Error::VacuumBreakdown { x } => format!("vacuum@{x}"),
                            other => format!("error:{other}"),
                        },
                    },
                };
                rows.push(row);
            }
        }
    }
    rows
}

pub fn write_atlas_csv<W: Write>(rows: &[AtlasRow], mut out: W) -> Result<()> {
    writeln!(out, "J0,rho0,E0,Phi_en0,B00,pex0,nu0,status")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            crate::io::fmt17(r.j0),
            crate::io::fmt17(r.rho0),
            crate::io::fmt17(r.e0),
            crate::io::fmt17(r.phi_en0),
            crate::io::fmt17(r.b00),
            crate::io::fmt17(r.pex0),
            crate::io::fmt17(r.nu0),
            r.status
        )?;
    }
    Ok(())
}

pub fn write_profiles_csv<W: Write>(sol: &BackgroundSolution, mut out: W) -> Result<()> {
    writeln!(out, "x,rho,u,E,phi0,Phi0,b")?;
    for i in 0..sol.xs.len() {
        let row = [
            sol.xs[i],
            sol.rho[i],
            sol.u[i],
            sol.field[i],
            sol.velocity_potential[i],
            sol.electric_potential[i],
            sol.charge[i],
        ];
        let cells: Vec<String> = row.iter().map(|&v| crate::io::fmt17(v)).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uniform() -> OneDParams {
        OneDParams {
            law: GasLaw::default(),
            charge: ChargeProfile::Uniform { value: 1.0 },
            j0: 0.5,
            rho0: 1.0,
            e0: 0.0,
            length: 1.0,
        }
    }

    fn orbit() -> OneDParams {
        OneDParams { rho0: 1.2, e0: 0.1, ..uniform() }
    }

    #[test]
    fn rhs_examples() {
        let p = uniform();
        assert_eq!(ode_rhs(&p, 0.3, 1.0, 0.0).unwrap(), (0.0, 0.0));
        let (dr, de) = ode_rhs(&p, 0.3, 1.0, 0.1).unwrap();
        assert_relative_eq!(dr, 0.1 / 1.75, max_relative = 1e-15);
        assert_eq!(de, 0.0);
        let sonic = OneDParams { j0: 2f64.sqrt(), ..p };
        assert!(matches!(ode_rhs(&sonic, 0.0, 1.0, 0.2), Err(Error::SonicProximity { .. })));
    }

    #[test]
    fn equilibrium_is_preserved() {
        let sol = integrate_ivp(&uniform(), 1024).unwrap();
        for i in 0..sol.xs.len() {
            assert!((sol.rho[i] - 1.0).abs() < 1e-12);
            assert!(sol.field[i].abs() < 1e-12);
            assert!((sol.u[i] - 0.5).abs() < 1e-12);
            assert!((sol.velocity_potential[i] - 0.5 * sol.xs[i]).abs() < 1e-12);
            assert!((sol.electric_potential[i] - 0.125).abs() < 1e-12);
        }
        assert_relative_eq!(sol.triple.b00, 0.125);
        assert_relative_eq!(sol.triple.pex0, 1.0);
        assert_eq!(sol.triple.phi_en0, 0.0);
        assert_relative_eq!(sol.nu0, 1.75);
    }

    #[test]
    fn sine_doping_orbit_is_monotone() {
        let sol = integrate_ivp(&orbit(), 1024).unwrap();
        for w in sol.rho.windows(2) {
            assert!(w[1] > w[0]);
        }
        for w in sol.field.windows(2) {
            assert!(w[1] > w[0]);
        }
        // exit density exceeds entrance density on the subsonic branch, so Phi_en0 < 0
        assert!(sol.triple.phi_en0 < 0.0);
    }

    #[test]
    fn rk4_order() {
        let p = orbit();
        let end = |n| {
            let s = integrate_ivp(&p, n).unwrap();
            (*s.rho.last().unwrap(), *s.field.last().unwrap())
        };
        let (a, b, c) = (end(16), end(32), end(64));
        let order = ((a.0 - b.0) / (b.0 - c.0)).abs().log2();
        assert!((3.7..=4.3).contains(&order), "observed order {order}");
    }

    #[test]
    fn boundary_triple_identities() {
        let sol = integrate_ivp(&orbit(), 1024).unwrap();
        let law = sol.law();
        let rl = *sol.rho.last().unwrap();
        let ul = *sol.u.last().unwrap();
        assert!((0.5 * ul * ul - (sol.triple.b00 - law.h(rl))).abs() < 1e-10);
        let drop = sol.electric_potential[0] - sol.electric_potential.last().unwrap();
        assert!((drop - sol.triple.phi_en0).abs() < 1e-8);
    }

    #[test]
    fn potential_consistency_converges() {
        let p = orbit();
        let defect = |n| {
            let s = integrate_ivp(&p, n).unwrap();
            let law = s.law();
            (0..s.xs.len())
                .map(|i| {
                    (law.h(s.rho[i]) - s.electric_potential[i] + 0.5 * s.u[i] * s.u[i]).abs()
                })
                .fold(0.0, f64::max)
        };
        let (a, b) = (defect(16), defect(32));
        assert!(a / b > 4.0, "ratio {}", a / b);
        assert!(defect(1024) < 1e-8);
    }

    #[test]
    fn invariants_on_accepted_orbits() {
        for p in [uniform(), orbit()] {
            let s = integrate_ivp(&p, 1024).unwrap();
            assert!(s.mass_flux_defect() < 1e-10);
            let rho_s = s.law().sonic_density(s.j0);
            assert!(s.rho.iter().all(|&r| r > rho_s));
            for i in 0..s.xs.len() {
                let hh = bernoulli_1d(s.law(), s.j0, s.rho[i]);
                assert!((hh - s.electric_potential[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sonic_start_breaks_down() {
        let p = OneDParams { j0: 2f64.sqrt(), e0: 0.1, ..uniform() };
        assert!(matches!(integrate_ivp(&p, 64), Err(Error::SonicBreakdown { .. })));
        let p = OneDParams { rho0: 1e-9, ..uniform() };
        assert!(matches!(integrate_ivp(&p, 64), Err(Error::VacuumBreakdown { .. })));
    }

    #[test]
    fn shooting_examples() {
        let law = GasLaw::default();
        let b = ChargeProfile::Uniform { value: 1.0 };
        let opts = ShootOptions::default();
        let s = shoot_bvp(&law, b, 1.0, 1.0, 1.0, 0.5, &opts).unwrap();
        assert!(s.params.e0.abs() < 1e-10);

        let fwd = integrate_ivp(&orbit(), 1024).unwrap();
        let s = shoot_bvp(&law, b, 1.0, 1.2, *fwd.rho.last().unwrap(), 0.5, &opts).unwrap();
        assert!((s.params.e0 - 0.1).abs() < 1e-8);

        let rho_s = law.sonic_density(0.5);
        assert!(matches!(
            shoot_bvp(&law, b, 1.0, 1.0, 0.9 * rho_s, 0.5, &opts),
            Err(Error::NoBracket { .. })
        ));
    }

    #[test]
    fn background_from_triple_roundtrip() {
        let fwd = integrate_ivp(&orbit(), 1024).unwrap();
        let law = GasLaw::default();
        let s = background_from_triple(
            &law,
            ChargeProfile::Uniform { value: 1.0 },
            1.0,
            &fwd.triple,
            &ShootOptions::default(),
        )
        .unwrap();
        assert!((s.j0 - 0.5).abs() < 1e-12);
        assert!((s.rho[0] - 1.2).abs() < 1e-12);
        assert!((s.params.e0 - 0.1).abs() < 1e-8);
    }

    #[test]
    fn monotone_orbit_examples() {
        let law = GasLaw::default();
        let m = AdmissibilityMargins::default();
        let b = ChargeProfile::Uniform { value: 1.0 };
        assert!(monotone_orbit_admissible(&law, b, 1.2, 0.1, 0.5, &m).admissible);
        assert!(!monotone_orbit_admissible(&law, b, 0.9, 0.1, 0.5, &m).admissible);

        let b = ChargeProfile::Sine { base: 1.0, amplitude: 0.1 };
        let chk = monotone_orbit_admissible(&law, b, 1.3, 0.1, 0.5, &m);
        assert!(chk.admissible);
        let p = OneDParams { charge: b, rho0: 1.3, e0: 0.1, ..uniform() };
        let s = integrate_ivp(&p, 1024).unwrap();
        assert!(s.nu0 > 0.0);
        for w in s.rho.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in s.field.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn subsample_hits_requested_nodes() {
        let s = integrate_ivp(&orbit(), 1024).unwrap();
        let g = s.on_axial_nodes(17, 1024).unwrap();
        assert_eq!(g.xs.len(), 17);
        assert_eq!(*g.xs.last().unwrap(), 1.0);
        assert!((g.xs[8] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cumulative_integral_of_cubic_is_exact() {
        let n = 11;
        let h = 0.1;
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * h).powi(3)).collect();
        let c = cumulative_integral(&f, h);
        for i in 2..n {
            let x = i as f64 * h;
            assert!((c[i] - x.powi(4) / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn atlas_records_breakdowns() {
        let law = GasLaw::default();
        let rows = atlas(
            &law,
            ChargeProfile::Uniform { value: 1.0 },
            1.0,
            &[0.5, 1.5],
            &[1.0],
            &[0.0],
            64,
        );
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("sonic"));
        let mut buf = Vec::new();
        write_atlas_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("J0,rho0,E0,Phi_en0,B00,pex0,nu0,status\n"));
    }
}
