//! Flux `A(z, q) = rho(z, |q|^2) q` and charge `B(z, q) = rho(z, |q|^2)`, their
//! derivatives, the frozen principal coefficients at a background state, and the
//! quadratic remainders that drive the fixed-point iteration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas::GasLaw;

/// Background state at one point: potential `Phi0`, velocity `D phi0` and density.
#[derive(Debug, Clone, PartialEq)]
pub struct LinPoint {
    pub phi0: f64,
    pub dphi0: Vec<f64>,
    pub rho_bg: f64,
    /// `p'(rho_bg)`
    pub sound_sq: f64,
}

impl LinPoint {
    pub fn new(law: &GasLaw, phi0: f64, dphi0: Vec<f64>) -> Result<Self> {
        let rho_bg = density(law, phi0, dot(&dphi0, &dphi0))?;
        let sound_sq = law.dp(rho_bg);
        if !(dot(&dphi0, &dphi0) < sound_sq) {
            return Err(Error::NotSubsonic(format!(
                "|D phi0|^2 = {} >= p'(rho) = {sound_sq}",
                dot(&dphi0, &dphi0)
            )));
        }
        Ok(LinPoint { phi0, dphi0, rho_bg, sound_sq })
    }

    pub fn dim(&self) -> usize {
        self.dphi0.len()
    }

    /// `d_z B` at the background.
    pub fn db_dz(&self) -> f64 {
        self.rho_bg / self.sound_sq
    }
}

/// Admissibility radii for perturbations of a background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// Perturbations with `|z| + |q| < 3 delta1` keep the enthalpy argument above the floor.
    pub delta1: f64,
    /// Perturbations with `|z| + |q| < 4 delta2` keep density above half the background.
    pub delta2: f64,
}

impl Deltas {
    pub fn delta3(&self) -> f64 {
        self.delta1.min(self.delta2)
    }

    /// Operational radii from a sample of background states, both capped at 1.
    pub fn from_background<'a>(law: &GasLaw, points: impl IntoIterator<Item = &'a LinPoint>) -> Self {
        let floor = law.enthalpy_floor();
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for p in points {
            let arg = law.h(p.rho_bg);
            d1 = d1.min(0.5 * (arg - floor));
            let speed = dot(&p.dphi0, &p.dphi0).sqrt();
            d2 = d2.min(0.25 * (arg - law.h(0.5 * p.rho_bg)) / (1.0 + speed));
        }
        Deltas { delta1: d1.min(1.0), delta2: d2.min(1.0) }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rho(z, |q|^2) = h^{-1}(z - |q|^2 / 2)`
pub fn density(law: &GasLaw, z: f64, speed_sq: f64) -> Result<f64> {
    let arg = z - 0.5 * speed_sq;
    let floor = law.enthalpy_floor();
    if !(arg > floor) {
        return Err(Error::Vacuum { arg, floor });
    }
    Ok(law.h_inv_unchecked(arg))
}

pub fn charge_b(law: &GasLaw, z: f64, q: &[f64]) -> Result<f64> {
    density(law, z, dot(q, q))
}

pub fn flux_a(law: &GasLaw, z: f64, q: &[f64]) -> Result<Vec<f64>> {
    let rho = charge_b(law, z, q)?;
    Ok(q.iter().map(|qi| rho * qi).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub da_dz: Vec<f64>,
    pub db_dz: f64,
    pub da_dq: DMatrix<f64>,
    pub db_dq: Vec<f64>,
}

pub fn derivatives(law: &GasLaw, z: f64, q: &[f64]) -> Result<Derivatives> {
    let b = charge_b(law, z, q)?;
    let c2 = law.dp(b);
    let db_dz = b / c2;
    let n = q.len();
    Ok(Derivatives {
        da_dz: q.iter().map(|qi| db_dz * qi).collect(),
        db_dz,
        da_dq: DMatrix::from_fn(n, n, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            b * (delta - q[i] * q[j] / c2)
        }),
        db_dq: q.iter().map(|qj| -b * qj / c2).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aij {
    pub matrix: DMatrix<f64>,
    /// Smallest eigenvalue.
    pub lambda: f64,
    /// Largest eigenvalue.
    pub lambda_max: f64,
}

/// Frozen principal coefficients `a_ij = d_{q_j} A_i` at the background.
pub fn aij_at(point: &LinPoint) -> Result<Aij> {
    let q0 = &point.dphi0;
    let n = q0.len();
    let rho = point.rho_bg;
    let c2 = point.sound_sq;
    let speed_sq = dot(q0, q0);
    let lambda = rho * (1.0 - speed_sq / c2);
    if !(lambda > 0.0) {
        return Err(Error::NotSubsonic(format!("a_nn = {lambda} at u^2 = {speed_sq}, p' = {c2}")));
    }
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        rho * (delta - q0[i] * q0[j] / c2)
    });
    Ok(Aij { matrix, lambda, lambda_max: rho })
}

fn check_ball(z: f64, q: &[f64], radius: f64) -> Result<()> {
    let size = z.abs() + dot(q, q).sqrt();
    if size < radius {
        Ok(())
    } else {
        Err(Error::Admissibility(format!("|z| + |q| = {size} exceeds {radius}")))
    }
}

/// Quadratic remainder of the flux:
/// `F = -[A(Phi0 + z, Dphi0 + q) - A(Phi0, Dphi0) - z d_zA - d_qA q]`.
pub fn remainder_flux(law: &GasLaw, point: &LinPoint, z: f64, q: &[f64], deltas: &Deltas) -> Result<Vec<f64>> {
    check_ball(z, q, 3.0 * deltas.delta1)?;
    let n = q.len();
    let mut out = vec![0.0; n];
    let full = remainder_kernel(law, point, z, q)?;
    for (i, o) in out.iter_mut().enumerate() {
        *o = full.flux(point, q, i);
    }
    Ok(out)
}

/// Quadratic remainder of the charge: `f = B(full) - B(bg) - z d_zB - d_qB . q`.
pub fn remainder_charge(law: &GasLaw, point: &LinPoint, z: f64, q: &[f64], deltas: &Deltas) -> Result<f64> {
    check_ball(z, q, 3.0 * deltas.delta1)?;
    Ok(remainder_kernel(law, point, z, q)?.charge(point))
}

/// Shared pieces of the remainders at one perturbed state, without the ball check.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RemainderKernel {
    rho_full: f64,
    z: f64,
    /// `Dphi0 . q`
    proj: f64,
}

pub(crate) fn remainder_kernel(law: &GasLaw, point: &LinPoint, z: f64, q: &[f64]) -> Result<RemainderKernel> {
    let q0 = &point.dphi0;
    let mut speed_sq = 0.0;
    for (a, b) in q0.iter().zip(q) {
        speed_sq += (a + b) * (a + b);
    }
    let rho_full = density(law, point.phi0 + z, speed_sq)?;
    Ok(RemainderKernel { rho_full, z, proj: dot(q0, q) })
}

impl RemainderKernel {
    pub(crate) fn flux(&self, point: &LinPoint, q: &[f64], i: usize) -> f64 {
        let rho = point.rho_bg;
        let c2 = point.sound_sq;
        let q0i = point.dphi0[i];
        let qi = q[i];
        // A(full) - A(bg) - z dzA - dqA q, grouped to limit cancellation
        let lin = (self.rho_full - rho) * qi + (self.rho_full - rho - self.z * rho / c2 + rho * self.proj / c2) * q0i;
        -lin
    }

    pub(crate) fn charge(&self, point: &LinPoint) -> f64 {
        let rho = point.rho_bg;
        let c2 = point.sound_sq;
        self.rho_full - rho - self.z * rho / c2 + rho * self.proj / c2
    }
}

/// Exit-pressure datum `g` for the linearized conormal condition on the exit face.
///
/// `g = (pex - p(rho_bg)) / g1 + g2`, where `g1` is the chord slope of `p` between the
/// background and perturbed exit densities and `g2 = -(rho~ - rho_bg) + d_qB . q`.
pub fn exit_g(
    law: &GasLaw,
    point: &LinPoint,
    q: &[f64],
    pex: f64,
    psi_ex: f64,
    deltas: &Deltas,
) -> Result<f64> {
    let size = dot(q, q).sqrt();
    if !(size < 2.0 * deltas.delta2) {
        return Err(Error::Admissibility(format!("exit |q| = {size} exceeds {}", 2.0 * deltas.delta2)));
    }
    exit_g_unchecked(law, point, q, pex, psi_ex)
}

pub(crate) fn exit_g_unchecked(law: &GasLaw, point: &LinPoint, q: &[f64], pex: f64, psi_ex: f64) -> Result<f64> {
    let k = remainder_kernel(law, point, psi_ex, q)?;
    let rho = point.rho_bg;
    let drho = k.rho_full - rho;
    let g1 = exit_chord_slope(law, rho, k.rho_full);
    let bq_q = -rho * k.proj / point.sound_sq;
    Ok((pex - law.p(rho)) / g1 - drho + bq_q)
}

/// `(p(b) - p(a)) / (b - a)`, or `p'(a)` when the densities coincide to 1e-12.
pub fn exit_chord_slope(law: &GasLaw, a: f64, b: f64) -> f64 {
    if (b - a).abs() < 1e-12 {
        law.dp(a)
    } else {
        (law.p(b) - law.p(a)) / (b - a)
    }
}

/// `a_nn p'(rho_bg) / J0`, converting the exit datum `g` into a conormal flux.
pub fn conormal_scale(point: &LinPoint, j0: f64) -> Result<f64> {
    if !(j0 >= 1e-8) {
        return Err(Error::Domain(format!("mass flux {j0} below 1e-8")));
    }
    Ok(aij_at(point)?.lambda * point.sound_sq / j0)
}
