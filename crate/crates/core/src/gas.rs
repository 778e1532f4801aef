//! Polytropic gas closure `p(rho) = rho^gamma`.
//!
//! Enthalpy is normalized to vanish at the reference density `k0`, and the
//! Bernoulli constant is fixed to zero, so that density is recovered from the
//! electric potential and the flow speed as `rho = h^{-1}(Phi - |grad phi|^2 / 2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponents this close to 1 use the logarithmic enthalpy branch.
const ISOTHERMAL_SNAP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasLaw {
    pub gamma: f64,
    pub k0: f64,
    pub rho_floor: f64,
}

impl Default for GasLaw {
    fn default() -> Self {
        GasLaw { gamma: 2.0, k0: 1.0, rho_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowState {
    pub phi_potential: f64,
    pub speed_sq: f64,
    pub density: f64,
    pub subsonic: bool,
}

impl GasLaw {
    pub fn new(gamma: f64, k0: f64) -> Result<Self> {
        Self::with_floor(gamma, k0, 1e-8)
    }

    pub fn with_floor(gamma: f64, k0: f64, rho_floor: f64) -> Result<Self> {
        let law = GasLaw { gamma, k0, rho_floor };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.k0 > 0.0) || !(self.rho_floor > 0.0) {
            return Err(Error::Domain("k0 and rho_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn is_isothermal(&self) -> bool {
        self.gamma < 1.0 + ISOTHERMAL_SNAP
    }

    fn check_rho(rho: f64) -> Result<()> {
        if rho > 0.0 && rho.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("density must be positive, got {rho}")))
        }
    }

    pub fn pressure(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.p(rho))
    }

    /// Squared sound speed `p'(rho)`.
    pub fn pressure_derivative(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.dp(rho))
    }

    pub fn pressure_second_derivative(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.gamma * (self.gamma - 1.0) * rho.powf(self.gamma - 2.0))
    }

    pub fn sound_speed(&self, rho: f64) -> Result<f64> {
        Ok(self.pressure_derivative(rho)?.sqrt())
    }

    pub fn enthalpy(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.h(rho))
    }

    /// Inverse enthalpy. Arguments at or below `h(rho_floor)` are a vacuum error.
    pub fn enthalpy_inverse(&self, s: f64) -> Result<f64> {
        let floor = self.h(self.rho_floor);
        if !(s > floor) || !s.is_finite() {
            return Err(Error::Vacuum { arg: s, floor });
        }
        let rho = self.h_inv_closed(s);
        if rho.is_finite() && rho > 0.0 {
            Ok(rho)
        } else {
            self.enthalpy_inverse_iterative(s)
        }
    }

    /// Safeguarded Newton solve of `h(rho) = s`; fallback for the closed form.
    pub fn enthalpy_inverse_iterative(&self, s: f64) -> Result<f64> {
        let floor = self.h(self.rho_floor);
        if !(s > floor) {
            return Err(Error::Vacuum { arg: s, floor });
        }
        let mut lo = self.rho_floor;
        let mut hi = self.k0.max(1.0);
        while self.h(hi) < s {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::Domain(format!("enthalpy level {s} out of range")));
            }
        }
        let mut rho = 0.5 * (lo + hi);
        for _ in 0..200 {
            let r = self.h(rho) - s;
            if r.abs() <= 1e-14 * s.abs().max(1.0) {
                return Ok(rho);
            }
            if r > 0.0 {
                hi = rho;
            } else {
                lo = rho;
            }
            // h' = p'/rho
            let step = rho - r * rho / self.dp(rho);
            rho = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                return Ok(rho);
            }
        }
        Ok(rho)
    }

    pub fn density_from_state(&self, phi: f64, speed_sq: f64) -> Result<FlowState> {
        if speed_sq < 0.0 {
            return Err(Error::Domain("negative squared speed".into()));
        }
        let density = self.enthalpy_inverse(phi - 0.5 * speed_sq)?;
        Ok(FlowState {
            phi_potential: phi,
            speed_sq,
            density,
            subsonic: speed_sq < self.dp(density),
        })
    }

    pub fn bernoulli(&self, speed_sq: f64, rho: f64) -> Result<f64> {
        Ok(0.5 * speed_sq + self.enthalpy(rho)?)
    }

    /// Density `rho_s` at which `rho^2 p'(rho) = j0^2` (sonic density for mass flux `j0`).
    pub fn sonic_density(&self, j0: f64) -> f64 {
        // rho^2 * gamma * rho^(gamma-1) = j0^2
        (j0 * j0 / self.gamma).powf(1.0 / (self.gamma + 1.0))
    }

    pub(crate) fn p(&self, rho: f64) -> f64 {
        if self.is_isothermal() {
            rho
        } else {
            rho.powf(self.gamma)
        }
    }

    pub(crate) fn dp(&self, rho: f64) -> f64 {
        if self.is_isothermal() {
            1.0
        } else {
            self.gamma * rho.powf(self.gamma - 1.0)
        }
    }

    pub(crate) fn h(&self, rho: f64) -> f64 {
        if self.is_isothermal() {
            (rho / self.k0).ln()
        } else {
            let g1 = self.gamma - 1.0;
            self.gamma / g1 * (rho.powf(g1) - self.k0.powf(g1))
        }
    }

    fn h_inv_closed(&self, s: f64) -> f64 {
        if self.is_isothermal() {
            self.k0 * s.exp()
        } else {
            let g1 = self.gamma - 1.0;
            (self.k0.powf(g1) + s * g1 / self.gamma).powf(1.0 / g1)
        }
    }

    /// Density at state `(z, |q|^2)` without the floor check; callers validate.
    pub(crate) fn h_inv_unchecked(&self, s: f64) -> f64 {
        self.h_inv_closed(s)
    }

    pub(crate) fn enthalpy_floor(&self) -> f64 {
        self.h(self.rho_floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn pressure_values() {
        let law = GasLaw::default();
        assert_eq!(law.pressure(1.0).unwrap(), 1.0);
        assert_eq!(law.pressure(2.0).unwrap(), 4.0);
        assert!(law.pressure(0.0).is_err());
        assert!(law.pressure(-1.0).is_err());
    }

    #[test]
    fn pressure_derivative_matches_finite_difference() {
        let law = GasLaw::new(1.4, 1.0).unwrap();
        let rho = 1.3;
        let d = 1e-6;
        let fd = (law.p(rho + d) - law.p(rho - d)) / (2.0 * d);
        assert_relative_eq!(law.pressure_derivative(rho).unwrap(), fd, max_relative = 1e-8);
        // p is the integral of p' from 0
        let integral = simpson(|r| law.dp(r), 1e-12, rho, 20000);
        assert_relative_eq!(law.pressure(rho).unwrap(), integral, max_relative = 1e-6);
    }

    #[test]
    fn enthalpy_against_quadrature() {
        let law = GasLaw::default();
        assert_eq!(law.enthalpy(1.0).unwrap(), 0.0);
        let q = simpson(|r| law.dp(r) / r, 1.0, 2.0, 200);
        assert_relative_eq!(law.enthalpy(2.0).unwrap(), q, max_relative = 1e-12);
        assert_relative_eq!(law.enthalpy(2.0).unwrap(), 2.0, max_relative = 1e-14);

        let iso = GasLaw::new(1.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        let q = simpson(|r| iso.dp(r) / r, 1.0, e, 2000);
        assert_relative_eq!(iso.enthalpy(e).unwrap(), q, max_relative = 1e-10);
        assert_relative_eq!(iso.enthalpy(e).unwrap(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn near_isothermal_snaps_to_log_branch() {
        let law = GasLaw::new(1.0 + 1e-12, 1.0).unwrap();
        assert!(law.is_isothermal());
        assert_relative_eq!(law.enthalpy(2.0).unwrap(), 2f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn enthalpy_inverse_examples() {
        let law = GasLaw::default();
        assert_eq!(law.enthalpy_inverse(0.0).unwrap(), 1.0);
        assert_relative_eq!(law.enthalpy_inverse(2.0).unwrap(), 2.0, max_relative = 1e-15);

        let law = GasLaw::new(1.4, 1.0).unwrap();
        let rho = law.enthalpy_inverse(0.7).unwrap();
        assert!((law.h(rho) - 0.7).abs() < 1e-12);
        let oracle = law.enthalpy_inverse_iterative(0.7).unwrap();
        assert_relative_eq!(rho, oracle, max_relative = 1e-12);
    }

    #[test]
    fn enthalpy_inverse_agrees_with_bisection() {
        let law = GasLaw::default();
        let s = 2.0;
        let (mut lo, mut hi) = (0.5, 4.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if law.h(mid) < s {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert_relative_eq!(law.enthalpy_inverse(s).unwrap(), lo, max_relative = 1e-14);
    }

    #[test]
    fn vacuum_below_floor() {
        let law = GasLaw::default();
        // h(1e-8) is about -2
        assert!(matches!(law.enthalpy_inverse(-3.0), Err(Error::Vacuum { .. })));
        assert!(matches!(law.density_from_state(-3.0, 0.0), Err(Error::Vacuum { .. })));
    }

    #[test]
    fn density_from_state_examples() {
        let law = GasLaw::default();
        let st = law.density_from_state(3.0, 2.0).unwrap();
        assert_relative_eq!(st.density, 2.0, max_relative = 1e-15);
        assert!(st.subsonic);
        // h(2) by quadrature equals Phi - q^2/2
        let q = simpson(|r| law.dp(r) / r, 1.0, st.density, 100);
        assert_relative_eq!(q, 2.0, max_relative = 1e-12);
        assert_eq!(law.density_from_state(0.0, 0.0).unwrap().density, 1.0);
    }

    #[test]
    fn bernoulli_examples() {
        let law = GasLaw::default();
        assert_eq!(law.bernoulli(0.0, law.k0).unwrap(), 0.0);
        assert_relative_eq!(law.bernoulli(0.25, 1.0).unwrap(), 0.125);
        let st = law.density_from_state(3.0, 2.0).unwrap();
        assert!((law.bernoulli(st.speed_sq, st.density).unwrap() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn sonic_density_solves_definition() {
        for &g in &[1.0, 1.4, 2.0] {
            let law = GasLaw::new(g, 1.0).unwrap();
            let j0 = 0.7;
            let rs = law.sonic_density(j0);
            assert_relative_eq!(rs * rs * law.dp(rs), j0 * j0, max_relative = 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roundtrip(gamma in prop_oneof![Just(1.0), Just(1.4), Just(2.0), 1.0f64..3.0],
                         s in -1.0f64..5.0) {
                let law = GasLaw::new(gamma, 1.0).unwrap();
                let rho = law.enthalpy_inverse(s).unwrap();
                prop_assert!((law.h(rho) - s).abs() < 1e-12);
            }

            #[test]
            fn monotone_and_convex(gamma in 1.0f64..3.0, a in 0.01f64..10.0, d in 1e-3f64..1.0) {
                let law = GasLaw::new(gamma, 1.0).unwrap();
                prop_assert!(law.p(a + d) > law.p(a));
                prop_assert!(law.h(a + d) > law.h(a));
                prop_assert!(law.dp(a) > 0.0);
                prop_assert!(law.pressure_second_derivative(a).unwrap() >= 0.0);
            }

            #[test]
            fn bernoulli_equals_potential(phi in -0.5f64..3.0, q2 in 0.0f64..1.0) {
                let law = GasLaw::default();
                let st = law.density_from_state(phi, q2).unwrap();
                let b = law.bernoulli(st.speed_sq, st.density).unwrap();
                prop_assert!((b - phi).abs() < 1e-10);
            }
        }
    }
}
