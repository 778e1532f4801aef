//! Run configuration: a sectioned TOML file with documented defaults.

use anyhow::{bail, Context, Result};
use epnozzle::domainmap::{DomainMap, JacobianMethod};
use epnozzle::driver::{IterationConfig, PerturbationShapes};
use epnozzle::ode1d::ChargeProfile;
use epnozzle::{GasLaw, NozzleSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gas: GasLaw,
    pub nozzle: NozzleSpec,
    pub background: Background,
    pub charge: ChargeProfile,
    pub perturbation: Perturbation,
    pub iteration: Iteration,
    pub sweep: Sweep,
    pub domain: Domain,
    pub output: Output,
}

/// The background is fixed either by its entrance state or by its boundary triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum Background {
    Entrance { j0: f64, rho0: f64, e0: f64, steps: usize },
    Triple { phi_en0: f64, b00: f64, pex0: f64, steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub sigma: f64,
    pub shapes: PerturbationShapes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Iteration {
    pub m: f64,
    pub max_iter: usize,
    /// Omitted: `max(1e-10, 1e-3 sigma h^2)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub epsilon: f64,
    pub modes: Vec<u32>,
    pub jacobian: JacobianMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Vtk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    pub dir: String,
    pub format: Format,
    /// Write the iterate after every step.
    pub snapshots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gas: GasLaw::default(),
            nozzle: NozzleSpec::unit_2d(33, 65),
            background: Background::Entrance { j0: 0.5, rho0: 1.0, e0: 0.0, steps: 1024 },
            charge: ChargeProfile::Uniform { value: 1.0 },
            perturbation: Perturbation { sigma: 1e-3, shapes: PerturbationShapes::default() },
            iteration: Iteration { m: 10.0, max_iter: 50, tol: None, seed: 42 },
            sweep: Sweep { sigmas: vec![1e-4, 2e-4, 4e-4, 8e-4] },
            domain: Domain { epsilon: 0.0, modes: vec![1], jacobian: JacobianMethod::Analytic },
            output: Output { dir: "out".into(), format: Format::Csv, snapshots: false },
        }
    }
}

/// Default configuration with every key documented.
pub const TEMPLATE: &str = r#"# epnozzle run configuration. Every key is shown with its default.

# Pressure law p = k0 rho^gamma (gamma = 1 is isothermal). Densities below
# rho_floor count as vacuum.
[gas]
gamma = 2.0
k0 = 1.0
rho_floor = 1e-8

# Rectangular nozzle: cross-section box [lo, hi] per cross axis, axial length,
# nodes per axis (cross axes first, axial last). dim is 2 or 3.
[nozzle]
dim = 2
cross = [[0.0, 1.0]]
length = 1.0
nodes = [33, 65]

# One-dimensional background. source = "entrance" integrates from the entrance
# state (j0 mass flux, rho0 density, e0 field); source = "triple" shoots from
# boundary data phi_en0, b00, pex0. steps is the minimum RK4 step count.
[background]
source = "entrance"
j0 = 0.5
rho0 = 1.0
e0 = 0.0
steps = 1024

# Doping profile b(x): kind = "uniform" with value, or kind = "sine" with
# base and amplitude (b = base + amplitude sin(pi x / L)).
[charge]
kind = "uniform"
value = 1.0

# Perturbation size sigma and unit-size shapes. Cross profiles are
# offset + amplitude * prod cos (or sin) (m_j pi x_j'), one mode per cross axis.
# Entrance and exit potentials must be cosine profiles (wall compatibility).
[perturbation]
sigma = 1e-3

[perturbation.shapes]
bernoulli_shift = 0.0

[perturbation.shapes.entrance]
offset = 0.0
amplitude = 1.0
modes = [1]
shape = "cosine"

[perturbation.shapes.exit]
offset = 0.0
amplitude = 1.0
modes = [1]
shape = "cosine"

[perturbation.shapes.pressure]
offset = 0.0
amplitude = 1.0
modes = [1]
shape = "cosine"

# Doping perturbation amplitude * cos(axial_mode pi x_n / L) * prod cos(m_j pi x_j').
[perturbation.shapes.charge]
amplitude = 1.0
axial_mode = 1
cross_modes = [1]

# Fixed-point iteration: ball multiplier m (m sigma <= delta3 required),
# iteration cap, seed for norm subsampling. Add tol = <value> to override the
# default stop max(1e-10, 1e-3 sigma h^2).
[iteration]
m = 10.0
max_iter = 50
seed = 42

# Perturbation sizes for the sweep command.
[sweep]
sigmas = [1e-4, 2e-4, 4e-4, 8e-4]

# Deformed nozzle for perturb-domain: x_i + epsilon cos(m_i pi x_i') sin^2(pi x_n / L).
# Mode 0 shears the whole cross-section. jacobian is "analytic" or "numeric".
[domain]
epsilon = 0.0
modes = [1]
jacobian = "analytic"

# Output directory, field format ("csv" or "vtk"), per-iteration snapshots.
[output]
dir = "out"
format = "csv"
snapshots = false
"#;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing configuration")
    }

    /// Hex digest of the canonical serialization, output settings excluded.
    pub fn hash(&self) -> Result<String> {
        let canonical = RunConfig { output: RunConfig::default().output, ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.gas.validate()?;
        let n = &self.nozzle;
        if !(n.dim == 2 || n.dim == 3) {
            bail!("nozzle.dim must be 2 or 3");
        }
        if n.cross.len() != n.dim - 1 || n.nodes.len() != n.dim {
            bail!("nozzle.cross needs dim - 1 entries and nozzle.nodes needs dim entries");
        }
        if n.cross.iter().any(|[lo, hi]| !(hi > lo)) || !(n.length > 0.0) {
            bail!("nozzle extents must be positive");
        }
        if n.nodes.iter().any(|&k| k < 8) {
            bail!("nozzle.nodes must be at least 8 per axis");
        }
        match self.background {
            Background::Entrance { j0, rho0, steps, .. } => {
                if !(j0 > 0.0 && rho0 > 0.0) {
                    bail!("background j0 and rho0 must be positive");
                }
                if steps == 0 {
                    bail!("background.steps must be positive");
                }
            }
            Background::Triple { pex0, steps, .. } => {
                if !(pex0 > 0.0) {
                    bail!("background.pex0 must be positive");
                }
                if steps == 0 {
                    bail!("background.steps must be positive");
                }
            }
        }
        if !(self.charge.inf() > 0.0) {
            bail!("doping must stay positive");
        }
        if !(self.perturbation.sigma >= 0.0 && self.perturbation.sigma.is_finite()) {
            bail!("perturbation.sigma must be finite and nonnegative");
        }
        if !(self.iteration.m > 0.0) || self.iteration.max_iter == 0 {
            bail!("iteration.m and iteration.max_iter must be positive");
        }
        if self.iteration.tol.is_some_and(|t| !(t >= 0.0)) {
            bail!("iteration.tol must be nonnegative");
        }
        if self.sweep.sigmas.len() < 2 || self.sweep.sigmas.iter().any(|&s| !(s > 0.0)) {
            bail!("sweep.sigmas needs at least two positive values");
        }
        if !self.domain.epsilon.is_finite() {
            bail!("domain.epsilon must be finite");
        }
        Ok(())
    }

    pub fn iteration_config(&self, sigma: f64) -> IterationConfig {
        IterationConfig {
            sigma,
            m: self.iteration.m,
            max_iter: self.iteration.max_iter,
            tol: self.iteration.tol,
            deltas: None,
            seed: self.iteration.seed,
        }
    }

    pub fn domain_map(&self) -> DomainMap {
        if self.domain.epsilon == 0.0 {
            DomainMap::identity()
        } else {
            DomainMap { epsilon: self.domain.epsilon, modes: self.domain.modes.clone() }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parses_to_defaults() {
        assert_eq!(RunConfig::parse(TEMPLATE).unwrap(), RunConfig::default());
    }

    #[test]
    fn serialization_is_a_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.iteration.tol = Some(1e-12);
        cfg.charge = ChargeProfile::Sine { base: 1.0, amplitude: 0.05 };
        cfg.background = Background::Triple { phi_en0: 0.1, b00: 2.2, pex0: 0.9, steps: 512 };
        let once = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&once).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), once);
    }

    #[test]
    fn rejects_bad_ranges() {
        let mut cfg = RunConfig::default();
        cfg.nozzle.nodes = vec![2, 65];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.perturbation.sigma = -1.0;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::parse("[gas]\ngamma = 2.0\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.perturbation.sigma = 2e-3;
        assert_eq!(a.hash().unwrap(), RunConfig::default().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        b.perturbation.sigma = a.perturbation.sigma;
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }
}
