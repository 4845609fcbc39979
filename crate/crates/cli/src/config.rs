//! Run configuration: TOML or JSON, versioned by a schema field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srb_core::normed_linalg::NormKind;
use srb_core::system::{builtin_system, SharedSystem};
use srb_core::{Error, Result};

pub const CONFIG_SCHEMA: &str = "srb-run-config/1";
/// The only environment input: root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "SRB_LAB_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub norm: Option<NormKind>,
}

/// Constants of the construction exposed to the user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constants {
    /// Disc radius `δ`.
    pub delta: f64,
    /// Fiber half-width `ρ0` of the transversal box.
    pub rho0: f64,
    /// Transversal radius `ε` of the box.
    pub epsilon: f64,
    /// Slack `ε0` in the rate `λ0 − ε0`.
    pub eps0: f64,
    /// Basis-field separation parameter.
    pub basis_epsilon: f64,
    pub chart_radius: f64,
    /// Transversal cell width used to cluster fibers.
    pub cell_width: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            delta: 0.75 * std::f64::consts::PI,
            rho0: 0.25,
            epsilon: 0.1,
            eps0: 0.001,
            basis_epsilon: 0.1,
            chart_radius: 1.0,
            cell_width: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampling {
    pub attractor_points: usize,
    pub transient: usize,
    pub history: usize,
    pub validate_samples: usize,
    pub cone_iterations: usize,
    /// Orbits whose disc chains feed the contraction and distortion stages.
    pub chains: usize,
    pub chain_depth: usize,
    pub contraction_pairs: usize,
    pub distortion_pairs: usize,
    pub distortion_horizon: usize,
    pub coherence_discs: usize,
    /// Attractor points used to locate the fibers of the transversal box.
    pub transversal_samples: usize,
    pub cylinders: usize,
    pub refinement_levels: usize,
    pub min_fiber_particles: usize,
    pub portmanteau_steps: usize,
    pub snapshot_subsample: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            attractor_points: 2000,
            transient: 100,
            history: 80,
            validate_samples: 4096,
            cone_iterations: 40,
            chains: 8,
            chain_depth: 30,
            contraction_pairs: 1000,
            distortion_pairs: 100,
            distortion_horizon: 30,
            coherence_discs: 9,
            transversal_samples: 20_000,
            cylinders: 100,
            refinement_levels: 3,
            min_fiber_particles: 200,
            portmanteau_steps: 10,
            snapshot_subsample: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub disc_convergence: f64,
    pub invariance_residual: f64,
    pub cauchy_tail: f64,
    pub projection_norm: f64,
    pub product_exactness: f64,
    pub uniform_density: f64,
    pub marginal_tv: f64,
    pub marginal_bins: usize,
    pub levy_prokhorov: f64,
    pub lp_resolution: usize,
    pub portmanteau: f64,
    pub portmanteau_bins: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            disc_convergence: 1e-10,
            invariance_residual: 1e-6,
            cauchy_tail: 1e-6,
            projection_norm: 1.5,
            product_exactness: 1e-12,
            uniform_density: 1e-10,
            marginal_tv: 1e-2,
            marginal_bins: 1024,
            levy_prokhorov: 1e-2,
            lp_resolution: 64,
            portmanteau: 1e-2,
            portmanteau_bins: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub system: SystemSpec,
    /// Expected `dim E^u`; checked against the system when given.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub output_dir: PathBuf,
}

fn default_horizon() -> usize {
    60
}

fn default_particles() -> usize {
    1_000_000
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    pub fn new(system: &str, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            system: SystemSpec { name: system.into(), params: BTreeMap::new(), norm: None },
            k: None,
            constants: Constants::default(),
            horizon: default_horizon(),
            particles: default_particles(),
            seed: default_seed(),
            sampling: Sampling::default(),
            tolerances: Tolerances::default(),
            output_dir: output_dir.into(),
        }
    }

    /// Parses TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn system(&self) -> Result<SharedSystem> {
        builtin_system(&self.system.name, &self.system.params, self.system.norm.clone())
    }

    /// Checks schema, ranges and the referenced system; returns the system.
    pub fn validate(&self) -> Result<SharedSystem> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::InvalidInput(format!("config schema '{}' is not {CONFIG_SCHEMA}", self.schema)));
        }
        let sys = self.system()?;
        if let Some(k) = self.k {
            if k != sys.unstable_dim() {
                return Err(Error::Parameter(format!("k = {k} but {} has unstable dimension {}", sys.name(), sys.unstable_dim())));
            }
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if self.particles < 2 * self.horizon {
            return Err(Error::InvalidInput("need at least two particles per generation".into()));
        }
        let c = &self.constants;
        let t = &self.tolerances;
        let positive = [
            ("delta", c.delta),
            ("rho0", c.rho0),
            ("epsilon", c.epsilon),
            ("eps0", c.eps0),
            ("basis_epsilon", c.basis_epsilon),
            ("chart_radius", c.chart_radius),
            ("cell_width", c.cell_width),
            ("disc_convergence", t.disc_convergence),
            ("invariance_residual", t.invariance_residual),
            ("cauchy_tail", t.cauchy_tail),
            ("projection_norm", t.projection_norm),
            ("product_exactness", t.product_exactness),
            ("uniform_density", t.uniform_density),
            ("marginal_tv", t.marginal_tv),
            ("levy_prokhorov", t.levy_prokhorov),
            ("portmanteau", t.portmanteau),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput(format!("{name} = {v} must be positive")));
        }
        if c.basis_epsilon >= 1.0 {
            return Err(Error::InvalidInput("basis_epsilon must be below 1".into()));
        }
        if t.marginal_bins == 0 || t.portmanteau_bins == 0 || t.lp_resolution == 0 {
            return Err(Error::InvalidInput("bin counts must be positive".into()));
        }
        let s = &self.sampling;
        if s.history > s.transient {
            return Err(Error::InvalidInput("sampling.history exceeds sampling.transient".into()));
        }
        let needed = srb_core::manifolds::MIN_DEPTH + s.chain_depth.max(s.distortion_horizon) + 1;
        if s.history < needed {
            return Err(Error::InvalidInput(format!("sampling.history must be at least {needed}")));
        }
        if s.chain_depth < s.distortion_horizon {
            return Err(Error::InvalidInput("chain_depth shorter than distortion_horizon".into()));
        }
        if s.attractor_points < s.chains + 1 || s.chains == 0 {
            return Err(Error::InvalidInput("need at least one chain and one anchor orbit".into()));
        }
        if s.transversal_samples == 0 {
            return Err(Error::InvalidInput("transversal_samples must be positive".into()));
        }
        if s.portmanteau_steps < 10 {
            return Err(Error::InvalidInput("portmanteau_steps must be at least 10".into()));
        }
        Ok(sys)
    }

    /// `output_dir`, resolved against the output-root variable when relative.
    pub fn resolved_output(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_takes_defaults() {
        let cfg = RunConfig::from_toml("schema = \"srb-run-config/1\"\noutput_dir = \"out\"\n[system]\nname = \"solenoid\"\n").unwrap();
        assert_eq!(cfg.horizon, 60);
        assert_eq!(cfg.particles, 1_000_000);
        assert_eq!(cfg.tolerances.marginal_bins, 1024);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("schema = \"srb-run-config/1\"\noutput_dir = \"o\"\nhorizn = 3\n[system]\nname = \"solenoid\"\n");
        assert!(matches!(err, Err(Error::Toml(_))));
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::new("solenoid", "o");
        c.system.params.insert("lambda".into(), 0.6);
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));

        let mut c = RunConfig::new("solenoid", "o");
        c.horizon = 0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::new("solenoid", "o");
        c.tolerances.marginal_tv = -1.0;
        assert!(c.validate().is_err());

        let c = RunConfig::new("lorenz", "o");
        assert!(matches!(c.validate(), Err(Error::UnknownSystem(_))));

        let mut c = RunConfig::new("solenoid", "o");
        c.k = Some(2);
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn json_and_toml_agree() {
        let c = RunConfig::new("linear_hyperbolic", "runs/lin");
        let json = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        let toml_text = toml::to_string(&c).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_toml(&toml_text).unwrap(), c);
    }

    #[test]
    fn absolute_output_is_untouched() {
        assert_eq!(resolve_output(Path::new("/tmp/x")), PathBuf::from("/tmp/x"));
    }
}
