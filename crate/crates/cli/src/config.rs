//! Run configuration: JSON schema, defaults and cross-field checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spme_core::ensemble::Ladder;
use spme_core::graph::MonotoneGraph;
use spme_core::noise::NoiseSpec;
use spme_core::observables::DEFAULT_THETA_EXT;
use spme_core::solver::SolverConfig;
use spme_core::spectral::{Boundary, Domain, DomainRef, DomainSpec, Field};
use spme_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub graph: MonotoneGraph,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub solver: SolverConfig,
    pub initial: InitialCondition,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `offset + height · (1 - s²)^power` for `s = |x - center| / radius < 1`.
    Bump {
        center: Vec<f64>,
        radius: f64,
        height: f64,
        #[serde(default = "default_bump_power")]
        power: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `offset + amplitude · Π_i sin(k_i x_i)` (or cosine).
    Mode {
        wave_vector: Vec<f64>,
        amplitude: f64,
        #[serde(default)]
        profile: ModeProfile,
        #[serde(default)]
        offset: f64,
    },
    /// Raw little-endian `f64` grid values in row-major order; relative paths
    /// resolve against the config file.
    File { path: PathBuf },
}

fn default_bump_power() -> f64 {
    4.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeProfile {
    #[default]
    Sine,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum CstarPolicy {
    /// `C* = C_∞²`.
    #[default]
    CInfinity,
    /// Ensemble estimate `Ĉ*` (falls back to `C_∞²` for single paths).
    Estimated,
    Fixed { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_theta")]
    pub theta_ext: f64,
    #[serde(default)]
    pub cstar: CstarPolicy,
    /// Times for extinction-probability reports; empty means 20 equispaced
    /// points on `(0, T]`.
    #[serde(default)]
    pub report_grid: Vec<f64>,
    /// Whether to compare against the extinction bounds. Unset: on for
    /// Dirichlet boxes with a coercive graph of exponent `0 < m < 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extinction_bound: Option<bool>,
    /// Overrides the computed embedding constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub embedding_seed: u64,
}

fn default_theta() -> f64 {
    DEFAULT_THETA_EXT
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            theta_ext: DEFAULT_THETA_EXT,
            cstar: CstarPolicy::default(),
            report_grid: Vec::new(),
            extinction_bound: None,
            gamma: None,
            embedding_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Ladder>,
    /// Runs the ladder on independent noise instead of common random numbers.
    #[serde(default)]
    pub independent_noise: bool,
    /// Time steps for the direct versus rescaled comparison in `converge`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rescaling_dts: Vec<f64>,
}

fn default_paths() -> usize {
    64
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_paths: default_paths(),
            ladder: None,
            independent_noise: false,
            rescaling_dts: Vec::new(),
        }
    }
}

fn consistency(first: &str, second: &str, message: impl Into<String>) -> Error {
    Error::ConsistencyError {
        first: first.into(),
        second: second.into(),
        message: message.into(),
    }
}

/// Parses and validates a configuration; relative `file` initial conditions
/// are resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::SchemaError {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if let (InitialCondition::File { path }, Some(dir)) = (&mut cfg.initial, base_dir) {
        if path.is_relative() {
            *path = dir.join(&*path);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, path.parent())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.graph.validate()?;
        let d = self.domain.d;
        if self.solver.lambda == 0.0 && !self.graph.is_lipschitz() {
            return Err(consistency(
                "solver.lambda",
                "graph",
                "lambda = 0 is only allowed for Lipschitz graphs",
            ));
        }
        self.solver.validate(&self.graph)?;
        self.noise
            .validate(d)
            .map_err(|e| consistency("noise.modes", "domain.d", e.to_string()))?;
        match &self.initial {
            InitialCondition::Bump {
                center, radius, power, ..
            } => {
                if center.len() != d {
                    return Err(consistency(
                        "initial.center",
                        "domain.d",
                        format!("center has {} components, domain has d = {d}", center.len()),
                    ));
                }
                if !(*radius > 0.0) || !(*power >= 0.0) {
                    return Err(Error::InvalidParameter("bump radius must be > 0 and power >= 0".into()));
                }
            }
            InitialCondition::Mode { wave_vector, .. } => {
                if wave_vector.len() != d {
                    return Err(consistency(
                        "initial.wave_vector",
                        "domain.d",
                        format!("wave vector has {} components, domain has d = {d}", wave_vector.len()),
                    ));
                }
            }
            InitialCondition::File { .. } => {}
        }
        let a = &self.analysis;
        if !(a.theta_ext > 0.0 && a.theta_ext < 1.0) {
            return Err(Error::InvalidParameter("analysis.theta_ext must lie in (0, 1)".into()));
        }
        if a.report_grid.iter().any(|&t| !(t >= 0.0 && t <= self.solver.horizon * (1.0 + 1e-12))) {
            return Err(consistency(
                "analysis.report_grid",
                "solver.T",
                "report times must lie in [0, T]",
            ));
        }
        if let CstarPolicy::Fixed { value } = a.cstar {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter("analysis.cstar.value must be >= 0".into()));
            }
        }
        if a.extinction_bound == Some(true) {
            if self.domain.boundary != Boundary::Dirichlet {
                return Err(consistency(
                    "analysis.extinction_bound",
                    "domain.boundary",
                    "extinction bounds need a Dirichlet box",
                ));
            }
            if !self.fast_diffusion() {
                return Err(consistency(
                    "analysis.extinction_bound",
                    "graph",
                    "extinction bounds need a coercive graph with 0 < m < 1",
                ));
            }
        }
        if self.ensemble.n_paths == 0 {
            return Err(Error::InvalidParameter("ensemble.n_paths must be >= 1".into()));
        }
        Ok(())
    }

    fn fast_diffusion(&self) -> bool {
        self.graph.coercivity().is_some_and(|c| c.m > 0.0 && c.m < 1.0)
    }

    /// Whether extinction bounds are evaluated for this run.
    pub fn extinction_analysis(&self) -> bool {
        self.analysis
            .extinction_bound
            .unwrap_or(self.domain.boundary == Boundary::Dirichlet && self.fast_diffusion())
    }

    pub fn report_grid(&self) -> Vec<f64> {
        if self.analysis.report_grid.is_empty() {
            let t = self.solver.horizon;
            (1..=20).map(|i| t * i as f64 / 20.0).collect()
        } else {
            self.analysis.report_grid.clone()
        }
    }

    pub fn build_domain(&self) -> Result<DomainRef> {
        Domain::new(self.domain.clone())
    }

    pub fn initial_field(&self, domain: &DomainRef) -> Result<Field> {
        match &self.initial {
            InitialCondition::Bump {
                center,
                radius,
                height,
                power,
                offset,
            } => Ok(Field::from_fn(domain.clone(), |p| {
                let r2: f64 = center.iter().enumerate().map(|(i, c)| (p[i] - c).powi(2)).sum();
                let s2 = r2 / (radius * radius);
                let bump = if s2 < 1.0 { height * (1.0 - s2).powf(*power) } else { 0.0 };
                offset + bump
            })),
            InitialCondition::Mode {
                wave_vector,
                amplitude,
                profile,
                offset,
            } => Ok(Field::from_fn(domain.clone(), |p| {
                let prod: f64 = wave_vector
                    .iter()
                    .enumerate()
                    .map(|(i, k)| match profile {
                        ModeProfile::Sine => (k * p[i]).sin(),
                        ModeProfile::Cosine => (k * p[i]).cos(),
                    })
                    .product();
                offset + amplitude * prod
            })),
            InitialCondition::File { path } => {
                let bytes = std::fs::read(path)?;
                if bytes.len() != 8 * domain.len() {
                    return Err(consistency(
                        "initial.path",
                        "domain.N",
                        format!("file holds {} bytes, grid needs {}", bytes.len(), 8 * domain.len()),
                    ));
                }
                let values = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                Field::new(domain.clone(), values)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact serialized config, with `output_dir` left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&value).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
