//! Run configuration read from a TOML file.
//!
//! ```toml
//! problem = "radiation"          # radiation | scattering | summation-benchmark
//! k = 6.283185307179586
//! epsilon = 1e-4
//! storage = "low-rank"           # raw | reduced | low-rank
//! seed = 1
//! output = "out"
//! reference = "pulsating-sphere" # none | pulsating-sphere | mie
//!
//! [mesh]
//! path = "sphere.msh"            # or: icosphere = 6 (unit sphere)
//!
//! [boundary]
//! kind = "neumann"               # neumann | dirichlet | robin
//! value = [1.0, 0.0]             # constant data, re and im
//!
//! [incident]
//! kind = "none"                  # none | plane-wave
//! direction = [0.0, 0.0, 1.0]
//!
//! [gmres]
//! tol = 1e-4
//! restart = 50
//! max_iter = 500
//!
//! [benchmark]
//! points = 20000
//! targets = 200
//! ```

use std::path::{Path, PathBuf};

use fdbem::fda::StorageMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    Radiation,
    Scattering,
    SummationBenchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Storage {
    Raw,
    Reduced,
    LowRank,
}

impl From<Storage> for StorageMode {
    fn from(s: Storage) -> Self {
        match s {
            Storage::Raw => StorageMode::Raw,
            Storage::Reduced => StorageMode::Reduced,
            Storage::LowRank => StorageMode::LowRank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    #[default]
    None,
    PulsatingSphere,
    Mie,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generated unit icosphere with this many subdivisions per face edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icosphere: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    Neumann,
    Dirichlet,
    Robin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub kind: BoundaryKind,
    /// Constant boundary data (`g` for Robin).
    #[serde(default)]
    pub value: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<[f64; 2]>,
}

impl Default for BoundarySpec {
    fn default() -> Self {
        Self {
            kind: BoundaryKind::Neumann,
            value: [0.0, 0.0],
            a: None,
            b: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncidentKind {
    None,
    PlaneWave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentSpec {
    pub kind: IncidentKind,
    #[serde(default = "default_direction")]
    pub direction: [f64; 3],
}

fn default_direction() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl Default for IncidentSpec {
    fn default() -> Self {
        Self {
            kind: IncidentKind::None,
            direction: default_direction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmresSpec {
    /// Defaults to `epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "default_restart")]
    pub restart: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_restart() -> usize {
    50
}

fn default_max_iter() -> usize {
    500
}

impl Default for GmresSpec {
    fn default() -> Self {
        Self {
            tol: None,
            restart: default_restart(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub points: usize,
    #[serde(default = "default_targets")]
    pub targets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_threshold: Option<usize>,
}

fn default_targets() -> usize {
    200
}

fn default_storage() -> Storage {
    Storage::LowRank
}

fn default_seed() -> u64 {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    pub k: f64,
    pub epsilon: f64,
    #[serde(default = "default_storage")]
    pub storage: Storage,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub reference: Reference,
    /// Also write the surface field as a legacy VTK point cloud.
    #[serde(default)]
    pub vtk: bool,
    #[serde(default)]
    pub mesh: MeshSpec,
    #[serde(default)]
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub incident: IncidentSpec,
    #[serde(default)]
    pub gmres: GmresSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSpec>,
}

/// A rejected configuration field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration:\n  {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<FieldError>),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Reads a file; a relative mesh path is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(mesh), Some(dir)) = (&cfg.mesh.path, path.parent()) {
            if mesh.is_relative() {
                cfg.mesh.path = Some(dir.join(mesh));
            }
        }
        Ok(cfg)
    }

    pub fn gmres_tol(&self) -> f64 {
        self.gmres.tol.unwrap_or(self.epsilon)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if !(self.k > 0.0 && self.k.is_finite()) {
            bad("k", format!("must be positive, got {}", self.k));
        }
        if !(1e-8..=1e-2).contains(&self.epsilon) {
            bad("epsilon", format!("must lie in [1e-8, 1e-2], got {:e}", self.epsilon));
        }
        if let Some(tol) = self.gmres.tol {
            if !(tol > 0.0 && tol < 1.0) {
                bad("gmres.tol", format!("must lie in (0, 1), got {tol:e}"));
            }
        }
        if self.gmres.restart == 0 {
            bad("gmres.restart", "must be at least 1".into());
        }
        match self.problem {
            Problem::SummationBenchmark => match &self.benchmark {
                None => bad("benchmark", "required for summation-benchmark".into()),
                Some(b) => {
                    if b.points < 100 {
                        bad("benchmark.points", format!("need at least 100 points, got {}", b.points));
                    }
                    if b.targets == 0 || b.targets > b.points {
                        bad("benchmark.targets", format!("must lie in [1, points], got {}", b.targets));
                    }
                }
            },
            Problem::Radiation | Problem::Scattering => {
                match (&self.mesh.path, self.mesh.icosphere) {
                    (None, None) => bad("mesh", "set either mesh.path or mesh.icosphere".into()),
                    (Some(_), Some(_)) => bad("mesh", "mesh.path and mesh.icosphere are exclusive".into()),
                    (Some(p), None) if !p.is_file() => bad("mesh.path", format!("no such file: {}", p.display())),
                    (None, Some(0)) => bad("mesh.icosphere", "must be at least 1".into()),
                    _ => {}
                }
                if self.problem == Problem::Scattering && self.incident.kind == IncidentKind::None {
                    bad("incident.kind", "scattering needs an incident wave".into());
                }
                let d = self.incident.direction;
                if self.incident.kind == IncidentKind::PlaneWave && d.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                    bad("incident.direction", "must be nonzero".into());
                }
                if self.boundary.kind == BoundaryKind::Robin {
                    for (name, c) in [("boundary.a", self.boundary.a), ("boundary.b", self.boundary.b)] {
                        match c {
                            None => bad(name, "required for robin".into()),
                            Some(v) if v == [0.0, 0.0] => bad(name, "must be nonzero".into()),
                            _ => {}
                        }
                    }
                }
                if self.reference == Reference::Mie && self.problem != Problem::Scattering {
                    bad("reference", "mie applies to scattering only".into());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}
