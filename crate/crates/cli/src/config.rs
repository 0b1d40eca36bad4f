//! Experiment configuration: strict JSON, unknown keys rejected. Physics
//! parameters (grid, coefficients, sources, seed) have no defaults; solver
//! tolerances and task options do, as listed on each field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpa_transport::fields::{CoefficientBounds, KernelProfile};
use tpa_transport::forward::{CollimatedSource, PointSource, SemilinearConfig};
use tpa_transport::geometry::{AngularGrid, SpatialGrid, Vec2};
use tpa_transport::phantom::{Cutoff, Inclusion};
use tpa_transport::recon_scatter::StabilityProbeConfig;
use tpa_transport::transport::{GeneralSource, LinearSolveConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridBlock,
    #[serde(default)]
    pub coefficients: Option<CoefficientsBlock>,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub task: TaskBlock,
    /// Output directory; `--output` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    /// Number of discrete ordinates.
    pub n_v: usize,
}

impl GridBlock {
    pub fn spatial(&self) -> CliResult<SpatialGrid> {
        SpatialGrid::new(self.lx, self.ly, self.nx, self.ny)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn angular(&self) -> CliResult<AngularGrid> {
        AngularGrid::new(self.n_v).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// The three coefficients per named phantom family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub sigma_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhantomSpec {
    Constant {
        sigma_a: f64,
        sigma_b: f64,
        sigma_s: f64,
    },
    /// Each coefficient is `background + amplitude · bumps`, values in
    /// `[background, background + amplitude]`.
    GaussianInclusions {
        background: Triple,
        amplitude: Triple,
        inclusions: Vec<Inclusion>,
        /// Centers move by up to this much per axis, drawn from the
        /// `phantom-jitter` stream. Default 0.
        #[serde(default)]
        jitter: f64,
    },
    Checkerboard {
        low: Triple,
        high: Triple,
        tiles: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomBlock {
    pub spec: PhantomSpec,
    /// Default isotropic.
    #[serde(default)]
    pub kernel: Option<KernelProfile>,
    #[serde(default)]
    pub sigma_b_cutoff: Option<Cutoff>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileBlock {
    pub sigma_a: PathBuf,
    pub sigma_b: PathBuf,
    pub sigma_s: PathBuf,
    /// Default isotropic.
    #[serde(default)]
    pub kernel: Option<KernelProfile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsBlock {
    #[serde(default)]
    pub phantom: Option<PhantomBlock>,
    #[serde(default)]
    pub files: Option<FileBlock>,
    /// Declared a-priori bounds; default the phantom's construction bounds
    /// or the extrema of the loaded fields.
    #[serde(default)]
    pub bounds: Option<CoefficientBounds>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Uniform(f64),
    /// Left, right, bottom, top.
    Faces([f64; 4]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    General {
        value: Level,
    },
    /// Beam of constant strength travelling at `angle` radians.
    Collimated {
        strength: f64,
        angle: f64,
    },
    Point {
        position: [f64; 2],
        strength: f64,
    },
}

impl SourceSpec {
    pub fn general(&self) -> CliResult<GeneralSource> {
        let g = match *self {
            SourceSpec::General {
                value: Level::Uniform(c),
            } => GeneralSource::Constant(c),
            SourceSpec::General {
                value: Level::Faces(f),
            } => GeneralSource::Faces(f),
            _ => {
                return Err(CliError::Config(format!(
                    "expected a general source, got {self:?}"
                )))
            }
        };
        g.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(g)
    }

    pub fn collimated(&self) -> CliResult<CollimatedSource> {
        match *self {
            SourceSpec::Collimated { strength, angle } => {
                CollimatedSource::constant(strength, Vec2::from_angle(angle))
                    .map_err(|e| CliError::Config(e.to_string()))
            }
            _ => Err(CliError::Config(format!(
                "expected a collimated source, got {self:?}"
            ))),
        }
    }

    pub fn point(&self, grid: &SpatialGrid) -> CliResult<PointSource> {
        match *self {
            SourceSpec::Point { position, strength } => {
                PointSource::new(grid, Vec2::new(position[0], position[1]), strength)
                    .map_err(|e| CliError::Config(e.to_string()))
            }
            _ => Err(CliError::Config(format!(
                "expected a point source, got {self:?}"
            ))),
        }
    }

    /// Largest boundary value.
    pub fn upper(&self) -> f64 {
        match *self {
            SourceSpec::General {
                value: Level::Uniform(c),
            } => c,
            SourceSpec::General {
                value: Level::Faces(f),
            } => f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            SourceSpec::Collimated { strength, .. } | SourceSpec::Point { strength, .. } => {
                strength
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    /// Default `min(hx, hy)`.
    #[serde(default)]
    pub ray_step: Option<f64>,
    /// Default 1e-10.
    #[serde(default = "default_tol_source")]
    pub tol_source: f64,
    /// Default 5000.
    #[serde(default = "default_max_source_iters")]
    pub max_source_iters: usize,
    /// Default 1e-8.
    #[serde(default = "default_tol_fixed_point")]
    pub tol_fixed_point: f64,
    /// Default 500.
    #[serde(default = "default_max_outer_iters")]
    pub max_outer_iters: usize,
    /// Default 0.05.
    #[serde(default = "default_inexact")]
    pub inexact_inner: f64,
    /// Default true.
    #[serde(default = "default_true")]
    pub enforce_admissibility: bool,
}

fn default_tol_source() -> f64 {
    1e-10
}
fn default_max_source_iters() -> usize {
    5000
}
fn default_tol_fixed_point() -> f64 {
    1e-8
}
fn default_max_outer_iters() -> usize {
    500
}
fn default_inexact() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            ray_step: None,
            tol_source: default_tol_source(),
            max_source_iters: default_max_source_iters(),
            tol_fixed_point: default_tol_fixed_point(),
            max_outer_iters: default_max_outer_iters(),
            inexact_inner: default_inexact(),
            enforce_admissibility: true,
        }
    }
}

impl SolverBlock {
    pub fn linear(&self, grid: &SpatialGrid) -> LinearSolveConfig {
        LinearSolveConfig {
            ray_step: self.ray_step.unwrap_or(grid.hx().min(grid.hy())),
            tol_source: self.tol_source,
            max_source_iters: self.max_source_iters,
        }
    }

    pub fn semilinear(&self, grid: &SpatialGrid) -> SemilinearConfig {
        SemilinearConfig {
            tol_fixed_point: self.tol_fixed_point,
            max_outer_iters: self.max_outer_iters,
            inner: self.linear(grid),
            inexact_inner: self.inexact_inner,
            enforce_admissibility: self.enforce_admissibility,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Starts {
    Upper,
    Lower,
    /// Both, with the two-start agreement check.
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBlock {
    /// Synthesis grid refinement; 1 synthesizes on the reconstruction grid.
    /// Default 2.
    #[serde(default = "default_refinement")]
    pub refinement: usize,
    /// Multiplicative uniform noise on synthesized data. Default 0.
    #[serde(default)]
    pub noise_level: f64,
    /// Precomputed data (CSV with JSON sidecar), one per source; when absent
    /// reconstructions synthesize their own.
    #[serde(default)]
    pub data: Option<Vec<PathBuf>>,
    /// Pair-inversion floor; default per pipeline.
    #[serde(default)]
    pub det_floor: Option<f64>,
    /// Point-source exclusion radius. Default 0.1.
    #[serde(default = "default_exclusion")]
    pub exclusion: f64,
    /// Quadrature step of density recovery. Default half the cell width.
    #[serde(default)]
    pub recovery_step: Option<f64>,
    #[serde(default)]
    pub starts: Starts,
    /// A-priori bounds for the scattering reconstruction; default the
    /// coefficient bounds.
    #[serde(default)]
    pub bounds: Option<CoefficientBounds>,
    /// ḡ for the scattering reconstruction; default the largest source value.
    #[serde(default)]
    pub g_upper: Option<f64>,
    /// Attach the convergence-class check to each scattering recovery.
    #[serde(default)]
    pub pi_alpha: bool,
    /// Run the noise stability probe after a scattering reconstruction.
    #[serde(default)]
    pub stability: Option<StabilityProbeConfig>,
    /// Randomized phantoms in the `verify` suite. Default 10.
    #[serde(default = "default_suite_size")]
    pub suite_size: usize,
}

fn default_refinement() -> usize {
    2
}
fn default_exclusion() -> f64 {
    0.1
}
fn default_suite_size() -> usize {
    10
}

impl Default for TaskBlock {
    fn default() -> Self {
        TaskBlock {
            refinement: default_refinement(),
            noise_level: 0.0,
            data: None,
            det_floor: None,
            exclusion: default_exclusion(),
            recovery_step: None,
            starts: Starts::default(),
            bounds: None,
            g_upper: None,
            pi_alpha: false,
            stability: None,
            suite_size: default_suite_size(),
        }
    }
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

fn exists(path: &Path, base: &Path) -> CliResult<()> {
    let p = resolve(path, base);
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "referenced file {} does not exist",
            p.display()
        )))
    }
}

/// Relative paths in a config resolve against the config's directory.
pub fn resolve(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without solving. `base` is the
    /// directory relative file references resolve against.
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        positive("grid.lx", self.grid.lx)?;
        positive("grid.ly", self.grid.ly)?;
        let grid = self.grid.spatial()?;
        self.grid.angular()?;
        self.solver
            .semilinear(&grid)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(c) = &self.coefficients {
            match (&c.phantom, &c.files) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(CliError::Config(
                        "coefficients need exactly one of `phantom` or `files`".into(),
                    ))
                }
            }
            if let Some(f) = &c.files {
                for p in [&f.sigma_a, &f.sigma_b, &f.sigma_s] {
                    exists(p, base)?;
                }
            }
            if let Some(b) = &c.bounds {
                for (name, b) in [
                    ("sigma_a", b.sigma_a),
                    ("sigma_b", b.sigma_b),
                    ("sigma_s", b.sigma_s),
                ] {
                    if !(b.lower.is_finite()
                        && b.upper.is_finite()
                        && 0.0 <= b.lower
                        && b.lower <= b.upper)
                    {
                        return Err(CliError::Config(format!(
                            "bounds.{name} must satisfy 0 <= lower <= upper, got [{}, {}]",
                            b.lower, b.upper
                        )));
                    }
                }
            }
        }
        for s in &self.sources {
            match s {
                SourceSpec::General { .. } => {
                    s.general()?;
                }
                SourceSpec::Collimated { .. } => {
                    s.collimated()?;
                }
                SourceSpec::Point { .. } => {
                    s.point(&grid)?;
                }
            }
        }
        let t = &self.task;
        if t.refinement == 0 {
            return Err(CliError::Config("task.refinement must be >= 1".into()));
        }
        if !(t.noise_level.is_finite() && t.noise_level >= 0.0) {
            return Err(CliError::Config(format!(
                "task.noise_level must be >= 0, got {}",
                t.noise_level
            )));
        }
        if let Some(d) = &t.data {
            for p in d {
                exists(p, base)?;
            }
        }
        if let Some(f) = t.det_floor {
            if !(f.is_finite() && f >= 0.0) {
                return Err(CliError::Config(format!(
                    "task.det_floor must be >= 0, got {f}"
                )));
            }
        }
        if !(t.exclusion.is_finite() && t.exclusion >= 0.0) {
            return Err(CliError::Config(format!(
                "task.exclusion must be >= 0, got {}",
                t.exclusion
            )));
        }
        if let Some(s) = t.recovery_step {
            positive("task.recovery_step", s)?;
        }
        if let Some(g) = t.g_upper {
            positive("task.g_upper", g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "grid": {"lx": 1.0, "ly": 1.0, "nx": 8, "ny": 8, "n_v": 8},
        "seed": 3
    }"#;

    #[test]
    fn minimal_config_takes_documented_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.solver, SolverBlock::default());
        assert_eq!(c.task, TaskBlock::default());
        assert_eq!(c.task.refinement, 2);
        assert!(c.sources.is_empty());
        c.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn missing_physics_is_rejected() {
        assert!(ExperimentConfig::from_json(
            r#"{"grid": {"lx": 1, "ly": 1, "nx": 8, "ny": 8, "n_v": 8}}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"grid": {"lx": 1, "ly": 1, "nx": 8, "n_v": 8}, "seed": 1}"#
        )
        .is_err());
    }

    #[test]
    fn strict_parsing() {
        let negative = MINIMAL.replace("\"nx\": 8", "\"nx\": -8");
        assert!(ExperimentConfig::from_json(&negative).is_err());
        let quoted = MINIMAL.replace("\"lx\": 1.0", "\"lx\": \"1.0\"");
        assert!(ExperimentConfig::from_json(&quoted).is_err());
        let unknown = MINIMAL.replace("\"seed\"", "\"sede\": 1, \"seed\"");
        assert!(ExperimentConfig::from_json(&unknown).is_err());
        let zero = ExperimentConfig::from_json(&MINIMAL.replace("\"nx\": 8", "\"nx\": 0")).unwrap();
        assert!(zero.validate(Path::new(".")).is_err());
    }

    #[test]
    fn sources_parse_by_type() {
        let s: Vec<SourceSpec> = serde_json::from_str(
            r#"[{"type": "general", "value": 0.5},
                {"type": "general", "value": [1, 0.5, 0.5, 0.5]},
                {"type": "collimated", "strength": 1.0, "angle": 0.0},
                {"type": "point", "position": [0.0, 0.5], "strength": 1.0}]"#,
        )
        .unwrap();
        assert_eq!(s[0].upper(), 0.5);
        assert_eq!(s[1].upper(), 1.0);
        assert!(s[0].general().is_ok() && s[2].general().is_err());
        assert!(s[3].point(&SpatialGrid::unit_square(4).unwrap()).is_ok());
    }

    #[test]
    fn bounds_must_be_ordered() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.coefficients = Some(
            serde_json::from_str(
                r#"{"phantom": {"spec": {"name": "constant", "sigma_a": 1, "sigma_b": 0.5, "sigma_s": 0}},
                    "bounds": {"sigma_a": {"lower": 2, "upper": 1},
                               "sigma_b": {"lower": 0, "upper": 1},
                               "sigma_s": {"lower": 0, "upper": 0}}}"#,
            )
            .unwrap(),
        );
        assert!(matches!(
            c.validate(Path::new(".")),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn referenced_files_must_exist() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.task.data = Some(vec![PathBuf::from("no-such-datum.csv")]);
        assert!(c.validate(Path::new("/nonexistent")).is_err());
    }
}
