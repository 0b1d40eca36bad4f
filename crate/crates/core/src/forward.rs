//! Semilinear forward problem `v·∇u + (σa + σs)u + σb⟨u⟩u = σs K u`, solved
//! by an outer fixed point on `m = ⟨u⟩` with one linear transport solve per
//! step. Covers bounded boundary sources, collimated beams (ballistic part
//! kept as a separate scalar field) and non-scattering point sources.

use std::fmt;
use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::fields::{angular_average, CoefficientSet, PhaseField, ScalarField};
use crate::geometry::{AngularGrid, SpatialGrid, Vec2};
use crate::iteration::{GapMonitor, Status};
use crate::transport::{
    Attenuation, CharacteristicSet, GeneralSource, InternalSource, LinearSolveConfig, SolveOptions,
    TransportSolver,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemilinearConfig {
    /// Sup-norm tolerance on successive `⟨u⟩` iterates.
    pub tol_fixed_point: f64,
    pub max_outer_iters: usize,
    pub inner: LinearSolveConfig,
    /// Inner solves stop at `max(tol_source, inexact_inner · previous gap)`;
    /// zero keeps every inner solve at full tolerance.
    #[serde(default = "default_inexact")]
    pub inexact_inner: f64,
    /// Refuse to run when the admissibility check fails.
    #[serde(default = "default_enforce")]
    pub enforce_admissibility: bool,
}

fn default_inexact() -> f64 {
    0.05
}

fn default_enforce() -> bool {
    true
}

impl Default for SemilinearConfig {
    fn default() -> Self {
        SemilinearConfig {
            tol_fixed_point: 1e-8,
            max_outer_iters: 200,
            inner: LinearSolveConfig::default(),
            inexact_inner: default_inexact(),
            enforce_admissibility: true,
        }
    }
}

impl SemilinearConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if !(self.tol_fixed_point.is_finite() && self.tol_fixed_point > 0.0) {
            return Err(TransportError::Parameter(format!(
                "tol_fixed_point must be positive, got {}",
                self.tol_fixed_point
            )));
        }
        if self.max_outer_iters == 0 {
            return Err(TransportError::Parameter(
                "max_outer_iters must be >= 1".into(),
            ));
        }
        if !(self.inexact_inner.is_finite() && (0.0..1.0).contains(&self.inexact_inner)) {
            return Err(TransportError::Parameter(format!(
                "inexact_inner must lie in [0, 1), got {}",
                self.inexact_inner
            )));
        }
        Ok(())
    }

    /// Inner tolerance once the outer loop is close: never looser than
    /// `tol_fixed_point / 100`, so inner bias stays below the outer stopping test.
    fn full_inner_tol(&self) -> f64 {
        self.inner.tol_source.min(1e-2 * self.tol_fixed_point)
    }

    fn inner_tol(&self, last_gap: f64) -> f64 {
        self.full_inner_tol().max(self.inexact_inner * last_gap)
    }
}

/// Initial `m⁰` of the outer iteration.
#[derive(Clone, Debug, Default)]
pub enum StartingPoint {
    #[default]
    Zero,
    /// The constant ḡ.
    Upper,
    Field(ScalarField),
}

impl StartingPoint {
    fn field(&self, grid: SpatialGrid, upper: f64) -> Result<ScalarField> {
        match self {
            StartingPoint::Zero => Ok(ScalarField::zeros(grid)),
            StartingPoint::Upper => Ok(ScalarField::constant(grid, upper)),
            StartingPoint::Field(f) => {
                if *f.grid() != grid {
                    return Err(TransportError::Validation(
                        "starting field lives on a different grid".into(),
                    ));
                }
                Ok(f.clone())
            }
        }
    }
}

/// Which bound on ḡ admitted the source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallnessClause {
    /// σb ≡ 0: no smallness needed.
    NoTwoPhoton,
    /// ḡ ≤ inf σa/σb
    Absorption,
    /// ḡ ≤ 2θ̲ inf σs/σb
    Scattering,
    /// Neither bound holds.
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub g_lower: f64,
    pub g_upper: f64,
    /// inf σa/σb over cells with σb > 0.
    pub absorption_ratio: Option<f64>,
    /// 2θ̲ inf σs/σb over cells with σb > 0, when σs ≢ 0.
    pub scattering_ratio: Option<f64>,
    pub smallness_ok: bool,
    pub clause: SmallnessClause,
    /// sup σs/(σa+σs)
    pub mu: f64,
    /// sup σb/(σa+σs)
    pub kappa: f64,
    pub theta_max: f64,
    /// `(1 + [μ²θ̄/(1−μ) + μ] + [μθ̄/(1−μ)²]) κ ḡ` for collimated sources.
    pub contraction: Option<f64>,
    pub collimated_ok: Option<bool>,
}

fn sup_ratio(num: &ScalarField, a: &ScalarField, s: &ScalarField) -> f64 {
    num.values()
        .iter()
        .zip(a.values().iter().zip(s.values()))
        .map(|(&n, (&a, &s))| {
            if n == 0.0 {
                0.0
            } else if a + s > 0.0 {
                n / (a + s)
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn inf_ratio(num: &ScalarField, den: &ScalarField) -> Option<f64> {
    num.values()
        .iter()
        .zip(den.values())
        .filter(|(_, &d)| d > 0.0)
        .map(|(&n, &d)| n / d)
        .reduce(f64::min)
}

fn smallness(
    g_lower: f64,
    g_upper: f64,
    coeffs: &CoefficientSet,
    theta_max: f64,
) -> AdmissibilityReport {
    let absorption_ratio = inf_ratio(&coeffs.sigma_a, &coeffs.sigma_b);
    let scattering_ratio = if coeffs.non_scattering() {
        None
    } else {
        inf_ratio(&coeffs.sigma_s, &coeffs.sigma_b).map(|r| 2.0 * coeffs.kernel.theta_min() * r)
    };
    let clause = match absorption_ratio {
        None => SmallnessClause::NoTwoPhoton,
        Some(ra) if g_upper <= ra => SmallnessClause::Absorption,
        Some(_) => match scattering_ratio {
            Some(rs) if g_upper <= rs => SmallnessClause::Scattering,
            _ => SmallnessClause::Rejected,
        },
    };
    let mu = sup_ratio(&coeffs.sigma_s, &coeffs.sigma_a, &coeffs.sigma_s);
    let kappa = sup_ratio(&coeffs.sigma_b, &coeffs.sigma_a, &coeffs.sigma_s);
    AdmissibilityReport {
        g_lower,
        g_upper,
        absorption_ratio,
        scattering_ratio,
        smallness_ok: g_lower > 0.0 && clause != SmallnessClause::Rejected,
        clause,
        mu,
        kappa,
        theta_max,
        contraction: None,
        collimated_ok: None,
    }
}

/// Source smallness: `g̲ > 0` and `ḡ ≤ inf σa/σb` (non-scattering) or
/// `ḡ ≤ max(inf σa/σb, 2θ̲ inf σs/σb)` (scattering), infima over cells.
pub fn check_source_smallness(g: &GeneralSource, coeffs: &CoefficientSet) -> AdmissibilityReport {
    smallness(g.lower(), g.upper(), coeffs, coeffs.kernel.theta_max())
}

/// Collimated-source report. `smallness_ok` ignores g̲ (a beam has no
/// positive lower bound); `collimated_ok` is the contraction test.
pub fn check_collimated(
    src: &CollimatedSource,
    coeffs: &CoefficientSet,
) -> Result<AdmissibilityReport> {
    let angles = AngularGrid::new(coeffs.kernel.len())?;
    let column = coeffs.kernel.beam_column(&angles, src.angle())?;
    let theta_max = column
        .iter()
        .copied()
        .fold(coeffs.kernel.theta_max(), f64::max);
    let g = src.upper();
    let mut rep = smallness(g, g, coeffs, theta_max);
    let (mu, kappa) = (rep.mu, rep.kappa);
    let contraction = if mu < 1.0 {
        (1.0 + (mu * mu * theta_max / (1.0 - mu) + mu) + mu * theta_max / ((1.0 - mu) * (1.0 - mu)))
            * kappa
            * g
    } else {
        f64::INFINITY
    };
    rep.contraction = Some(contraction);
    rep.collimated_ok = Some(contraction < 1.0);
    Ok(rep)
}

/// Converged semilinear solution with its diagnostics.
#[derive(Clone, Debug)]
pub struct SemilinearSolution {
    pub u: PhaseField,
    pub average: ScalarField,
    pub gap_history: Vec<f64>,
    pub outer_iterations: usize,
    pub source_sweeps: usize,
    /// `sup |⟨S(m)⟩ − m|` for one extra full-tolerance linear solve at the
    /// returned `m`.
    pub residual: f64,
    pub admissibility: AdmissibilityReport,
}

fn gate(ok: bool, enforce: bool, what: &str, rep: &AdmissibilityReport) -> Result<()> {
    if ok {
        return Ok(());
    }
    if enforce {
        return Err(TransportError::Parameter(format!(
            "{what} fails the admissibility check: {rep:?}"
        )));
    }
    warn!("{what} fails the admissibility check; proceeding anyway");
    Ok(())
}

/// Outer iteration `m ← ⟨u[σa + σb m]⟩`, each step a linear solve with
/// absorption `σa + σb m` warm-started from the previous iterate.
pub fn solve_semilinear(
    solver: &TransportSolver,
    coeffs: &CoefficientSet,
    g: &GeneralSource,
    cfg: &SemilinearConfig,
    start: &StartingPoint,
) -> Result<SemilinearSolution> {
    cfg.validate()?;
    let report = check_source_smallness(g, coeffs);
    gate(
        report.smallness_ok,
        cfg.enforce_admissibility,
        "boundary source",
        &report,
    )?;
    let grid = *solver.grid();
    let mut m = start.field(grid, g.upper())?;
    let mut monitor = GapMonitor::new(cfg.tol_fixed_point, None);
    let mut u: Option<PhaseField> = None;
    let mut sweeps = 0;
    let mut last_gap = g.upper().max(f64::MIN_POSITIVE);
    let absorption = |m: &ScalarField| {
        coeffs
            .sigma_a
            .zip_map(&coeffs.sigma_b.zip_map(m, |b, m| b * m), |a, bm| a + bm)
    };
    for _ in 0..cfg.max_outer_iters {
        let tol = cfg.inner_tol(last_gap);
        let opts = SolveOptions {
            initial: u.as_ref(),
            tol_source: Some(tol),
        };
        let sol = solver.solve(&absorption(&m), coeffs, g, None, opts)?;
        sweeps += sol.iterations;
        let next = angular_average(&sol.u);
        let gap = next.sup_distance(&m);
        m = next;
        u = Some(sol.u);
        last_gap = gap;
        let full = tol <= cfg.full_inner_tol();
        match monitor.push(gap) {
            Status::Converged if full => {
                let u = u.expect("at least one iteration ran");
                let check = solver.solve(
                    &absorption(&m),
                    coeffs,
                    g,
                    None,
                    SolveOptions {
                        initial: Some(&u),
                        tol_source: Some(cfg.full_inner_tol()),
                    },
                )?;
                sweeps += check.iterations;
                let residual = angular_average(&check.u).sup_distance(&m);
                debug!(
                    "semilinear solve converged in {} outer iterations, residual {residual:e}",
                    monitor.history.len()
                );
                return Ok(SemilinearSolution {
                    u,
                    average: m,
                    outer_iterations: monitor.history.len(),
                    gap_history: monitor.history,
                    source_sweeps: sweeps,
                    residual,
                    admissibility: report,
                });
            }
            Status::Diverged => return Err(monitor.divergence_error("semilinear outer iteration")),
            _ => {}
        }
    }
    Err(monitor.convergence_error("semilinear outer iteration"))
}

/// Boundary profile `𝔤(x)` of a collimated beam.
#[derive(Clone)]
pub enum BeamProfile {
    Constant(f64),
    Custom {
        f: Arc<dyn Fn(Vec2) -> f64 + Send + Sync>,
        upper: f64,
    },
}

impl fmt::Debug for BeamProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeamProfile::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            BeamProfile::Custom { upper, .. } => f
                .debug_struct("Custom")
                .field("upper", upper)
                .finish_non_exhaustive(),
        }
    }
}

/// `g(x, v) = 𝔤(x) δ(v − v′)`.
#[derive(Clone, Debug)]
pub struct CollimatedSource {
    profile: BeamProfile,
    direction: Vec2,
}

impl CollimatedSource {
    pub fn new(profile: BeamProfile, direction: Vec2) -> Result<Self> {
        if !direction.is_finite() || (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(TransportError::Parameter(format!(
                "beam direction ({}, {}) is not a unit vector",
                direction.x, direction.y
            )));
        }
        let ok = match &profile {
            BeamProfile::Constant(c) => c.is_finite() && *c >= 0.0,
            BeamProfile::Custom { upper, .. } => upper.is_finite() && *upper >= 0.0,
        };
        if !ok {
            return Err(TransportError::Parameter(
                "beam strength must be finite and >= 0".into(),
            ));
        }
        Ok(CollimatedSource { profile, direction })
    }

    pub fn constant(strength: f64, direction: Vec2) -> Result<Self> {
        Self::new(BeamProfile::Constant(strength), direction)
    }

    pub fn direction(&self) -> Vec2 {
        self.direction
    }

    pub fn angle(&self) -> f64 {
        self.direction.y.atan2(self.direction.x)
    }

    /// ḡ𝔤
    pub fn upper(&self) -> f64 {
        match &self.profile {
            BeamProfile::Constant(c) => *c,
            BeamProfile::Custom { upper, .. } => *upper,
        }
    }

    pub fn eval(&self, p: Vec2) -> f64 {
        match &self.profile {
            BeamProfile::Constant(c) => *c,
            BeamProfile::Custom { f, .. } => f(p),
        }
    }

    /// Same beam with the profile scaled by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        let profile = match &self.profile {
            BeamProfile::Constant(c) => BeamProfile::Constant(c * s),
            BeamProfile::Custom { f, upper } => {
                let f = f.clone();
                BeamProfile::Custom {
                    f: Arc::new(move |p| s * f(p)),
                    upper: upper * s,
                }
            }
        };
        Self::new(profile, self.direction)
    }
}

/// `u = b(x) δ(v − v′) + u_s(x, v)`.
#[derive(Clone, Debug)]
pub struct CollimatedSolution {
    /// Coefficient of `δ(v − v′)`.
    pub ballistic: ScalarField,
    pub scattered: PhaseField,
    pub gap_history: Vec<f64>,
    pub outer_iterations: usize,
    /// `μ ḡ θ̄ / (1 − μ)`, the a-priori bound on the scattered part.
    pub scattered_bound: f64,
    pub admissibility: AdmissibilityReport,
}

impl CollimatedSolution {
    /// `⟨u⟩ = b + ⟨u_s⟩` under the normalized measure.
    pub fn average(&self) -> ScalarField {
        self.ballistic
            .zip_map(&angular_average(&self.scattered), |b, s| b + s)
    }
}

/// Attenuated beam `𝔤(x − τ v′) exp(−∫Σt)` along the beam direction.
pub fn beam_ballistic(
    chars: &CharacteristicSet,
    src: &CollimatedSource,
    sigma_t: &ScalarField,
) -> Result<ScalarField> {
    let att = Attenuation::new(chars, sigma_t, false)?;
    let grid = *chars.grid();
    let vals = (0..grid.len())
        .map(|cell| src.eval(chars.exit_point(0, cell)) * att.transmission(0, cell))
        .collect();
    Ok(ScalarField::from_vec_unchecked(grid, vals))
}

/// Fixed point on `m = b + ⟨u_s⟩`: the ballistic scalar is attenuated by
/// `σa + σs + σb m`, and the scattered part solves the transport equation
/// with zero inflow and internal source `σs Θ(v, v′) b`.
pub fn solve_semilinear_collimated(
    solver: &TransportSolver,
    coeffs: &CoefficientSet,
    src: &CollimatedSource,
    cfg: &SemilinearConfig,
    start: &StartingPoint,
) -> Result<CollimatedSolution> {
    cfg.validate()?;
    let report = check_collimated(src, coeffs)?;
    gate(
        report.collimated_ok == Some(true),
        cfg.enforce_admissibility,
        "collimated source",
        &report,
    )?;
    let grid = *solver.grid();
    let angles = solver.angles().clone();
    let chars = CharacteristicSet::new(grid, &[src.direction()], cfg.inner.ray_step)?;
    let column = coeffs.kernel.beam_column(&angles, src.angle())?;
    let scattering = !coeffs.non_scattering();
    let zero = GeneralSource::Constant(0.0);

    let mut m = start.field(grid, src.upper())?;
    let mut monitor = GapMonitor::new(cfg.tol_fixed_point, None);
    let mut scattered = PhaseField::zeros(grid, angles.clone());
    let mut ballistic = ScalarField::zeros(grid);
    let mut last_gap = src.upper().max(f64::MIN_POSITIVE);
    let mut converged = false;
    for _ in 0..cfg.max_outer_iters {
        let sigma_a = coeffs
            .sigma_a
            .zip_map(&coeffs.sigma_b.zip_map(&m, |b, m| b * m), |a, bm| a + bm);
        let sigma_t = sigma_a.zip_map(&coeffs.sigma_s, |a, s| a + s);
        ballistic = beam_ballistic(&chars, src, &sigma_t)?;
        let tol = cfg.inner_tol(last_gap);
        if scattering {
            let sb = coeffs.sigma_s.zip_map(&ballistic, |s, b| s * b);
            let f = if coeffs.kernel.is_isotropic() {
                InternalSource::Isotropic(sb)
            } else {
                InternalSource::Phase(beam_source(&sb, &column, &angles))
            };
            let sol = solver.solve(
                &sigma_a,
                coeffs,
                &zero,
                Some(&f),
                SolveOptions {
                    initial: Some(&scattered),
                    tol_source: Some(tol),
                },
            )?;
            scattered = sol.u;
        }
        let next = ballistic.zip_map(&angular_average(&scattered), |b, s| b + s);
        let gap = next.sup_distance(&m);
        m = next;
        last_gap = gap;
        match monitor.push(gap) {
            Status::Converged if tol <= cfg.full_inner_tol() || !scattering => {
                converged = true;
                break;
            }
            Status::Diverged => return Err(monitor.divergence_error("collimated outer iteration")),
            _ => {}
        }
    }
    if !converged {
        return Err(monitor.convergence_error("collimated outer iteration"));
    }
    let mu = report.mu;
    let scattered_bound = if mu < 1.0 {
        mu * src.upper() * report.theta_max / (1.0 - mu)
    } else {
        f64::INFINITY
    };
    let sup_s = scattered.max();
    if sup_s > scattered_bound * (1.0 + 1e-9) + 10.0 * cfg.inner.tol_source {
        return Err(TransportError::Invariant(format!(
            "scattered component {sup_s:e} exceeds its bound {scattered_bound:e}"
        )));
    }
    Ok(CollimatedSolution {
        ballistic,
        scattered,
        outer_iterations: monitor.history.len(),
        gap_history: monitor.history,
        scattered_bound,
        admissibility: report,
    })
}

/// `f(x, v_k) = s(x) Θ(v_k, v′)`.
fn beam_source(s: &ScalarField, column: &[f64], angles: &AngularGrid) -> PhaseField {
    let vals = column
        .iter()
        .flat_map(|c| s.values().iter().map(move |v| c * v))
        .collect();
    PhaseField::from_vec_unchecked(*s.grid(), angles.clone(), vals)
}

/// Boundary point source `g(x, v) = 𝔤 δ(x − x′)` with constant strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    position: Vec2,
    normal: Vec2,
    strength: f64,
}

impl PointSource {
    /// `position` must lie on a face (not a corner) of the grid's domain.
    pub fn new(grid: &SpatialGrid, position: Vec2, strength: f64) -> Result<Self> {
        if !(strength.is_finite() && strength > 0.0) {
            return Err(TransportError::Parameter(format!(
                "point source strength must be positive, got {strength}"
            )));
        }
        let face = grid.face_of(position).ok_or_else(|| {
            TransportError::Domain(format!(
                "point source ({}, {}) is not on the boundary",
                position.x, position.y
            ))
        })?;
        let on_faces = crate::geometry::Face::ALL
            .iter()
            .filter(|f| {
                let e = 1e-9 * grid.lx().max(grid.ly());
                match f {
                    crate::geometry::Face::Left => position.x.abs() <= e,
                    crate::geometry::Face::Right => (position.x - grid.lx()).abs() <= e,
                    crate::geometry::Face::Bottom => position.y.abs() <= e,
                    crate::geometry::Face::Top => (position.y - grid.ly()).abs() <= e,
                }
            })
            .count();
        if on_faces > 1 {
            return Err(TransportError::Domain(
                "point source at a corner has no unique normal".into(),
            ));
        }
        Ok(PointSource {
            position,
            normal: face.outward_normal(),
            strength,
        })
    }

    pub fn position(&self) -> Vec2 {
        self.position
    }

    pub fn normal(&self) -> Vec2 {
        self.normal
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn with_strength(&self, strength: f64) -> Result<Self> {
        if !(strength.is_finite() && strength > 0.0) {
            return Err(TransportError::Parameter(format!(
                "point source strength must be positive, got {strength}"
            )));
        }
        Ok(PointSource { strength, ..*self })
    }
}

#[derive(Clone, Debug)]
pub struct PointSourceSolution {
    pub average: ScalarField,
    pub gap_history: Vec<f64>,
    pub outer_iterations: usize,
}

/// Non-scattering point-source solve: along the segment from `x′` to each
/// cell center, `⟨u⟩ = 𝔤 |n·v| exp(−∫(σa + σb⟨u⟩)) / |x − x′|`, iterated
/// to a fixed point in `⟨u⟩`.
pub fn solve_point_source(
    coeffs: &CoefficientSet,
    src: &PointSource,
    cfg: &SemilinearConfig,
) -> Result<PointSourceSolution> {
    cfg.validate()?;
    if !coeffs.non_scattering() {
        return Err(TransportError::Parameter(
            "point-source forward solve requires sigma_s = 0".into(),
        ));
    }
    let grid = *coeffs.grid();
    let step = cfg.inner.ray_step;
    let geometry: Vec<(Vec2, f64, f64)> = grid
        .centers()
        .map(|c| {
            let d = c - src.position;
            let t = d.norm();
            let v = d * (1.0 / t);
            (v, t, src.normal.dot(v).abs())
        })
        .collect();
    let mut m = ScalarField::zeros(grid);
    let mut monitor = GapMonitor::new(cfg.tol_fixed_point, None);
    let two_photon = !coeffs.sigma_b.is_identically_zero();
    for _ in 0..cfg.max_outer_iters {
        let sigma_t = coeffs
            .sigma_a
            .zip_map(&coeffs.sigma_b.zip_map(&m, |b, m| b * m), |a, bm| a + bm);
        let vals = geometry
            .par_iter()
            .enumerate()
            .map(|(cell, &(v, t, cosine))| {
                let c = grid.center_of(cell);
                let ray = grid.sample_segment(c, v, t, step)?;
                let mut depth = 0.0;
                let mut prev = sigma_t.interpolate(ray.point(0));
                for k in 1..ray.len() {
                    let cur = sigma_t.interpolate(ray.point(k));
                    depth += 0.5 * (ray.s[k] - ray.s[k - 1]) * (prev + cur);
                    prev = cur;
                }
                Ok(src.strength * cosine * (-depth).exp() / t)
            })
            .collect::<Result<Vec<f64>>>()?;
        let next = ScalarField::from_vec_unchecked(grid, vals);
        let gap = if two_photon {
            next.sup_distance(&m)
        } else {
            0.0
        };
        m = next;
        match monitor.push(gap) {
            Status::Converged => {
                return Ok(PointSourceSolution {
                    average: m,
                    outer_iterations: monitor.history.len(),
                    gap_history: monitor.history,
                })
            }
            Status::Diverged => {
                return Err(monitor.divergence_error("point-source outer iteration"))
            }
            Status::Continue => {}
        }
    }
    Err(monitor.convergence_error("point-source outer iteration"))
}
