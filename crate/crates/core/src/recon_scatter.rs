//! Reconstruction of `(σa, σb)` when the scattering `(σs, Θ)` is known.
//! Each datum `H` is inverted for `⟨u⟩` by the clamped fixed point
//! `u_k = u[H / max(⟨u_{k−1}⟩, η)]`, which yields `Σa = H/⟨u⟩`; two data then
//! give the coefficients through a 2×2 solve per cell.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::fields::{
    angular_average, Bounds, CoefficientBounds, CoefficientSet, PhaseField, ScalarField,
    ScatteringKernel,
};
use crate::forward::SemilinearConfig;
use crate::geometry::{AngularGrid, Face, SpatialGrid, Vec2};
use crate::iteration::{GapMonitor, Status};
use crate::phantom::Phantom;
use crate::recon_free::{gradient, pair_from_parts, ReconPair};
use crate::synthesis::{
    add_noise, stream_seed, synthesize_on_refined, Illumination, InternalDatum,
};
use crate::transport::{GeneralSource, LinearSolveConfig, SolveOptions, TransportSolver};

/// Absorption used where `H = 0` leaves the clamped quotient undefined.
pub const ABSORPTION_FLOOR: f64 = 1e-12;

/// Iterations in a row with a growing gap before giving up.
const DIVERGENCE_STREAK: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterReconConfig {
    /// A-priori `[σ̲a, σ̄a]`.
    pub sigma_a: Bounds,
    /// A-priori `[σ̲b, σ̄b]`.
    pub sigma_b: Bounds,
    /// ḡ
    pub g_upper: f64,
    /// Sup-norm tolerance on successive `⟨u_k⟩`.
    #[serde(default = "default_tol_fp")]
    pub tol_fp: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    pub inner: LinearSolveConfig,
    /// Inner solves stop at `max(tol_source, inexact_inner · previous gap)`.
    #[serde(default = "default_inexact")]
    pub inexact_inner: f64,
    /// Attach a [`PiAlphaReport`] to each recovery.
    #[serde(default)]
    pub alpha_report: bool,
}

fn default_tol_fp() -> f64 {
    1e-8
}

fn default_max_iters() -> usize {
    500
}

fn default_inexact() -> f64 {
    0.05
}

impl ScatterReconConfig {
    pub fn new(bounds: &CoefficientBounds, g_upper: f64, inner: LinearSolveConfig) -> Self {
        ScatterReconConfig {
            sigma_a: bounds.sigma_a,
            sigma_b: bounds.sigma_b,
            g_upper,
            tol_fp: default_tol_fp(),
            max_iters: default_max_iters(),
            inner,
            inexact_inner: default_inexact(),
            alpha_report: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        Bounds::new(self.sigma_a.lower, self.sigma_a.upper)?;
        Bounds::new(self.sigma_b.lower, self.sigma_b.upper)?;
        if self.sigma_a.lower <= 0.0 {
            return Err(TransportError::Parameter(
                "sigma_a lower bound must be positive".into(),
            ));
        }
        if self.sigma_b.upper <= 0.0 {
            return Err(TransportError::Parameter(
                "sigma_b upper bound must be positive".into(),
            ));
        }
        if !(self.g_upper.is_finite() && self.g_upper > 0.0) {
            return Err(TransportError::Parameter(format!(
                "g_upper must be positive, got {}",
                self.g_upper
            )));
        }
        if !(self.tol_fp.is_finite() && self.tol_fp > 0.0) {
            return Err(TransportError::Parameter(format!(
                "tol_fp must be positive, got {}",
                self.tol_fp
            )));
        }
        if self.max_iters == 0 {
            return Err(TransportError::Parameter("max_iters must be >= 1".into()));
        }
        if !(self.inexact_inner.is_finite() && (0.0..1.0).contains(&self.inexact_inner)) {
            return Err(TransportError::Parameter(format!(
                "inexact_inner must lie in [0, 1), got {}",
                self.inexact_inner
            )));
        }
        Ok(())
    }

    /// `σ̄a + σ̄b ḡ`, the largest admissible `Σa`.
    pub fn absorption_upper(&self) -> f64 {
        self.sigma_a.upper + self.sigma_b.upper * self.g_upper
    }

    /// Default inversion floor `1e−6 ḡ` for `|⟨u₁⟩ − ⟨u₂⟩|`.
    pub fn default_det_floor(&self) -> f64 {
        1e-6 * self.g_upper
    }

    /// Inner tolerance once the outer loop is close: never looser than
    /// `tol_fp / 100`, so inner bias stays below the outer stopping test.
    fn full_inner_tol(&self) -> f64 {
        self.inner.tol_source.min(1e-2 * self.tol_fp)
    }

    fn inner_tol(&self, last_gap: f64) -> f64 {
        self.full_inner_tol().max(self.inexact_inner * last_gap)
    }
}

/// The known part of the medium.
#[derive(Clone, Debug)]
pub struct KnownScattering {
    pub sigma_s: ScalarField,
    pub kernel: ScatteringKernel,
}

impl KnownScattering {
    pub fn from_coefficients(c: &CoefficientSet) -> Self {
        KnownScattering {
            sigma_s: c.sigma_s.clone(),
            kernel: c.kernel.clone(),
        }
    }

    /// Coefficient set with zero absorption, for handing `σs, Θ` to the solver.
    fn as_coefficients(&self) -> Result<CoefficientSet> {
        let g = *self.sigma_s.grid();
        CoefficientSet::new(
            ScalarField::zeros(g),
            ScalarField::zeros(g),
            self.sigma_s.clone(),
            self.kernel.clone(),
        )
    }
}

/// `η = H / (σ̄a + σ̄b ḡ)`.
pub fn compute_eta(h: &InternalDatum, cfg: &ScatterReconConfig) -> ScalarField {
    let top = cfg.absorption_upper();
    h.h.map(|v| v.max(0.0) / top)
}

/// Angular averages of the two extremal linear solves.
#[derive(Clone, Debug)]
pub struct Bracket {
    /// Solution with `Σa = max(H/ḡ, floor)`.
    pub u_max: PhaseField,
    /// Solution with `Σa = σ̄a + σ̄b ḡ`.
    pub u_min: PhaseField,
    pub u_max_avg: ScalarField,
    pub u_min_avg: ScalarField,
    /// `η ≤ ⟨u_min⟩` everywhere.
    pub eta_below_min: bool,
    /// Cells where `η > ⟨u_min⟩`.
    pub eta_violations: usize,
    /// Cells with `H = 0`, where the absorption floor was used.
    pub degenerate: Vec<bool>,
    /// `⟨u_min⟩ ≤ ⟨u_max⟩` everywhere (up to round-off).
    pub ordered: bool,
}

fn check_datum(solver: &TransportSolver, h: &InternalDatum) -> Result<()> {
    if h.grid() != solver.grid() {
        return Err(TransportError::Validation(
            "datum and solver live on different grids".into(),
        ));
    }
    if h.h.min() < 0.0 {
        return Err(TransportError::DataInconsistency(format!(
            "internal datum takes negative values (min {})",
            h.h.min()
        )));
    }
    Ok(())
}

fn check_source(g: &GeneralSource, cfg: &ScatterReconConfig) -> Result<()> {
    g.validate()?;
    if g.upper() > cfg.g_upper * (1.0 + 1e-12) {
        return Err(TransportError::Parameter(format!(
            "source upper bound {} exceeds the declared g_upper {}",
            g.upper(),
            cfg.g_upper
        )));
    }
    Ok(())
}

pub fn compute_bracket(
    solver: &TransportSolver,
    h: &InternalDatum,
    g: &GeneralSource,
    known: &KnownScattering,
    cfg: &ScatterReconConfig,
) -> Result<Bracket> {
    cfg.validate()?;
    check_datum(solver, h)?;
    check_source(g, cfg)?;
    let coeffs = known.as_coefficients()?;
    let grid = *solver.grid();
    let degenerate: Vec<bool> = h.h.values().iter().map(|&v| v == 0.0).collect();
    let n_degenerate = degenerate.iter().filter(|&&d| d).count();
    if n_degenerate > 0 {
        warn!(
            "{n_degenerate} cells have H = 0; absorption floor {ABSORPTION_FLOOR:e} applied there"
        );
    }

    // Iterating down from the constant ḡ keeps every sweep above the solution.
    let top = PhaseField::constant(grid, solver.angles().clone(), cfg.g_upper);
    let low_abs = h.h.map(|v| (v / cfg.g_upper).max(ABSORPTION_FLOOR));
    let u_max = solver
        .solve(
            &low_abs,
            &coeffs,
            g,
            None,
            SolveOptions {
                initial: Some(&top),
                tol_source: Some(cfg.full_inner_tol()),
            },
        )?
        .u;
    let high_abs = ScalarField::constant(grid, cfg.absorption_upper());
    let full = SolveOptions {
        initial: None,
        tol_source: Some(cfg.full_inner_tol()),
    };
    let u_min = solver.solve(&high_abs, &coeffs, g, None, full)?.u;
    let u_max_avg = angular_average(&u_max);
    let u_min_avg = angular_average(&u_min);
    let eta = compute_eta(h, cfg);
    let eta_violations = eta
        .values()
        .iter()
        .zip(u_min_avg.values())
        .filter(|(e, m)| e > m)
        .count();
    let slack = 1e-12 * cfg.g_upper;
    let ordered = u_min_avg
        .values()
        .iter()
        .zip(u_max_avg.values())
        .all(|(lo, hi)| *lo <= hi + slack);
    Ok(Bracket {
        u_max,
        u_min,
        u_max_avg,
        u_min_avg,
        eta_below_min: eta_violations == 0,
        eta_violations,
        degenerate,
        ordered,
    })
}

/// Initial `⟨u₀⟩` of the fixed point.
#[derive(Clone, Debug, Default)]
pub enum ReconStart {
    /// `u₀ = u_max^H`; iterates decrease.
    #[default]
    Upper,
    /// `u₀ = u_min`; iterates increase.
    Lower,
    /// Any `⟨u₀⟩`, no monotonicity expected.
    Field(ScalarField),
}

/// Outcome of one fixed-point inversion.
#[derive(Clone, Debug)]
pub struct ScatterRecovery {
    pub u: PhaseField,
    pub average: ScalarField,
    /// `H/⟨u⟩`, clipped to `[H/ḡ, σ̄a + σ̄b ḡ]`.
    pub sigma_abs: ScalarField,
    /// Cells where the raw quotient left that interval.
    pub clipped: Vec<bool>,
    /// Cells with `H = 0`.
    pub degenerate: Vec<bool>,
    pub gap_history: Vec<f64>,
    pub iterations: usize,
    pub source_sweeps: usize,
    /// Cell updates against the expected direction of a monotone start.
    pub monotonicity_violations: usize,
    /// Per iteration, cells where `⟨u_{k−1}⟩ < η` engaged the clamp.
    pub clamp_activity: Vec<usize>,
    /// Cell updates that left `[⟨u_min⟩, ⟨u_max⟩]`.
    pub bracket_violations: usize,
    /// `‖⟨u[H/max(⟨u⟩, η)]⟩ − ⟨u⟩‖∞` from one more full solve at the limit.
    pub residual: f64,
    pub pi_alpha: Option<PiAlphaReport>,
}

impl ScatterRecovery {
    pub fn clipped_count(&self) -> usize {
        self.clipped.iter().filter(|&&c| c).count()
    }

    /// Clamp activations after the first iteration.
    pub fn late_clamp_activity(&self) -> usize {
        self.clamp_activity.iter().skip(1).sum()
    }
}

/// A datum with its source, the known medium and the precomputed bracket.
#[derive(Clone, Debug)]
pub struct ScatterProblem<'a> {
    solver: &'a TransportSolver,
    datum: &'a InternalDatum,
    source: &'a GeneralSource,
    coeffs: CoefficientSet,
    cfg: ScatterReconConfig,
    eta: ScalarField,
    bracket: Bracket,
}

impl<'a> ScatterProblem<'a> {
    pub fn new(
        solver: &'a TransportSolver,
        datum: &'a InternalDatum,
        source: &'a GeneralSource,
        known: &KnownScattering,
        cfg: &ScatterReconConfig,
    ) -> Result<Self> {
        let bracket = compute_bracket(solver, datum, source, known, cfg)?;
        if !bracket.eta_below_min {
            warn!(
                "eta exceeds <u_min> on {} cells; convergence is not guaranteed",
                bracket.eta_violations
            );
        }
        Ok(ScatterProblem {
            solver,
            datum,
            source,
            coeffs: known.as_coefficients()?,
            cfg: *cfg,
            eta: compute_eta(datum, cfg),
            bracket,
        })
    }

    pub fn bracket(&self) -> &Bracket {
        &self.bracket
    }

    pub fn eta(&self) -> &ScalarField {
        &self.eta
    }

    fn absorption(&self, m: &ScalarField) -> (ScalarField, usize) {
        let mut clamped = 0;
        let vals = self
            .datum
            .h
            .values()
            .iter()
            .zip(m.values())
            .zip(self.eta.values())
            .map(|((&h, &m), &e)| {
                if h > 0.0 && m < e {
                    clamped += 1;
                }
                let d = m.max(e);
                if h > 0.0 && d > 0.0 {
                    (h / d).max(ABSORPTION_FLOOR)
                } else {
                    ABSORPTION_FLOOR
                }
            })
            .collect();
        (
            ScalarField::from_vec_unchecked(*self.solver.grid(), vals),
            clamped,
        )
    }

    pub fn recover(&self, start: &ReconStart) -> Result<ScatterRecovery> {
        let grid = *self.solver.grid();
        let cfg = &self.cfg;
        let (mut m, mut u, sign) = match start {
            ReconStart::Upper => (
                self.bracket.u_max_avg.clone(),
                Some(self.bracket.u_max.clone()),
                -1.0,
            ),
            ReconStart::Lower => (
                self.bracket.u_min_avg.clone(),
                Some(self.bracket.u_min.clone()),
                1.0,
            ),
            ReconStart::Field(f) => {
                if *f.grid() != grid {
                    return Err(TransportError::Validation(
                        "starting field lives on a different grid".into(),
                    ));
                }
                (f.clone(), None, 0.0)
            }
        };
        let slack = 1e-12 * cfg.g_upper;
        let mut monitor = GapMonitor::new(cfg.tol_fp, Some(DIVERGENCE_STREAK));
        let mut clamp_activity = Vec::new();
        let (mut monotonicity_violations, mut bracket_violations, mut sweeps) = (0, 0, 0);
        let mut last_gap = cfg.g_upper;
        for _ in 0..cfg.max_iters {
            let tol = cfg.inner_tol(last_gap);
            let (abs, clamped) = self.absorption(&m);
            clamp_activity.push(clamped);
            let sol = self.solver.solve(
                &abs,
                &self.coeffs,
                self.source,
                None,
                SolveOptions {
                    initial: u.as_ref(),
                    tol_source: Some(tol),
                },
            )?;
            sweeps += sol.iterations;
            let next = angular_average(&sol.u);
            for (c, (&new, &old)) in next.values().iter().zip(m.values()).enumerate() {
                if sign * (new - old) < -slack {
                    monotonicity_violations += 1;
                }
                if new > self.bracket.u_max_avg.values()[c] + slack
                    || new < self.bracket.u_min_avg.values()[c] - slack
                {
                    bracket_violations += 1;
                }
            }
            let gap = next.sup_distance(&m);
            m = next;
            u = Some(sol.u);
            last_gap = gap;
            let full = tol <= cfg.full_inner_tol();
            match monitor.push(gap) {
                Status::Converged if full => {
                    let u = u.expect("at least one iteration ran");
                    let (abs, _) = self.absorption(&m);
                    let check = self.solver.solve(
                        &abs,
                        &self.coeffs,
                        self.source,
                        None,
                        SolveOptions {
                            initial: Some(&u),
                            tol_source: Some(cfg.full_inner_tol()),
                        },
                    )?;
                    sweeps += check.iterations;
                    let residual = angular_average(&check.u).sup_distance(&m);
                    debug!(
                        "scatter recovery converged in {} iterations, residual {residual:e}",
                        monitor.history.len()
                    );
                    if monotonicity_violations > 0 {
                        warn!("{monotonicity_violations} non-monotone cell updates from a monotone start");
                    }
                    let (sigma_abs, clipped) = self.clipped_absorption(&m);
                    let pi_alpha = if cfg.alpha_report {
                        Some(check_pi_alpha(
                            &sigma_abs,
                            self.datum,
                            self.source,
                            self.solver.angles(),
                            cfg,
                        )?)
                    } else {
                        None
                    };
                    return Ok(ScatterRecovery {
                        u,
                        average: m,
                        sigma_abs,
                        clipped,
                        degenerate: self.bracket.degenerate.clone(),
                        iterations: monitor.history.len(),
                        gap_history: monitor.history,
                        source_sweeps: sweeps,
                        monotonicity_violations,
                        clamp_activity,
                        bracket_violations,
                        residual,
                        pi_alpha,
                    });
                }
                Status::Diverged => return Err(monitor.divergence_error("scatter fixed point")),
                _ => {}
            }
        }
        Err(monitor.convergence_error("scatter fixed point"))
    }

    fn clipped_absorption(&self, m: &ScalarField) -> (ScalarField, Vec<bool>) {
        let top = self.cfg.absorption_upper();
        let mut clipped = vec![false; m.values().len()];
        let vals = self
            .datum
            .h
            .values()
            .iter()
            .zip(m.values())
            .zip(clipped.iter_mut())
            .map(|((&h, &m), flag)| {
                if h <= 0.0 {
                    return 0.0;
                }
                let lo = h / self.cfg.g_upper;
                let raw = if m > 0.0 { h / m } else { f64::INFINITY };
                if raw < lo || raw > top {
                    *flag = true;
                }
                raw.clamp(lo, top)
            })
            .collect();
        let n = clipped.iter().filter(|&&c| c).count();
        if n > 0 {
            warn!("Sigma_a clipped to its admissible interval on {n} cells");
        }
        (ScalarField::from_vec_unchecked(*m.grid(), vals), clipped)
    }
}

/// Recovers `⟨u⟩` and `Σa` from one datum.
pub fn fixed_point_recover_u(
    solver: &TransportSolver,
    h: &InternalDatum,
    g: &GeneralSource,
    known: &KnownScattering,
    cfg: &ScatterReconConfig,
    start: &ReconStart,
) -> Result<ScatterRecovery> {
    ScatterProblem::new(solver, h, g, known, cfg)?.recover(start)
}

/// Per cell, solves `[1 ⟨u₁⟩; 1 ⟨u₂⟩][σa; σb] = [Σa¹; Σa²]`. Cells with
/// `|⟨u₁⟩ − ⟨u₂⟩| < det_floor` or without data are declined.
pub fn pair_from_recoveries(
    r1: &ScatterRecovery,
    r2: &ScatterRecovery,
    det_floor: f64,
) -> Result<ReconPair> {
    if r1.average.grid() != r2.average.grid() {
        return Err(TransportError::Validation(
            "recoveries live on different grids".into(),
        ));
    }
    if !(det_floor.is_finite() && det_floor >= 0.0) {
        return Err(TransportError::Parameter(format!(
            "det_floor must be >= 0, got {det_floor}"
        )));
    }
    let grid = *r1.average.grid();
    let n = grid.len();
    let (mut sa, mut sb, mut cond, mut mask) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![false; n]);
    for c in 0..n {
        let (m1, m2) = (r1.average.values()[c], r2.average.values()[c]);
        let (a1, a2) = (r1.sigma_abs.values()[c], r2.sigma_abs.values()[c]);
        let d = m1 - m2;
        cond[c] = d.abs();
        if r1.degenerate[c] || r2.degenerate[c] || d.abs() < det_floor {
            mask[c] = true;
            continue;
        }
        sb[c] = (a1 - a2) / d;
        sa[c] = a1 - sb[c] * m1;
    }
    pair_from_parts(sa, sb, cond, mask, grid)
}

/// Both recoveries and the coefficient pair.
#[derive(Clone, Debug)]
pub struct ScatterReconstruction {
    pub pair: ReconPair,
    pub first: ScatterRecovery,
    pub second: ScatterRecovery,
}

/// Full two-source pipeline: invert each datum from `start`, then solve
/// the 2×2 systems.
#[allow(clippy::too_many_arguments)]
pub fn recover_pair_scatter(
    solver: &TransportSolver,
    data: [&InternalDatum; 2],
    sources: [&GeneralSource; 2],
    known: &KnownScattering,
    cfg: &ScatterReconConfig,
    det_floor: Option<f64>,
    start: &ReconStart,
) -> Result<ScatterReconstruction> {
    let first = fixed_point_recover_u(solver, data[0], sources[0], known, cfg, start)?;
    let second = fixed_point_recover_u(solver, data[1], sources[1], known, cfg, start)?;
    let pair = pair_from_recoveries(
        &first,
        &second,
        det_floor.unwrap_or_else(|| cfg.default_det_floor()),
    )?;
    Ok(ScatterReconstruction {
        pair,
        first,
        second,
    })
}

/// Empirical check of the sufficient conditions for convergence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiAlphaReport {
    /// `min` over cells and ordinates of `Σa − v·∇Σa/Σa + v·∇H/H`.
    pub alpha_estimate: f64,
    pub member: bool,
    /// `σ̄a · sup |g H/Σa|` over inflow boundary nodes.
    pub beta_estimate: f64,
    pub beta_ok: bool,
    pub excluded_cells: usize,
    pub notes: Vec<String>,
}

pub fn check_pi_alpha(
    sigma_abs: &ScalarField,
    h: &InternalDatum,
    g: &GeneralSource,
    angles: &AngularGrid,
    cfg: &ScatterReconConfig,
) -> Result<PiAlphaReport> {
    let grid = *sigma_abs.grid();
    if *h.grid() != grid {
        return Err(TransportError::Validation(
            "Sigma_a and datum live on different grids".into(),
        ));
    }
    let (sa, hv) = (sigma_abs.values(), h.h.values());
    let (sax, say) = gradient(&grid, sa);
    let (hx, hy) = gradient(&grid, hv);
    let usable = |c: usize| sa[c] > 0.0 && hv[c] > 0.0;
    let excluded = (0..grid.len()).filter(|&c| !usable(c)).count();
    let mut alpha = f64::INFINITY;
    for c in (0..grid.len()).filter(|&c| usable(c)) {
        for &v in angles.directions() {
            let val =
                sa[c] - (v.x * sax[c] + v.y * say[c]) / sa[c] + (v.x * hx[c] + v.y * hy[c]) / hv[c];
            alpha = alpha.min(val);
        }
    }
    let mut notes = Vec::new();
    if excluded > 0 {
        notes.push(format!("{excluded} cells with zero Sigma_a or H excluded"));
    }
    if !alpha.is_finite() {
        notes.push("no usable cells".into());
    }

    let mut beta = 0.0f64;
    for face in Face::ALL {
        let n = face.outward_normal();
        for c in boundary_cells(&grid, face) {
            if !usable(c) {
                continue;
            }
            let p = project_to_face(&grid, grid.center_of(c), face);
            for &v in angles.directions().iter().filter(|v| v.dot(n) < 0.0) {
                beta = beta.max((g.eval(&grid, p, v) * hv[c] / sa[c]).abs());
            }
        }
    }
    let beta = cfg.sigma_a.upper * beta;
    Ok(PiAlphaReport {
        alpha_estimate: alpha,
        member: alpha.is_finite() && alpha > 0.0,
        beta_estimate: beta,
        beta_ok: beta < 1.0,
        excluded_cells: excluded,
        notes,
    })
}

fn boundary_cells(grid: &SpatialGrid, face: Face) -> Vec<usize> {
    let (nx, ny) = (grid.nx(), grid.ny());
    match face {
        Face::Left => (0..ny).map(|j| grid.index(0, j)).collect(),
        Face::Right => (0..ny).map(|j| grid.index(nx - 1, j)).collect(),
        Face::Bottom => (0..nx).map(|i| grid.index(i, 0)).collect(),
        Face::Top => (0..nx).map(|i| grid.index(i, ny - 1)).collect(),
    }
}

fn project_to_face(grid: &SpatialGrid, p: Vec2, face: Face) -> Vec2 {
    match face {
        Face::Left => Vec2::new(0.0, p.y),
        Face::Right => Vec2::new(grid.lx(), p.y),
        Face::Bottom => Vec2::new(p.x, 0.0),
        Face::Top => Vec2::new(p.x, grid.ly()),
    }
}

/// Noise levels, seeds and synthesis refinement for [`stability_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityProbeConfig {
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub refinement: usize,
}

impl Default for StabilityProbeConfig {
    fn default() -> Self {
        StabilityProbeConfig {
            noise_levels: vec![0.005, 0.01, 0.02],
            seeds: vec![1, 2],
            refinement: 2,
        }
    }
}

/// One noisy reconstruction. Errors are area-weighted L² norms over cells
/// unmasked in both this and the noise-free reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub noise_level: f64,
    pub seed: u64,
    /// `‖(δH₁, δH₂)‖`
    pub data_l2: f64,
    /// `‖(δσa, δσb)‖` relative to the noise-free reconstruction.
    pub coeff_l2: f64,
    /// `‖(δσa, δσb)‖` relative to the truth.
    pub truth_l2: f64,
    pub error: Option<String>,
}

/// Error change when the noise level halves, for one seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRatio {
    pub seed: u64,
    pub level: f64,
    pub half_level: f64,
    /// `coeff_l2(level/2) / coeff_l2(level)`
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    /// Discretization error of the noise-free reconstruction against the truth.
    pub baseline_l2: f64,
    pub rows: Vec<StabilityRow>,
    pub ratios: Vec<StabilityRatio>,
}

impl StabilityTable {
    pub fn ratios_within(&self, lo: f64, hi: f64) -> bool {
        !self.ratios.is_empty() && self.ratios.iter().all(|r| (lo..=hi).contains(&r.ratio))
    }
}

fn pair_l2(
    a: &ReconPair,
    b_sa: &ScalarField,
    b_sb: &ScalarField,
    extra_mask: Option<&[bool]>,
) -> f64 {
    let g = a.sigma_a.grid();
    let area = g.hx() * g.hy();
    let mut acc = 0.0;
    for c in 0..g.len() {
        if a.mask[c] || extra_mask.is_some_and(|m| m[c]) {
            continue;
        }
        let da = a.sigma_a.values()[c] - b_sa.values()[c];
        let db = a.sigma_b.values()[c] - b_sb.values()[c];
        acc += (da * da + db * db) * area;
    }
    acc.sqrt()
}

/// Synthesizes two data from `phantom`, perturbs them at each noise level
/// and seed, reconstructs, and tabulates data and coefficient errors.
/// Noise for a given seed uses the same draws at every level.
pub fn stability_probe(
    phantom: &Phantom,
    grid: SpatialGrid,
    angles: &AngularGrid,
    sources: [&GeneralSource; 2],
    cfg: &ScatterReconConfig,
    probe: &StabilityProbeConfig,
) -> Result<StabilityTable> {
    if probe.noise_levels.is_empty() || probe.seeds.is_empty() {
        return Err(TransportError::Parameter(
            "stability probe needs noise levels and seeds".into(),
        ));
    }
    let truth = phantom.coefficients(grid, angles)?;
    let known = KnownScattering::from_coefficients(&truth);
    let solver = TransportSolver::new(grid, angles.clone(), cfg.inner)?;
    let fwd = SemilinearConfig {
        tol_fixed_point: cfg.tol_fp * 1e-2,
        inner: cfg.inner,
        ..Default::default()
    };
    let data = sources
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let illum = Illumination::Boundary((*g).clone());
            synthesize_on_refined(
                phantom,
                grid,
                angles,
                &illum,
                &fwd,
                probe.refinement,
                &format!("source-{}", j + 1),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let clean = recover_pair_scatter(
        &solver,
        [&data[0], &data[1]],
        sources,
        &known,
        cfg,
        None,
        &ReconStart::Upper,
    )?
    .pair;
    let baseline_l2 = pair_l2(&clean, &truth.sigma_a, &truth.sigma_b, None);

    let jobs: Vec<(f64, u64)> = probe
        .noise_levels
        .iter()
        .flat_map(|&l| probe.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let rows: Vec<StabilityRow> = jobs
        .par_iter()
        .map(|&(level, seed)| {
            let mut row = StabilityRow {
                noise_level: level,
                seed,
                data_l2: f64::NAN,
                coeff_l2: f64::NAN,
                truth_l2: f64::NAN,
                error: None,
            };
            let run = || -> Result<(f64, ReconPair)> {
                let noisy = data
                    .iter()
                    .enumerate()
                    .map(|(j, d)| {
                        add_noise(d, level, stream_seed(seed, &format!("source-{}", j + 1)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let area = grid.hx() * grid.hy();
                let data_l2 = noisy
                    .iter()
                    .zip(&data)
                    .map(|(n, d)| {
                        n.h.values()
                            .iter()
                            .zip(d.h.values())
                            .map(|(a, b)| (a - b) * (a - b) * area)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt();
                let pair = recover_pair_scatter(
                    &solver,
                    [&noisy[0], &noisy[1]],
                    sources,
                    &known,
                    cfg,
                    None,
                    &ReconStart::Upper,
                )?
                .pair;
                Ok((data_l2, pair))
            };
            match run() {
                Ok((data_l2, pair)) => {
                    row.data_l2 = data_l2;
                    row.coeff_l2 =
                        pair_l2(&pair, &clean.sigma_a, &clean.sigma_b, Some(&clean.mask));
                    row.truth_l2 = pair_l2(&pair, &truth.sigma_a, &truth.sigma_b, None);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();

    let mut ratios = Vec::new();
    for &seed in &probe.seeds {
        for hi in rows.iter().filter(|r| r.seed == seed && r.error.is_none()) {
            let half = hi.noise_level / 2.0;
            if let Some(lo) = rows.iter().find(|r| {
                r.seed == seed && r.error.is_none() && (r.noise_level - half).abs() <= 1e-12 * half
            }) {
                ratios.push(StabilityRatio {
                    seed,
                    level: hi.noise_level,
                    half_level: lo.noise_level,
                    ratio: lo.coeff_l2 / hi.coeff_l2,
                });
            }
        }
    }
    Ok(StabilityTable {
        baseline_l2,
        rows,
        ratios,
    })
}
