//! Integral form of the isotropic-scattering inversion with a constant
//! source ḡ: the path exponential `E_m`, the operators `J_m` and `K_m`, the
//! monotone map `𝒞(m) = ⟨u[H/m]⟩`, and the computable constants that
//! certify uniqueness and stability of its fixed point.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::fields::{angular_average, CoefficientSet, PhaseField, ScalarField, ScatteringKernel};
use crate::geometry::{AngularGrid, SpatialGrid, Vec2};
use crate::iteration::{GapMonitor, Status};
use crate::transport::{GeneralSource, InternalSource, SolveOptions, TransportSolver};

/// Iterations in a row with a growing gap before giving up.
const DIVERGENCE_STREAK: usize = 5;

/// `H` and `σs` of one isotropic problem with inflow ḡ.
#[derive(Clone, Copy, Debug)]
pub struct IsotropicData<'a> {
    pub h: &'a ScalarField,
    pub sigma_s: &'a ScalarField,
    pub g_bar: f64,
}

impl IsotropicData<'_> {
    fn validate(&self, grid: &SpatialGrid) -> Result<()> {
        if self.h.grid() != grid || self.sigma_s.grid() != grid {
            return Err(TransportError::Validation(
                "fields live on different grids".into(),
            ));
        }
        if self.h.min() < 0.0 || self.sigma_s.min() < 0.0 {
            return Err(TransportError::Validation(
                "H and sigma_s must be non-negative".into(),
            ));
        }
        if !(self.g_bar.is_finite() && self.g_bar > 0.0) {
            return Err(TransportError::Parameter(format!(
                "g_bar must be positive, got {}",
                self.g_bar
            )));
        }
        Ok(())
    }

    /// `H/m + σs`; cells with `H = 0` contribute `σs` alone.
    fn sigma_t(&self, m: &ScalarField) -> Result<ScalarField> {
        let mut out = Vec::with_capacity(m.values().len());
        for ((&h, &m), &s) in self
            .h
            .values()
            .iter()
            .zip(m.values())
            .zip(self.sigma_s.values())
        {
            if h == 0.0 {
                out.push(s);
            } else if m > 0.0 {
                out.push(h / m + s);
            } else {
                return Err(TransportError::Domain(format!(
                    "m must be positive where H > 0, found {m}"
                )));
            }
        }
        ScalarField::new(*m.grid(), out)
    }

    fn coefficients(&self, angles: &AngularGrid) -> Result<CoefficientSet> {
        let g = *self.h.grid();
        CoefficientSet::new(
            ScalarField::zeros(g),
            ScalarField::zeros(g),
            self.sigma_s.clone(),
            ScatteringKernel::isotropic(angles),
        )
    }
}

/// `E_m(x, l, v) = exp(−∫₀^l (H/m + σs)(x − s v) ds)` by the trapezoid rule
/// on bilinear samples spaced at most `step`.
pub fn path_exponential(
    data: &IsotropicData<'_>,
    m: &ScalarField,
    x: Vec2,
    v: Vec2,
    l: f64,
    step: f64,
) -> Result<f64> {
    let grid = *m.grid();
    data.validate(&grid)?;
    if l == 0.0 {
        return Ok(1.0);
    }
    let sigma_t = data.sigma_t(m)?;
    let ray = grid.sample_segment(x, v, l, step)?;
    let vals: Vec<f64> = (0..ray.s.len())
        .map(|k| sigma_t.interpolate(ray.point(k)))
        .collect();
    let tau: f64 = ray
        .s
        .windows(2)
        .zip(vals.windows(2))
        .map(|(s, f)| 0.5 * (s[1] - s[0]) * (f[0] + f[1]))
        .sum();
    Ok((-tau).exp())
}

fn isotropic_solver_check(
    solver: &TransportSolver,
    data: &IsotropicData<'_>,
    m: &ScalarField,
) -> Result<()> {
    data.validate(solver.grid())?;
    if m.grid() != solver.grid() {
        return Err(TransportError::Validation(
            "m lives on a different grid".into(),
        ));
    }
    Ok(())
}

/// `J_m ḡ = ḡ Σ_k w_k E_m(x, τ−(x, v_k), v_k)`.
pub fn apply_j(
    solver: &TransportSolver,
    data: &IsotropicData<'_>,
    m: &ScalarField,
) -> Result<ScalarField> {
    isotropic_solver_check(solver, data, m)?;
    let b = solver.ballistic_solution(&data.sigma_t(m)?, &GeneralSource::Constant(data.g_bar))?;
    Ok(angular_average(&b))
}

/// `K_m f = Σ_k w_k ∫₀^{τ−} E_m(x, l, v_k) f(x − l v_k) dl`.
pub fn apply_k(
    solver: &TransportSolver,
    data: &IsotropicData<'_>,
    m: &ScalarField,
    f: &ScalarField,
) -> Result<ScalarField> {
    isotropic_solver_check(solver, data, m)?;
    let lifted = solver.lift_source(&data.sigma_t(m)?, &InternalSource::Isotropic(f.clone()))?;
    Ok(angular_average(&lifted))
}

/// Outcome of iterating `𝒞`.
#[derive(Clone, Debug)]
pub struct FixedPointHistory {
    pub fixed_point: ScalarField,
    pub gap_history: Vec<f64>,
    /// Every step was non-increasing pointwise.
    pub non_increasing: bool,
    /// Every step was non-decreasing pointwise.
    pub non_decreasing: bool,
}

/// `𝒞(m)`: `⟨u⟩` of `v·∇u + (H/m + σs)u = σs⟨u⟩`, `u = ḡ` on `Γ−`.
pub fn apply_c(
    solver: &TransportSolver,
    data: &IsotropicData<'_>,
    m: &ScalarField,
    initial: Option<&PhaseField>,
    tol_source: f64,
) -> Result<PhaseField> {
    isotropic_solver_check(solver, data, m)?;
    let sigma_a = data
        .sigma_t(m)?
        .zip_map(data.sigma_s, |t, s| (t - s).max(0.0));
    let coeffs = data.coefficients(solver.angles())?;
    let sol = solver.solve(
        &sigma_a,
        &coeffs,
        &GeneralSource::Constant(data.g_bar),
        None,
        SolveOptions {
            initial,
            tol_source: Some(tol_source),
        },
    )?;
    Ok(sol.u)
}

/// Iterates `m ← 𝒞(m)` from `m0` until successive iterates differ by less
/// than `tol` in sup norm.
pub fn iterate_c(
    solver: &TransportSolver,
    data: &IsotropicData<'_>,
    m0: &ScalarField,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointHistory> {
    if !(tol.is_finite() && tol > 0.0) || max_iters == 0 {
        return Err(TransportError::Parameter(
            "iterate_c needs tol > 0 and max_iters >= 1".into(),
        ));
    }
    let inner_tol = solver.config().tol_source.min(1e-2 * tol);
    let slack = 1e-12 * data.g_bar;
    let mut m = m0.clone();
    let mut u: Option<PhaseField> = None;
    let (mut down, mut up) = (true, true);
    let mut monitor = GapMonitor::new(tol, Some(DIVERGENCE_STREAK));
    for _ in 0..max_iters {
        let next_u = apply_c(solver, data, &m, u.as_ref(), inner_tol)?;
        let next = angular_average(&next_u);
        for (&a, &b) in next.values().iter().zip(m.values()) {
            down &= a <= b + slack;
            up &= a >= b - slack;
        }
        let gap = next.sup_distance(&m);
        m = next;
        u = Some(next_u);
        match monitor.push(gap) {
            Status::Converged => {
                return Ok(FixedPointHistory {
                    fixed_point: m,
                    gap_history: monitor.history,
                    non_increasing: down,
                    non_decreasing: up,
                })
            }
            Status::Diverged => return Err(monitor.divergence_error("isotropic fixed point")),
            Status::Continue => {}
        }
    }
    Err(monitor.convergence_error("isotropic fixed point"))
}

/// `((1 + αβ − αℓβ²) / (2 − [1 − (1 − ℓ)α]β)) ḡ`, the threshold below `η`
/// that guarantees a unique fixed point.
pub fn psi_uniqueness(alpha: f64, beta: f64, ell: f64, g_bar: f64) -> f64 {
    (1.0 + alpha * beta - alpha * ell * beta * beta) / (2.0 - (1.0 - (1.0 - ell) * alpha) * beta)
        * g_bar
}

/// `((1 + αβ − αℓβ²) / (1 + r(1 − β) + (1 − ℓ)αβ)) ḡ`, the threshold below
/// `⟨u⟩` used by the stability estimate.
pub fn psi_stability(alpha: f64, beta: f64, ell: f64, r: f64, g_bar: f64) -> f64 {
    (1.0 + alpha * beta - alpha * ell * beta * beta)
        / (1.0 + r * (1.0 - beta) + (1.0 - ell) * alpha * beta)
        * g_bar
}

/// Cell sups are lower bounds for the continuum sups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicConstants {
    /// `sup (H/η) / (H/η + σs)`
    pub alpha: f64,
    /// `sup σs / (H/ḡ + σs)`
    pub beta: f64,
    /// diam Ω
    pub ell: f64,
    pub psi_uniqueness: f64,
    pub psi_stability: f64,
    /// `sup σs h / (H/h + σs)`, `h = lim 𝒞ⁿ(ḡ)`
    pub mu_h: f64,
    /// `sup σs f / (H/(h∨f) + σs)`, `f = lim 𝒞ⁿ(η)`
    pub mu_f: f64,
    /// `sup (H/(h∨f)) / (H/(h∨f) + σs)`
    pub kappa: f64,
    /// `sup |h − f| / (h∧f)`
    pub gamma: f64,
    /// Stability margin: `sup (1/h)[αβ(ḡ − (1−ℓ)(h − βḡ)/(1−β)) + (ḡ − h)/(1−β)]`.
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicCertificate {
    pub constants: IsotropicConstants,
    /// `diam Ω ≤ 1`.
    pub applicable: bool,
    pub eta_min: f64,
    /// Applicable and `ψ ≤ inf η`.
    pub unique: bool,
    /// Applicable, `r < 1` and `ψ_stab ≤ inf h`.
    pub stable: bool,
    /// `sup |h − f|`.
    pub limit_gap: f64,
    pub iterations_from_upper: usize,
    pub iterations_from_eta: usize,
    /// Cells where `J_h ḡ < (h − μ_h)/(ḡ − μ_h) ḡ` beyond round-off.
    pub j_bound_violations: usize,
    /// `min (J_h ḡ − (h − μ_h)/(ḡ − μ_h) ḡ)`
    pub j_bound_margin: f64,
    pub notes: Vec<String>,
}

fn sup_over(values: impl Iterator<Item = f64>) -> f64 {
    values.filter(|v| v.is_finite()).fold(0.0, f64::max)
}

/// `α` and `β` from the data alone.
pub fn alpha_beta(data: &IsotropicData<'_>, eta: &ScalarField) -> (f64, f64) {
    let (h, s, e) = (data.h.values(), data.sigma_s.values(), eta.values());
    let ratio = |num: f64, sig: f64| {
        if num + sig > 0.0 {
            num / (num + sig)
        } else {
            0.0
        }
    };
    let alpha = sup_over(
        (0..h.len())
            .filter(|&c| e[c] > 0.0)
            .map(|c| ratio(h[c] / e[c], s[c])),
    );
    let beta = sup_over((0..h.len()).map(|c| {
        let a = h[c] / data.g_bar;
        if a + s[c] > 0.0 {
            s[c] / (a + s[c])
        } else {
            0.0
        }
    }));
    (alpha, beta)
}

/// Computes all constants, both monotone limits, and the verdicts.
pub fn uniqueness_certificate(
    solver: &TransportSolver,
    data: &IsotropicData<'_>,
    eta: &ScalarField,
    tol: f64,
    max_iters: usize,
) -> Result<IsotropicCertificate> {
    let grid = *solver.grid();
    data.validate(&grid)?;
    if eta.grid() != &grid {
        return Err(TransportError::Validation(
            "eta lives on a different grid".into(),
        ));
    }
    let g_bar = data.g_bar;
    let ell = grid.diam();
    let applicable = ell <= 1.0;
    let mut notes = Vec::new();
    if !applicable {
        notes.push(format!(
            "domain diameter {ell} exceeds 1; the certificate does not apply"
        ));
    }
    let (alpha, beta) = alpha_beta(data, eta);
    let psi_u = psi_uniqueness(alpha, beta, ell, g_bar);
    let eta_min = eta.min();

    let upper = iterate_c(
        solver,
        data,
        &ScalarField::constant(grid, g_bar),
        tol,
        max_iters,
    )?;
    let lower = iterate_c(solver, data, eta, tol, max_iters)?;
    if !upper.non_increasing {
        notes.push("iterates from g_bar were not monotone".into());
    }
    if !lower.non_decreasing {
        notes.push("iterates from eta were not monotone; C(eta) >= eta may fail".into());
    }
    let (hv, fv) = (upper.fixed_point.values(), lower.fixed_point.values());
    let (hh, ss) = (data.h.values(), data.sigma_s.values());
    let n = grid.len();
    let frac = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let gamma = sup_over((0..n).map(|c| frac((hv[c] - fv[c]).abs(), hv[c].min(fv[c]))));
    let kappa = sup_over((0..n).map(|c| {
        let a = frac(hh[c], hv[c].max(fv[c]));
        frac(a, a + ss[c])
    }));
    let mu_f = sup_over((0..n).map(|c| frac(ss[c] * fv[c], frac(hh[c], hv[c].max(fv[c])) + ss[c])));
    let mu_h = sup_over((0..n).map(|c| frac(ss[c] * hv[c], frac(hh[c], hv[c]) + ss[c])));
    let r = sup_over((0..n).map(|c| {
        let h = hv[c];
        frac(
            alpha * beta * (g_bar - (1.0 - ell) * (h - beta * g_bar) / (1.0 - beta))
                + (g_bar - h) / (1.0 - beta),
            h,
        )
    }));
    let psi_s = psi_stability(alpha, beta, ell, r, g_bar);

    let j = apply_j(solver, data, &upper.fixed_point)?;
    let slack = 1e-9 * g_bar;
    let mut j_bound_violations = 0;
    let mut j_bound_margin = f64::INFINITY;
    for (&high, &jv) in hv.iter().zip(j.values()) {
        let bound = frac(high - mu_h, g_bar - mu_h) * g_bar;
        let margin = jv - bound;
        j_bound_margin = j_bound_margin.min(margin);
        if margin < -slack {
            j_bound_violations += 1;
        }
    }
    if j_bound_violations > 0 {
        notes.push(format!(
            "lower bound on J_h g_bar fails on {j_bound_violations} cells"
        ));
    }

    Ok(IsotropicCertificate {
        constants: IsotropicConstants {
            alpha,
            beta,
            ell,
            psi_uniqueness: psi_u,
            psi_stability: psi_s,
            mu_h,
            mu_f,
            kappa,
            gamma,
            r,
        },
        applicable,
        eta_min,
        unique: applicable && psi_u <= eta_min,
        stable: applicable && r < 1.0 && psi_s <= upper.fixed_point.min(),
        limit_gap: upper.fixed_point.sup_distance(&lower.fixed_point),
        iterations_from_upper: upper.gap_history.len(),
        iterations_from_eta: lower.gap_history.len(),
        j_bound_violations,
        j_bound_margin,
        notes,
    })
}
