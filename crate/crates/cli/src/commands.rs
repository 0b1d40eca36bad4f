//! Subcommand bodies. Each fills the report and writes its artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use tpa_transport::fields::CoefficientSet;
use tpa_transport::forward::{
    solve_point_source, solve_semilinear, solve_semilinear_collimated, SemilinearConfig,
    StartingPoint,
};
use tpa_transport::geometry::{AngularGrid, SpatialGrid};
use tpa_transport::isotropic::{uniqueness_certificate, IsotropicData};
use tpa_transport::phantom::Phantom;
use tpa_transport::recon_free::{
    default_det_floor, recover_density_collimated, recover_density_point, solve_pointwise_pair,
    DensityRecovery, ReconPair,
};
use tpa_transport::recon_scatter::{
    pair_from_recoveries, stability_probe, KnownScattering, ReconStart, ScatterProblem,
    ScatterReconConfig, ScatterRecovery,
};
use tpa_transport::synthesis::{
    add_noise, forward_average, stream_seed, synthesize, synthesize_on_refined, Illumination,
    InternalDatum,
};
use tpa_transport::transport::{GeneralSource, TransportSolver};

use crate::config::{resolve, ExperimentConfig, SourceSpec, Starts};
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;
use crate::phantoms::load_coefficients;
use crate::report::RunReport;
use crate::verify;

/// A validated config with its derived grids.
pub struct Context {
    pub cfg: ExperimentConfig,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
    pub grid: SpatialGrid,
    pub angles: AngularGrid,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, base: &Path) -> CliResult<Self> {
        cfg.validate(base)?;
        Ok(Context {
            grid: cfg.grid.spatial()?,
            angles: cfg.grid.angular()?,
            cfg,
            base: base.to_path_buf(),
        })
    }

    fn semilinear(&self) -> SemilinearConfig {
        self.cfg.solver.semilinear(&self.grid)
    }

    fn coefficients(&self) -> CliResult<(CoefficientSet, Option<Phantom>)> {
        let block =
            self.cfg.coefficients.as_ref().ok_or_else(|| {
                CliError::Config("this command needs a `coefficients` block".into())
            })?;
        load_coefficients(block, self.grid, &self.angles, self.cfg.seed, &self.base)
    }

    fn sources(&self, count: Option<usize>) -> CliResult<&[SourceSpec]> {
        let s = &self.cfg.sources;
        match count {
            Some(n) if s.len() != n => Err(CliError::Config(format!(
                "this command needs {n} sources, got {}",
                s.len()
            ))),
            None if s.is_empty() => Err(CliError::Config(
                "this command needs at least one source".into(),
            )),
            _ => Ok(s),
        }
    }

    fn illumination(&self, s: &SourceSpec) -> CliResult<Illumination> {
        Ok(match s {
            SourceSpec::General { .. } => Illumination::Boundary(s.general()?),
            SourceSpec::Collimated { .. } => Illumination::Collimated(s.collimated()?),
            SourceSpec::Point { .. } => Illumination::Point(s.point(&self.grid)?),
        })
    }

    fn recovery_step(&self) -> f64 {
        self.cfg
            .task
            .recovery_step
            .unwrap_or(0.5 * self.grid.hx().min(self.grid.hy()))
    }
}

fn source_id(i: usize) -> String {
    format!("s{}", i + 1)
}

fn timed<T>(report: &mut RunReport, phase: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let t0 = Instant::now();
    let out = f();
    *report.timings.entry(phase.to_string()).or_default() += t0.elapsed().as_secs_f64();
    out
}

/// Semilinear forward solve for every configured source; writes `⟨u⟩`.
pub fn forward(ctx: &Context, out: &mut OutputDir, report: &mut RunReport) -> CliResult<()> {
    let (coeffs, _) = ctx.coefficients()?;
    let cfg = ctx.semilinear();
    for (i, s) in ctx.sources(None)?.iter().enumerate() {
        let id = source_id(i);
        let t0 = Instant::now();
        let avg = match ctx.illumination(s)? {
            Illumination::Boundary(g) => {
                let solver = TransportSolver::new(ctx.grid, ctx.angles.clone(), cfg.inner)?;
                let sol = solve_semilinear(&solver, &coeffs, &g, &cfg, &StartingPoint::Zero)?;
                report.history(format!("outer_{id}"), &sol.gap_history);
                report.summary(format!("admissibility_{id}"), &sol.admissibility);
                report.summary(format!("residual_{id}"), sol.residual);
                sol.average
            }
            Illumination::Collimated(c) => {
                let solver = TransportSolver::new(ctx.grid, ctx.angles.clone(), cfg.inner)?;
                let sol =
                    solve_semilinear_collimated(&solver, &coeffs, &c, &cfg, &StartingPoint::Zero)?;
                report.history(format!("outer_{id}"), &sol.gap_history);
                report.summary(format!("admissibility_{id}"), &sol.admissibility);
                out.write_field(&format!("ballistic_{id}.csv"), &sol.ballistic)?;
                sol.average()
            }
            Illumination::Point(p) => {
                let sol = solve_point_source(&coeffs, &p, &cfg)?;
                report.history(format!("outer_{id}"), &sol.gap_history);
                sol.average
            }
        };
        report
            .timings
            .insert(format!("forward_{id}"), t0.elapsed().as_secs_f64());
        out.write_field(&format!("u_avg_{id}.csv"), &avg)?;
    }
    Ok(())
}

fn synthesize_all(
    ctx: &Context,
    coeffs: &CoefficientSet,
    phantom: Option<&Phantom>,
    report: &mut RunReport,
) -> CliResult<Vec<InternalDatum>> {
    let cfg = ctx.semilinear();
    let task = &ctx.cfg.task;
    let mut data = Vec::new();
    for (i, s) in ctx.sources(None)?.iter().enumerate() {
        let id = source_id(i);
        let illum = ctx.illumination(s)?;
        let clean = timed(report, &format!("synthesis_{id}"), || {
            if task.refinement > 1 {
                let p = phantom.ok_or_else(|| {
                    CliError::Config(
                        "refined synthesis needs an analytic phantom; set task.refinement to 1"
                            .into(),
                    )
                })?;
                Ok(synthesize_on_refined(
                    p,
                    ctx.grid,
                    &ctx.angles,
                    &illum,
                    &cfg,
                    task.refinement,
                    &id,
                )?)
            } else {
                let u = forward_average(coeffs, &ctx.angles, &illum, &cfg)?;
                Ok(synthesize(coeffs, &u, &id)?)
            }
        })?;
        let d = if task.noise_level > 0.0 {
            add_noise(
                &clean,
                task.noise_level,
                stream_seed(ctx.cfg.seed, &format!("noise-{id}")),
            )?
        } else {
            clean
        };
        data.push(d);
    }
    Ok(data)
}

/// Loads `task.data` when given, else synthesizes from the coefficients.
fn obtain_data(
    ctx: &Context,
    truth: Option<&(CoefficientSet, Option<Phantom>)>,
    out: &mut OutputDir,
    report: &mut RunReport,
) -> CliResult<Vec<InternalDatum>> {
    let n = ctx.sources(None)?.len();
    if let Some(paths) = &ctx.cfg.task.data {
        if paths.len() != n {
            return Err(CliError::Config(format!(
                "task.data lists {} files for {n} sources",
                paths.len()
            )));
        }
        return paths
            .iter()
            .map(|p| {
                let d = InternalDatum::load(&resolve(p, &ctx.base))?;
                if *d.grid() != ctx.grid {
                    return Err(CliError::Config(format!(
                        "{} lives on a different grid",
                        p.display()
                    )));
                }
                Ok(d)
            })
            .collect();
    }
    let (coeffs, phantom) = truth.ok_or_else(|| {
        CliError::Config("without task.data the coefficients block is required".into())
    })?;
    let data = synthesize_all(ctx, coeffs, phantom.as_ref(), report)?;
    for (i, d) in data.iter().enumerate() {
        out.write_datum(&format!("h_{}", source_id(i)), d)?;
    }
    Ok(data)
}

fn write_truth(out: &mut OutputDir, c: &CoefficientSet) -> CliResult<()> {
    out.write_field("true_sigma_a.csv", &c.sigma_a)?;
    out.write_field("true_sigma_b.csv", &c.sigma_b)?;
    out.write_field("true_sigma_s.csv", &c.sigma_s)?;
    Ok(())
}

/// Internal data for every source, plus the true coefficients.
pub fn synth(ctx: &Context, out: &mut OutputDir, report: &mut RunReport) -> CliResult<()> {
    let truth = ctx.coefficients()?;
    write_truth(out, &truth.0)?;
    let data = synthesize_all(ctx, &truth.0, truth.1.as_ref(), report)?;
    for (i, d) in data.iter().enumerate() {
        let id = source_id(i);
        report.summary(format!("datum_{id}"), &d.provenance);
        out.write_datum(&format!("h_{id}"), d)?;
    }
    Ok(())
}

fn write_pair(out: &mut OutputDir, pair: &ReconPair) -> CliResult<()> {
    out.write_field("sigma_a.csv", &pair.sigma_a)?;
    out.write_field("sigma_b.csv", &pair.sigma_b)?;
    out.write_field("mask.csv", &pair.mask_field())?;
    out.write_field("conditioning.csv", &pair.conditioning)?;
    Ok(())
}

/// Two-source reconstruction in a non-scattering medium.
pub fn recon_free(ctx: &Context, out: &mut OutputDir, report: &mut RunReport) -> CliResult<()> {
    let specs = ctx.sources(Some(2))?;
    let truth = match ctx.cfg.coefficients {
        Some(_) => Some(ctx.coefficients()?),
        None => None,
    };
    let data = obtain_data(ctx, truth.as_ref(), out, report)?;
    let step = ctx.recovery_step();
    let (phi, floor): (Vec<DensityRecovery>, f64) =
        timed(report, "recovery", || match (specs[0], specs[1]) {
            (
                SourceSpec::Collimated { angle: a1, .. },
                SourceSpec::Collimated { angle: a2, .. },
            ) => {
                if a1 != a2 {
                    return Err(CliError::Config(
                        "both beams must share one direction".into(),
                    ));
                }
                let phi = specs
                    .iter()
                    .zip(&data)
                    .map(|(s, d)| Ok(recover_density_collimated(d, &s.collimated()?, step)?))
                    .collect::<CliResult<Vec<_>>>()?;
                Ok((phi, default_det_floor(specs[0].upper(), specs[1].upper())))
            }
            (SourceSpec::Point { position: p1, .. }, SourceSpec::Point { position: p2, .. }) => {
                if p1 != p2 {
                    return Err(CliError::Config(
                        "both point sources must share one position".into(),
                    ));
                }
                let phi = specs
                    .iter()
                    .zip(&data)
                    .map(|(s, d)| {
                        Ok(recover_density_point(
                            d,
                            &s.point(&ctx.grid)?,
                            ctx.cfg.task.exclusion,
                            step,
                        )?)
                    })
                    .collect::<CliResult<Vec<_>>>()?;
                Ok((phi, default_det_floor(specs[0].upper(), specs[1].upper())))
            }
            _ => Err(CliError::Config(
                "recon-free needs two collimated or two point sources".into(),
            )),
        })?;
    let floor = ctx.cfg.task.det_floor.unwrap_or(floor);
    let pair = solve_pointwise_pair(&phi[0], &phi[1], &data[0], &data[1], floor)?;
    let sign = (specs[0].upper() - specs[1].upper()).signum();
    let unmasked: Vec<usize> = (0..ctx.grid.len()).filter(|&c| !pair.mask[c]).collect();
    let separated = unmasked
        .iter()
        .filter(|&&c| (phi[0].phi.values()[c] - phi[1].phi.values()[c]) * sign > 0.0)
        .count();
    report.check(
        "density separation",
        separated == unmasked.len(),
        format!(
            "{separated} of {} unmasked cells ordered like the source strengths",
            unmasked.len()
        ),
    );
    report.summary(
        "inconsistent_cells",
        [phi[0].inconsistent, phi[1].inconsistent],
    );
    report.summary("masked_fraction", pair.masked_fraction());
    for (i, p) in phi.iter().enumerate() {
        out.write_field(&format!("phi_{}.csv", source_id(i)), &p.phi)?;
    }
    write_pair(out, &pair)?;
    if let Some((c, _)) = &truth {
        report
            .errors
            .insert("pair".into(), pair.errors(&c.sigma_a, &c.sigma_b)?);
    }
    Ok(())
}

fn recovery_report(report: &mut RunReport, name: &str, r: &ScatterRecovery, increasing: bool) {
    report.history(format!("fixed_point_{name}"), &r.gap_history);
    report.summary(
        format!("recovery_{name}"),
        serde_json::json!({
            "iterations": r.iterations,
            "source_sweeps": r.source_sweeps,
            "residual": r.residual,
            "clipped_cells": r.clipped_count(),
            "bracket_violations": r.bracket_violations,
            "late_clamp_activity": r.late_clamp_activity(),
            "pi_alpha": r.pi_alpha,
        }),
    );
    let direction = if increasing {
        "non-decreasing"
    } else {
        "non-increasing"
    };
    report.check(
        format!("monotone {name}"),
        r.monotonicity_violations == 0,
        format!(
            "{} cell updates were not {direction}",
            r.monotonicity_violations
        ),
    );
}

/// Two-source reconstruction with known scattering.
pub fn recon_scatter(ctx: &Context, out: &mut OutputDir, report: &mut RunReport) -> CliResult<()> {
    let specs = ctx.sources(Some(2))?;
    let sources: Vec<GeneralSource> = specs
        .iter()
        .map(|s| s.general())
        .collect::<CliResult<_>>()?;
    let truth = ctx.coefficients()?;
    let (coeffs, phantom) = &truth;
    let data = obtain_data(ctx, Some(&truth), out, report)?;
    let task = &ctx.cfg.task;
    let solver_cfg = &ctx.cfg.solver;
    let lin = solver_cfg.linear(&ctx.grid);
    let g_upper = task
        .g_upper
        .unwrap_or_else(|| specs.iter().map(SourceSpec::upper).fold(0.0, f64::max));
    let mut cfg = ScatterReconConfig::new(&task.bounds.unwrap_or(*coeffs.bounds()), g_upper, lin);
    cfg.tol_fp = solver_cfg.tol_fixed_point;
    cfg.max_iters = solver_cfg.max_outer_iters;
    cfg.inexact_inner = solver_cfg.inexact_inner;
    cfg.alpha_report = task.pi_alpha;
    cfg.validate()?;
    report.summary("scatter_config", cfg);
    let known = KnownScattering::from_coefficients(coeffs);
    let solver = TransportSolver::new(ctx.grid, ctx.angles.clone(), lin)?;

    let mut primary = Vec::new();
    for (i, (d, g)) in data.iter().zip(&sources).enumerate() {
        let id = source_id(i);
        let problem = timed(report, "reconstruction", || {
            Ok(ScatterProblem::new(&solver, d, g, &known, &cfg)?)
        })?;
        let b = problem.bracket();
        report.summary(
            format!("bracket_{id}"),
            serde_json::json!({
                "ordered": b.ordered,
                "eta_below_min": b.eta_below_min,
                "eta_violations": b.eta_violations,
                "degenerate_cells": b.degenerate.iter().filter(|&&x| x).count(),
            }),
        );
        let upper = match task.starts {
            Starts::Upper | Starts::Both => Some(timed(report, "reconstruction", || {
                Ok(problem.recover(&ReconStart::Upper)?)
            })?),
            Starts::Lower => None,
        };
        let lower = match task.starts {
            Starts::Lower | Starts::Both => Some(timed(report, "reconstruction", || {
                Ok(problem.recover(&ReconStart::Lower)?)
            })?),
            Starts::Upper => None,
        };
        if let Some(r) = &upper {
            recovery_report(report, &format!("{id}_upper"), r, false);
        }
        if let Some(r) = &lower {
            recovery_report(report, &format!("{id}_lower"), r, true);
        }
        if let (Some(hi), Some(lo)) = (&upper, &lower) {
            let gap = hi.average.sup_distance(&lo.average);
            report.check(
                format!("two-start agreement {id}"),
                gap <= 2.0 * cfg.tol_fp,
                format!("sup distance {gap:e}, limit {:e}", 2.0 * cfg.tol_fp),
            );
        }
        let r = upper.or(lower).expect("at least one start runs");
        out.write_field(&format!("u_avg_{id}.csv"), &r.average)?;
        out.write_field(&format!("sigma_abs_{id}.csv"), &r.sigma_abs)?;
        primary.push(r);
    }
    let pair = pair_from_recoveries(
        &primary[0],
        &primary[1],
        task.det_floor.unwrap_or_else(|| cfg.default_det_floor()),
    )?;
    report.summary("masked_fraction", pair.masked_fraction());
    write_pair(out, &pair)?;
    report.errors.insert(
        "pair".into(),
        pair.errors(&coeffs.sigma_a, &coeffs.sigma_b)?,
    );

    if let Some(probe) = &task.stability {
        let p = phantom.as_ref().ok_or_else(|| {
            CliError::Config("the stability probe needs an analytic phantom".into())
        })?;
        let table = timed(report, "stability", || {
            Ok(stability_probe(
                p,
                ctx.grid,
                &ctx.angles,
                [&sources[0], &sources[1]],
                &cfg,
                probe,
            )?)
        })?;
        let mut csv = String::from("noise_level,seed,data_l2,coeff_l2,truth_l2\n");
        for r in &table.rows {
            csv.push_str(&format!(
                "{:e},{},{:e},{:e},{:e}\n",
                r.noise_level, r.seed, r.data_l2, r.coeff_l2, r.truth_l2
            ));
        }
        out.write_bytes("stability.csv", csv.as_bytes())?;
        report.check(
            "stability ratios",
            table.ratios_within(0.3, 0.8),
            format!(
                "ratios {:?}",
                table.ratios.iter().map(|r| r.ratio).collect::<Vec<_>>()
            ),
        );
        report.summary("stability", &table);
    }
    Ok(())
}

/// Uniqueness and stability certificate for the isotropic inverse problem.
pub fn certify_isotropic(
    ctx: &Context,
    out: &mut OutputDir,
    report: &mut RunReport,
) -> CliResult<()> {
    let specs = ctx.sources(None)?;
    let truth = ctx.coefficients()?;
    let coeffs = &truth.0;
    if !coeffs.kernel.is_isotropic() {
        return Err(CliError::Config(
            "certify-isotropic needs an isotropic kernel".into(),
        ));
    }
    let data = obtain_data(ctx, Some(&truth), out, report)?;
    let g_bar = ctx.cfg.task.g_upper.unwrap_or(specs[0].upper());
    let bounds = ctx.cfg.task.bounds.unwrap_or(*coeffs.bounds());
    let top = bounds.sigma_a.upper + bounds.sigma_b.upper * g_bar;
    let eta = data[0].h.map(|v| v.max(0.0) / top);
    let solver = TransportSolver::new(
        ctx.grid,
        ctx.angles.clone(),
        ctx.cfg.solver.linear(&ctx.grid),
    )?;
    let iso = IsotropicData {
        h: &data[0].h,
        sigma_s: &coeffs.sigma_s,
        g_bar,
    };
    let cert = timed(report, "certificate", || {
        Ok(uniqueness_certificate(
            &solver,
            &iso,
            &eta,
            ctx.cfg.solver.tol_fixed_point,
            ctx.cfg.solver.max_outer_iters,
        )?)
    })?;
    info!(
        "certificate: unique {} stable {} psi {:.6} eta_min {:.6}",
        cert.unique, cert.stable, cert.constants.psi_uniqueness, cert.eta_min
    );
    out.write_json("certificate.json", &cert)?;
    report.summary("certificate", &cert);
    Ok(())
}

/// Property suite over randomized admissible phantoms.
pub fn verify(ctx: &Context, out: &mut OutputDir, report: &mut RunReport) -> CliResult<()> {
    let cfg = ctx.semilinear();
    let cases = verify::suite(ctx.cfg.seed, ctx.cfg.task.suite_size)?;
    for case in &cases {
        let outcome = timed(report, "suite", || {
            verify::run_case(case, ctx.grid, &ctx.angles, &cfg, ctx.cfg.seed)
        })?;
        for c in outcome.checks {
            report.check(format!("{}: {}", case.name, c.name), c.passed, c.detail);
        }
        out.write_field(&format!("{}_u_avg.csv", case.name), &outcome.average)?;
        out.write_datum(&format!("{}_h", case.name), &outcome.noisy)?;
    }
    Ok(())
}
