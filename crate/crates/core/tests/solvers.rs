//! Solver-level properties: maximum principle, comparison, contraction,
//! grid convergence, and the reconstruction identities.

use proptest::prelude::*;
use tpa_transport::fields::{KernelProfile, ScalarField};
use tpa_transport::forward::{solve_semilinear, CollimatedSource, SemilinearConfig, StartingPoint};
use tpa_transport::geometry::{AngularGrid, SpatialGrid, Vec2};
use tpa_transport::isotropic::{apply_j, iterate_c, uniqueness_certificate, IsotropicData};
use tpa_transport::phantom::{FieldSpec, Inclusion, Phantom};
use tpa_transport::recon_free::{
    default_det_floor, recover_density_collimated, solve_pointwise_pair,
};
use tpa_transport::recon_scatter::{
    pair_from_recoveries, KnownScattering, ReconStart, ScatterProblem, ScatterReconConfig,
};
use tpa_transport::synthesis::{forward_average, synthesize, Illumination};
use tpa_transport::transport::{
    subcritical_ratio, GeneralSource, LinearSolveConfig, TransportSolver,
};

fn lin(n: usize) -> LinearSolveConfig {
    LinearSolveConfig {
        ray_step: 1.0 / n as f64,
        ..Default::default()
    }
}

fn solver(n: usize, na: usize) -> TransportSolver {
    TransportSolver::new(
        SpatialGrid::unit_square(n).unwrap(),
        AngularGrid::new(na).unwrap(),
        lin(n),
    )
    .unwrap()
}

fn bump(background: f64, amplitude: f64, c: [f64; 2]) -> FieldSpec {
    FieldSpec::GaussianInclusions {
        background,
        amplitude,
        inclusions: vec![Inclusion {
            center: c,
            width: 0.15,
        }],
    }
}

fn smooth(sa: f64, sb: f64, ss: f64) -> Phantom {
    Phantom {
        sigma_a: bump(sa, 0.5 * sa, [0.4, 0.6]),
        sigma_b: bump(sb, 0.5 * sb, [0.6, 0.4]),
        sigma_s: FieldSpec::constant(ss),
        kernel: KernelProfile::Isotropic,
        sigma_b_cutoff: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn linear_solution_is_bounded_positive_and_monotone_in_absorption(
        sa in 0.2f64..2.0, ss in 0.0f64..3.0, extra in 0.0f64..1.0, g in 0.1f64..2.0
    ) {
        let s = solver(10, 8);
        let c = smooth(sa, 0.0, ss).coefficients(*s.grid(), s.angles()).unwrap();
        let src = GeneralSource::Constant(g);
        let u = s.solve_linear(&c.sigma_a, &c, &src).unwrap();
        let b = c.bounds();
        let floor = g * (-(b.sigma_a.upper + b.sigma_s.upper) * s.grid().diam()).exp();
        prop_assert!(u.u.min() > 0.0 && u.u.min() >= floor * (1.0 - 1e-9));
        prop_assert!(u.u.max() <= g * (1.0 + 1e-12));

        let more = c.sigma_a.map(|a| a + extra);
        let v = s.solve_linear(&more, &c, &src).unwrap();
        let slack = 1e-8 * g;
        prop_assert!(u.u.values().iter().zip(v.u.values()).all(|(a, b)| a + slack >= *b));
    }

    #[test]
    fn source_iteration_contracts(sa in 0.2f64..2.0, ss in 0.5f64..4.0) {
        let s = solver(8, 8);
        let c = smooth(sa, 0.0, ss).coefficients(*s.grid(), s.angles()).unwrap();
        let ratio = subcritical_ratio(&c.sigma_a, &c.sigma_s);
        let u = s.solve_linear(&c.sigma_a, &c, &GeneralSource::Constant(1.0)).unwrap();
        for w in u.gap_history.windows(2) {
            prop_assert!(w[1] <= ratio * w[0] * (1.0 + 1e-9) + 1e-14, "{:?} ratio {ratio}", w);
        }
    }

    #[test]
    fn semilinear_is_unique_and_ordered_in_the_source(
        sa in 0.5f64..1.5, sb in 0.05f64..0.5, ss in 0.0f64..2.0, g in 0.2f64..1.0, scale in 0.2f64..0.9
    ) {
        let s = solver(8, 8);
        let c = smooth(sa, sb, ss).coefficients(*s.grid(), s.angles()).unwrap();
        let cfg = SemilinearConfig { inner: lin(8), ..Default::default() };
        let b = *c.bounds();
        let g = g.min(b.sigma_a.lower / b.sigma_b.upper);
        let (hi, lo) = (GeneralSource::Constant(g), GeneralSource::Constant(g * scale));
        let a = solve_semilinear(&s, &c, &hi, &cfg, &StartingPoint::Zero).unwrap();
        let z = solve_semilinear(&s, &c, &hi, &cfg, &StartingPoint::Upper).unwrap();
        prop_assert!(a.average.sup_distance(&z.average) <= 2.0 * cfg.tol_fixed_point);
        let floor = g * (-(b.sigma_a.upper + b.sigma_s.upper + g * b.sigma_b.upper) * s.grid().diam()).exp();
        prop_assert!(a.average.min() >= floor - 1e-8);

        let w = solve_semilinear(&s, &c, &lo, &cfg, &StartingPoint::Zero).unwrap();
        prop_assert!(a.average.values().iter().zip(w.average.values()).all(|(x, y)| x > y));

        let d1 = synthesize(&c, &a.average, "1").unwrap();
        let d2 = synthesize(&c, &w.average, "2").unwrap();
        let top = (b.sigma_a.upper + b.sigma_b.upper * g) * g;
        prop_assert!(d1.h.max() <= top && d1.h.min() >= b.sigma_a.lower * (floor - 1e-8));
        prop_assert!(d1.h.values().iter().zip(d2.h.values()).all(|(x, y)| x > y));
        for cell in 0..c.sigma_a.values().len() {
            let m = a.average.values()[cell];
            let expect = c.sigma_a.values()[cell] * m + c.sigma_b.values()[cell] * m * m;
            prop_assert_eq!(d1.h.values()[cell], expect);
        }
    }
}

fn wide_bump(scattering: f64) -> Phantom {
    Phantom {
        sigma_a: FieldSpec::GaussianInclusions {
            background: 1.0,
            amplitude: 0.5,
            inclusions: vec![Inclusion {
                center: [0.4, 0.6],
                width: 0.3,
            }],
        },
        sigma_b: FieldSpec::constant(0.0),
        sigma_s: FieldSpec::constant(scattering),
        kernel: KernelProfile::Isotropic,
        sigma_b_cutoff: None,
    }
}

/// Averages on grids refined by a factor of three, so coarse centers are
/// also fine centers and no interpolation crosses the corner kinks.
fn averages(phantom: &Phantom, sizes: &[usize]) -> Vec<ScalarField> {
    let angles = AngularGrid::new(8).unwrap();
    sizes
        .iter()
        .map(|&n| {
            let g = SpatialGrid::unit_square(n).unwrap();
            let c = phantom.coefficients(g, &angles).unwrap();
            let s = TransportSolver::new(g, angles.clone(), lin(n)).unwrap();
            s.solve_linear(&c.sigma_a, &c, &GeneralSource::Constant(1.0))
                .unwrap()
                .average()
        })
        .collect()
}

fn sup_at(coarse: &SpatialGrid, a: &ScalarField, b: &ScalarField) -> f64 {
    coarse
        .centers()
        .map(|p| (a.interpolate(p) - b.interpolate(p)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn pure_absorption_matches_a_fine_quadrature_at_second_order() {
    let phantom = wide_bump(0.0);
    let angles = AngularGrid::new(8).unwrap();
    let coarse = SpatialGrid::unit_square(8).unwrap();
    let exact: Vec<f64> = coarse
        .centers()
        .map(|x| {
            let mean: f64 = angles
                .directions()
                .iter()
                .map(|&v| {
                    let tau = coarse.trace_to_boundary(x, v).unwrap().tau_minus;
                    let m = 20_000;
                    let ds = tau / m as f64;
                    let depth: f64 = (0..=m)
                        .map(|k| {
                            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
                            w * ds * phantom.sigma_a.eval(&coarse, x + v * (-(k as f64) * ds))
                        })
                        .sum();
                    (-depth).exp()
                })
                .sum();
            mean / angles.len() as f64
        })
        .collect();
    let errs: Vec<f64> = averages(&phantom, &[24, 72, 216])
        .iter()
        .map(|f| {
            coarse
                .centers()
                .zip(&exact)
                .map(|(p, e)| (f.interpolate(p) - e).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let order = (errs[1] / errs[2]).ln() / 3f64.ln();
    assert!(
        errs[0] > errs[1] && order > 1.8,
        "errors {errs:?}, observed order {order}"
    );
}

#[test]
fn scattering_solve_converges_at_second_order() {
    let f = averages(&wide_bump(0.5), &[24, 72, 216]);
    let coarse = *f[0].grid();
    let d = [sup_at(&coarse, &f[0], &f[1]), sup_at(&coarse, &f[1], &f[2])];
    let order = (d[0] / d[1]).ln() / 3f64.ln();
    assert!(order > 1.8, "differences {d:?}, observed order {order}");
}

#[test]
fn collimated_recovery_identities() {
    let n = 32;
    let grid = SpatialGrid::unit_square(n).unwrap();
    let angles = AngularGrid::new(4).unwrap();
    let c = smooth(1.0, 0.5, 0.0).coefficients(grid, &angles).unwrap();
    let cfg = SemilinearConfig {
        tol_fixed_point: 1e-12,
        inner: lin(n),
        ..Default::default()
    };
    let v = Vec2::from_angle(0.0);
    let (s1, s2) = (
        CollimatedSource::constant(1.0, v).unwrap(),
        CollimatedSource::constant(0.6, v).unwrap(),
    );
    let u1 = forward_average(&c, &angles, &Illumination::Collimated(s1.clone()), &cfg).unwrap();
    let u2 = forward_average(&c, &angles, &Illumination::Collimated(s2.clone()), &cfg).unwrap();
    let (d1, d2) = (
        synthesize(&c, &u1, "1").unwrap(),
        synthesize(&c, &u2, "2").unwrap(),
    );
    let p1 = recover_density_collimated(&d1, &s1, 0.5 / n as f64).unwrap();
    let p2 = recover_density_collimated(&d2, &s2, 0.5 / n as f64).unwrap();
    let pair = solve_pointwise_pair(&p1, &p2, &d1, &d2, default_det_floor(1.0, 0.6)).unwrap();
    let mut density_err = 0.0f64;
    for cell in 0..grid.len() {
        if pair.mask[cell] {
            continue;
        }
        let (a, b) = (pair.sigma_a.values()[cell], pair.sigma_b.values()[cell]);
        for (p, d) in [(&p1, &d1), (&p2, &d2)] {
            let phi = p.phi.values()[cell];
            let h = d.h.values()[cell];
            assert!((a * phi + b * phi * phi - h).abs() <= 1e-12 * h.max(1.0));
        }
        assert!(p1.phi.values()[cell] > p2.phi.values()[cell]);
        density_err = density_err.max((p1.phi.values()[cell] - u1.values()[cell]).abs());
    }
    assert!(density_err < 5e-4, "{density_err}");
}

#[test]
fn scattering_recovery_identities() {
    let n = 12;
    let grid = SpatialGrid::unit_square(n).unwrap();
    let angles = AngularGrid::new(8).unwrap();
    let phantom = smooth(1.0, 0.5, 1.0);
    let c = phantom.coefficients(grid, &angles).unwrap();
    let fwd = SemilinearConfig {
        tol_fixed_point: 1e-12,
        inner: lin(n),
        ..Default::default()
    };
    let solver = TransportSolver::new(grid, angles.clone(), lin(n)).unwrap();
    let known = KnownScattering::from_coefficients(&c);
    let cfg = ScatterReconConfig::new(c.bounds(), 1.0, lin(n));
    let mut recoveries = Vec::new();
    for g in [1.0, 0.4] {
        let src = GeneralSource::Constant(g);
        let u = solve_semilinear(&solver, &c, &src, &fwd, &StartingPoint::Zero)
            .unwrap()
            .average;
        let d = synthesize(&c, &u, "d").unwrap();
        let p = ScatterProblem::new(&solver, &d, &src, &known, &cfg).unwrap();
        let b = p.bracket();
        let inside = b.u_min_avg.zip_map(&b.u_max_avg, |lo, hi| 0.5 * (lo + hi));
        let r = p.recover(&ReconStart::Field(inside)).unwrap();
        assert_eq!(r.bracket_violations, 0);
        if b.eta_below_min {
            assert_eq!(r.late_clamp_activity(), 0);
        }
        for cell in 0..grid.len() {
            if r.clipped[cell] {
                continue;
            }
            let h = d.h.values()[cell];
            assert!(
                (r.sigma_abs.values()[cell] * r.average.values()[cell] - h).abs()
                    <= 1e-12 * h.max(1.0)
            );
        }
        assert!(r.residual <= 1e-8, "{}", r.residual);
        assert!(r.average.sup_distance(&u) <= 1e-7);
        recoveries.push(r);
    }
    let pair =
        pair_from_recoveries(&recoveries[0], &recoveries[1], cfg.default_det_floor()).unwrap();
    for cell in 0..grid.len() {
        if pair.mask[cell] {
            continue;
        }
        for r in &recoveries {
            let target = r.sigma_abs.values()[cell];
            let got = pair.sigma_a.values()[cell]
                + pair.sigma_b.values()[cell] * r.average.values()[cell];
            assert!((got - target).abs() <= 1e-12 * target.max(1.0));
        }
    }
}

#[test]
fn isotropic_histories_are_monotone_and_j_lower_bound_holds() {
    let l = 0.7;
    let n = 14;
    let grid = SpatialGrid::new(l, l, n, n).unwrap();
    let angles = AngularGrid::new(8).unwrap();
    let s = TransportSolver::new(
        grid,
        angles.clone(),
        LinearSolveConfig {
            ray_step: l / n as f64,
            ..Default::default()
        },
    )
    .unwrap();
    let phantom = Phantom {
        sigma_a: FieldSpec::constant(0.3),
        sigma_b: FieldSpec::constant(0.1),
        sigma_s: FieldSpec::constant(0.02),
        kernel: KernelProfile::Isotropic,
        sigma_b_cutoff: None,
    };
    let c = phantom.coefficients(grid, &angles).unwrap();
    let fwd = SemilinearConfig {
        tol_fixed_point: 1e-12,
        inner: *s.config(),
        ..Default::default()
    };
    let u = solve_semilinear(
        &s,
        &c,
        &GeneralSource::Constant(1.0),
        &fwd,
        &StartingPoint::Zero,
    )
    .unwrap();
    let d = synthesize(&c, &u.average, "iso").unwrap();
    let data = IsotropicData {
        h: &d.h,
        sigma_s: &c.sigma_s,
        g_bar: 1.0,
    };
    let eta = d.h.map(|v| v / (0.3 + 0.1));
    let from_top = iterate_c(&s, &data, &ScalarField::constant(grid, 1.0), 1e-10, 500).unwrap();
    let from_eta = iterate_c(&s, &data, &eta, 1e-10, 500).unwrap();
    assert!(from_top.non_increasing && from_eta.non_decreasing);
    let cert = uniqueness_certificate(&s, &data, &eta, 1e-10, 500).unwrap();
    assert!(cert.unique);
    assert!(from_top.fixed_point.sup_distance(&from_eta.fixed_point) <= 2e-10);
    assert_eq!(cert.j_bound_violations, 0);
    let j = apply_j(&s, &data, &from_top.fixed_point).unwrap();
    let mu_h = cert.constants.mu_h;
    for (jv, hv) in j.values().iter().zip(from_top.fixed_point.values()) {
        assert!(*jv >= (hv - mu_h) / (1.0 - mu_h) - 1e-9);
    }
}
