//! Randomized admissible phantoms and the property checks run on each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpa_transport::fields::{KernelProfile, ScalarField};
use tpa_transport::forward::{
    check_source_smallness, solve_semilinear, SemilinearConfig, StartingPoint,
};
use tpa_transport::geometry::{AngularGrid, SpatialGrid};
use tpa_transport::phantom::{FieldSpec, Inclusion, Phantom};
use tpa_transport::synthesis::{add_noise, stream_seed, synthesize, InternalDatum};
use tpa_transport::transport::{GeneralSource, TransportSolver};

use crate::error::CliResult;
use crate::report::Check;

/// Relative slack on `u ≤ ḡ` for floating-point rounding.
const UPPER_SLACK: f64 = 1e-12;

/// Absolute slack on the lower bound of `⟨u⟩`.
const LOWER_SLACK: f64 = 1e-8;

/// Noise level of the datum written per case.
const CASE_NOISE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub phantom: Phantom,
    /// Face values left, right, bottom, top.
    pub faces: [f64; 4],
}

impl SuiteCase {
    pub fn source(&self) -> GeneralSource {
        GeneralSource::Faces(self.faces)
    }
}

fn bumps(rng: &mut ChaCha8Rng) -> Vec<Inclusion> {
    (0..rng.gen_range(1..=2))
        .map(|_| Inclusion {
            center: [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)],
            width: rng.gen_range(0.08..0.2),
        })
        .collect()
}

/// `size` smooth phantoms with boundary sources that pass the smallness
/// test; every other case scatters.
pub fn suite(seed: u64, size: usize) -> CliResult<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "verify-suite"));
    let mut cases = Vec::with_capacity(size);
    for k in 0..size {
        let (a0, a1) = (rng.gen_range(0.5..1.5), rng.gen_range(0.0..0.5));
        let (b0, b1) = (rng.gen_range(0.05..0.5), rng.gen_range(0.0..0.3));
        let s = if k % 2 == 1 {
            rng.gen_range(0.5..2.0)
        } else {
            0.0
        };
        let phantom = Phantom {
            sigma_a: FieldSpec::GaussianInclusions {
                background: a0,
                amplitude: a1,
                inclusions: bumps(&mut rng),
            },
            sigma_b: FieldSpec::GaussianInclusions {
                background: b0,
                amplitude: b1,
                inclusions: bumps(&mut rng),
            },
            sigma_s: FieldSpec::constant(s),
            kernel: KernelProfile::Isotropic,
            sigma_b_cutoff: None,
        };
        phantom.validate()?;
        let g_max = (rng.gen_range(0.5..1.0) * a0 / (b0 + b1)).min(1.0);
        let mut faces = [0.0; 4];
        for f in &mut faces {
            *f = g_max * rng.gen_range(0.5..1.0);
        }
        faces[rng.gen_range(0..4)] = g_max;
        cases.push(SuiteCase {
            name: format!("case{k:02}"),
            phantom,
            faces,
        });
    }
    Ok(cases)
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub checks: Vec<Check>,
    pub average: ScalarField,
    pub noisy: InternalDatum,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Admissibility, maximum principle, positivity bound, two-start
/// uniqueness, the linear special case, and CSV round trip.
pub fn run_case(
    case: &SuiteCase,
    grid: SpatialGrid,
    angles: &AngularGrid,
    cfg: &SemilinearConfig,
    seed: u64,
) -> CliResult<CaseOutcome> {
    let coeffs = case.phantom.coefficients(grid, angles)?;
    let g = case.source();
    let solver = TransportSolver::new(grid, angles.clone(), cfg.inner)?;
    let mut checks = Vec::new();

    let adm = check_source_smallness(&g, &coeffs);
    checks.push(check(
        "admissible source",
        adm.smallness_ok,
        format!(
            "g in [{}, {}], clause {:?}",
            adm.g_lower, adm.g_upper, adm.clause
        ),
    ));

    let from_zero = solve_semilinear(&solver, &coeffs, &g, cfg, &StartingPoint::Zero)?;
    let from_upper = solve_semilinear(&solver, &coeffs, &g, cfg, &StartingPoint::Upper)?;
    let (g_lo, g_hi) = (g.lower(), g.upper());
    let (umin, umax) = (from_zero.u.min(), from_zero.u.max());
    checks.push(check(
        "maximum principle",
        umin > 0.0 && umax <= g_hi * (1.0 + UPPER_SLACK),
        format!("u in [{umin:e}, {umax:e}], g_upper {g_hi}"),
    ));

    let b = coeffs.bounds();
    let floor =
        g_lo * (-(b.sigma_a.upper + b.sigma_s.upper + g_hi * b.sigma_b.upper) * grid.diam()).exp();
    let avg_min = from_zero.average.min();
    checks.push(check(
        "positivity bound",
        avg_min >= floor - LOWER_SLACK,
        format!("min <u> {avg_min:e}, bound {floor:e}"),
    ));

    let gap = from_zero.average.sup_distance(&from_upper.average);
    checks.push(check(
        "two-start uniqueness",
        gap <= 2.0 * cfg.tol_fixed_point,
        format!(
            "sup distance {gap:e}, limit {:e}",
            2.0 * cfg.tol_fixed_point
        ),
    ));

    let linear = coeffs.without_two_photon();
    let semi = solve_semilinear(&solver, &linear, &g, cfg, &StartingPoint::Zero)?;
    let direct = solver.solve_linear(&linear.sigma_a, &linear, &g)?.average();
    let lin_gap = semi.average.sup_distance(&direct);
    checks.push(check(
        "linear special case",
        lin_gap <= cfg.tol_fixed_point,
        format!("sup distance to the direct linear solve {lin_gap:e}"),
    ));

    let mut buf = Vec::new();
    from_zero.average.write_csv(&mut buf)?;
    let back = ScalarField::read_csv(buf.as_slice(), grid, "memory")?;
    checks.push(check(
        "csv round trip",
        back == from_zero.average,
        "reloaded field compared for equality".into(),
    ));

    let clean = synthesize(&coeffs, &from_zero.average, &case.name)?;
    let noisy = add_noise(
        &clean,
        CASE_NOISE,
        stream_seed(seed, &format!("noise-{}", case.name)),
    )?;
    Ok(CaseOutcome {
        checks,
        average: from_zero.average,
        noisy,
    })
}
