//! Named test media and the coefficient block loader.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpa_transport::fields::{
    build_kernel, Bounds, CoefficientBounds, CoefficientSet, KernelProfile, ScalarField,
};
use tpa_transport::geometry::{AngularGrid, SpatialGrid};
use tpa_transport::phantom::{Cutoff, FieldSpec, Inclusion, Phantom};
use tpa_transport::synthesis::stream_seed;

use crate::config::{resolve, CoefficientsBlock, PhantomBlock, PhantomSpec, Triple};
use crate::error::{CliError, CliResult};

fn pick(t: &Triple) -> [f64; 3] {
    [t.sigma_a, t.sigma_b, t.sigma_s]
}

/// Analytic phantom for a named family. Jittered inclusion centers come
/// from the `phantom-jitter` stream of `seed`.
pub fn phantom_of(
    spec: &PhantomSpec,
    kernel: Option<KernelProfile>,
    cutoff: Option<Cutoff>,
    seed: u64,
) -> CliResult<Phantom> {
    let fields: [FieldSpec; 3] = match spec {
        PhantomSpec::Constant {
            sigma_a,
            sigma_b,
            sigma_s,
        } => [*sigma_a, *sigma_b, *sigma_s].map(FieldSpec::constant),
        PhantomSpec::GaussianInclusions {
            background,
            amplitude,
            inclusions,
            jitter,
        } => {
            if !(jitter.is_finite() && *jitter >= 0.0) {
                return Err(CliError::Config(format!(
                    "jitter must be >= 0, got {jitter}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "phantom-jitter"));
            let moved: Vec<Inclusion> = inclusions
                .iter()
                .map(|inc| {
                    let mut c = inc.center;
                    if *jitter > 0.0 {
                        for x in &mut c {
                            *x += rng.gen_range(-*jitter..=*jitter);
                        }
                    }
                    Inclusion {
                        center: c,
                        width: inc.width,
                    }
                })
                .collect();
            let (b, a) = (pick(background), pick(amplitude));
            [0, 1, 2].map(|k| FieldSpec::GaussianInclusions {
                background: b[k],
                amplitude: a[k],
                inclusions: moved.clone(),
            })
        }
        PhantomSpec::Checkerboard { low, high, tiles } => {
            let (lo, hi) = (pick(low), pick(high));
            [0, 1, 2].map(|k| {
                if lo[k] == hi[k] {
                    FieldSpec::constant(lo[k])
                } else {
                    FieldSpec::Checkerboard {
                        low: lo[k],
                        high: hi[k],
                        tiles: *tiles,
                    }
                }
            })
        }
    };
    let [sigma_a, sigma_b, sigma_s] = fields;
    let p = Phantom {
        sigma_a,
        sigma_b,
        sigma_s,
        kernel: kernel.unwrap_or(KernelProfile::Isotropic),
        sigma_b_cutoff: cutoff,
    };
    p.validate()?;
    Ok(p)
}

pub fn phantom_of_block(block: &PhantomBlock, seed: u64) -> CliResult<Phantom> {
    phantom_of(&block.spec, block.kernel, block.sigma_b_cutoff, seed)
}

/// Samples a named phantom on a grid; all fields satisfy the declared
/// construction bounds.
pub fn make_phantom(
    spec: &PhantomSpec,
    grid: SpatialGrid,
    angles: &AngularGrid,
    seed: u64,
) -> CliResult<CoefficientSet> {
    Ok(phantom_of(spec, None, None, seed)?.coefficients(grid, angles)?)
}

/// The coefficients described by a config block. Returns the analytic
/// phantom too when there is one, since refined synthesis needs it.
pub fn load_coefficients(
    block: &CoefficientsBlock,
    grid: SpatialGrid,
    angles: &AngularGrid,
    seed: u64,
    base: &Path,
) -> CliResult<(CoefficientSet, Option<Phantom>)> {
    if let Some(p) = &block.phantom {
        let phantom = phantom_of_block(p, seed)?;
        let c = phantom.coefficients(grid, angles)?;
        let c = match block.bounds {
            Some(b) => rebound(c, b)?,
            None => c,
        };
        return Ok((c, Some(phantom)));
    }
    let f = block
        .files
        .as_ref()
        .ok_or_else(|| CliError::Config("coefficients need `phantom` or `files`".into()))?;
    let load = |p: &Path| ScalarField::load_csv(&resolve(p, base), grid);
    let (sa, sb, ss) = (load(&f.sigma_a)?, load(&f.sigma_b)?, load(&f.sigma_s)?);
    let bounds = block.bounds.unwrap_or(CoefficientBounds {
        sigma_a: Bounds::of(&sa),
        sigma_b: Bounds::of(&sb),
        sigma_s: Bounds::of(&ss),
    });
    let kernel = build_kernel(f.kernel.unwrap_or(KernelProfile::Isotropic), angles)?;
    Ok((
        CoefficientSet::with_bounds(sa, sb, ss, kernel, bounds)?,
        None,
    ))
}

fn rebound(c: CoefficientSet, b: CoefficientBounds) -> CliResult<CoefficientSet> {
    Ok(CoefficientSet::with_bounds(
        c.sigma_a, c.sigma_b, c.sigma_s, c.kernel, b,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SpatialGrid, AngularGrid) {
        (
            SpatialGrid::unit_square(16).unwrap(),
            AngularGrid::new(8).unwrap(),
        )
    }

    fn t(a: f64, b: f64, s: f64) -> Triple {
        Triple {
            sigma_a: a,
            sigma_b: b,
            sigma_s: s,
        }
    }

    #[test]
    fn constant_gives_uniform_fields() {
        let (g, a) = setup();
        let spec = PhantomSpec::Constant {
            sigma_a: 1.0,
            sigma_b: 0.5,
            sigma_s: 2.0,
        };
        let c = make_phantom(&spec, g, &a, 0).unwrap();
        assert!(c.sigma_a.values().iter().all(|&v| v == 1.0));
        assert!(c.sigma_b.values().iter().all(|&v| v == 0.5));
        assert!(c.sigma_s.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn inclusions_stay_in_declared_range() {
        let (g, a) = setup();
        let spec = PhantomSpec::GaussianInclusions {
            background: t(1.0, 0.2, 0.0),
            amplitude: t(0.5, 0.1, 0.0),
            inclusions: vec![Inclusion {
                center: [0.5, 0.5],
                width: 0.1,
            }],
            jitter: 0.05,
        };
        let c = make_phantom(&spec, g, &a, 9).unwrap();
        assert!(c.sigma_a.min() >= 1.0 && c.sigma_a.max() <= 1.5);
        assert_eq!(
            c.bounds().sigma_a,
            Bounds {
                lower: 1.0,
                upper: 1.5
            }
        );
        let again = make_phantom(&spec, g, &a, 9).unwrap();
        assert_eq!(c.sigma_a, again.sigma_a);
        assert_ne!(c.sigma_a, make_phantom(&spec, g, &a, 10).unwrap().sigma_a);
    }

    #[test]
    fn checkerboard_attains_bounds_exactly() {
        let (g, a) = setup();
        let spec = PhantomSpec::Checkerboard {
            low: t(0.5, 0.1, 0.0),
            high: t(1.5, 0.3, 0.0),
            tiles: 4,
        };
        let c = make_phantom(&spec, g, &a, 0).unwrap();
        assert_eq!((c.sigma_a.min(), c.sigma_a.max()), (0.5, 1.5));
        assert_eq!((c.sigma_b.min(), c.sigma_b.max()), (0.1, 0.3));
        assert!(c.non_scattering());
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let (g, a) = setup();
        let bad = PhantomSpec::Constant {
            sigma_a: 1.0,
            sigma_b: -0.5,
            sigma_s: 0.0,
        };
        assert!(make_phantom(&bad, g, &a, 0).is_err());
        let bad = PhantomSpec::Checkerboard {
            low: t(1.5, 0.1, 0.0),
            high: t(0.5, 0.3, 0.0),
            tiles: 4,
        };
        assert!(make_phantom(&bad, g, &a, 0).is_err());
    }
}
