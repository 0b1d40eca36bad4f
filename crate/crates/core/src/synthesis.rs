//! Internal data `H = σa⟨u⟩ + σb⟨u⟩²`, optional multiplicative noise, and
//! synthesis on a refined grid followed by block restriction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::fields::{CoefficientSet, ScalarField};
use crate::forward::{
    solve_point_source, solve_semilinear, solve_semilinear_collimated, CollimatedSource,
    PointSource, SemilinearConfig, StartingPoint,
};
use crate::geometry::{AngularGrid, SpatialGrid};
use crate::phantom::Phantom;
use crate::transport::{GeneralSource, TransportSolver};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub grid: SpatialGrid,
    pub noise_level: f64,
    pub seed: Option<u64>,
    /// Refinement factor of the forward grid (1 = same grid).
    pub refinement: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InternalDatum {
    pub h: ScalarField,
    pub provenance: Provenance,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl InternalDatum {
    pub fn grid(&self) -> &SpatialGrid {
        self.h.grid()
    }

    /// Writes the field CSV and a `.json` provenance sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.h.save_csv(path)?;
        let side = sidecar(path);
        let text = serde_json::to_string_pretty(&self.provenance)
            .map_err(|e| TransportError::format(&side, e.to_string()))?;
        fs::write(&side, text).map_err(|e| TransportError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| TransportError::io(&side, e))?;
        let provenance: Provenance = serde_json::from_str(&text)
            .map_err(|e| TransportError::format(&side, e.to_string()))?;
        let h = ScalarField::load_csv(path, provenance.grid)?;
        Ok(InternalDatum { h, provenance })
    }
}

/// `H = σa⟨u⟩ + σb⟨u⟩²` on the coefficient grid.
pub fn synthesize(
    coeffs: &CoefficientSet,
    u_avg: &ScalarField,
    source_id: &str,
) -> Result<InternalDatum> {
    if u_avg.grid() != coeffs.grid() {
        return Err(TransportError::Validation(
            "density and coefficients live on different grids".into(),
        ));
    }
    if u_avg.min() < 0.0 {
        return Err(TransportError::Validation(format!(
            "density must be non-negative, min is {}",
            u_avg.min()
        )));
    }
    let lin = coeffs.sigma_a.zip_map(u_avg, |a, u| a * u);
    let quad = coeffs.sigma_b.zip_map(u_avg, |b, u| b * u * u);
    Ok(InternalDatum {
        h: lin.zip_map(&quad, |l, q| l + q),
        provenance: Provenance {
            source_id: source_id.to_string(),
            grid: *coeffs.grid(),
            noise_level: 0.0,
            seed: None,
            refinement: 1,
        },
    })
}

/// `H′ = H (1 + level ξ)` with `ξ` uniform on `[−1, 1]`, drawn in cell order
/// from a ChaCha8 stream seeded by `seed`.
pub fn add_noise(datum: &InternalDatum, level: f64, seed: u64) -> Result<InternalDatum> {
    if !(level.is_finite() && level >= 0.0) {
        return Err(TransportError::Parameter(format!(
            "noise level must be >= 0, got {level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = datum.h.clone();
    if level > 0.0 {
        for v in h.values_mut() {
            let xi: f64 = rng.gen_range(-1.0..=1.0);
            *v *= 1.0 + level * xi;
        }
    }
    let mut provenance = datum.provenance.clone();
    provenance.noise_level = level;
    provenance.seed = Some(seed);
    Ok(InternalDatum { h, provenance })
}

/// Derives an independent seed for a named random stream.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the base seed by splitmix64.
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ hash;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub enum Illumination {
    Boundary(GeneralSource),
    Collimated(CollimatedSource),
    Point(PointSource),
}

/// `⟨u⟩` of the semilinear forward problem for any illumination type.
pub fn forward_average(
    coeffs: &CoefficientSet,
    angles: &AngularGrid,
    illumination: &Illumination,
    cfg: &SemilinearConfig,
) -> Result<ScalarField> {
    match illumination {
        Illumination::Point(p) => Ok(solve_point_source(coeffs, p, cfg)?.average),
        Illumination::Boundary(g) => {
            let solver = TransportSolver::new(*coeffs.grid(), angles.clone(), cfg.inner)?;
            Ok(solve_semilinear(&solver, coeffs, g, cfg, &StartingPoint::Zero)?.average)
        }
        Illumination::Collimated(c) => {
            let solver = TransportSolver::new(*coeffs.grid(), angles.clone(), cfg.inner)?;
            Ok(
                solve_semilinear_collimated(&solver, coeffs, c, cfg, &StartingPoint::Zero)?
                    .average(),
            )
        }
    }
}

/// Forward-solves on `grid` refined by `factor` (cells and ray step), forms
/// `H` there, and block-averages it back onto `grid`.
pub fn synthesize_on_refined(
    phantom: &Phantom,
    grid: SpatialGrid,
    angles: &AngularGrid,
    illumination: &Illumination,
    cfg: &SemilinearConfig,
    factor: usize,
    source_id: &str,
) -> Result<InternalDatum> {
    if factor < 2 {
        return Err(TransportError::Parameter(format!(
            "refinement factor must be >= 2, got {factor}"
        )));
    }
    let fine = grid.refine(factor)?;
    let mut fine_cfg = *cfg;
    fine_cfg.inner.ray_step /= factor as f64;
    let coeffs = phantom.coefficients(fine, angles)?;
    let u = forward_average(&coeffs, angles, illumination, &fine_cfg)?;
    let fine_datum = synthesize(&coeffs, &u, source_id)?;
    Ok(InternalDatum {
        h: fine_datum.h.restrict(factor)?,
        provenance: Provenance {
            grid,
            refinement: factor,
            ..fine_datum.provenance
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ScatteringKernel;
    use approx::assert_abs_diff_eq;

    fn coeffs(g: SpatialGrid, sa: f64, sb: f64) -> CoefficientSet {
        let a = AngularGrid::new(4).unwrap();
        CoefficientSet::new(
            ScalarField::constant(g, sa),
            ScalarField::constant(g, sb),
            ScalarField::zeros(g),
            ScatteringKernel::isotropic(&a),
        )
        .unwrap()
    }

    #[test]
    fn datum_arithmetic() {
        let g = SpatialGrid::unit_square(3).unwrap();
        let d = synthesize(&coeffs(g, 1.0, 0.5), &ScalarField::constant(g, 0.2), "s").unwrap();
        for &v in d.h.values() {
            assert_abs_diff_eq!(v, 0.22, epsilon = 1e-15);
        }
        let d = synthesize(&coeffs(g, 1.3, 0.0), &ScalarField::constant(g, 0.2), "s").unwrap();
        assert_abs_diff_eq!(d.h.max(), 1.3 * 0.2, epsilon = 1e-15);
        let d = synthesize(&coeffs(g, 1.0, 0.5), &ScalarField::zeros(g), "s").unwrap();
        assert!(d.h.is_identically_zero());
        assert!(synthesize(&coeffs(g, 1.0, 0.5), &ScalarField::constant(g, -0.1), "s").is_err());
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let g = SpatialGrid::unit_square(16).unwrap();
        let u = ScalarField::from_fn(g, |p| 0.2 + 0.3 * p.x);
        let d = synthesize(&coeffs(g, 1.0, 0.5), &u, "s").unwrap();
        assert_eq!(add_noise(&d, 0.0, 3).unwrap().h, d.h);
        let a = add_noise(&d, 0.01, 7).unwrap();
        let b = add_noise(&d, 0.01, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.h, add_noise(&d, 0.01, 8).unwrap().h);
        assert!(a.h.sup_distance(&d.h) / d.h.sup_norm() <= 0.01);
        assert_eq!(a.provenance.noise_level, 0.01);
        assert!(add_noise(&d, -0.1, 0).is_err());
    }

    #[test]
    fn datum_round_trips_with_sidecar() {
        let g = SpatialGrid::new(1.0, 0.5, 5, 3).unwrap();
        let u = ScalarField::from_fn(g, |p| 0.1 + p.x * p.y);
        let d = add_noise(
            &synthesize(&coeffs(g, 1.0, 0.5), &u, "beam-1").unwrap(),
            0.02,
            11,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h1.csv");
        d.save(&path).unwrap();
        assert!(dir.path().join("h1.json").exists());
        assert_eq!(InternalDatum::load(&path).unwrap(), d);
    }

    #[test]
    fn stream_seeds_differ_by_name() {
        assert_ne!(stream_seed(1, "noise"), stream_seed(1, "jitter"));
        assert_ne!(stream_seed(1, "noise"), stream_seed(2, "noise"));
        assert_eq!(stream_seed(5, "noise"), stream_seed(5, "noise"));
    }

    #[test]
    fn refined_synthesis_of_constant_medium() {
        let g = SpatialGrid::unit_square(16).unwrap();
        let a = AngularGrid::new(8).unwrap();
        let cfg = SemilinearConfig {
            inner: crate::transport::LinearSolveConfig {
                ray_step: 1.0 / 16.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let phantom = Phantom::constant(1.0, 0.0, 0.5);
        let illum = Illumination::Boundary(GeneralSource::Constant(1.0));
        let refined = synthesize_on_refined(&phantom, g, &a, &illum, &cfg, 2, "g").unwrap();
        assert_eq!(refined.provenance.refinement, 2);
        let c = phantom.coefficients(g, &a).unwrap();
        let same = synthesize(&c, &forward_average(&c, &a, &illum, &cfg).unwrap(), "g").unwrap();
        // Cell averaging of a smooth field differs from point values by O(h²).
        assert!(refined.h.sup_distance(&same.h) < 1e-2);

        // With σb = 0 the refined datum is σa times the restricted density.
        let fine = g.refine(2).unwrap();
        let mut fcfg = cfg;
        fcfg.inner.ray_step /= 2.0;
        let u =
            forward_average(&phantom.coefficients(fine, &a).unwrap(), &a, &illum, &fcfg).unwrap();
        assert!(refined.h.sup_distance(&u.restrict(2).unwrap()) < 1e-14);
    }

    #[test]
    fn restricting_constant_data_is_exact() {
        let g = SpatialGrid::unit_square(8).unwrap();
        let h = ScalarField::constant(g, 0.37);
        assert!(h.restrict(4).unwrap().values().iter().all(|&v| v == 0.37));
    }
}
