//! Explicit reconstruction of `(σa, σb)` in non-scattering media from two
//! internal data sets, for collimated beams and boundary point sources.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::fields::{CoefficientBounds, ScalarField};
use crate::forward::{CollimatedSource, PointSource};
use crate::geometry::{SpatialGrid, Vec2};
use crate::synthesis::InternalDatum;

/// Densities below this are treated as inconsistent data rather than
/// round-off.
const NEGATIVE_TOLERANCE: f64 = -1e-10;

/// One ray per reconstruction cell: its entry point on the boundary, unit
/// direction pointing into the domain, and the arc length to the cell
/// center.
#[derive(Clone, Debug)]
pub struct RayFamily {
    grid: SpatialGrid,
    entries: Vec<Vec2>,
    directions: Vec<Vec2>,
    lengths: Vec<f64>,
}

impl RayFamily {
    /// Parallel rays along `v`, traced backwards from each cell center.
    pub fn collimated(grid: SpatialGrid, v: Vec2) -> Result<Self> {
        let hits = grid
            .centers()
            .map(|c| grid.trace_to_boundary(c, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(RayFamily {
            grid,
            entries: hits.iter().map(|h| h.point).collect(),
            directions: vec![v; grid.len()],
            lengths: hits.iter().map(|h| h.tau_minus).collect(),
        })
    }

    /// Radial rays from a boundary point.
    pub fn radial(grid: SpatialGrid, origin: Vec2) -> Self {
        let (directions, lengths) = grid
            .centers()
            .map(|c| {
                let d = c - origin;
                let t = d.norm();
                (d * (1.0 / t), t)
            })
            .unzip();
        RayFamily {
            grid,
            entries: vec![origin; grid.len()],
            directions,
            lengths,
        }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn entry(&self, cell: usize) -> Vec2 {
        self.entries[cell]
    }

    pub fn direction(&self, cell: usize) -> Vec2 {
        self.directions[cell]
    }

    pub fn length(&self, cell: usize) -> f64 {
        self.lengths[cell]
    }
}

/// Recovered density `φ̃` with the cells where recovery was declined.
#[derive(Clone, Debug)]
pub struct DensityRecovery {
    pub phi: ScalarField,
    pub mask: Vec<bool>,
    /// Cells whose density came out below `−1e−10`.
    pub inconsistent: usize,
    /// Per-cell `[avg G / G(c), avg G² / G(c)²]` for a density `φ = G P`
    /// with known spreading `G` and smooth `P`; relates the cell-averaged
    /// datum to the center value of `φ`. `None` means both are 1.
    pub cell_moments: Option<Vec<[f64; 2]>>,
}

impl DensityRecovery {
    fn from_values(grid: SpatialGrid, raw: Vec<Option<f64>>) -> Self {
        let mut inconsistent = 0;
        let mut mask = Vec::with_capacity(raw.len());
        let vals = raw
            .into_iter()
            .map(|v| match v {
                Some(p) if p > 0.0 => {
                    mask.push(false);
                    p
                }
                Some(p) => {
                    if p < NEGATIVE_TOLERANCE {
                        inconsistent += 1;
                    }
                    mask.push(true);
                    0.0
                }
                None => {
                    mask.push(true);
                    0.0
                }
            })
            .collect();
        if inconsistent > 0 {
            warn!(
                "{inconsistent} cells have negative recovered density; masked as inconsistent data"
            );
        }
        DensityRecovery {
            phi: ScalarField::from_vec_unchecked(grid, vals),
            mask,
            inconsistent,
            cell_moments: None,
        }
    }
}

fn check_step(step: f64) -> Result<()> {
    if step.is_finite() && step > 0.0 {
        Ok(())
    } else {
        Err(TransportError::Parameter(format!(
            "ray step must be positive, got {step}"
        )))
    }
}

/// `φ̃(t) = 𝔤(x′) − ∫₀ᵗ H(x′ + s v′) ds` by the trapezoid rule on rays
/// sampled backwards from each cell center.
pub fn recover_density_collimated(
    h: &InternalDatum,
    src: &CollimatedSource,
    step: f64,
) -> Result<DensityRecovery> {
    check_step(step)?;
    let grid = *h.grid();
    let family = RayFamily::collimated(grid, src.direction())?;
    let raw = (0..grid.len())
        .into_par_iter()
        .map(|cell| {
            let t = family.length(cell);
            let x = grid.center_of(cell);
            if t == 0.0 {
                return Ok(Some(src.eval(x)));
            }
            let ray = grid.sample_ray(x, src.direction(), step)?;
            let mut integral = 0.0;
            let mut prev = h.h.interpolate(ray.point(0));
            for k in 1..ray.len() {
                let cur = h.h.interpolate(ray.point(k));
                integral += 0.5 * (ray.s[k] - ray.s[k - 1]) * (prev + cur);
                prev = cur;
            }
            Ok(Some(src.eval(family.entry(cell)) - integral))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityRecovery::from_values(grid, raw))
}

/// `φ̃(t) = (𝔤 |n·v| − ∫₀ᵗ s H(x′ + s v) ds) / t` in two dimensions.
///
/// Along a radial ray `|n·v|` is constant, so the integrand is written as
/// `|n·v| Q` with `Q(y) = |y − x′|² H(y) / |n·(y − x′)|`. `Q` removes the
/// geometric spreading and is smooth where `σb` vanishes near the source,
/// so it is what gets interpolated from cell values. Within three cells of
/// the source (at most `exclusion / 2`), where cell data cannot resolve the
/// spreading, `Q` is extrapolated linearly along the ray from samples that
/// stay inside the exclusion radius.
///
/// Masked cells: those closer than `exclusion`, and those touching the
/// source's face, where the density vanishes on part of the cell.
pub fn recover_density_point(
    h: &InternalDatum,
    src: &PointSource,
    exclusion: f64,
    step: f64,
) -> Result<DensityRecovery> {
    check_step(step)?;
    if !(exclusion.is_finite() && exclusion >= 0.0) {
        return Err(TransportError::Parameter(format!(
            "exclusion radius must be >= 0, got {exclusion}"
        )));
    }
    let grid = *h.grid();
    let origin = src.position();
    let normal = src.normal();
    let family = RayFamily::radial(grid, origin);
    let spreading = spreading_moments(&grid, origin, normal, h.provenance.refinement);
    let reduced = reduced_field(h, &spreading, origin, normal);
    let r0 = (3.0 * grid.hx().max(grid.hy())).min(0.5 * exclusion);
    let raw = (0..grid.len())
        .into_par_iter()
        .map(|cell| {
            let t = family.length(cell);
            let c = grid.center_of(cell);
            let face_gap = normal.dot(origin - c);
            let half_cell = 0.5 * (normal.x.abs() * grid.hx() + normal.y.abs() * grid.hy());
            if t < exclusion || face_gap <= half_cell * (1.0 + 1e-9) {
                return Ok(None);
            }
            let v = family.direction(cell);
            let near = r0.min(t);
            let far = (2.0 * r0).min(t);
            let q_near = reduced.interpolate(origin + v * near);
            let q_far = reduced.interpolate(origin + v * far);
            let slope = if far > near {
                (q_far - q_near) / (far - near)
            } else {
                0.0
            };
            let q = |r: f64| {
                if r < near {
                    q_near + (r - near) * slope
                } else {
                    reduced.interpolate(origin + v * r)
                }
            };
            let ray = grid.sample_segment(c, v, t, step)?;
            // Distances from the source at the samples, with r = near inserted.
            let mut r: Vec<f64> = ray.s.iter().map(|s| (t - s).max(0.0)).collect();
            if near < t {
                let k = r.partition_point(|&x| x > near);
                r.insert(k, near);
            }
            let mut integral = 0.0;
            let mut prev = q(r[0]);
            for k in 1..r.len() {
                let cur = q(r[k]);
                integral += 0.5 * (r[k - 1] - r[k]) * (prev + cur);
                prev = cur;
            }
            let cosine = normal.dot(v).abs();
            Ok(Some(cosine * (src.strength() - integral) / t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rec = DensityRecovery::from_values(grid, raw);
    rec.cell_moments = Some(spreading.iter().map(|m| [m.mean, m.square]).collect());
    Ok(rec)
}

/// Center values of `Q = H / G` from cell averages of `H = G Q`, assuming
/// `Q` is locally linear: `avg H = G(c) (m₁ Q(c) + m_x ∂ₓQ + m_y ∂ᵧQ)`.
/// The gradient is taken from the previous estimate and the correction is
/// repeated until it settles; it only matters near the source's face.
fn reduced_field(
    h: &InternalDatum,
    spreading: &[SpreadingMoments],
    origin: Vec2,
    normal: Vec2,
) -> ScalarField {
    let grid = *h.grid();
    let scaled: Vec<f64> =
        h.h.values()
            .iter()
            .enumerate()
            .map(|(cell, v)| {
                let d = grid.center_of(cell) - origin;
                d.dot(d) * v / normal.dot(d).abs()
            })
            .collect();
    let mut q: Vec<f64> = scaled
        .iter()
        .zip(spreading)
        .map(|(s, m)| s / m.mean)
        .collect();
    for _ in 0..50 {
        let (gx, gy) = gradient(&grid, &q);
        let next: Vec<f64> = (0..grid.len())
            .map(|c| {
                let m = &spreading[c];
                (scaled[c] - m.first[0] * gx[c] - m.first[1] * gy[c]) / m.mean
            })
            .collect();
        let change = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        q = next;
        if change <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    ScalarField::from_vec_unchecked(grid, q)
}

/// Central differences, second-order one-sided at the edges.
pub(crate) fn gradient(grid: &SpatialGrid, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let d = |n: usize, h: f64, at: &dyn Fn(usize) -> f64, k: usize| -> f64 {
        if n < 3 {
            (at(1) - at(0)) / h
        } else if k == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if k == n - 1 {
            (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
        } else {
            (at(k + 1) - at(k - 1)) / (2.0 * h)
        }
    };
    let mut gx = vec![0.0; f.len()];
    let mut gy = vec![0.0; f.len()];
    for j in 0..ny {
        for i in 0..nx {
            let c = grid.index(i, j);
            gx[c] = d(nx, grid.hx(), &|ii| f[grid.index(ii, j)], i);
            gy[c] = d(ny, grid.hy(), &|jj| f[grid.index(i, jj)], j);
        }
    }
    (gx, gy)
}

/// Cell moments of the spreading factor `G(y) = |n·(y − x′)| / |y − x′|²`,
/// normalized by its center value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpreadingMoments {
    /// `avg G / G(c)`
    pub mean: f64,
    /// `avg G² / G(c)²`
    pub square: f64,
    /// `avg (G (y − c)) / G(c)`
    pub first: [f64; 2],
}

/// Per-cell spreading moments for data that are block averages of
/// `samples × samples` point values (the datum's refinement factor), using
/// the same sub-cell midpoints. One sample gives the trivial moments.
pub fn spreading_moments(
    grid: &SpatialGrid,
    origin: Vec2,
    normal: Vec2,
    samples: usize,
) -> Vec<SpreadingMoments> {
    let samples = samples.max(1);
    let offsets: Vec<f64> = (0..samples)
        .map(|k| ((k as f64 + 0.5) / samples as f64) - 0.5)
        .collect();
    let w = 1.0 / (samples * samples) as f64;
    let spread = |y: Vec2| {
        let d = y - origin;
        normal.dot(d).abs() / d.dot(d)
    };
    grid.centers()
        .map(|c| {
            let gc = spread(c);
            let mut m = SpreadingMoments {
                mean: 1.0,
                square: 1.0,
                first: [0.0, 0.0],
            };
            if !(gc.is_finite() && gc > 0.0) {
                return m;
            }
            m.mean = 0.0;
            m.square = 0.0;
            for &ox in &offsets {
                for &oy in &offsets {
                    let off = Vec2::new(grid.hx() * ox, grid.hy() * oy);
                    let g = spread(c + off) / gc;
                    m.mean += w * g;
                    m.square += w * g * g;
                    m.first[0] += w * g * off.x;
                    m.first[1] += w * g * off.y;
                }
            }
            m
        })
        .collect()
}

/// Recovered coefficient pair and per-cell diagnostics.
#[derive(Clone, Debug)]
pub struct ReconPair {
    pub sigma_a: ScalarField,
    pub sigma_b: ScalarField,
    /// `|φ₁ − φ₂|`, or `|⟨u₁⟩ − ⟨u₂⟩|` for the scattering pipeline.
    pub conditioning: ScalarField,
    /// `true` where inversion was declined; coefficient values there are 0.
    pub mask: Vec<bool>,
}

impl ReconPair {
    pub fn masked_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn mask_field(&self) -> ScalarField {
        ScalarField::from_vec_unchecked(
            *self.sigma_a.grid(),
            self.mask
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// Unmasked cells where either coefficient leaves its declared bounds.
    pub fn bound_violations(&self, bounds: &CoefficientBounds, slack: f64) -> usize {
        let out = |v: f64, b: crate::fields::Bounds| v < b.lower - slack || v > b.upper + slack;
        (0..self.mask.len())
            .filter(|&c| {
                !self.mask[c]
                    && (out(self.sigma_a.values()[c], bounds.sigma_a)
                        || out(self.sigma_b.values()[c], bounds.sigma_b))
            })
            .count()
    }

    pub fn errors(&self, sigma_a: &ScalarField, sigma_b: &ScalarField) -> Result<ErrorMetrics> {
        Ok(ErrorMetrics {
            sigma_a: FieldError::between(&self.sigma_a, sigma_a, &self.mask)?,
            sigma_b: FieldError::between(&self.sigma_b, sigma_b, &self.mask)?,
            masked_fraction: self.masked_fraction(),
        })
    }
}

/// Error of a recovered field over unmasked cells. Relative errors are
/// normalized by the sup of the truth over the same cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub sup: f64,
    pub l2: f64,
    pub relative_sup: f64,
    pub relative_l2: f64,
}

impl FieldError {
    pub fn between(rec: &ScalarField, truth: &ScalarField, mask: &[bool]) -> Result<Self> {
        if rec.grid() != truth.grid() || mask.len() != rec.values().len() {
            return Err(TransportError::Validation(
                "error metric inputs are not co-registered".into(),
            ));
        }
        let g = rec.grid();
        let area = g.hx() * g.hy();
        let (mut sup, mut l2, mut tsup, mut tl2) = (0.0f64, 0.0, 0.0f64, 0.0);
        for ((&r, &t), &m) in rec.values().iter().zip(truth.values()).zip(mask) {
            if m {
                continue;
            }
            sup = sup.max((r - t).abs());
            l2 += (r - t) * (r - t) * area;
            tsup = tsup.max(t.abs());
            tl2 += t * t * area;
        }
        let rel = |e: f64, n: f64| if n > 0.0 { e / n } else { e };
        Ok(FieldError {
            sup,
            l2: l2.sqrt(),
            relative_sup: rel(sup, tsup),
            relative_l2: rel(l2.sqrt(), tl2.sqrt()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub sigma_a: FieldError,
    pub sigma_b: FieldError,
    pub masked_fraction: f64,
}

fn all_masked(mask: &[bool]) -> Result<()> {
    if mask.iter().all(|&m| m) {
        Err(TransportError::AllMasked(format!(
            "{} cells declined; densities degenerate or too close",
            mask.len()
        )))
    } else {
        Ok(())
    }
}

fn moments(d: &DensityRecovery, cell: usize) -> [f64; 2] {
    d.cell_moments.as_ref().map_or([1.0, 1.0], |m| m[cell])
}

/// Per cell, solves `[φ₁ φ₁²; φ₂ φ₂²][σa; σb] = [H₁; H₂]`, with the columns
/// scaled by the first density's cell moments when present. Cells masked in
/// either density or with `|φ₁ − φ₂| < det_floor` are declined.
pub fn solve_pointwise_pair(
    phi1: &DensityRecovery,
    phi2: &DensityRecovery,
    h1: &InternalDatum,
    h2: &InternalDatum,
    det_floor: f64,
) -> Result<ReconPair> {
    let grid = *phi1.phi.grid();
    if *phi2.phi.grid() != grid || *h1.grid() != grid || *h2.grid() != grid {
        return Err(TransportError::Validation(
            "densities and data are not co-registered".into(),
        ));
    }
    if phi1.cell_moments != phi2.cell_moments {
        return Err(TransportError::Validation(
            "densities come from different source geometries".into(),
        ));
    }
    let n = grid.len();
    let (mut sa, mut sb, mut cond, mut mask) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![false; n]);
    for c in 0..n {
        let (p1, p2) = (phi1.phi.values()[c], phi2.phi.values()[c]);
        let (d1, d2) = (h1.h.values()[c], h2.h.values()[c]);
        cond[c] = (p1 - p2).abs();
        if phi1.mask[c] || phi2.mask[c] || cond[c] < det_floor {
            mask[c] = true;
            continue;
        }
        // Divide each row by φ_j m₁: σa + σb φ_j m₂/m₁ = H_j / (φ_j m₁).
        let [m1, m2] = moments(phi1, c);
        let (r1, r2) = (d1 / (p1 * m1), d2 / (p2 * m1));
        let (q1, q2) = (p1 * m2 / m1, p2 * m2 / m1);
        sb[c] = (r1 - r2) / (q1 - q2);
        sa[c] = r1 - sb[c] * q1;
    }
    all_masked(&mask)?;
    Ok(ReconPair {
        sigma_a: ScalarField::from_vec_unchecked(grid, sa),
        sigma_b: ScalarField::from_vec_unchecked(grid, sb),
        conditioning: ScalarField::from_vec_unchecked(grid, cond),
        mask,
    })
}

/// Default determinant floor `1e−8 (𝔤₁ − 𝔤₂)`.
pub fn default_det_floor(g1: f64, g2: f64) -> f64 {
    1e-8 * (g1 - g2).abs()
}

pub(crate) fn pair_from_parts(
    sigma_a: Vec<f64>,
    sigma_b: Vec<f64>,
    conditioning: Vec<f64>,
    mask: Vec<bool>,
    grid: SpatialGrid,
) -> Result<ReconPair> {
    all_masked(&mask)?;
    Ok(ReconPair {
        sigma_a: ScalarField::from_vec_unchecked(grid, sigma_a),
        sigma_b: ScalarField::from_vec_unchecked(grid, sigma_b),
        conditioning: ScalarField::from_vec_unchecked(grid, conditioning),
        mask,
    })
}
