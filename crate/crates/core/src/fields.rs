//! Scalar and phase-space fields, the discrete scattering operator, and the
//! coefficient bundle that parameterizes a transport problem.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::geometry::{AngularGrid, SpatialGrid};

/// A cell-centered function of position.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: SpatialGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(TransportError::Validation(format!(
                "scalar field has {} values for a grid of {} cells",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(TransportError::Validation(format!(
                "scalar field value at cell {k} is not finite"
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: SpatialGrid, c: f64) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: SpatialGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: SpatialGrid, f: impl Fn(crate::geometry::Vec2) -> f64) -> Self {
        ScalarField {
            grid,
            values: grid.centers().map(f).collect(),
        }
    }

    pub(crate) fn from_vec_unchecked(grid: SpatialGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_identically_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Sup of `|self - other|`.
    pub fn sup_distance(&self, other: &ScalarField) -> f64 {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Discrete L² norm with cell-area weights.
    pub fn l2_norm(&self) -> f64 {
        let area = self.grid.hx() * self.grid.hy();
        (self.values.iter().map(|v| v * v).sum::<f64>() * area).sqrt()
    }

    pub fn interpolate(&self, p: crate::geometry::Vec2) -> f64 {
        self.grid.interpolate(&self.values, p)
    }

    /// Block average onto a grid whose cells are `factor x factor` blocks of
    /// this one.
    pub fn restrict(&self, factor: usize) -> Result<ScalarField> {
        let g = self.grid;
        if factor == 0 || !g.nx().is_multiple_of(factor) || !g.ny().is_multiple_of(factor) {
            return Err(TransportError::Parameter(format!(
                "cannot restrict a {}x{} grid by factor {factor}",
                g.nx(),
                g.ny()
            )));
        }
        let coarse = SpatialGrid::new(g.lx(), g.ly(), g.nx() / factor, g.ny() / factor)?;
        // Deviations from each block's first entry, so constant blocks are exact.
        let mut out = vec![0.0; coarse.len()];
        let scale = 1.0 / (factor * factor) as f64;
        let anchor = |ci: usize, cj: usize| self.values[g.index(ci * factor, cj * factor)];
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                out[coarse.index(i / factor, j / factor)] +=
                    self.values[g.index(i, j)] - anchor(i / factor, j / factor);
            }
        }
        for (c, v) in out.iter_mut().enumerate() {
            let (ci, cj) = coarse.coords(c);
            *v = anchor(ci, cj) + *v * scale;
        }
        Ok(ScalarField::from_vec_unchecked(coarse, out))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "value"]).map_err(csv_err)?;
        for (idx, v) in self.values.iter().enumerate() {
            let c = self.grid.center_of(idx);
            wr.write_record([format!("{:e}", c.x), format!("{:e}", c.y), format!("{v:e}")])
                .map_err(csv_err)?;
        }
        wr.flush()
            .map_err(|e| TransportError::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, grid: SpatialGrid, origin: &str) -> Result<ScalarField> {
        let mut rd = csv::Reader::from_reader(r);
        check_header(&mut rd, &["x", "y", "value"], origin)?;
        let mut values = Vec::with_capacity(grid.len());
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| TransportError::format(origin, e.to_string()))?;
            if row >= grid.len() {
                return Err(TransportError::format(origin, "more rows than grid cells"));
            }
            let f = parse_record(&rec, 3, origin, row)?;
            check_position(&grid, row, f[0], f[1], origin)?;
            values.push(f[2]);
        }
        if values.len() != grid.len() {
            return Err(TransportError::format(
                origin,
                format!("expected {} rows, found {}", grid.len(), values.len()),
            ));
        }
        ScalarField::new(grid, values)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| TransportError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path, grid: SpatialGrid) -> Result<ScalarField> {
        let f = std::fs::File::open(path).map_err(|e| TransportError::io(path, e))?;
        Self::read_csv(
            std::io::BufReader::new(f),
            grid,
            &path.display().to_string(),
        )
    }
}

fn csv_err(e: csv::Error) -> TransportError {
    TransportError::Format {
        path: "<csv writer>".into(),
        message: e.to_string(),
    }
}

fn check_header<R: Read>(rd: &mut csv::Reader<R>, expected: &[&str], origin: &str) -> Result<()> {
    let header = rd
        .headers()
        .map_err(|e| TransportError::format(origin, e.to_string()))?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(TransportError::format(
            origin,
            format!("expected header {:?}, found {:?}", expected, header),
        ));
    }
    Ok(())
}

fn parse_record(rec: &csv::StringRecord, n: usize, origin: &str, row: usize) -> Result<Vec<f64>> {
    if rec.len() != n {
        return Err(TransportError::format(
            origin,
            format!("row {row}: expected {n} columns, found {}", rec.len()),
        ));
    }
    rec.iter()
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| {
                TransportError::format(origin, format!("row {row}: cannot parse {s:?}: {e}"))
            })
        })
        .collect()
}

fn check_position(grid: &SpatialGrid, idx: usize, x: f64, y: f64, origin: &str) -> Result<()> {
    let c = grid.center_of(idx);
    let tol = 1e-9 * grid.hx().min(grid.hy());
    if (c.x - x).abs() > tol || (c.y - y).abs() > tol {
        return Err(TransportError::format(
            origin,
            format!(
                "row {idx}: position ({x}, {y}) does not match cell center ({}, {})",
                c.x, c.y
            ),
        ));
    }
    Ok(())
}

/// Discrete `u(x, v_k)`. Values are stored ordinate-major: entry
/// `k * ncell + cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    grid: SpatialGrid,
    angles: AngularGrid,
    values: Vec<f64>,
}

impl PhaseField {
    pub fn new(grid: SpatialGrid, angles: AngularGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * angles.len() {
            return Err(TransportError::Validation(format!(
                "phase field has {} values, expected {}",
                values.len(),
                grid.len() * angles.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TransportError::Validation(
                "phase field has non-finite values".into(),
            ));
        }
        Ok(PhaseField {
            grid,
            angles,
            values,
        })
    }

    pub fn constant(grid: SpatialGrid, angles: AngularGrid, c: f64) -> Self {
        let n = grid.len() * angles.len();
        PhaseField {
            grid,
            angles,
            values: vec![c; n],
        }
    }

    pub fn zeros(grid: SpatialGrid, angles: AngularGrid) -> Self {
        Self::constant(grid, angles, 0.0)
    }

    /// Field with `u(x, v_k) = f(x, k)`.
    pub fn from_fn(
        grid: SpatialGrid,
        angles: AngularGrid,
        f: impl Fn(crate::geometry::Vec2, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(grid.len() * angles.len());
        for k in 0..angles.len() {
            values.extend(grid.centers().map(|c| f(c, k)));
        }
        PhaseField {
            grid,
            angles,
            values,
        }
    }

    /// Direction-independent field.
    pub fn isotropic(s: &ScalarField, angles: AngularGrid) -> Self {
        let mut values = Vec::with_capacity(s.values.len() * angles.len());
        for _ in 0..angles.len() {
            values.extend_from_slice(&s.values);
        }
        PhaseField {
            grid: s.grid,
            angles,
            values,
        }
    }

    pub(crate) fn from_vec_unchecked(
        grid: SpatialGrid,
        angles: AngularGrid,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(values.len(), grid.len() * angles.len());
        PhaseField {
            grid,
            angles,
            values,
        }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn angles(&self) -> &AngularGrid {
        &self.angles
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn ordinate(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn ordinate_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn at(&self, cell: usize, k: usize) -> f64 {
        self.values[k * self.grid.len() + cell]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_distance(&self, other: &PhaseField) -> f64 {
        assert_eq!(
            self.values.len(),
            other.values.len(),
            "phase fields differ in shape"
        );
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// True when every value is non-negative.
    pub fn is_physical(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn add_scaled(&mut self, other: &PhaseField, s: f64) {
        assert_eq!(
            self.values.len(),
            other.values.len(),
            "phase fields differ in shape"
        );
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += s * b);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "theta", "value"])
            .map_err(csv_err)?;
        for cell in 0..self.grid.len() {
            let c = self.grid.center_of(cell);
            for k in 0..self.angles.len() {
                wr.write_record([
                    format!("{:e}", c.x),
                    format!("{:e}", c.y),
                    format!("{:e}", self.angles.theta(k)),
                    format!("{:e}", self.at(cell, k)),
                ])
                .map_err(csv_err)?;
            }
        }
        wr.flush()
            .map_err(|e| TransportError::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        r: R,
        grid: SpatialGrid,
        angles: AngularGrid,
        origin: &str,
    ) -> Result<PhaseField> {
        let mut rd = csv::Reader::from_reader(r);
        check_header(&mut rd, &["x", "y", "theta", "value"], origin)?;
        let nv = angles.len();
        let total = grid.len() * nv;
        let mut values = vec![0.0; total];
        let mut count = 0;
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| TransportError::format(origin, e.to_string()))?;
            if row >= total {
                return Err(TransportError::format(
                    origin,
                    "more rows than phase-space nodes",
                ));
            }
            let f = parse_record(&rec, 4, origin, row)?;
            let (cell, k) = (row / nv, row % nv);
            check_position(&grid, cell, f[0], f[1], origin)?;
            if (f[2] - angles.theta(k)).abs() > 1e-9 {
                return Err(TransportError::format(
                    origin,
                    format!(
                        "row {row}: angle {} does not match ordinate {}",
                        f[2],
                        angles.theta(k)
                    ),
                ));
            }
            values[k * grid.len() + cell] = f[3];
            count += 1;
        }
        if count != total {
            return Err(TransportError::format(
                origin,
                format!("expected {total} rows, found {count}"),
            ));
        }
        PhaseField::new(grid, angles, values)
    }
}

/// `⟨u⟩(x) = Σ_k w_k u(x, v_k)`.
pub fn angular_average(u: &PhaseField) -> ScalarField {
    let n = u.grid.len();
    let mut out = vec![0.0; n];
    for k in 0..u.angles.len() {
        out.iter_mut().zip(u.ordinate(k)).for_each(|(o, v)| *o += v);
    }
    let w = u.angles.weight();
    out.iter_mut().for_each(|o| *o *= w);
    ScalarField::from_vec_unchecked(u.grid, out)
}

/// Shape of the continuous scattering profile sampled by [`build_kernel`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelProfile {
    Isotropic,
    Peaked { g: f64 },
}

impl KernelProfile {
    fn raw(&self, dtheta: f64) -> f64 {
        match *self {
            KernelProfile::Isotropic => 1.0,
            KernelProfile::Peaked { g } => (1.0 - g * g) / (1.0 + g * g - 2.0 * g * dtheta.cos()),
        }
    }
}

/// Discrete symmetric, doubly normalized phase function `Θ_kl`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringKernel {
    n: usize,
    matrix: Vec<f64>,
    profile: Option<KernelProfile>,
    scale: f64,
    lower: f64,
    upper: f64,
    isotropic: bool,
}

const NORMALIZATION_TOL: f64 = 1e-12;

/// Samples the profile on the ordinates and enforces symmetry and unit
/// weighted row sums.
pub fn build_kernel(profile: KernelProfile, angles: &AngularGrid) -> Result<ScatteringKernel> {
    if let KernelProfile::Peaked { g } = profile {
        if !(0.0..1.0).contains(&g) {
            return Err(TransportError::Parameter(format!(
                "kernel anisotropy must lie in [0, 1), got {g}"
            )));
        }
    }
    let n = angles.len();
    let w = angles.weight();
    if matches!(
        profile,
        KernelProfile::Isotropic | KernelProfile::Peaked { g: 0.0 }
    ) {
        return Ok(ScatteringKernel {
            n,
            matrix: vec![1.0; n * n],
            profile: Some(KernelProfile::Isotropic),
            scale: 1.0,
            lower: 1.0,
            upper: 1.0,
            isotropic: true,
        });
    }
    let mut m: Vec<f64> = (0..n * n)
        .map(|kl| profile.raw(angles.theta(kl / n) - angles.theta(kl % n)))
        .collect();
    // first row normalization also fixes the scale used for off-grid directions
    let first_row: f64 = m[..n].iter().sum::<f64>() * w;
    let scale = 1.0 / first_row;
    for k in 0..n {
        let s: f64 = m[k * n..(k + 1) * n].iter().sum::<f64>() * w;
        m[k * n..(k + 1) * n].iter_mut().for_each(|v| *v /= s);
    }
    for k in 0..n {
        for l in k + 1..n {
            let avg = 0.5 * (m[k * n + l] + m[l * n + k]);
            m[k * n + l] = avg;
            m[l * n + k] = avg;
        }
    }
    // symmetric scaling keeps Θ symmetric while driving row sums to one
    for _ in 0..200 {
        let r: Vec<f64> = (0..n)
            .map(|k| m[k * n..(k + 1) * n].iter().sum::<f64>() * w)
            .collect();
        if r.iter().all(|s| (s - 1.0).abs() <= NORMALIZATION_TOL) {
            break;
        }
        for k in 0..n {
            for l in 0..n {
                m[k * n + l] /= (r[k] * r[l]).sqrt();
            }
        }
    }
    ScatteringKernel::assemble(n, m, Some(profile), scale)
}

impl ScatteringKernel {
    /// Kernel from an explicit `n x n` row-major matrix; validates symmetry,
    /// positivity and normalization to 1e-10.
    pub fn from_matrix(angles: &AngularGrid, matrix: Vec<f64>) -> Result<Self> {
        let n = angles.len();
        if matrix.len() != n * n {
            return Err(TransportError::Validation(format!(
                "kernel matrix has {} entries, expected {}",
                matrix.len(),
                n * n
            )));
        }
        ScatteringKernel::assemble(n, matrix, None, 1.0)
    }

    fn assemble(
        n: usize,
        matrix: Vec<f64>,
        profile: Option<KernelProfile>,
        scale: f64,
    ) -> Result<Self> {
        let w = 1.0 / n as f64;
        for k in 0..n {
            for l in 0..n {
                let (a, b) = (matrix[k * n + l], matrix[l * n + k]);
                if !a.is_finite() || (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return Err(TransportError::Validation(format!(
                        "kernel is not symmetric at ({k}, {l})"
                    )));
                }
            }
            let s: f64 = matrix[k * n..(k + 1) * n].iter().sum::<f64>() * w;
            if (s - 1.0).abs() > 1e-10 {
                return Err(TransportError::Validation(format!(
                    "kernel row {k} integrates to {s}, expected 1"
                )));
            }
        }
        let lower = matrix.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = matrix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lower <= 0.0 {
            return Err(TransportError::Validation(format!(
                "kernel minimum {lower} must be positive"
            )));
        }
        let isotropic = matrix.iter().all(|&v| v == 1.0);
        Ok(ScatteringKernel {
            n,
            matrix,
            profile,
            scale,
            lower,
            upper,
            isotropic,
        })
    }

    pub fn isotropic(angles: &AngularGrid) -> Self {
        build_kernel(KernelProfile::Isotropic, angles).expect("isotropic kernel is always valid")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_isotropic(&self) -> bool {
        self.isotropic
    }

    pub fn entry(&self, k: usize, l: usize) -> f64 {
        self.matrix[k * self.n + l]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// θ̲ over the discrete matrix.
    pub fn theta_min(&self) -> f64 {
        self.lower
    }

    /// θ̄ over the discrete matrix.
    pub fn theta_max(&self) -> f64 {
        self.upper
    }

    pub fn profile(&self) -> Option<KernelProfile> {
        self.profile
    }

    /// `Θ(v_k, v')` for an arbitrary direction angle `theta_prime`: exact
    /// matrix column when `v'` is an ordinate, the scaled profile otherwise.
    pub fn beam_column(&self, angles: &AngularGrid, theta_prime: f64) -> Result<Vec<f64>> {
        if self.isotropic {
            return Ok(vec![1.0; self.n]);
        }
        let two_pi = 2.0 * PI;
        let t = theta_prime.rem_euclid(two_pi);
        if let Some(l) = (0..self.n).find(|&l| {
            let d = (angles.theta(l) - t).rem_euclid(two_pi);
            d < 1e-12 || two_pi - d < 1e-12
        }) {
            return Ok((0..self.n).map(|k| self.entry(k, l)).collect());
        }
        match self.profile {
            Some(p) => Ok((0..self.n)
                .map(|k| self.scale * p.raw(angles.theta(k) - t))
                .collect()),
            None => Err(TransportError::Parameter(
                "kernel built from an explicit matrix has no values off the ordinate set".into(),
            )),
        }
    }
}

/// `(K u)(x, v_k) = Σ_l w_l Θ_kl u(x, v_l)`.
pub fn apply_scattering(kernel: &ScatteringKernel, u: &PhaseField) -> PhaseField {
    assert_eq!(
        kernel.n,
        u.angles.len(),
        "kernel and field ordinates differ"
    );
    if kernel.isotropic {
        return PhaseField::isotropic(&angular_average(u), u.angles.clone());
    }
    let n = u.grid.len();
    let nv = kernel.n;
    let w = u.angles.weight();
    let mut out = vec![0.0; n * nv];
    for k in 0..nv {
        let dst = &mut out[k * n..(k + 1) * n];
        for l in 0..nv {
            let c = w * kernel.entry(k, l);
            dst.iter_mut()
                .zip(u.ordinate(l))
                .for_each(|(d, s)| *d += c * s);
        }
    }
    PhaseField::from_vec_unchecked(u.grid, u.angles.clone(), out)
}

/// Declared a-priori bounds `lower <= f <= upper` for one coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower >= 0.0 && lower <= upper) {
            return Err(TransportError::Parameter(format!(
                "bounds must satisfy 0 <= lower <= upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn of(field: &ScalarField) -> Self {
        Bounds {
            lower: field.min(),
            upper: field.max(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub sigma_a: Bounds,
    pub sigma_b: Bounds,
    pub sigma_s: Bounds,
}

/// Absorption, two-photon absorption, and scattering fields plus kernel.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    pub sigma_a: ScalarField,
    pub sigma_b: ScalarField,
    pub sigma_s: ScalarField,
    pub kernel: ScatteringKernel,
    bounds: CoefficientBounds,
}

impl CoefficientSet {
    /// Bundle with bounds taken as the field extrema.
    pub fn new(
        sigma_a: ScalarField,
        sigma_b: ScalarField,
        sigma_s: ScalarField,
        kernel: ScatteringKernel,
    ) -> Result<Self> {
        let bounds = CoefficientBounds {
            sigma_a: Bounds::of(&sigma_a),
            sigma_b: Bounds::of(&sigma_b),
            sigma_s: Bounds::of(&sigma_s),
        };
        Self::with_bounds(sigma_a, sigma_b, sigma_s, kernel, bounds)
    }

    /// Bundle with declared a-priori bounds. `σa` and `σs` need a positive
    /// lower bound unless they vanish identically; `σb` may vanish locally.
    pub fn with_bounds(
        sigma_a: ScalarField,
        sigma_b: ScalarField,
        sigma_s: ScalarField,
        kernel: ScatteringKernel,
        bounds: CoefficientBounds,
    ) -> Result<Self> {
        if sigma_a.grid != sigma_b.grid || sigma_a.grid != sigma_s.grid {
            return Err(TransportError::Validation(
                "coefficient fields live on different grids".into(),
            ));
        }
        for (name, f, b) in [
            ("sigma_a", &sigma_a, bounds.sigma_a),
            ("sigma_b", &sigma_b, bounds.sigma_b),
            ("sigma_s", &sigma_s, bounds.sigma_s),
        ] {
            Bounds::new(b.lower, b.upper)?;
            let slack = 1e-12 * b.upper.max(1.0);
            if f.min() < b.lower - slack || f.max() > b.upper + slack {
                return Err(TransportError::Validation(format!(
                    "{name} range [{}, {}] violates declared bounds [{}, {}]",
                    f.min(),
                    f.max(),
                    b.lower,
                    b.upper
                )));
            }
            if name != "sigma_b" && b.lower <= 0.0 && !f.is_identically_zero() {
                return Err(TransportError::Validation(format!(
                    "{name} needs a positive lower bound unless it vanishes identically"
                )));
            }
        }
        Ok(CoefficientSet {
            sigma_a,
            sigma_b,
            sigma_s,
            kernel,
            bounds,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.sigma_a.grid()
    }

    pub fn bounds(&self) -> &CoefficientBounds {
        &self.bounds
    }

    pub fn non_scattering(&self) -> bool {
        self.sigma_s.is_identically_zero()
    }

    /// Copy with `σb` replaced by zero.
    pub fn without_two_photon(&self) -> CoefficientSet {
        let mut c = self.clone();
        c.sigma_b = ScalarField::zeros(*self.grid());
        c.bounds.sigma_b = Bounds {
            lower: 0.0,
            upper: 0.0,
        };
        c
    }
}
