//! Analytic coefficient phantoms. A phantom is a resolution-independent
//! description that can be sampled on any grid, which is what refined-grid
//! data synthesis needs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::fields::{
    build_kernel, Bounds, CoefficientBounds, CoefficientSet, KernelProfile, ScalarField,
};
use crate::geometry::{AngularGrid, SpatialGrid, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub center: [f64; 2],
    pub width: f64,
}

/// One coefficient as a function of position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    /// `b + A (1 − Π(1 − G_i))` with Gaussian bumps `G_i ∈ (0, 1]`; values
    /// stay in `[b, b + A]` (or `[b + A, b]` for negative `A`).
    GaussianInclusions {
        background: f64,
        amplitude: f64,
        inclusions: Vec<Inclusion>,
    },
    /// Alternating `low`/`high` tiles, `tiles × tiles` over the domain.
    Checkerboard {
        low: f64,
        high: f64,
        tiles: usize,
    },
}

impl FieldSpec {
    pub fn constant(value: f64) -> Self {
        FieldSpec::Constant { value }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let fail = |msg: String| Err(TransportError::Parameter(format!("{name}: {msg}")));
        let finite = |v: f64| v.is_finite();
        match self {
            FieldSpec::Constant { value } if !finite(*value) => fail("value must be finite".into()),
            FieldSpec::GaussianInclusions {
                background,
                amplitude,
                inclusions,
            } => {
                if !finite(*background) || !finite(*amplitude) {
                    return fail("background and amplitude must be finite".into());
                }
                for inc in inclusions {
                    if !(inc.width.is_finite() && inc.width > 0.0)
                        || !inc.center.iter().all(|c| c.is_finite())
                    {
                        return fail(format!("invalid inclusion {inc:?}"));
                    }
                }
                self.check_nonnegative(name)
            }
            FieldSpec::Checkerboard { low, high, tiles } => {
                if !finite(*low) || !finite(*high) || low > high {
                    return fail(format!("need finite low <= high, got [{low}, {high}]"));
                }
                if *tiles < 2 {
                    return fail("checkerboard needs at least 2 tiles per side".into());
                }
                self.check_nonnegative(name)
            }
            _ => self.check_nonnegative(name),
        }
    }

    fn check_nonnegative(&self, name: &str) -> Result<()> {
        let (lo, _) = self.range();
        if lo < 0.0 {
            return Err(TransportError::Parameter(format!(
                "{name} takes negative values (min {lo})"
            )));
        }
        Ok(())
    }

    /// Declared `[min, max]`.
    pub fn range(&self) -> (f64, f64) {
        match self {
            FieldSpec::Constant { value } => (*value, *value),
            FieldSpec::GaussianInclusions {
                background,
                amplitude,
                inclusions,
            } => {
                if inclusions.is_empty() {
                    (*background, *background)
                } else {
                    let end = background + amplitude;
                    (background.min(end), background.max(end))
                }
            }
            FieldSpec::Checkerboard { low, high, .. } => (*low, *high),
        }
    }

    pub fn eval(&self, grid: &SpatialGrid, p: Vec2) -> f64 {
        match self {
            FieldSpec::Constant { value } => *value,
            FieldSpec::GaussianInclusions {
                background,
                amplitude,
                inclusions,
            } => {
                let miss: f64 = inclusions
                    .iter()
                    .map(|inc| {
                        let d2 = (p.x - inc.center[0]).powi(2) + (p.y - inc.center[1]).powi(2);
                        1.0 - (-d2 / (2.0 * inc.width * inc.width)).exp()
                    })
                    .product();
                background + amplitude * (1.0 - miss)
            }
            FieldSpec::Checkerboard { low, high, tiles } => {
                let n = *tiles as f64;
                let i = ((p.x / grid.lx() * n).floor() as usize).min(tiles - 1);
                let j = ((p.y / grid.ly() * n).floor() as usize).min(tiles - 1);
                if (i + j).is_multiple_of(2) {
                    *low
                } else {
                    *high
                }
            }
        }
    }

    pub fn sample(&self, grid: SpatialGrid) -> ScalarField {
        ScalarField::from_fn(grid, |p| self.eval(&grid, p))
    }
}

/// Smooth switch-off of `σb` near a boundary point: the factor is 0 within
/// `radius` of `center`, 1 beyond `2·radius`, and `3s² − 2s³` in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cutoff {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Cutoff {
    pub fn factor(&self, p: Vec2) -> f64 {
        let r = Vec2::new(self.center[0], self.center[1]).distance(p);
        let s = ((r - self.radius) / self.radius).clamp(0.0, 1.0);
        s * s * (3.0 - 2.0 * s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phantom {
    pub sigma_a: FieldSpec,
    pub sigma_b: FieldSpec,
    pub sigma_s: FieldSpec,
    #[serde(default = "isotropic")]
    pub kernel: KernelProfile,
    #[serde(default)]
    pub sigma_b_cutoff: Option<Cutoff>,
}

fn isotropic() -> KernelProfile {
    KernelProfile::Isotropic
}

impl Phantom {
    pub fn constant(sigma_a: f64, sigma_b: f64, sigma_s: f64) -> Self {
        Phantom {
            sigma_a: FieldSpec::constant(sigma_a),
            sigma_b: FieldSpec::constant(sigma_b),
            sigma_s: FieldSpec::constant(sigma_s),
            kernel: KernelProfile::Isotropic,
            sigma_b_cutoff: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma_a.validate("sigma_a")?;
        self.sigma_b.validate("sigma_b")?;
        self.sigma_s.validate("sigma_s")?;
        if let Some(c) = &self.sigma_b_cutoff {
            if !(c.radius.is_finite() && c.radius > 0.0) {
                return Err(TransportError::Parameter(format!(
                    "cutoff radius must be positive, got {}",
                    c.radius
                )));
            }
        }
        let (lo, _) = self.sigma_a.range();
        if lo <= 0.0 {
            return Err(TransportError::Parameter(
                "sigma_a needs a positive lower bound".into(),
            ));
        }
        Ok(())
    }

    pub fn declared_bounds(&self) -> Result<CoefficientBounds> {
        let b = |f: &FieldSpec| {
            let (lo, hi) = f.range();
            Bounds::new(lo, hi)
        };
        let mut sigma_b = b(&self.sigma_b)?;
        if self.sigma_b_cutoff.is_some() {
            sigma_b.lower = 0.0;
        }
        Ok(CoefficientBounds {
            sigma_a: b(&self.sigma_a)?,
            sigma_b,
            sigma_s: b(&self.sigma_s)?,
        })
    }

    pub fn sigma_b_at(&self, grid: &SpatialGrid, p: Vec2) -> f64 {
        let v = self.sigma_b.eval(grid, p);
        match &self.sigma_b_cutoff {
            Some(c) => v * c.factor(p),
            None => v,
        }
    }

    /// Cell-center samples with the declared bounds attached.
    pub fn coefficients(&self, grid: SpatialGrid, angles: &AngularGrid) -> Result<CoefficientSet> {
        self.validate()?;
        let sigma_b = ScalarField::from_fn(grid, |p| self.sigma_b_at(&grid, p));
        CoefficientSet::with_bounds(
            self.sigma_a.sample(grid),
            sigma_b,
            self.sigma_s.sample(grid),
            build_kernel(self.kernel, angles)?,
            self.declared_bounds()?,
        )
    }
}
