//! Optical coefficient fields, source phantoms, and acoustic modulation.
//!
//! Fields are analytic: evaluable at arbitrary points so that one
//! definition serves every grid (node and half-point sampling, nested
//! refinements). The diffusion coefficient is either scalar or a 2x2
//! symmetric positive definite tensor.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{EdgeField, Grid2D, NodeClass, NodeField};

/// Scalar function of position, shared and immutable.
#[derive(Clone)]
pub struct ScalarField(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>);

impl ScalarField {
    pub fn new(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c)
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        (self.0)(x, y)
    }

    /// The field `self + c * other`, used to inject perturbations.
    pub fn add_scaled(&self, other: &ScalarField, c: f64) -> Self {
        let a = self.clone();
        let b = other.clone();
        Self::new(move |x, y| a.eval(x, y) + c * b.eval(x, y))
    }

    /// The field `self * m` for a pointwise modulation factor `m`.
    pub fn mul_field(&self, m: &ScalarField) -> Self {
        let a = self.clone();
        let b = m.clone();
        Self::new(move |x, y| a.eval(x, y) * b.eval(x, y))
    }
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ScalarField(..)")
    }
}

/// Symmetric 2x2 tensor value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymTensor2 {
    pub d11: f64,
    pub d12: f64,
    pub d22: f64,
}

impl SymTensor2 {
    pub fn isotropic(d: f64) -> Self {
        Self { d11: d, d12: 0.0, d22: d }
    }

    /// Smaller eigenvalue; positivity of this is the ellipticity check.
    pub fn eig_min(&self) -> f64 {
        let tr = self.d11 + self.d22;
        let disc = ((self.d11 - self.d22) * 0.5).hypot(self.d12);
        0.5 * tr - disc
    }

    /// Distance to the identity in the entrywise max norm.
    pub fn dev_from_identity(&self) -> f64 {
        (self.d11 - 1.0)
            .abs()
            .max((self.d22 - 1.0).abs())
            .max(self.d12.abs())
    }
}

/// Tensor-valued function of position.
#[derive(Clone)]
pub struct TensorField(Arc<dyn Fn(f64, f64) -> SymTensor2 + Send + Sync>);

impl TensorField {
    pub fn new(f: impl Fn(f64, f64) -> SymTensor2 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(t: SymTensor2) -> Self {
        Self::new(move |_, _| t)
    }

    /// R(theta) diag(a, b) R(theta)^T with a, b > 0, constant in space.
    pub fn rotated_diagonal(a: f64, b: f64, theta: f64) -> Self {
        assert!(a > 0.0 && b > 0.0, "axis weights must be positive");
        let (s, c) = theta.sin_cos();
        Self::constant(SymTensor2 {
            d11: a * c * c + b * s * s,
            d12: (a - b) * s * c,
            d22: a * s * s + b * c * c,
        })
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> SymTensor2 {
        (self.0)(x, y)
    }
}

impl std::fmt::Debug for TensorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TensorField(..)")
    }
}

/// Diffusion coefficient, scalar or tensor valued.
#[derive(Clone, Debug)]
pub enum Diffusion {
    Isotropic(ScalarField),
    Anisotropic(TensorField),
}

/// The optical parameters of the medium plus the boundary extrapolation
/// length `ell` and the elasto-optical constant `gamma`.
#[derive(Clone, Debug)]
pub struct OpticalCoefficients {
    pub diffusion: Diffusion,
    pub sigma_a: ScalarField,
    pub gamma: f64,
    pub ell: f64,
}

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_ELL: f64 = 2.0;

impl OpticalCoefficients {
    pub fn isotropic(d: ScalarField, sigma_a: ScalarField) -> Self {
        Self {
            diffusion: Diffusion::Isotropic(d),
            sigma_a,
            gamma: DEFAULT_GAMMA,
            ell: DEFAULT_ELL,
        }
    }

    pub fn scalar_diffusion(&self) -> Option<&ScalarField> {
        match &self.diffusion {
            Diffusion::Isotropic(d) => Some(d),
            Diffusion::Anisotropic(_) => None,
        }
    }
}

/// Bioluminescent source strength.
#[derive(Clone, Debug)]
pub struct SourceField {
    pub field: ScalarField,
    pub support: String,
}

/// Acoustic modulation: amplitude, wave vector, phase. The carrier is
/// cos(q . x + varphi).
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub epsilon: f64,
    pub q: [f64; 2],
    pub varphi: f64,
}

impl ModulationParams {
    pub fn new(epsilon: f64, q: [f64; 2], varphi: f64) -> Self {
        assert!(epsilon >= 0.0, "modulation amplitude must be nonnegative");
        Self { epsilon, q, varphi }
    }

    #[inline]
    pub fn carrier(&self, x: f64, y: f64) -> f64 {
        (self.q[0] * x + self.q[1] * y + self.varphi).cos()
    }
}

/// Modulated coefficients: the acoustic wave scales D by
/// 1 + eps*(2 gamma - 1)*carrier, sigma_a by 1 + eps*(2 gamma + 1)*carrier,
/// and S by 1 + eps*carrier.
pub fn modulate(
    c: &OpticalCoefficients,
    s: &SourceField,
    m: ModulationParams,
) -> (OpticalCoefficients, SourceField) {
    let gamma = c.gamma;
    let factor = move |weight: f64| {
        ScalarField::new(move |x, y| 1.0 + m.epsilon * weight * m.carrier(x, y))
    };
    let diffusion = match &c.diffusion {
        Diffusion::Isotropic(d) => {
            Diffusion::Isotropic(d.mul_field(&factor(2.0 * gamma - 1.0)))
        }
        Diffusion::Anisotropic(t) => {
            let t = t.clone();
            let w = 2.0 * gamma - 1.0;
            Diffusion::Anisotropic(TensorField::new(move |x, y| {
                let f = 1.0 + m.epsilon * w * m.carrier(x, y);
                let v = t.eval(x, y);
                SymTensor2 { d11: f * v.d11, d12: f * v.d12, d22: f * v.d22 }
            }))
        }
    };
    let modulated = OpticalCoefficients {
        diffusion,
        sigma_a: c.sigma_a.mul_field(&factor(2.0 * gamma + 1.0)),
        gamma: c.gamma,
        ell: c.ell,
    };
    let source = SourceField {
        field: s.field.mul_field(&factor(1.0)),
        support: s.support.clone(),
    };
    (modulated, source)
}

/// Sign function with the measure-zero level set mapped to 0, so the
/// discontinuous absorption preset is deterministic on the interface.
#[inline]
pub fn sign_with_zero(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ellipse of the head phantom: intensity, semi-axes, center, rotation.
struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

/// Classic 10-ellipse head phantom on [-1, 1]^2. Intensities add where
/// ellipses overlap; points exactly on an ellipse rim count as inside.
const HEAD_PHANTOM: [Ellipse; 10] = [
    Ellipse { intensity: 2.00, a: 0.6900, b: 0.9200, x0: 0.00, y0: 0.0000, phi_deg: 0.0 },
    Ellipse { intensity: -0.98, a: 0.6624, b: 0.8740, x0: 0.00, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { intensity: -0.02, a: 0.1100, b: 0.3100, x0: 0.22, y0: 0.0000, phi_deg: -18.0 },
    Ellipse { intensity: -0.02, a: 0.1600, b: 0.4100, x0: -0.22, y0: 0.0000, phi_deg: 18.0 },
    Ellipse { intensity: 0.01, a: 0.2100, b: 0.2500, x0: 0.00, y0: 0.3500, phi_deg: 0.0 },
    Ellipse { intensity: 0.01, a: 0.0460, b: 0.0460, x0: 0.00, y0: 0.1000, phi_deg: 0.0 },
    Ellipse { intensity: 0.01, a: 0.0460, b: 0.0460, x0: 0.00, y0: -0.1000, phi_deg: 0.0 },
    Ellipse { intensity: 0.01, a: 0.0460, b: 0.0230, x0: -0.08, y0: -0.6050, phi_deg: 0.0 },
    Ellipse { intensity: 0.01, a: 0.0230, b: 0.0230, x0: 0.00, y0: -0.6050, phi_deg: 0.0 },
    Ellipse { intensity: 0.01, a: 0.0230, b: 0.0460, x0: 0.06, y0: -0.6050, phi_deg: 0.0 },
];

pub fn shepp_logan_phantom() -> ScalarField {
    ScalarField::new(|x, y| {
        let mut v = 0.0;
        for e in &HEAD_PHANTOM {
            let t = e.phi_deg.to_radians();
            let (s, c) = t.sin_cos();
            let xr = (x - e.x0) * c + (y - e.y0) * s;
            let yr = -(x - e.x0) * s + (y - e.y0) * c;
            if (xr / e.a).powi(2) + (yr / e.b).powi(2) <= 1.0 {
                v += e.intensity;
            }
        }
        v
    })
}

/// The two benchmark coefficient sets. Experiment 1 is smooth and
/// low-frequency; experiment 2 has a kinked D and a discontinuous sigma_a.
/// Both use the head phantom as the source.
pub fn experiment_coefficients(exp_id: u32) -> Result<(OpticalCoefficients, SourceField)> {
    let (d, sigma): (ScalarField, ScalarField) = match exp_id {
        1 => (
            ScalarField::new(|x, y| {
                (x + 2.0 * y).cos().powi(2) - 3.0 * (3.0 * x - 4.0 * y).sin().powi(2) + 5.0
            }),
            ScalarField::new(|x, y| (5.0 * x).cos().powi(2) + (5.0 * y).sin().powi(2) + 1.0),
        ),
        2 => (
            ScalarField::new(|x, y| 3.0 - x.abs().max(y.abs())),
            ScalarField::new(|x, y| 1.5 - 0.5 * sign_with_zero(x * x + y * y - 0.8)),
        ),
        other => {
            return Err(Error::InvalidCoefficients(format!(
                "unknown experiment id {other}, expected 1 or 2"
            )))
        }
    };
    Ok((
        OpticalCoefficients::isotropic(d, sigma),
        SourceField {
            field: shepp_logan_phantom(),
            support: "10-ellipse head phantom inside the unit disk".into(),
        },
    ))
}

/// Diffusion samples needed by the assembly stencils: the scalar case needs
/// only edge values; the tensor case needs every component on both edge
/// families plus node samples for diagnostics.
#[derive(Clone, Debug)]
pub enum SampledDiffusion {
    Isotropic(EdgeField),
    Anisotropic(SampledTensor),
}

#[derive(Clone, Debug)]
pub struct SampledTensor {
    /// All three components sampled at x-edge half-points, stored as an
    /// EdgeField each (only the x_edges part is meaningful for `*_x`).
    pub d11_x: EdgeField,
    pub d12_x: EdgeField,
    /// Components at y-edge half-points (only the y_edges part meaningful).
    pub d12_y: EdgeField,
    pub d22_y: EdgeField,
    /// Node samples, kept for hypothesis checks and diagnostics.
    pub at_nodes: Vec<SymTensor2>,
}

#[derive(Clone, Debug)]
pub struct SampledFields {
    pub diffusion: SampledDiffusion,
    pub sigma: NodeField,
    pub source: NodeField,
}

/// Evaluate the coefficient fields on a grid: sigma_a and S at nodes, D
/// directly at the half-points (no averaging from node values).
pub fn sample_fields(
    c: &OpticalCoefficients,
    s: &SourceField,
    grid: Grid2D,
) -> Result<SampledFields> {
    let diffusion = match &c.diffusion {
        Diffusion::Isotropic(d) => {
            let d = d.clone();
            SampledDiffusion::Isotropic(EdgeField::from_fn(grid, move |x, y| d.eval(x, y))?)
        }
        Diffusion::Anisotropic(t) => SampledDiffusion::Anisotropic(sample_tensor(t, grid)?),
    };
    Ok(SampledFields {
        diffusion,
        sigma: NodeField::from_fn(grid, |x, y| c.sigma_a.eval(x, y))?,
        source: NodeField::from_fn(grid, |x, y| s.field.eval(x, y))?,
    })
}

fn sample_tensor(t: &TensorField, grid: Grid2D) -> Result<SampledTensor> {
    let comp = |pick: fn(SymTensor2) -> f64| -> Result<EdgeField> {
        let t = t.clone();
        EdgeField::from_fn(grid, move |x, y| pick(t.eval(x, y)))
    };
    let mut at_nodes = Vec::with_capacity(grid.n());
    for i in 1..=grid.nx {
        for j in 1..=grid.ny {
            at_nodes.push(t.eval(grid.x(i), grid.y(j)));
        }
    }
    // Row-major by node index would interleave with I(i, j); re-order so the
    // vector is indexed by grid.index.
    let mut ordered = vec![SymTensor2::isotropic(0.0); grid.n()];
    let mut it = at_nodes.into_iter();
    for i in 1..=grid.nx {
        for j in 1..=grid.ny {
            ordered[grid.index(i, j)] = it.next().unwrap();
        }
    }
    Ok(SampledTensor {
        d11_x: comp(|v| v.d11)?,
        d12_x: comp(|v| v.d12)?,
        d12_y: comp(|v| v.d12)?,
        d22_y: comp(|v| v.d22)?,
        at_nodes: ordered,
    })
}

/// Outcome of checking the standing assumptions on the coefficients over
/// all grid sample points. Violations are reported, never thrown: the
/// benchmark coefficients themselves violate the boundary identity.
#[derive(Clone, Copy, Debug)]
pub struct HypothesesReport {
    /// Smallest diffusion eigenvalue over nodes and half-points.
    pub min_diffusion_eig: f64,
    /// Smallest absorption sample.
    pub min_absorption: f64,
    /// Largest entrywise deviation of D from the identity on boundary nodes.
    pub max_boundary_identity_dev: f64,
    pub elliptic: bool,
    pub absorption_nonnegative: bool,
    pub boundary_identity: bool,
}

pub fn check_hypotheses(c: &OpticalCoefficients, grid: Grid2D) -> Result<HypothesesReport> {
    let tensor_at = |x: f64, y: f64| -> SymTensor2 {
        match &c.diffusion {
            Diffusion::Isotropic(d) => SymTensor2::isotropic(d.eval(x, y)),
            Diffusion::Anisotropic(t) => t.eval(x, y),
        }
    };
    let mut min_eig = f64::INFINITY;
    let mut min_sigma = f64::INFINITY;
    let mut max_dev = 0.0f64;
    for i in 1..=grid.nx {
        for j in 1..=grid.ny {
            let (x, y) = (grid.x(i), grid.y(j));
            let t = tensor_at(x, y);
            min_eig = min_eig.min(t.eig_min());
            min_sigma = min_sigma.min(c.sigma_a.eval(x, y));
            if grid.classify(i, j) != NodeClass::Interior {
                max_dev = max_dev.max(t.dev_from_identity());
            }
            if i < grid.nx {
                min_eig = min_eig.min(tensor_at(x + 0.5 * grid.dx, y).eig_min());
            }
            if j < grid.ny {
                min_eig = min_eig.min(tensor_at(x, y + 0.5 * grid.dy).eig_min());
            }
        }
    }
    if !(min_eig.is_finite() && min_sigma.is_finite()) {
        return Err(Error::InvalidCoefficients(
            "non-finite coefficient sample".into(),
        ));
    }
    Ok(HypothesesReport {
        min_diffusion_eig: min_eig,
        min_absorption: min_sigma,
        max_boundary_identity_dev: max_dev,
        elliptic: min_eig > 0.0,
        absorption_nonnegative: min_sigma >= 0.0,
        boundary_identity: max_dev <= 1e-12,
    })
}
