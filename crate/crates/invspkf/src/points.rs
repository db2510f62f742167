//! Deterministic weighted point sets for Gaussian-weighted integrals:
//! third-degree cubature, per-axis Gauss-Hermite quadrature with tensor
//! extension, and the unscented set. Points are generated once in
//! standardized coordinates and transported affinely to a belief.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::forward::GaussianBelief;
use crate::numerics::{cholesky_sqrt, symm_tridiag_eigen, DEFAULT_CHOLESKY_JITTER};

/// Hard cap on generated points; tensor quadrature grows as `m^n` and this
/// turns silent blowup into an explicit error.
pub const POINT_BUDGET: usize = 100_000;

/// Which deterministic rule generates the points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleKind {
    /// Third-degree spherical-radial rule, `2n` equally weighted points.
    Cubature,
    /// Gauss-Hermite rule with `points_per_axis` nodes per axis, tensorized
    /// to `m^n` points.
    GaussHermite { points_per_axis: usize },
    /// Unscented set of `2n + 1` points with spread controlled by `kappa`.
    Unscented { kappa: f64 },
}

/// Standardized points with their weights.
#[derive(Debug, Clone)]
pub struct PointSet {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A rule bound to a dimension, with its standardized point set built once
/// up front (the expensive quadrature eigendecompositions happen here, not
/// per filter step).
#[derive(Debug, Clone)]
pub struct PointRule {
    kind: RuleKind,
    dim: usize,
    set: PointSet,
}

impl PointRule {
    pub fn new(kind: RuleKind, dim: usize) -> Result<Self> {
        assert!(dim >= 1, "point rules need dimension >= 1");
        let set = match kind {
            RuleKind::Cubature => cubature_rule(dim),
            RuleKind::GaussHermite { points_per_axis } => gauss_hermite_nd(points_per_axis, dim)?,
            RuleKind::Unscented { kappa } => unscented_rule(dim, kappa)?,
        };
        Ok(PointRule { kind, dim, set })
    }

    pub fn cubature(dim: usize) -> Self {
        Self::new(RuleKind::Cubature, dim).expect("cubature rule cannot fail")
    }

    pub fn gauss_hermite(points_per_axis: usize, dim: usize) -> Result<Self> {
        Self::new(RuleKind::GaussHermite { points_per_axis }, dim)
    }

    pub fn unscented(dim: usize, kappa: f64) -> Result<Self> {
        Self::new(RuleKind::Unscented { kappa }, dim)
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set(&self) -> &PointSet {
        &self.set
    }

    /// True when any weight is zero or negative (possible for the unscented
    /// rule); surfaced as a diagnostic by the CLI point dump.
    pub fn has_nonpositive_weight(&self) -> bool {
        self.set.weights.iter().any(|&w| w <= 0.0)
    }
}

/// The `2n` points `±√n·e_i`, each with weight `1/2n`, ordered
/// `+e_1..+e_n, -e_1..-e_n`.
pub fn cubature_rule(n: usize) -> PointSet {
    assert!(n >= 1);
    let scale = (n as f64).sqrt();
    let weight = 1.0 / (2.0 * n as f64);
    let mut points = Vec::with_capacity(2 * n);
    for sign in [1.0, -1.0] {
        for i in 0..n {
            let mut p = DVector::zeros(n);
            p[i] = sign * scale;
            points.push(p);
        }
    }
    PointSet {
        weights: vec![weight; points.len()],
        points,
    }
}

/// Scalar `m`-point Gauss-Hermite rule for the standard Gaussian weight.
///
/// Nodes are `√2` times the eigenvalues of the `m×m` symmetric tridiagonal
/// matrix with zero diagonal and `√(i/2)` on the off-diagonal; each weight
/// is the squared first component of the matching normalized eigenvector.
/// Nodes come out in ascending order.
pub fn gauss_hermite_1d(m: usize) -> Result<PointSet> {
    assert!(m >= 1);
    let diag = vec![0.0; m];
    let offdiag: Vec<f64> = (1..m).map(|i| (i as f64 / 2.0).sqrt()).collect();
    let eig = symm_tridiag_eigen(&diag, &offdiag)?;
    let mut points = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        points.push(DVector::from_vec(vec![
            std::f64::consts::SQRT_2 * eig.eigenvalues[i],
        ]));
        let first = eig.eigenvectors[(0, i)];
        weights.push(first * first);
    }
    Ok(PointSet { points, weights })
}

/// Tensor-product extension of the scalar rule: `m^n` points in odometer
/// order (first axis slowest), with product weights.
pub fn gauss_hermite_nd(m: usize, n: usize) -> Result<PointSet> {
    assert!(m >= 1 && n >= 1);
    let total = checked_power(m, n).ok_or(Error::PointBudgetExceeded {
        requested: usize::MAX,
        budget: POINT_BUDGET,
    })?;
    if total > POINT_BUDGET {
        return Err(Error::PointBudgetExceeded {
            requested: total,
            budget: POINT_BUDGET,
        });
    }
    let scalar = gauss_hermite_1d(m)?;
    let nodes: Vec<f64> = scalar.points.iter().map(|p| p[0]).collect();
    let mut points = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut index = vec![0usize; n];
    for _ in 0..total {
        let mut p = DVector::zeros(n);
        let mut w = 1.0;
        for axis in 0..n {
            p[axis] = nodes[index[axis]];
            w *= scalar.weights[index[axis]];
        }
        points.push(p);
        weights.push(w);
        // odometer: last axis spins fastest
        for axis in (0..n).rev() {
            index[axis] += 1;
            if index[axis] < m {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(PointSet { points, weights })
}

fn checked_power(m: usize, n: usize) -> Option<usize> {
    let mut total = 1usize;
    for _ in 0..n {
        total = total.checked_mul(m)?;
    }
    Some(total)
}

/// Unscented set: a center point with weight `κ/(n+κ)` followed by
/// `±√(n+κ)·e_i` with weights `1/(2(n+κ))`, in the cubature ordering.
///
/// With `κ = 0` the center weight vanishes and the remaining points match
/// the cubature rule exactly.
pub fn unscented_rule(n: usize, kappa: f64) -> Result<PointSet> {
    assert!(n >= 1);
    let spread = n as f64 + kappa;
    if spread <= 0.0 {
        return Err(Error::DegenerateSpread);
    }
    let scale = spread.sqrt();
    let side_weight = 1.0 / (2.0 * spread);
    let mut points = Vec::with_capacity(2 * n + 1);
    let mut weights = Vec::with_capacity(2 * n + 1);
    points.push(DVector::zeros(n));
    weights.push(kappa / spread);
    for sign in [1.0, -1.0] {
        for i in 0..n {
            let mut p = DVector::zeros(n);
            p[i] = sign * scale;
            points.push(p);
            weights.push(side_weight);
        }
    }
    Ok(PointSet { points, weights })
}

/// Affine transport of standardized points to a belief:
/// `mean + √cov · ξ_i` for every point, weights unchanged.
pub fn transport(set: &PointSet, belief: &GaussianBelief) -> Result<Vec<DVector<f64>>> {
    let root = cholesky_sqrt(&belief.cov, DEFAULT_CHOLESKY_JITTER)?;
    Ok(set
        .points
        .iter()
        .map(|xi| &belief.mean + &root * xi)
        .collect())
}
