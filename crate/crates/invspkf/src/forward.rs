//! The generic forward sigma-point filter. One recursion covers the
//! cubature, quadrature and unscented filters; the point rule is the only
//! thing that changes.
//!
//! The time update transports points from the current belief, pushes them
//! through the state map and rebuilds mean and covariance (plus process
//! noise). The measurement update regenerates points from the predicted
//! belief, pushes them through the observation map, and applies the usual
//! gain correction. Covariances are symmetrized with a zero floor after
//! both updates since the outer-product subtractions lose symmetry in
//! floating point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{wrap_angle, StateSpaceModel};
use crate::numerics::{
    check_symmetric, chol_solve, cholesky_sqrt, symmetrize_psd, DEFAULT_CHOLESKY_JITTER,
};
use crate::points::{transport, PointRule};

/// Mean vector plus symmetric PSD covariance; the unit of exchange for
/// every filter in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validating constructor for beliefs coming from configuration or
    /// tests. Internal filter code builds beliefs directly from already
    /// repaired covariances.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        assert_eq!(cov.nrows(), mean.len(), "covariance dimension mismatch");
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        check_symmetric(&cov)?;
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Intermediates of one measurement update: predicted observation,
/// innovation covariance (noise included), state-observation cross
/// covariance, and the gain.
#[derive(Debug, Clone)]
pub struct MeasurementUpdateReport {
    pub predicted_obs: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub cross_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

pub(crate) fn weighted_mean(points: &[DVector<f64>], weights: &[f64], dim: usize) -> DVector<f64> {
    let mut mean = DVector::zeros(dim);
    for (p, w) in points.iter().zip(weights) {
        mean.axpy(*w, p, 1.0);
    }
    mean
}

/// `sum_i w_i a_i b_iᵀ − a_mean b_meanᵀ`
pub(crate) fn weighted_cross(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    weights: &[f64],
    a_mean: &DVector<f64>,
    b_mean: &DVector<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((pa, pb), w) in a.iter().zip(b).zip(weights) {
        out.ger(*w, pa, pb, 1.0);
    }
    out.ger(-1.0, a_mean, b_mean, 1.0);
    out
}

fn all_finite(vs: &[DVector<f64>]) -> bool {
    vs.iter().all(|v| v.iter().all(|x| x.is_finite()))
}

/// Propagates the belief through the state map: transported points are
/// pushed through `f`, then mean and covariance are rebuilt and the
/// process noise added.
pub fn time_update<F>(
    rule: &PointRule,
    belief: &GaussianBelief,
    f: F,
    process_cov: &DMatrix<f64>,
) -> Result<GaussianBelief>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    assert_eq!(rule.dim(), belief.dim(), "rule dimension mismatch");
    let set = rule.set();
    let pts = transport(set, belief)?;
    let propagated: Vec<DVector<f64>> = pts.iter().map(f).collect();
    if !all_finite(&propagated) {
        return Err(Error::NonFiniteState);
    }
    let n = propagated[0].len();
    let mean = weighted_mean(&propagated, &set.weights, n);
    let mut cov = weighted_cross(&propagated, &propagated, &set.weights, &mean, &mean);
    cov += process_cov;
    let cov = symmetrize_psd(&cov, 0.0);
    if mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    Ok(GaussianBelief { mean, cov })
}

/// Everything the measurement update derives before it ever looks at the
/// observation value. The posterior covariance has no dependence on the
/// observation, which the inverse filter's covariance replication relies
/// on.
pub(crate) struct MeasurementGeometry {
    pub predicted_obs: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub cross_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub posterior_cov: DMatrix<f64>,
}

pub(crate) fn measurement_geometry<H>(
    rule: &PointRule,
    predicted: &GaussianBelief,
    h: H,
    obs_cov: &DMatrix<f64>,
) -> Result<MeasurementGeometry>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    assert_eq!(rule.dim(), predicted.dim(), "rule dimension mismatch");
    let set = rule.set();
    // fresh points from the predicted belief
    let pts = transport(set, predicted)?;
    let mapped: Vec<DVector<f64>> = pts.iter().map(h).collect();
    if !all_finite(&mapped) {
        return Err(Error::NonFiniteState);
    }
    let n_y = mapped[0].len();
    let predicted_obs = weighted_mean(&mapped, &set.weights, n_y);
    let mut innovation_cov = weighted_cross(
        &mapped,
        &mapped,
        &set.weights,
        &predicted_obs,
        &predicted_obs,
    );
    innovation_cov += obs_cov;
    let innovation_cov = 0.5 * (&innovation_cov + innovation_cov.transpose());
    let cross_cov = weighted_cross(&pts, &mapped, &set.weights, &predicted.mean, &predicted_obs);

    let chol = cholesky_sqrt(&innovation_cov, DEFAULT_CHOLESKY_JITTER)
        .map_err(|_| Error::SingularInnovation)?;
    let gain = chol_solve(&chol, &cross_cov.transpose()).transpose();

    let posterior_cov = &predicted.cov - &gain * &innovation_cov * gain.transpose();
    let posterior_cov = symmetrize_psd(&posterior_cov, 0.0);
    Ok(MeasurementGeometry {
        predicted_obs,
        innovation_cov,
        cross_cov,
        gain,
        posterior_cov,
    })
}

/// Corrects the predicted belief with an observation. Innovation
/// components listed in `angular` are wrapped to `(-pi, pi]` before the
/// gain is applied.
pub fn measurement_update<H>(
    rule: &PointRule,
    predicted: &GaussianBelief,
    y: &DVector<f64>,
    h: H,
    obs_cov: &DMatrix<f64>,
    angular: &[usize],
) -> Result<(GaussianBelief, MeasurementUpdateReport)>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let geom = measurement_geometry(rule, predicted, h, obs_cov)?;
    assert_eq!(
        y.len(),
        geom.predicted_obs.len(),
        "observation dimension mismatch"
    );
    let mut innovation = y - &geom.predicted_obs;
    for &idx in angular {
        innovation[idx] = wrap_angle(innovation[idx]);
    }
    let mean = &predicted.mean + &geom.gain * innovation;
    if mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    let belief = GaussianBelief {
        mean,
        cov: geom.posterior_cov,
    };
    let report = MeasurementUpdateReport {
        predicted_obs: geom.predicted_obs,
        innovation_cov: geom.innovation_cov,
        cross_cov: geom.cross_cov,
        gain: geom.gain,
    };
    Ok((belief, report))
}

/// One full filter cycle against a model: time update through the state
/// map, then measurement update with the observation. With a cubature rule
/// this is the CKF, with an `m`-point Gauss-Hermite rule the `m`-point
/// QKF, and with an unscented rule the UKF.
pub fn forward_step(
    rule: &PointRule,
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
) -> Result<(GaussianBelief, MeasurementUpdateReport)> {
    assert_eq!(rule.dim(), model.n_x, "rule must match the state dimension");
    let predicted = time_update(rule, belief, |x| model.state(x), &model.process_cov)?;
    measurement_update(
        rule,
        &predicted,
        y,
        |x| model.observe(x),
        &model.obs_cov,
        &model.angular_obs_components,
    )
}
