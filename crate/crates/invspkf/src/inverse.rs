//! The inverse sigma-point filter: estimates what a forward filter has
//! estimated, from the true state and noisy observations of the actions
//! taken on the forward estimate.
//!
//! The forward filter's whole estimate update, driven by the synthetic
//! observation `h(x_next) + v`, is treated as the state map of the inverse
//! problem. Its gain depends on the previous forward estimate, so the
//! observation noise `v` enters non-additively; the estimate is therefore
//! augmented with the noise vector and an outer point rule integrates over
//! the joint space. The forward error covariance that the defender cannot
//! see is replicated recursively from the defender's own estimates.
//!
//! The same recursion serves the cubature, quadrature and unscented
//! variants; inner (assumed forward) and outer rules are independent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::{
    forward_step, measurement_geometry, time_update, GaussianBelief, MeasurementUpdateReport,
};
use crate::models::{wrap_angle, StateSpaceModel};
use crate::numerics::{
    check_symmetric, chol_solve, cholesky_sqrt, symmetrize_psd, DEFAULT_CHOLESKY_JITTER,
};
use crate::points::{transport, PointRule, RuleKind};

/// Defender-side filter state: the belief over the forward filter's
/// estimate, the replicated forward error covariance, the rule the forward
/// filter is assumed to run, and the outer rule over the augmented space.
#[derive(Debug, Clone)]
pub struct InverseFilterState {
    pub estimate: GaussianBelief,
    /// Recursive stand-in for the forward filter's error covariance,
    /// advanced from the previous inverse estimate each step.
    pub replicated_cov: DMatrix<f64>,
    pub inner_rule: PointRule,
    pub outer_rule: PointRule,
}

impl InverseFilterState {
    /// Generic constructor; the convenience constructors below cover the
    /// three named filters.
    pub fn with_rules(
        model: &StateSpaceModel,
        inner_rule: PointRule,
        outer_rule: PointRule,
        estimate: GaussianBelief,
        replicated_cov: DMatrix<f64>,
    ) -> Result<Self> {
        assert_eq!(inner_rule.dim(), model.n_x, "inner rule must match n_x");
        assert_eq!(
            outer_rule.dim(),
            model.n_x + model.n_y,
            "outer rule must span estimate plus observation noise"
        );
        assert_eq!(estimate.dim(), model.n_x, "estimate dimension mismatch");
        assert_eq!(replicated_cov.nrows(), model.n_x);
        check_symmetric(&replicated_cov)?;
        Ok(InverseFilterState {
            estimate,
            replicated_cov,
            inner_rule,
            outer_rule,
        })
    }

    /// Inverse cubature filter: cubature rules inside and out.
    pub fn cubature_filter(
        model: &StateSpaceModel,
        estimate: GaussianBelief,
        replicated_cov: DMatrix<f64>,
    ) -> Result<Self> {
        Self::with_rules(
            model,
            PointRule::cubature(model.n_x),
            PointRule::cubature(model.n_x + model.n_y),
            estimate,
            replicated_cov,
        )
    }

    /// Inverse quadrature filter with `outer_points_per_axis` nodes on the
    /// augmented space, assuming an `assumed_points_per_axis`-point forward
    /// quadrature filter. The two are independent choices.
    pub fn quadrature_filter(
        model: &StateSpaceModel,
        outer_points_per_axis: usize,
        assumed_points_per_axis: usize,
        estimate: GaussianBelief,
        replicated_cov: DMatrix<f64>,
    ) -> Result<Self> {
        Self::with_rules(
            model,
            PointRule::gauss_hermite(assumed_points_per_axis, model.n_x)?,
            PointRule::gauss_hermite(outer_points_per_axis, model.n_x + model.n_y)?,
            estimate,
            replicated_cov,
        )
    }

    /// Inverse unscented filter with its own spread parameter, assuming a
    /// forward unscented filter with `assumed_kappa`.
    pub fn unscented_filter(
        model: &StateSpaceModel,
        outer_kappa: f64,
        assumed_kappa: f64,
        estimate: GaussianBelief,
        replicated_cov: DMatrix<f64>,
    ) -> Result<Self> {
        Self::with_rules(
            model,
            PointRule::unscented(model.n_x, assumed_kappa)?,
            PointRule::unscented(model.n_x + model.n_y, outer_kappa)?,
            estimate,
            replicated_cov,
        )
    }

    /// Builds the filter from rule kinds, sizing the rules to the model.
    pub fn from_kinds(
        model: &StateSpaceModel,
        inner: RuleKind,
        outer: RuleKind,
        estimate: GaussianBelief,
        replicated_cov: DMatrix<f64>,
    ) -> Result<Self> {
        Self::with_rules(
            model,
            PointRule::new(inner, model.n_x)?,
            PointRule::new(outer, model.n_x + model.n_y)?,
            estimate,
            replicated_cov,
        )
    }
}

/// The inverse filter's augmented belief: the estimate stacked with a
/// zero-mean observation-noise block, covariance block-diagonal in the
/// estimate covariance and the observation noise.
#[derive(Debug, Clone)]
pub struct AugmentedBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl AugmentedBelief {
    pub fn new(estimate: &GaussianBelief, obs_cov: &DMatrix<f64>) -> Self {
        let n_x = estimate.dim();
        let n_y = obs_cov.nrows();
        let n_z = n_x + n_y;
        let mut mean = DVector::zeros(n_z);
        mean.rows_mut(0, n_x).copy_from(&estimate.mean);
        let mut cov = DMatrix::zeros(n_z, n_z);
        cov.view_mut((0, 0), (n_x, n_x)).copy_from(&estimate.cov);
        cov.view_mut((n_x, n_x), (n_y, n_y)).copy_from(obs_cov);
        AugmentedBelief { mean, cov }
    }

    pub fn belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }
}

/// The inverse filter's state map: one full forward-filter step from the
/// hypothetical estimate `(estimate_hyp, replicated_cov)`, driven by the
/// synthetic observation `h(next_state) + noise`, returning the posterior
/// mean. This composition IS the definition; the forward gain is
/// recomputed inside from the point rule rather than passed in.
pub fn forward_transition(
    inner_rule: &PointRule,
    estimate_hyp: &DVector<f64>,
    replicated_cov: &DMatrix<f64>,
    next_state: &DVector<f64>,
    noise: &DVector<f64>,
    model: &StateSpaceModel,
) -> Result<DVector<f64>> {
    let y = model.observe(next_state) + noise;
    let belief = GaussianBelief {
        mean: estimate_hyp.clone(),
        cov: replicated_cov.clone(),
    };
    Ok(forward_step(inner_rule, &belief, &y, model)?.0.mean)
}

/// Advances the replicated forward covariance by one forward-filter cycle
/// seeded at the previous inverse estimate. The posterior covariance of a
/// forward step never depends on the observation value, so no observation
/// is needed here.
pub fn replicate_forward_cov(
    inner_rule: &PointRule,
    prev_estimate: &DVector<f64>,
    prev_replicated: &DMatrix<f64>,
    model: &StateSpaceModel,
) -> Result<DMatrix<f64>> {
    let belief = GaussianBelief {
        mean: prev_estimate.clone(),
        cov: prev_replicated.clone(),
    };
    let predicted = time_update(inner_rule, &belief, |x| model.state(x), &model.process_cov)?;
    let geom = measurement_geometry(inner_rule, &predicted, |x| model.observe(x), &model.obs_cov)?;
    Ok(geom.posterior_cov)
}

/// One inverse-filter cycle: propagate the augmented belief through the
/// forward transition, then correct with the observed action.
///
/// The augmented points are generated once per step; the time update adds
/// no process-noise term because the noise already rides inside the
/// transition, and the measurement update pushes the same propagated
/// points through the action map rather than regenerating them.
pub fn inverse_step(
    state: &InverseFilterState,
    action: &DVector<f64>,
    next_state: &DVector<f64>,
    model: &StateSpaceModel,
) -> Result<(InverseFilterState, MeasurementUpdateReport)> {
    let (n_x, n_y, n_a) = (model.n_x, model.n_y, model.n_a);
    assert_eq!(action.len(), n_a, "action dimension mismatch");
    assert_eq!(next_state.len(), n_x, "state dimension mismatch");
    assert_eq!(
        state.outer_rule.dim(),
        n_x + n_y,
        "outer rule dimension mismatch"
    );

    let augmented = AugmentedBelief::new(&state.estimate, &model.obs_cov);
    let outer_set = state.outer_rule.set();
    let points = transport(outer_set, &augmented.belief())?;

    let mut propagated = Vec::with_capacity(points.len());
    for p in &points {
        let estimate_part = p.rows(0, n_x).into_owned();
        let noise_part = p.rows(n_x, n_y).into_owned();
        propagated.push(forward_transition(
            &state.inner_rule,
            &estimate_part,
            &state.replicated_cov,
            next_state,
            &noise_part,
            model,
        )?);
    }
    if propagated.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteState);
    }

    let weights = &outer_set.weights;
    let predicted_mean = crate::forward::weighted_mean(&propagated, weights, n_x);
    let predicted_cov = symmetrize_psd(
        &crate::forward::weighted_cross(
            &propagated,
            &propagated,
            weights,
            &predicted_mean,
            &predicted_mean,
        ),
        0.0,
    );

    let mapped: Vec<DVector<f64>> = propagated.iter().map(|s| model.act(s)).collect();
    if mapped.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteState);
    }
    let predicted_action = crate::forward::weighted_mean(&mapped, weights, n_a);
    let mut innovation_cov = crate::forward::weighted_cross(
        &mapped,
        &mapped,
        weights,
        &predicted_action,
        &predicted_action,
    );
    innovation_cov += &model.action_cov;
    let innovation_cov = 0.5 * (&innovation_cov + innovation_cov.transpose());
    let cross_cov = crate::forward::weighted_cross(
        &propagated,
        &mapped,
        weights,
        &predicted_mean,
        &predicted_action,
    );

    let chol = cholesky_sqrt(&innovation_cov, DEFAULT_CHOLESKY_JITTER)
        .map_err(|_| Error::SingularInnovation)?;
    let gain = chol_solve(&chol, &cross_cov.transpose()).transpose();

    let mut innovation = action - &predicted_action;
    for &idx in &model.angular_action_components {
        innovation[idx] = wrap_angle(innovation[idx]);
    }
    let mean = &predicted_mean + &gain * innovation;
    if mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    let cov = symmetrize_psd(
        &(&predicted_cov - &gain * &innovation_cov * gain.transpose()),
        0.0,
    );

    // the replica used at the NEXT step comes from this step's incoming
    // estimate, mirroring how the forward filter rolls its own covariance
    let replicated_cov = replicate_forward_cov(
        &state.inner_rule,
        &state.estimate.mean,
        &state.replicated_cov,
        model,
    )?;

    let next = InverseFilterState {
        estimate: GaussianBelief { mean, cov },
        replicated_cov,
        inner_rule: state.inner_rule.clone(),
        outer_rule: state.outer_rule.clone(),
    };
    let report = MeasurementUpdateReport {
        predicted_obs: predicted_action,
        innovation_cov,
        cross_cov,
        gain,
    };
    Ok((next, report))
}
