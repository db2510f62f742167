//! Experiment side: recursive Cramer-Rao bound recursions for forward and
//! inverse filters, the coupled attacker-defender run, seeded Monte-Carlo
//! aggregation, and the exponential mean-squared boundedness diagnostic.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::forward::{forward_step, GaussianBelief};
use crate::inverse::{forward_transition, inverse_step, InverseFilterState};
use crate::models::{sample_noise, simulate_trajectory, StateSpaceModel};
use crate::numerics::{
    chol_solve, cholesky_sqrt, numeric_jacobian, spd_inverse, symmetrize_psd,
    DEFAULT_CHOLESKY_JITTER, DEFAULT_JACOBIAN_STEP,
};
use crate::points::{PointRule, RuleKind};

/// Ridge added to the inverse filter's effective process noise before
/// inversion; the gain-times-noise covariance is rank-deficient whenever
/// the observation dimension is below the state dimension.
pub const INVERSE_PROCESS_NOISE_RIDGE: f64 = 1e-9;

/// Estimates whose components pass this magnitude mark the run as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

// ---------------------------------------------------------------------------
// Fisher information recursions
// ---------------------------------------------------------------------------

/// Fisher information matrix for the recursive Cramer-Rao bound.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
}

impl FisherInfo {
    /// Prior information is the inverse of the prior covariance.
    pub fn from_prior_cov(cov: &DMatrix<f64>) -> Result<Self> {
        Ok(FisherInfo {
            matrix: spd_inverse(cov, DEFAULT_CHOLESKY_JITTER)?,
        })
    }

    /// Sum of the bound diagonal over the given component group, in
    /// squared-error units.
    pub fn bound_trace(&self, group: &MetricGroup) -> Result<f64> {
        let inv = spd_inverse(&self.matrix, DEFAULT_CHOLESKY_JITTER)?;
        Ok(match group {
            MetricGroup::FullState => inv.trace(),
            MetricGroup::Components(idx) => idx.iter().map(|&i| inv[(i, i)]).sum(),
        })
    }
}

/// One step of the information recursion
/// `J' = Hᵀ R⁻¹ H − Q⁻¹ F (J + Fᵀ Q⁻¹ F)⁻¹ Fᵀ Q⁻¹ + Q⁻¹`.
///
/// When `Q` does not admit a strict Cholesky factorization (the Lorenz
/// benchmark drives a single state component, so its `Q` is rank one) the
/// algebraically identical matrix-inversion-lemma form
/// `Hᵀ R⁻¹ H + (Q + F J⁻¹ Fᵀ)⁻¹` is used, which never inverts `Q` alone.
pub fn rcrlb_forward_step(
    info: &FisherInfo,
    state_jac: &DMatrix<f64>,
    obs_jac: &DMatrix<f64>,
    process_cov: &DMatrix<f64>,
    obs_cov: &DMatrix<f64>,
) -> Result<FisherInfo> {
    let n = info.matrix.nrows();
    assert_eq!(state_jac.nrows(), n, "state Jacobian dimension mismatch");
    let obs_chol =
        cholesky_sqrt(obs_cov, DEFAULT_CHOLESKY_JITTER).map_err(|_| Error::SingularInnovation)?;
    let r_inv_h = chol_solve(&obs_chol, obs_jac);
    let obs_info = obs_jac.transpose() * r_inv_h;

    // exact-zero pivots mean Q factors but is not invertible; the printed
    // recursion needs Q⁻¹, so those fall through to the lemma form
    let strict_chol = cholesky_sqrt(process_cov, 0.0)
        .ok()
        .filter(|l| l.diagonal().iter().all(|&d| d > 0.0));
    let next = match strict_chol {
        Some(q_chol) => {
            let q_inv_f = chol_solve(&q_chol, state_jac);
            let inner = symmetrize_psd(&(&info.matrix + state_jac.transpose() * &q_inv_f), 0.0);
            let inner_chol =
                cholesky_sqrt(&inner, DEFAULT_CHOLESKY_JITTER).map_err(|_| Error::SingularQ)?;
            let solved = chol_solve(&inner_chol, &q_inv_f.transpose());
            let q_inv = chol_solve(&q_chol, &DMatrix::identity(n, n));
            obs_info - &q_inv_f * solved + q_inv
        }
        None => {
            let j_inv =
                spd_inverse(&info.matrix, DEFAULT_CHOLESKY_JITTER).map_err(|_| Error::SingularQ)?;
            let mid = symmetrize_psd(
                &(process_cov + state_jac * j_inv * state_jac.transpose()),
                0.0,
            );
            let mid_inv =
                spd_inverse(&mid, DEFAULT_CHOLESKY_JITTER).map_err(|_| Error::SingularQ)?;
            obs_info + mid_inv
        }
    };
    Ok(FisherInfo {
        matrix: symmetrize_psd(&next, 0.0),
    })
}

/// The same recursion with the inverse filter's pieces substituted in:
/// transition Jacobian of the forward-step map, action Jacobian, the
/// (regularized) gain-times-noise process covariance, and the action noise.
pub fn rcrlb_inverse_step(
    info: &FisherInfo,
    transition_jac: &DMatrix<f64>,
    action_jac: &DMatrix<f64>,
    process_cov: &DMatrix<f64>,
    action_cov: &DMatrix<f64>,
) -> Result<FisherInfo> {
    rcrlb_forward_step(info, transition_jac, action_jac, process_cov, action_cov)
}

// ---------------------------------------------------------------------------
// Coupled experiment
// ---------------------------------------------------------------------------

/// Which state components enter error norms and bound traces.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricGroup {
    FullState,
    Components(Vec<usize>),
}

impl MetricGroup {
    pub fn squared_error(&self, error: &DVector<f64>) -> f64 {
        match self {
            MetricGroup::FullState => error.norm_squared(),
            MetricGroup::Components(idx) => idx.iter().map(|&i| error[i] * error[i]).sum(),
        }
    }
}

/// Initial mean of the forward filter for each run.
#[derive(Debug, Clone)]
pub enum ForwardInit {
    Fixed(DVector<f64>),
    /// Drawn from the prior `N(x0, cov0)` with the run's init stream, which
    /// keeps the prior information `J0 = cov0⁻¹` statistically consistent.
    SampledFromPrior,
}

/// Everything one coupled run needs besides seeds.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub model: StateSpaceModel,
    pub x0: DVector<f64>,
    pub horizon: usize,
    /// Rule the attacker actually runs.
    pub true_forward: RuleKind,
    /// Rule the defender assumes the attacker runs.
    pub assumed_forward: RuleKind,
    /// Outer rule over the augmented estimate-plus-noise space.
    pub inverse_outer: RuleKind,
    pub forward_mean0: ForwardInit,
    pub forward_cov0: DMatrix<f64>,
    /// Defender's initial estimate of the forward estimate; defaults to the
    /// true initial state.
    pub inverse_mean0: Option<DVector<f64>>,
    pub inverse_cov0: DMatrix<f64>,
    /// Initial replicated forward covariance; defaults to `forward_cov0`.
    pub replica_cov0: Option<DMatrix<f64>>,
    pub metric: MetricGroup,
}

/// Per-run seeds, derived from the master seed and the run index so that
/// replications are independent and the whole experiment is reproducible.
#[derive(Debug, Clone, Copy)]
pub struct RunSeeds {
    pub trajectory: u64,
    pub action_noise: u64,
    pub init: u64,
}

impl RunSeeds {
    pub fn derive(master: u64, run_index: u64) -> Self {
        RunSeeds {
            trajectory: split_mix(master, run_index, 0),
            action_noise: split_mix(master, run_index, 1),
            init: split_mix(master, run_index, 2),
        }
    }
}

fn split_mix(master: u64, run: u64, lane: u64) -> u64 {
    let mut z =
        master ^ run.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-filter output of one coupled run. Squared errors and bound traces
/// are in squared units and run from `k = 0` to the horizon inclusive.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub squared_error: Vec<f64>,
    pub bound: Vec<f64>,
    /// Information matrices behind `bound`, kept so the aggregate can
    /// average information before inverting (the Monte-Carlo estimate of
    /// the expected-information bound).
    pub info_matrices: Vec<DMatrix<f64>>,
    pub time_avg_rmse: f64,
    pub runtime: Duration,
}

/// Trace of one run for CSV export.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub estimates: Vec<DVector<f64>>,
    pub cov_diagonals: Vec<DVector<f64>>,
    /// Frobenius norm of the gain (forward trace only).
    pub gain_norms: Vec<f64>,
    /// Diagonal of the replicated forward covariance (inverse trace only).
    pub replica_diagonals: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub forward: RunMetrics,
    pub inverse: RunMetrics,
    pub forward_trace: RunTrace,
    pub inverse_trace: RunTrace,
    /// The simulated truth, with the actions emitted during the run
    /// filled in.
    pub trajectory: crate::models::Trajectory,
}

fn jacobian_of(
    analytic: &Option<crate::models::DynJacobian>,
    map: &crate::models::DynMap,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    match analytic {
        Some(jac) => Ok(jac(x)),
        None => numeric_jacobian(|p| map(p), x, DEFAULT_JACOBIAN_STEP),
    }
}

fn check_in_range(v: &DVector<f64>) -> Result<()> {
    if v.iter()
        .any(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT)
    {
        return Err(Error::NonFiniteState);
    }
    Ok(())
}

/// One coupled attacker-defender run: simulate the truth, filter the
/// observations with the attacker's true rule, emit noisy actions, track
/// the attacker's estimate with the inverse filter, and roll both bound
/// recursions alongside.
///
/// Forward-bound Jacobians are evaluated on the true trajectory; the
/// inverse ones at the defender's estimates (transition before the step,
/// action map after), since no true linearization point is observable.
pub fn run_coupled_experiment(spec: &ExperimentSpec, seeds: RunSeeds) -> Result<CoupledRun> {
    let started = Instant::now();
    let model = &spec.model;
    let (n_x, n_y) = (model.n_x, model.n_y);

    let true_rule = PointRule::new(spec.true_forward, n_x)?;
    let inner_rule = PointRule::new(spec.assumed_forward, n_x)?;
    let outer_rule = PointRule::new(spec.inverse_outer, n_x + n_y)?;

    let mut trajectory = simulate_trajectory(model, &spec.x0, spec.horizon, seeds.trajectory)?;

    let mut init_rng = ChaCha12Rng::seed_from_u64(seeds.init);
    let forward_mean0 = match &spec.forward_mean0 {
        ForwardInit::Fixed(v) => v.clone(),
        ForwardInit::SampledFromPrior => {
            let root = cholesky_sqrt(&spec.forward_cov0, DEFAULT_CHOLESKY_JITTER)?;
            &spec.x0 + sample_noise(&mut init_rng, &root)
        }
    };
    let mut forward_belief = GaussianBelief {
        mean: forward_mean0,
        cov: spec.forward_cov0.clone(),
    };
    let inverse_mean0 = spec
        .inverse_mean0
        .clone()
        .unwrap_or_else(|| spec.x0.clone());
    let replica0 = spec
        .replica_cov0
        .clone()
        .unwrap_or_else(|| spec.forward_cov0.clone());
    let mut inverse_state = InverseFilterState::with_rules(
        model,
        inner_rule.clone(),
        outer_rule,
        GaussianBelief {
            mean: inverse_mean0,
            cov: spec.inverse_cov0.clone(),
        },
        replica0,
    )?;

    let mut forward_info = FisherInfo::from_prior_cov(&spec.forward_cov0)?;
    let mut inverse_info = FisherInfo::from_prior_cov(&spec.inverse_cov0)?;

    let mut eps_rng = ChaCha12Rng::seed_from_u64(seeds.action_noise);
    let action_root = cholesky_sqrt(&model.action_cov, DEFAULT_CHOLESKY_JITTER)?;

    let steps = spec.horizon + 1;
    let mut forward_sq = Vec::with_capacity(steps);
    let mut inverse_sq = Vec::with_capacity(steps);
    let mut forward_bound = Vec::with_capacity(steps);
    let mut inverse_bound = Vec::with_capacity(steps);
    let mut forward_trace = RunTrace::default();
    let mut inverse_trace = RunTrace::default();

    let mut forward_infos = Vec::with_capacity(steps);
    let mut inverse_infos = Vec::with_capacity(steps);
    let record = |fsq: &mut Vec<f64>,
                  isq: &mut Vec<f64>,
                  fb: &mut Vec<f64>,
                  ib: &mut Vec<f64>,
                  f_infos: &mut Vec<DMatrix<f64>>,
                  i_infos: &mut Vec<DMatrix<f64>>,
                  truth: &DVector<f64>,
                  fwd: &GaussianBelief,
                  inv: &InverseFilterState,
                  f_info: &FisherInfo,
                  i_info: &FisherInfo|
     -> Result<()> {
        fsq.push(spec.metric.squared_error(&(truth - &fwd.mean)));
        isq.push(spec.metric.squared_error(&(&fwd.mean - &inv.estimate.mean)));
        fb.push(f_info.bound_trace(&spec.metric)?);
        ib.push(i_info.bound_trace(&spec.metric)?);
        f_infos.push(f_info.matrix.clone());
        i_infos.push(i_info.matrix.clone());
        Ok(())
    };

    record(
        &mut forward_sq,
        &mut inverse_sq,
        &mut forward_bound,
        &mut inverse_bound,
        &mut forward_infos,
        &mut inverse_infos,
        &trajectory.states[0],
        &forward_belief,
        &inverse_state,
        &forward_info,
        &inverse_info,
    )?;
    forward_trace.estimates.push(forward_belief.mean.clone());
    forward_trace
        .cov_diagonals
        .push(forward_belief.cov.diagonal());
    forward_trace.gain_norms.push(0.0);
    inverse_trace
        .estimates
        .push(inverse_state.estimate.mean.clone());
    inverse_trace
        .cov_diagonals
        .push(inverse_state.estimate.cov.diagonal());
    inverse_trace
        .replica_diagonals
        .push(inverse_state.replicated_cov.diagonal());

    for k in 1..=spec.horizon {
        let x_prev = &trajectory.states[k - 1];
        let x_now = &trajectory.states[k];
        let y_now = &trajectory.observations[k - 1];

        // forward bound along the truth
        let f_jac = jacobian_of(&model.state_jacobian, &model.state_map, x_prev)?;
        let h_jac = jacobian_of(&model.obs_jacobian, &model.obs_map, x_now)?;
        forward_info = rcrlb_forward_step(
            &forward_info,
            &f_jac,
            &h_jac,
            &model.process_cov,
            &model.obs_cov,
        )?;

        // inverse bound pieces at the defender's current estimate, before
        // the step consumes it
        // inverse bound pieces along the true attacker path, mirroring the
        // forward bound's true-trajectory Jacobians: the transition map is
        // linearized at the attacker's actual estimate and covariance under
        // its actual rule, before the step consumes them
        let attacker_mean = forward_belief.mean.clone();
        let attacker_cov = forward_belief.cov.clone();
        let transition_jac = numeric_jacobian(
            |est| {
                forward_transition(
                    &true_rule,
                    est,
                    &attacker_cov,
                    x_now,
                    &DVector::zeros(n_y),
                    model,
                )
                .unwrap_or_else(|_| DVector::from_element(n_x, f64::NAN))
            },
            &attacker_mean,
            DEFAULT_JACOBIAN_STEP,
        )?;

        // attacker filters the observation, then acts on the estimate
        let (next_forward, forward_report) =
            forward_step(&true_rule, &forward_belief, y_now, model)?;
        forward_belief = next_forward;
        check_in_range(&forward_belief.mean)?;
        let action = model.act(&forward_belief.mean) + sample_noise(&mut eps_rng, &action_root);
        if action.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        trajectory.actions.push(action.clone());

        // the transition noise is the attacker's gain acting on its
        // observation noise, rank-deficient and hence ridge-regularized
        let true_gain = &forward_report.gain;
        let mut inverse_process_cov = true_gain * &model.obs_cov * true_gain.transpose();
        for i in 0..n_x {
            inverse_process_cov[(i, i)] += INVERSE_PROCESS_NOISE_RIDGE;
        }
        let inverse_process_cov = symmetrize_psd(&inverse_process_cov, 0.0);

        // defender tracks the attacker's estimate from (action, true state)
        let (next_inverse, _) = inverse_step(&inverse_state, &action, x_now, model)?;
        inverse_state = next_inverse;
        check_in_range(&inverse_state.estimate.mean)?;

        let g_jac = jacobian_of(
            &model.action_jacobian,
            &model.action_map,
            &forward_belief.mean,
        )?;
        inverse_info = rcrlb_inverse_step(
            &inverse_info,
            &transition_jac,
            &g_jac,
            &inverse_process_cov,
            &model.action_cov,
        )?;

        record(
            &mut forward_sq,
            &mut inverse_sq,
            &mut forward_bound,
            &mut inverse_bound,
            &mut forward_infos,
            &mut inverse_infos,
            x_now,
            &forward_belief,
            &inverse_state,
            &forward_info,
            &inverse_info,
        )?;
        forward_trace.estimates.push(forward_belief.mean.clone());
        forward_trace
            .cov_diagonals
            .push(forward_belief.cov.diagonal());
        forward_trace.gain_norms.push(
            forward_report
                .gain
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt(),
        );
        inverse_trace
            .estimates
            .push(inverse_state.estimate.mean.clone());
        inverse_trace
            .cov_diagonals
            .push(inverse_state.estimate.cov.diagonal());
        inverse_trace
            .replica_diagonals
            .push(inverse_state.replicated_cov.diagonal());
    }

    let runtime = started.elapsed();
    let time_avg = |sq: &[f64]| (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
    Ok(CoupledRun {
        forward: RunMetrics {
            time_avg_rmse: time_avg(&forward_sq),
            squared_error: forward_sq,
            bound: forward_bound,
            info_matrices: forward_infos,
            runtime,
        },
        inverse: RunMetrics {
            time_avg_rmse: time_avg(&inverse_sq),
            squared_error: inverse_sq,
            bound: inverse_bound,
            info_matrices: inverse_infos,
            runtime,
        },
        forward_trace,
        inverse_trace,
        trajectory,
    })
}

/// Forward bound recursion along a freshly simulated trajectory, without
/// running any filter. Returns the per-step group bound in squared units.
pub fn rcrlb_forward_trace(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    horizon: usize,
    seed: u64,
    metric: &MetricGroup,
) -> Result<Vec<f64>> {
    let trajectory = simulate_trajectory(model, x0, horizon, seed)?;
    let mut info = FisherInfo::from_prior_cov(prior_cov)?;
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(info.bound_trace(metric)?);
    for k in 1..=horizon {
        let f_jac = jacobian_of(
            &model.state_jacobian,
            &model.state_map,
            &trajectory.states[k - 1],
        )?;
        let h_jac = jacobian_of(&model.obs_jacobian, &model.obs_map, &trajectory.states[k])?;
        info = rcrlb_forward_step(&info, &f_jac, &h_jac, &model.process_cov, &model.obs_cov)?;
        out.push(info.bound_trace(metric)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Monte Carlo
// ---------------------------------------------------------------------------

/// Per-step aggregates over completed runs, in both squared and root units.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    pub mse: Vec<f64>,
    pub mse_std_error: Vec<f64>,
    pub rmse: Vec<f64>,
    pub bound_mse: Vec<f64>,
    pub bound_rmse: Vec<f64>,
    pub time_avg_rmse: f64,
    pub time_avg_bound_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct MonteCarloSummary {
    pub runs_requested: usize,
    pub runs_completed: usize,
    pub runs_excluded: usize,
    pub forward: AggregateSeries,
    pub inverse: AggregateSeries,
    pub runtime: Duration,
    /// Trace of the first completed run, for CSV export.
    pub first_run: Option<CoupledRun>,
}

fn aggregate(
    series: Vec<(&[f64], &[DMatrix<f64>])>,
    metric: &MetricGroup,
) -> Result<AggregateSeries> {
    let runs = series.len();
    let steps = series[0].0.len();
    let mut mse = vec![0.0; steps];
    for (sq, _) in &series {
        for (k, v) in sq.iter().enumerate() {
            mse[k] += v;
        }
    }
    for v in mse.iter_mut() {
        *v /= runs as f64;
    }
    // the bound estimate averages information across runs first, then
    // inverts: the Monte-Carlo counterpart of the expected-information
    // bound
    let mut bound = Vec::with_capacity(steps);
    for k in 0..steps {
        let n = series[0].1[k].nrows();
        let mut info_mean = DMatrix::<f64>::zeros(n, n);
        for (_, infos) in &series {
            info_mean += &infos[k];
        }
        info_mean /= runs as f64;
        bound.push(FisherInfo { matrix: info_mean }.bound_trace(metric)?);
    }
    let mut se = vec![0.0; steps];
    if runs > 1 {
        for (sq, _) in &series {
            for (k, v) in sq.iter().enumerate() {
                let d = v - mse[k];
                se[k] += d * d;
            }
        }
        for v in se.iter_mut() {
            *v = (*v / ((runs - 1) as f64 * runs as f64)).sqrt();
        }
    }
    let rmse: Vec<f64> = mse.iter().map(|v| v.sqrt()).collect();
    let bound_rmse: Vec<f64> = bound.iter().map(|v| v.sqrt()).collect();
    let time_avg_rmse = (mse.iter().sum::<f64>() / steps as f64).sqrt();
    let time_avg_bound_rmse = (bound.iter().sum::<f64>() / steps as f64).sqrt();
    Ok(AggregateSeries {
        mse,
        mse_std_error: se,
        rmse,
        bound_mse: bound,
        bound_rmse,
        time_avg_rmse,
        time_avg_bound_rmse,
    })
}

/// Reduces per-run outputs into the summary. Runs are sorted by index
/// first, so the aggregate does not depend on completion order.
pub fn aggregate_runs(
    runs_requested: usize,
    mut outcomes: Vec<(usize, Result<CoupledRun>)>,
    metric: &MetricGroup,
) -> Result<MonteCarloSummary> {
    outcomes.sort_by_key(|(idx, _)| *idx);
    let mut completed: Vec<CoupledRun> = Vec::new();
    let mut excluded = 0usize;
    for (_, outcome) in outcomes {
        match outcome {
            Ok(run) => completed.push(run),
            Err(Error::NonFiniteState) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if completed.is_empty() {
        return Err(Error::NonFiniteState);
    }
    let forward = aggregate(
        completed
            .iter()
            .map(|r| {
                (
                    r.forward.squared_error.as_slice(),
                    r.forward.info_matrices.as_slice(),
                )
            })
            .collect(),
        metric,
    )?;
    let inverse = aggregate(
        completed
            .iter()
            .map(|r| {
                (
                    r.inverse.squared_error.as_slice(),
                    r.inverse.info_matrices.as_slice(),
                )
            })
            .collect(),
        metric,
    )?;
    let runtime = completed.iter().map(|r| r.forward.runtime).sum();
    Ok(MonteCarloSummary {
        runs_requested,
        runs_completed: completed.len(),
        runs_excluded: excluded,
        forward,
        inverse,
        runtime,
        first_run: completed.into_iter().next(),
    })
}

/// Runs `runs` independent replications and aggregates them. Replications
/// are deterministic in `(master_seed, run index)`; `workers` only controls
/// parallelism, never the result.
pub fn monte_carlo(
    spec: &ExperimentSpec,
    runs: usize,
    master_seed: u64,
    workers: usize,
) -> Result<MonteCarloSummary> {
    assert!(runs >= 1, "at least one run is required");
    let started = Instant::now();
    let workers = workers.max(1).min(runs);
    let mut outcomes: Vec<(usize, Result<CoupledRun>)> = Vec::with_capacity(runs);
    if workers == 1 {
        for idx in 0..runs {
            outcomes.push((
                idx,
                run_coupled_experiment(spec, RunSeeds::derive(master_seed, idx as u64)),
            ));
        }
    } else {
        let chunks: Vec<Vec<usize>> = (0..workers)
            .map(|w| (0..runs).filter(|idx| idx % workers == w).collect())
            .collect();
        let results: Vec<Vec<(usize, Result<CoupledRun>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|idx| {
                                (
                                    idx,
                                    run_coupled_experiment(
                                        spec,
                                        RunSeeds::derive(master_seed, idx as u64),
                                    ),
                                )
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        for chunk in results {
            outcomes.extend(chunk);
        }
    }
    let mut summary = aggregate_runs(runs, outcomes, &spec.metric)?;
    summary.runtime = started.elapsed();
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Exponential mean-squared boundedness diagnostic
// ---------------------------------------------------------------------------

/// Parameters of the bound `E‖b_k‖² ≤ eta · E‖b_0‖² · lambda^k + nu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundFit {
    pub eta: f64,
    pub lambda: f64,
    pub nu: f64,
}

/// Checks the bound at every step; the margin is the smallest slack
/// `bound_k - value_k` (non-negative iff the bound holds everywhere).
pub fn check_exponential_bound(series: &[f64], fit: &BoundFit) -> (bool, f64) {
    assert!(!series.is_empty(), "empty series");
    let mut geometric = fit.eta * series[0];
    let mut margin = f64::INFINITY;
    for value in series {
        let bound = geometric + fit.nu;
        margin = margin.min(bound - value);
        geometric *= fit.lambda;
    }
    (margin >= 0.0, margin)
}

/// Fits bound parameters to a mean-squared error series: the offset is the
/// mean of the final quartile, the rate comes from a log-linear fit over
/// the decaying prefix, and the scale is inflated until the bound holds on
/// the whole input.
pub fn fit_exponential_bound(series: &[f64]) -> BoundFit {
    assert!(series.len() >= 3, "series too short to fit");
    assert!(series.iter().all(|&v| v > 0.0), "series must be positive");
    let n = series.len();
    let tail_start = n - (n / 4).max(1);
    let nu =
        (series[tail_start..].iter().sum::<f64>() / (n - tail_start) as f64).max(f64::MIN_POSITIVE);
    let e0 = series[0];

    // decaying prefix: excess at least a thousandth of the initial excess
    let threshold = 1e-3 * (e0 - nu);
    let mut ks: Vec<f64> = Vec::new();
    let mut logs: Vec<f64> = Vec::new();
    for (k, &v) in series.iter().enumerate() {
        let excess = v - nu;
        if excess > 0.0 && excess >= threshold {
            ks.push(k as f64);
            logs.push(excess.ln());
        } else {
            break;
        }
    }

    let (mut eta, mut lambda) = (1.0, 0.5);
    if ks.len() >= 2 {
        let m = ks.len() as f64;
        let mean_k = ks.iter().sum::<f64>() / m;
        let mean_l = logs.iter().sum::<f64>() / m;
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, l) in ks.iter().zip(&logs) {
            num += (k - mean_k) * (l - mean_l);
            den += (k - mean_k) * (k - mean_k);
        }
        if den > 0.0 {
            let slope = num / den;
            lambda = slope.exp().clamp(1e-9, 1.0 - 1e-9);
            let intercept = mean_l - slope * mean_k;
            eta = (intercept.exp() / e0).max(f64::MIN_POSITIVE);
        }
    }

    // inflate eta until the bound covers every sample
    let mut needed = 0.0_f64;
    let mut geometric = e0;
    for &v in series {
        let excess = v - nu;
        if excess > 0.0 && geometric > 0.0 {
            needed = needed.max(excess / geometric);
        }
        geometric *= lambda;
    }
    if needed > 0.0 {
        eta = eta.max(needed * (1.0 + 1e-9));
    }
    BoundFit { eta, lambda, nu }
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

/// Per-step aggregate table: RMSE and bound columns in root units.
pub fn steps_csv(summary: &MonteCarloSummary) -> String {
    let mut out = String::from("k,forward_rmse,forward_rcrlb,inverse_rmse,inverse_rcrlb\n");
    for k in 0..summary.forward.rmse.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            k,
            summary.forward.rmse[k],
            summary.forward.bound_rmse[k],
            summary.inverse.rmse[k],
            summary.inverse.bound_rmse[k],
        ));
    }
    out
}

/// Forward filter trace: step, estimate components, covariance diagonal,
/// gain norm.
pub fn forward_trace_csv(trace: &RunTrace) -> String {
    let n = trace.estimates[0].len();
    let mut out = String::from("k");
    for i in 0..n {
        out.push_str(&format!(",mean{i}"));
    }
    for i in 0..n {
        out.push_str(&format!(",cov{i}{i}"));
    }
    out.push_str(",gain_norm\n");
    for k in 0..trace.estimates.len() {
        out.push_str(&k.to_string());
        for v in trace.estimates[k].iter() {
            out.push_str(&format!(",{v}"));
        }
        for v in trace.cov_diagonals[k].iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", trace.gain_norms[k]));
    }
    out
}

/// Inverse filter trace: step, estimate components, covariance diagonal,
/// replicated covariance diagonal.
pub fn inverse_trace_csv(trace: &RunTrace) -> String {
    let n = trace.estimates[0].len();
    let mut out = String::from("k");
    for i in 0..n {
        out.push_str(&format!(",mean{i}"));
    }
    for i in 0..n {
        out.push_str(&format!(",cov{i}{i}"));
    }
    for i in 0..n {
        out.push_str(&format!(",replica{i}{i}"));
    }
    out.push('\n');
    for k in 0..trace.estimates.len() {
        out.push_str(&k.to_string());
        for v in trace.estimates[k].iter() {
            out.push_str(&format!(",{v}"));
        }
        for v in trace.cov_diagonals[k].iter() {
            out.push_str(&format!(",{v}"));
        }
        for v in trace.replica_diagonals[k].iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{linear_model, lorenz_model, LorenzParams};
    use rand::{Rng, SeedableRng};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_vec(1, 1, vec![v])
    }

    #[test]
    fn rcrlb_scalar_hand_value() {
        // F = H = Q = R = J0 = 1: J1 = 1 - 1/(1+1) + 1 = 1.5
        let info = FisherInfo {
            matrix: scalar(1.0),
        };
        let next = rcrlb_forward_step(
            &info,
            &scalar(1.0),
            &scalar(1.0),
            &scalar(1.0),
            &scalar(1.0),
        )
        .unwrap();
        assert!((next.matrix[(0, 0)] - 1.5).abs() <= 1e-12);
    }

    #[test]
    fn rcrlb_matches_information_form_on_random_draws() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        for _ in 0..100 {
            let f = rng.gen_range(0.2..2.0);
            let h = rng.gen_range(0.2..2.0);
            let q = rng.gen_range(0.05..2.0);
            let r = rng.gen_range(0.05..2.0);
            let j0 = rng.gen_range(0.1..5.0);
            let ours = rcrlb_forward_step(
                &FisherInfo { matrix: scalar(j0) },
                &scalar(f),
                &scalar(h),
                &scalar(q),
                &scalar(r),
            )
            .unwrap();
            // matrix-inversion-lemma form, derived independently
            let lemma = h * h / r + 1.0 / (q + f * f / j0);
            assert!((ours.matrix[(0, 0)] - lemma).abs() <= 1e-12);
        }
    }

    #[test]
    fn rcrlb_monotone_in_observation_noise() {
        let info = FisherInfo {
            matrix: scalar(1.0),
        };
        let step = |r: f64, q: f64| {
            rcrlb_forward_step(&info, &scalar(1.0), &scalar(1.0), &scalar(q), &scalar(r))
                .unwrap()
                .matrix[(0, 0)]
        };
        assert!(step(0.5, 1.0) > step(1.0, 1.0));
        assert!(step(1.0, 1.0) > step(2.0, 1.0));
        // large process noise leaves only the observation information
        assert!((step(1.0, 1e9) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rcrlb_handles_singular_process_noise() {
        // Lorenz-style rank-one Q: the lemma form must agree with the
        // printed recursion on a slightly regularized Q
        let model = lorenz_model(&LorenzParams::default());
        let f_jac =
            (model.state_jacobian.as_ref().unwrap())(&DVector::from_vec(vec![-0.2, -0.3, -0.5]));
        let h_jac =
            (model.obs_jacobian.as_ref().unwrap())(&DVector::from_vec(vec![-0.21, -0.35, -0.48]));
        let info = FisherInfo {
            matrix: DMatrix::identity(3, 3) / 0.35,
        };
        let singular =
            rcrlb_forward_step(&info, &f_jac, &h_jac, &model.process_cov, &model.obs_cov).unwrap();
        // the printed recursion needs an invertible Q; at a 1e-9 ridge its
        // remaining cancellation error sits near 1e-7 of the output scale
        let mut regularized = model.process_cov.clone();
        for i in 0..3 {
            regularized[(i, i)] += 1e-9;
        }
        let printed =
            rcrlb_forward_step(&info, &f_jac, &h_jac, &regularized, &model.obs_cov).unwrap();
        let scale = singular.matrix.amax();
        assert!((&singular.matrix - &printed.matrix).amax() <= 1e-4 * scale);
        // result stays positive definite
        let min = singular
            .matrix
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |m, &l| m.min(l));
        assert!(min > 0.0);
    }

    #[test]
    fn inverse_step_is_forward_recursion_with_substituted_pieces() {
        let info = FisherInfo {
            matrix: scalar(2.0),
        };
        let a = rcrlb_inverse_step(
            &info,
            &scalar(0.8),
            &scalar(1.1),
            &scalar(0.3),
            &scalar(0.2),
        )
        .unwrap();
        let b = rcrlb_forward_step(
            &info,
            &scalar(0.8),
            &scalar(1.1),
            &scalar(0.3),
            &scalar(0.2),
        )
        .unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn prior_information_is_inverse_prior_cov() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.25]);
        let info = FisherInfo::from_prior_cov(&cov).unwrap();
        let product = &info.matrix * &cov;
        assert!((product - DMatrix::<f64>::identity(2, 2)).amax() <= 1e-10);
    }

    #[test]
    fn scalar_linear_inverse_bound_matches_steady_state_mse() {
        // steady state of the exact linear inverse filter vs the inverse of
        // the steady-state information from the bound recursion
        let (a, c, g) = (0.9_f64, 1.0_f64, 1.0_f64);
        let (q, r, eps) = (0.04_f64, 0.09_f64, 0.02_f64);
        // forward Riccati to steady state
        let mut sigma = 0.5;
        for _ in 0..400 {
            let pred = a * a * sigma + q;
            let k = pred * c / (c * c * pred + r);
            sigma = pred - k * (c * c * pred + r) * k;
        }
        let pred = a * a * sigma + q;
        let k = pred * c / (c * c * pred + r);
        // exact inverse-filter covariance recursion at steady state
        let a_bar = (1.0 - k * c) * a;
        let q_bar = k * r * k;
        let mut p_bar = 0.5;
        for _ in 0..400 {
            let pp = a_bar * a_bar * p_bar + q_bar;
            let kk = pp * g / (g * g * pp + eps);
            p_bar = pp - kk * (g * g * pp + eps) * kk;
        }
        // bound recursion with the same constant pieces
        let mut info = FisherInfo {
            matrix: scalar(1.0 / 0.5),
        };
        for _ in 0..400 {
            info = rcrlb_inverse_step(
                &info,
                &scalar(a_bar),
                &scalar(g),
                &scalar(q_bar),
                &scalar(eps),
            )
            .unwrap();
        }
        let bound_var = 1.0 / info.matrix[(0, 0)];
        assert!(
            (bound_var - p_bar).abs() / p_bar <= 0.05,
            "bound {bound_var} vs steady covariance {p_bar}"
        );
    }

    fn zero_noise_spec() -> ExperimentSpec {
        let model = linear_model(
            scalar(0.9),
            scalar(1.0),
            scalar(1.0),
            scalar(0.0),
            scalar(0.0),
            scalar(0.0),
        )
        .unwrap();
        ExperimentSpec {
            model,
            x0: DVector::from_vec(vec![1.0]),
            horizon: 10,
            true_forward: RuleKind::Cubature,
            assumed_forward: RuleKind::Cubature,
            inverse_outer: RuleKind::Cubature,
            forward_mean0: ForwardInit::Fixed(DVector::from_vec(vec![1.0])),
            forward_cov0: scalar(0.0),
            inverse_mean0: None,
            inverse_cov0: scalar(0.0),
            replica_cov0: None,
            metric: MetricGroup::FullState,
        }
    }

    #[test]
    fn noiseless_truth_started_run_has_zero_errors() {
        let run = run_coupled_experiment(&zero_noise_spec(), RunSeeds::derive(1, 0)).unwrap();
        for v in run
            .forward
            .squared_error
            .iter()
            .chain(&run.inverse.squared_error)
        {
            assert!(*v <= 1e-30, "error should vanish, got {v}");
        }
    }

    #[test]
    fn single_run_monte_carlo_reproduces_the_run() {
        let model = lorenz_model(&LorenzParams::default());
        let spec = ExperimentSpec {
            model,
            x0: DVector::from_vec(vec![-0.2, -0.3, -0.5]),
            horizon: 30,
            true_forward: RuleKind::GaussHermite { points_per_axis: 3 },
            assumed_forward: RuleKind::GaussHermite { points_per_axis: 3 },
            inverse_outer: RuleKind::GaussHermite { points_per_axis: 3 },
            forward_mean0: ForwardInit::Fixed(DVector::from_vec(vec![1.35, -3.0, 6.0])),
            forward_cov0: DMatrix::identity(3, 3) * 0.35,
            inverse_mean0: None,
            inverse_cov0: DMatrix::identity(3, 3) * 0.35,
            replica_cov0: None,
            metric: MetricGroup::FullState,
        };
        let summary = monte_carlo(&spec, 1, 77, 1).unwrap();
        let run = run_coupled_experiment(&spec, RunSeeds::derive(77, 0)).unwrap();
        assert_eq!(summary.forward.mse, run.forward.squared_error);
        assert_eq!(summary.inverse.mse, run.inverse.squared_error);
        assert_eq!(summary.runs_excluded, 0);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let model = lorenz_model(&LorenzParams::default());
        let spec = ExperimentSpec {
            model,
            x0: DVector::from_vec(vec![-0.2, -0.3, -0.5]),
            horizon: 15,
            true_forward: RuleKind::Cubature,
            assumed_forward: RuleKind::Cubature,
            inverse_outer: RuleKind::Cubature,
            forward_mean0: ForwardInit::Fixed(DVector::from_vec(vec![1.35, -3.0, 6.0])),
            forward_cov0: DMatrix::identity(3, 3) * 0.35,
            inverse_mean0: None,
            inverse_cov0: DMatrix::identity(3, 3) * 0.35,
            replica_cov0: None,
            metric: MetricGroup::FullState,
        };
        let runs: Vec<(usize, Result<CoupledRun>)> = (0..6)
            .map(|idx| {
                (
                    idx,
                    run_coupled_experiment(&spec, RunSeeds::derive(3, idx as u64)),
                )
            })
            .collect();
        let mut shuffled = runs.clone();
        shuffled.swap(0, 5);
        shuffled.swap(1, 3);
        let a = aggregate_runs(6, runs, &MetricGroup::FullState).unwrap();
        let b = aggregate_runs(6, shuffled, &MetricGroup::FullState).unwrap();
        assert_eq!(a.forward, b.forward);
        assert_eq!(a.inverse, b.inverse);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let model = lorenz_model(&LorenzParams::default());
        let spec = ExperimentSpec {
            model,
            x0: DVector::from_vec(vec![-0.2, -0.3, -0.5]),
            horizon: 12,
            true_forward: RuleKind::Cubature,
            assumed_forward: RuleKind::Cubature,
            inverse_outer: RuleKind::Cubature,
            forward_mean0: ForwardInit::Fixed(DVector::from_vec(vec![1.35, -3.0, 6.0])),
            forward_cov0: DMatrix::identity(3, 3) * 0.35,
            inverse_mean0: None,
            inverse_cov0: DMatrix::identity(3, 3) * 0.35,
            replica_cov0: None,
            metric: MetricGroup::FullState,
        };
        let a = monte_carlo(&spec, 5, 11, 1).unwrap();
        let b = monte_carlo(&spec, 5, 11, 3).unwrap();
        assert_eq!(a.forward, b.forward);
        assert_eq!(a.inverse, b.inverse);
    }

    #[test]
    fn bound_check_exact_geometric() {
        let fit = BoundFit {
            eta: 1.0,
            lambda: 0.5,
            nu: 0.0,
        };
        let (ok, margin) = check_exponential_bound(&[1.0, 0.5, 0.25], &fit);
        assert!(ok);
        assert_eq!(margin, 0.0);
        let (ok, _) = check_exponential_bound(&[1.0, 2.0, 4.0], &fit);
        assert!(!ok);
        let flat = BoundFit {
            eta: 1.0,
            lambda: 0.5,
            nu: 3.0,
        };
        let (ok, _) = check_exponential_bound(&[3.0, 3.0, 3.0], &flat);
        assert!(ok);
    }

    #[test]
    fn bound_fit_recovers_geometric_rate() {
        let series: Vec<f64> = (0..40).map(|k| 0.5_f64.powi(k)).collect();
        let fit = fit_exponential_bound(&series);
        assert!((fit.lambda - 0.5).abs() <= 1e-6, "lambda = {}", fit.lambda);
        let (ok, _) = check_exponential_bound(&series, &fit);
        assert!(ok);
    }

    #[test]
    fn bound_fit_recovers_constant_offset() {
        let series: Vec<f64> = (0..40).map(|k| 0.5_f64.powi(k) + 0.1).collect();
        let fit = fit_exponential_bound(&series);
        assert!((fit.nu - 0.1).abs() <= 0.01, "nu = {}", fit.nu);
        let (ok, _) = check_exponential_bound(&series, &fit);
        assert!(ok);
    }

    #[test]
    fn bound_fit_handles_noise_series() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let series: Vec<f64> = (0..60).map(|_| rng.gen_range(0.9..1.1)).collect();
        let fit = fit_exponential_bound(&series);
        assert!(fit.lambda < 1.0 && fit.lambda > 0.0);
        assert!(fit.nu.is_finite());
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        assert!((fit.nu - mean).abs() <= 0.1 * mean);
        let (ok, _) = check_exponential_bound(&series, &fit);
        assert!(ok);
    }

    #[test]
    fn fitted_bound_always_passes_its_own_series() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(41);
        for _ in 0..25 {
            let n = rng.gen_range(5..50usize);
            let series: Vec<f64> = (0..n)
                .map(|k| 2.0 * 0.8_f64.powi(k as i32) + rng.gen_range(0.01..0.5))
                .collect();
            let fit = fit_exponential_bound(&series);
            let (ok, margin) = check_exponential_bound(&series, &fit);
            assert!(ok, "fit failed its own series, margin {margin}");
        }
    }
}
