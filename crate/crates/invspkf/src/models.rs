//! Three-map state-space systems and the two benchmark models.
//!
//! A system couples the true state evolution, the observation an estimator
//! receives, and the action taken on the resulting estimate: the state map
//! drives `x`, the observation map produces `y` from `x`, and the action
//! map produces `a` from an estimate of `x`. Process, observation and
//! action noises are zero-mean Gaussian with the stored covariances.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{check_symmetric, cholesky_sqrt, DEFAULT_CHOLESKY_JITTER};

pub type DynMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type DynJacobian = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// State dimension `n_x`, observation dimension `n_y`, action dimension
/// `n_a`, the three maps, and the three noise covariances.
///
/// Angular output components (bearings) are listed by index so innovations
/// can be wrapped to `(-pi, pi]` during measurement updates.
#[derive(Clone)]
pub struct StateSpaceModel {
    pub n_x: usize,
    pub n_y: usize,
    pub n_a: usize,
    pub state_map: DynMap,
    pub obs_map: DynMap,
    pub action_map: DynMap,
    pub process_cov: DMatrix<f64>,
    pub obs_cov: DMatrix<f64>,
    pub action_cov: DMatrix<f64>,
    pub state_jacobian: Option<DynJacobian>,
    pub obs_jacobian: Option<DynJacobian>,
    pub action_jacobian: Option<DynJacobian>,
    pub angular_obs_components: Vec<usize>,
    pub angular_action_components: Vec<usize>,
}

impl std::fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("n_x", &self.n_x)
            .field("n_y", &self.n_y)
            .field("n_a", &self.n_a)
            .finish_non_exhaustive()
    }
}

impl StateSpaceModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_x: usize,
        n_y: usize,
        n_a: usize,
        state_map: DynMap,
        obs_map: DynMap,
        action_map: DynMap,
        process_cov: DMatrix<f64>,
        obs_cov: DMatrix<f64>,
        action_cov: DMatrix<f64>,
    ) -> Result<Self> {
        validate_cov(&process_cov, n_x)?;
        validate_cov(&obs_cov, n_y)?;
        validate_cov(&action_cov, n_a)?;
        Ok(StateSpaceModel {
            n_x,
            n_y,
            n_a,
            state_map,
            obs_map,
            action_map,
            process_cov,
            obs_cov,
            action_cov,
            state_jacobian: None,
            obs_jacobian: None,
            action_jacobian: None,
            angular_obs_components: Vec::new(),
            angular_action_components: Vec::new(),
        })
    }

    pub fn state(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.state_map)(x)
    }

    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.obs_map)(x)
    }

    pub fn act(&self, estimate: &DVector<f64>) -> DVector<f64> {
        (self.action_map)(estimate)
    }
}

fn validate_cov(cov: &DMatrix<f64>, dim: usize) -> Result<()> {
    assert_eq!(cov.nrows(), dim, "covariance dimension mismatch");
    assert_eq!(cov.ncols(), dim, "covariance dimension mismatch");
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteOutput);
    }
    check_symmetric(cov)?;
    let scale = cov.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let min_eig = cov
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |m, &l| m.min(l));
    if min_eig < -1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite);
    }
    Ok(())
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % std::f64::consts::TAU;
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    } else if r <= -std::f64::consts::PI {
        r += std::f64::consts::TAU;
    }
    r
}

// ---------------------------------------------------------------------------
// Coordinated-turn tracking benchmark
// ---------------------------------------------------------------------------

/// Planar constant-turn-rate model parameters. State is
/// `[p_x, v_x, p_y, v_y, omega]`; a radar at the origin measures range and
/// bearing of the position, and actions are the same map applied to the
/// estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinatedTurnParams {
    /// Sampling interval in seconds.
    pub sample_interval: f64,
    /// True initial turn rate in rad/s (used for default initial states).
    pub omega0: f64,
    /// White-noise-acceleration intensity per position axis.
    pub q_pos: f64,
    /// Turn-rate random-walk intensity.
    pub q_turn: f64,
    /// Range measurement variance in m^2.
    pub r_range: f64,
    /// Bearing measurement variance in rad^2.
    pub r_bearing: f64,
}

impl Default for CoordinatedTurnParams {
    fn default() -> Self {
        let one_degree = std::f64::consts::PI / 180.0;
        CoordinatedTurnParams {
            sample_interval: 1.0,
            omega0: 3.0 * one_degree,
            q_pos: 0.1,
            q_turn: 1.75e-4,
            r_range: 100.0,
            r_bearing: one_degree * one_degree,
        }
    }
}

impl CoordinatedTurnParams {
    /// Default initial true state `[1000, 30, 1000, 0, omega0]`.
    pub fn default_initial_state(&self) -> DVector<f64> {
        DVector::from_vec(vec![1000.0, 30.0, 1000.0, 0.0, self.omega0])
    }
}

/// `sin(wT)/w` and `(1-cos(wT))/w` with a second-order series below
/// `|wT| < 1e-6`, where the direct quotients lose all precision.
fn turn_factors(omega: f64, t: f64) -> (f64, f64) {
    let wt = omega * t;
    if wt.abs() < 1e-6 {
        (
            t * (1.0 - wt * wt / 6.0),
            omega * t * t * 0.5 * (1.0 - wt * wt / 12.0),
        )
    } else {
        (wt.sin() / omega, (1.0 - wt.cos()) / omega)
    }
}

/// Derivatives of the two turn factors with respect to `omega`.
fn turn_factor_derivatives(omega: f64, t: f64) -> (f64, f64) {
    let wt = omega * t;
    if wt.abs() < 1e-3 {
        (
            t * t * (-wt / 3.0 + wt * wt * wt / 30.0),
            t * t * (0.5 - wt * wt / 8.0),
        )
    } else {
        (
            (t * wt.cos() * omega - wt.sin()) / (omega * omega),
            (t * wt.sin() * omega - (1.0 - wt.cos())) / (omega * omega),
        )
    }
}

fn range_bearing(px: f64, py: f64) -> DVector<f64> {
    DVector::from_vec(vec![(px * px + py * py).sqrt(), py.atan2(px)])
}

fn range_bearing_jacobian(px: f64, py: f64, n: usize) -> DMatrix<f64> {
    let rho2 = px * px + py * py;
    let rho = rho2.sqrt();
    let mut jac = DMatrix::zeros(2, n);
    jac[(0, 0)] = px / rho;
    jac[(0, 2)] = py / rho;
    jac[(1, 0)] = -py / rho2;
    jac[(1, 2)] = px / rho2;
    jac
}

pub fn coordinated_turn_model(params: &CoordinatedTurnParams) -> StateSpaceModel {
    let t = params.sample_interval;
    assert!(t > 0.0, "sampling interval must be positive");

    let state_map: DynMap = Arc::new(move |x: &DVector<f64>| {
        let omega = x[4];
        let (a, b) = turn_factors(omega, t);
        let (c, s) = ((omega * t).cos(), (omega * t).sin());
        DVector::from_vec(vec![
            x[0] + a * x[1] - b * x[3],
            c * x[1] - s * x[3],
            b * x[1] + x[2] + a * x[3],
            s * x[1] + c * x[3],
            omega,
        ])
    });
    let obs_map: DynMap = Arc::new(|x: &DVector<f64>| range_bearing(x[0], x[2]));
    let action_map: DynMap = Arc::new(|x: &DVector<f64>| range_bearing(x[0], x[2]));

    let mut process_cov = DMatrix::zeros(5, 5);
    let t2 = t * t;
    let t3 = t2 * t;
    for base in [0usize, 2] {
        process_cov[(base, base)] = params.q_pos * t3 / 3.0;
        process_cov[(base, base + 1)] = params.q_pos * t2 / 2.0;
        process_cov[(base + 1, base)] = params.q_pos * t2 / 2.0;
        process_cov[(base + 1, base + 1)] = params.q_pos * t;
    }
    process_cov[(4, 4)] = params.q_turn * t;
    let obs_cov =
        DMatrix::from_diagonal(&DVector::from_vec(vec![params.r_range, params.r_bearing]));
    let action_cov = obs_cov.clone();

    let state_jacobian: DynJacobian = Arc::new(move |x: &DVector<f64>| {
        let omega = x[4];
        let (a, b) = turn_factors(omega, t);
        let (da, db) = turn_factor_derivatives(omega, t);
        let (c, s) = ((omega * t).cos(), (omega * t).sin());
        let (vx, vy) = (x[1], x[3]);
        DMatrix::from_row_slice(
            5,
            5,
            &[
                1.0,
                a,
                0.0,
                -b,
                da * vx - db * vy,
                0.0,
                c,
                0.0,
                -s,
                -t * s * vx - t * c * vy,
                0.0,
                b,
                1.0,
                a,
                db * vx + da * vy,
                0.0,
                s,
                0.0,
                c,
                t * c * vx - t * s * vy,
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
            ],
        )
    });
    let obs_jacobian: DynJacobian =
        Arc::new(|x: &DVector<f64>| range_bearing_jacobian(x[0], x[2], 5));
    let action_jacobian = obs_jacobian.clone();

    let mut model = StateSpaceModel::new(
        5,
        2,
        2,
        state_map,
        obs_map,
        action_map,
        process_cov,
        obs_cov,
        action_cov,
    )
    .expect("coordinated-turn covariances are PSD by construction");
    model.state_jacobian = Some(state_jacobian);
    model.obs_jacobian = Some(obs_jacobian);
    model.action_jacobian = Some(action_jacobian);
    model.angular_obs_components = vec![1];
    model.angular_action_components = vec![1];
    model
}

// ---------------------------------------------------------------------------
// Lorenz benchmark
// ---------------------------------------------------------------------------

/// Euler-discretized Lorenz system with range-type scalar observation and
/// action maps. Process noise enters only the third state component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzParams {
    pub dt: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    /// Gain on the process-noise channel (third component).
    pub process_gain: f64,
    /// Gain on the observation noise.
    pub obs_gain: f64,
    /// Gain on the action noise.
    pub action_gain: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        LorenzParams {
            dt: 0.01,
            r1: 10.0,
            r2: 28.0,
            r3: 8.0 / 3.0,
            process_gain: 0.5,
            obs_gain: 0.065,
            action_gain: 0.1,
        }
    }
}

impl LorenzParams {
    /// Default initial true state `[-0.2, -0.3, -0.5]`.
    pub fn default_initial_state(&self) -> DVector<f64> {
        DVector::from_vec(vec![-0.2, -0.3, -0.5])
    }
}

fn offset_norm(x: &DVector<f64>, offset_axis: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        let d = if i == offset_axis { x[i] - 0.5 } else { x[i] };
        s += d * d;
    }
    s.sqrt()
}

pub fn lorenz_model(params: &LorenzParams) -> StateSpaceModel {
    let LorenzParams {
        dt,
        r1,
        r2,
        r3,
        process_gain,
        obs_gain,
        action_gain,
    } = *params;
    assert!(dt > 0.0, "step size must be positive");

    let state_map: DynMap = Arc::new(move |x: &DVector<f64>| {
        DVector::from_vec(vec![
            x[0] + dt * r1 * (-x[0] + x[1]),
            x[1] + dt * (r2 * x[0] - x[1] - x[0] * x[2]),
            x[2] + dt * (-r3 * x[2] + x[0] * x[1]),
        ])
    });
    let obs_map: DynMap =
        Arc::new(move |x: &DVector<f64>| DVector::from_vec(vec![dt * offset_norm(x, 0)]));
    let action_map: DynMap =
        Arc::new(move |x: &DVector<f64>| DVector::from_vec(vec![dt * offset_norm(x, 1)]));

    // the noise channel is gain * w with Var(w) = dt
    let mut process_cov = DMatrix::zeros(3, 3);
    process_cov[(2, 2)] = process_gain * process_gain * dt;
    let obs_cov = DMatrix::from_vec(1, 1, vec![obs_gain * obs_gain * dt]);
    let action_cov = DMatrix::from_vec(1, 1, vec![action_gain * action_gain * dt]);

    let state_jacobian: DynJacobian = Arc::new(move |x: &DVector<f64>| {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0 - dt * r1,
                dt * r1,
                0.0,
                dt * (r2 - x[2]),
                1.0 - dt,
                -dt * x[0],
                dt * x[1],
                dt * x[0],
                1.0 - dt * r3,
            ],
        )
    });
    let obs_jacobian: DynJacobian = Arc::new(move |x: &DVector<f64>| {
        let rho = offset_norm(x, 0);
        DMatrix::from_row_slice(
            1,
            3,
            &[dt * (x[0] - 0.5) / rho, dt * x[1] / rho, dt * x[2] / rho],
        )
    });
    let action_jacobian: DynJacobian = Arc::new(move |x: &DVector<f64>| {
        let rho = offset_norm(x, 1);
        DMatrix::from_row_slice(
            1,
            3,
            &[dt * x[0] / rho, dt * (x[1] - 0.5) / rho, dt * x[2] / rho],
        )
    });

    let mut model = StateSpaceModel::new(
        3,
        1,
        1,
        state_map,
        obs_map,
        action_map,
        process_cov,
        obs_cov,
        action_cov,
    )
    .expect("Lorenz covariances are PSD by construction");
    model.state_jacobian = Some(state_jacobian);
    model.obs_jacobian = Some(obs_jacobian);
    model.action_jacobian = Some(action_jacobian);
    model
}

// ---------------------------------------------------------------------------
// Fully linear model (oracle tests, scalar configs)
// ---------------------------------------------------------------------------

/// Linear system `x' = F x + w`, `y = H x + v`, `a = G x_est + eps`, with
/// constant Jacobians. Used by oracle tests and scalar-linear configs.
pub fn linear_model(
    f_mat: DMatrix<f64>,
    h_mat: DMatrix<f64>,
    g_mat: DMatrix<f64>,
    process_cov: DMatrix<f64>,
    obs_cov: DMatrix<f64>,
    action_cov: DMatrix<f64>,
) -> Result<StateSpaceModel> {
    let n_x = f_mat.nrows();
    assert_eq!(f_mat.ncols(), n_x, "state matrix must be square");
    let n_y = h_mat.nrows();
    assert_eq!(h_mat.ncols(), n_x, "observation matrix shape mismatch");
    let n_a = g_mat.nrows();
    assert_eq!(g_mat.ncols(), n_x, "action matrix shape mismatch");

    let f2 = f_mat.clone();
    let h2 = h_mat.clone();
    let g2 = g_mat.clone();
    let state_map: DynMap = Arc::new(move |x: &DVector<f64>| &f2 * x);
    let obs_map: DynMap = Arc::new(move |x: &DVector<f64>| &h2 * x);
    let action_map: DynMap = Arc::new(move |x: &DVector<f64>| &g2 * x);

    let mut model = StateSpaceModel::new(
        n_x,
        n_y,
        n_a,
        state_map,
        obs_map,
        action_map,
        process_cov,
        obs_cov,
        action_cov,
    )?;
    model.state_jacobian = Some(Arc::new(move |_: &DVector<f64>| f_mat.clone()));
    model.obs_jacobian = Some(Arc::new(move |_: &DVector<f64>| h_mat.clone()));
    model.action_jacobian = Some(Arc::new(move |_: &DVector<f64>| g_mat.clone()));
    Ok(model)
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// A simulated run: `states[k]` for `k = 0..=steps`, `observations[k-1]`
/// holding `y_k` for `k = 1..=steps`, and `actions` filled in later by the
/// coupled attacker-defender run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// One row per time index: `k`, state components, then observation
    /// components (blank at `k = 0`, where no observation exists).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let n_x = self.states[0].len();
        let n_y = self.observations.first().map_or(0, |y| y.len());
        out.push('k');
        for i in 0..n_x {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..n_y {
            out.push_str(&format!(",y{i}"));
        }
        out.push('\n');
        for (k, x) in self.states.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in x.iter() {
                out.push_str(&format!(",{v}"));
            }
            if k == 0 {
                for _ in 0..n_y {
                    out.push(',');
                }
            } else {
                for v in self.observations[k - 1].iter() {
                    out.push_str(&format!(",{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Draws `L z` with `z` standard normal.
pub(crate) fn sample_noise(rng: &mut ChaCha12Rng, root: &DMatrix<f64>) -> DVector<f64> {
    let n = root.nrows();
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    root * z
}

/// Simulates `steps` transitions of the state and observation processes.
/// Identical `(model, x0, seed)` reproduce the trajectory bit for bit; the
/// generator is ChaCha12 and each step draws process noise first, then
/// observation noise.
pub fn simulate_trajectory(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    assert_eq!(x0.len(), model.n_x, "initial state dimension mismatch");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let process_root = cholesky_sqrt(&model.process_cov, DEFAULT_CHOLESKY_JITTER)?;
    let obs_root = cholesky_sqrt(&model.obs_cov, DEFAULT_CHOLESKY_JITTER)?;

    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    states.push(x0.clone());
    let mut x = x0.clone();
    for _ in 0..steps {
        x = model.state(&x) + sample_noise(&mut rng, &process_root);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        let y = model.observe(&x) + sample_noise(&mut rng, &obs_root);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        states.push(x.clone());
        observations.push(y);
    }
    Ok(Trajectory {
        states,
        observations,
        actions: Vec::new(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{numeric_jacobian, DEFAULT_JACOBIAN_STEP};
    use rand::Rng;

    #[test]
    fn turn_model_quarter_circle() {
        // omega*T = pi/2 with T = 1
        let params = CoordinatedTurnParams {
            sample_interval: 1.0,
            ..CoordinatedTurnParams::default()
        };
        let model = coordinated_turn_model(&params);
        let omega = std::f64::consts::FRAC_PI_2;
        let x = DVector::from_vec(vec![0.0, omega, 0.0, 0.0, omega]);
        let out = model.state(&x);
        let expected = [1.0, 0.0, 1.0, omega, omega];
        for (got, want) in out.iter().zip(expected) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn turn_model_small_omega_limit() {
        let model = coordinated_turn_model(&CoordinatedTurnParams::default());
        let x = DVector::from_vec(vec![10.0, 3.0, -4.0, 2.0, 1e-12]);
        let out = model.state(&x);
        assert!((out[0] - 13.0).abs() <= 1e-11);
        assert!((out[1] - 3.0).abs() <= 1e-11);
        assert!((out[2] - (-2.0)).abs() <= 1e-11);
        assert!((out[3] - 2.0).abs() <= 1e-11);
    }

    #[test]
    fn range_bearing_three_four_five() {
        let model = coordinated_turn_model(&CoordinatedTurnParams::default());
        let x = DVector::from_vec(vec![3.0, 7.0, 4.0, -2.0, 0.1]);
        let y = model.observe(&x);
        assert!((y[0] - 5.0).abs() <= 1e-14);
        assert!((y[1] - 4.0_f64.atan2(3.0)).abs() <= 1e-14);
    }

    #[test]
    fn range_bearing_ignores_velocity_and_turn_rate() {
        let model = coordinated_turn_model(&CoordinatedTurnParams::default());
        let jac = (model.obs_jacobian.as_ref().unwrap())(&DVector::from_vec(vec![
            800.0, 25.0, 600.0, -10.0, 0.05,
        ]));
        for row in 0..2 {
            for col in [1, 3, 4] {
                assert_eq!(jac[(row, col)], 0.0);
            }
        }
    }

    #[test]
    fn lorenz_noiseless_map_fixes_origin() {
        let model = lorenz_model(&LorenzParams::default());
        let out = model.state(&DVector::zeros(3));
        assert_eq!(out, DVector::zeros(3));
    }

    #[test]
    fn lorenz_observation_offset_cancels() {
        let model = lorenz_model(&LorenzParams::default());
        let y = model.observe(&DVector::from_vec(vec![0.5, 0.0, 0.0]));
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn lorenz_hand_evaluated_euler_step() {
        // one Euler step from [-0.2, -0.3, -0.5], recomputed by hand:
        //   x0' = -0.2 + 0.01*10*( 0.2 - 0.3)            = -0.21
        //   x1' = -0.3 + 0.01*(28*(-0.2) + 0.3 - 0.1)    = -0.354
        //   x2' = -0.5 + 0.01*((8/3)*0.5 + 0.06)         = -0.48606666...
        let model = lorenz_model(&LorenzParams::default());
        let out = model.state(&DVector::from_vec(vec![-0.2, -0.3, -0.5]));
        assert!((out[0] - (-0.21)).abs() <= 1e-12);
        assert!((out[1] - (-0.354)).abs() <= 1e-12);
        assert!((out[2] - (-0.4860666666666667)).abs() <= 1e-12);
    }

    #[test]
    fn analytic_jacobians_pass_gradient_check() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let lorenz = lorenz_model(&LorenzParams::default());
        let turn = coordinated_turn_model(&CoordinatedTurnParams::default());
        for _ in 0..20 {
            let x = DVector::from_iterator(3, (0..3).map(|_| rng.gen_range(-8.0..8.0)));
            check_one(&lorenz, &x);
            // keep the radar target away from the origin where bearing blows up
            let x = DVector::from_vec(vec![
                rng.gen_range(500.0..1500.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(500.0..1500.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-0.2..0.2),
            ]);
            check_one(&turn, &x);
        }

        fn check_one(model: &StateSpaceModel, x: &DVector<f64>) {
            for (map, jac) in [
                (&model.state_map, model.state_jacobian.as_ref().unwrap()),
                (&model.obs_map, model.obs_jacobian.as_ref().unwrap()),
                (&model.action_map, model.action_jacobian.as_ref().unwrap()),
            ] {
                let analytic = jac(x);
                let numeric = numeric_jacobian(|p| map(p), x, DEFAULT_JACOBIAN_STEP).unwrap();
                let scale = analytic.amax().max(1.0);
                assert!(
                    (&analytic - &numeric).amax() <= 1e-5 * scale,
                    "jacobian mismatch at {x:?}"
                );
            }
        }
    }

    #[test]
    fn model_covariances_are_psd() {
        for model in [
            coordinated_turn_model(&CoordinatedTurnParams::default()),
            lorenz_model(&LorenzParams::default()),
        ] {
            for cov in [&model.process_cov, &model.obs_cov, &model.action_cov] {
                let min = cov
                    .clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .fold(f64::INFINITY, |m, &l| m.min(l));
                assert!(min >= -1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_simulation_is_deterministic_iteration() {
        let params = LorenzParams::default();
        let mut model = lorenz_model(&params);
        model.process_cov = DMatrix::zeros(3, 3);
        model.obs_cov = DMatrix::zeros(1, 1);
        let x0 = DVector::from_vec(vec![-0.2, -0.3, -0.5]);
        let traj = simulate_trajectory(&model, &x0, 10, 99).unwrap();
        let mut x = x0.clone();
        for k in 1..=10 {
            x = model.state(&x);
            assert_eq!(traj.states[k], x);
            assert_eq!(traj.observations[k - 1], model.observe(&x));
        }
    }

    #[test]
    fn zero_noise_simulation_from_origin_stays_there() {
        let mut model = lorenz_model(&LorenzParams::default());
        model.process_cov = DMatrix::zeros(3, 3);
        model.obs_cov = DMatrix::zeros(1, 1);
        let traj = simulate_trajectory(&model, &DVector::zeros(3), 25, 1).unwrap();
        for x in &traj.states {
            assert_eq!(x, &DVector::zeros(3));
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let model = lorenz_model(&LorenzParams::default());
        let x0 = DVector::from_vec(vec![-0.2, -0.3, -0.5]);
        let a = simulate_trajectory(&model, &x0, 50, 1234).unwrap();
        let b = simulate_trajectory(&model, &x0, 50, 1234).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.observations, b.observations);
    }

    #[test]
    fn lorenz_long_run_stays_bounded() {
        let model = lorenz_model(&LorenzParams::default());
        let x0 = DVector::from_vec(vec![-0.2, -0.3, -0.5]);
        let traj = simulate_trajectory(&model, &x0, 1000, 7).unwrap();
        for x in &traj.states {
            assert!(x.iter().all(|v| v.is_finite() && v.abs() <= 100.0));
        }
    }

    #[test]
    fn trajectory_csv_shape() {
        let model = lorenz_model(&LorenzParams::default());
        let x0 = DVector::from_vec(vec![-0.2, -0.3, -0.5]);
        let traj = simulate_trajectory(&model, &x0, 3, 5).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "k,x0,x1,x2,y0");
        assert!(lines[1].starts_with("0,-0.2,-0.3,-0.5,"));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(4.0 * std::f64::consts::PI + 0.1) - 0.1).abs() <= 1e-12);
        assert_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert_eq!(wrap_angle(0.3), 0.3);
    }
}
