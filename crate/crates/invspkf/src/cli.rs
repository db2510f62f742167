//! Configuration-driven entry points behind the command-line binary:
//! run Monte-Carlo experiments, dump point rules, trace bound recursions.
//!
//! Config files are TOML with one section per concern (`[model]`,
//! `[forward]`, `[inverse]`, `[evaluation]`, `[output]`); unknown keys are
//! rejected. Outputs are written atomically (temp file, then rename) and
//! identical config plus seed produces byte-identical files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::json;

use crate::error::Error;
use crate::evaluation::{
    fit_exponential_bound, forward_trace_csv, inverse_trace_csv, monte_carlo, steps_csv, BoundFit,
    ExperimentSpec, ForwardInit, MetricGroup, MonteCarloSummary,
};
use crate::models::{
    coordinated_turn_model, linear_model, lorenz_model, simulate_trajectory, CoordinatedTurnParams,
    LorenzParams, StateSpaceModel,
};
use crate::numerics::spd_inverse;
use crate::points::{PointRule, RuleKind};

/// CLI-level failures, mapped onto process exit codes: configuration
/// problems exit 2, numeric failures 3, I/O problems 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(Error),
    Io(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numeric(e) => write!(f, "numeric failure: {e}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Numeric(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

// ---------------------------------------------------------------------------
// Config file shape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    model: ModelSection,
    #[serde(default)]
    forward: ForwardSection,
    #[serde(default)]
    inverse: InverseSection,
    #[serde(default)]
    evaluation: EvaluationSection,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    kind: String,
    #[serde(default)]
    x0: Option<Vec<f64>>,
    #[serde(default)]
    lorenz: Option<LorenzTable>,
    #[serde(default)]
    coordinated_turn: Option<TurnTable>,
    #[serde(default)]
    scalar_linear: Option<LinearTable>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LorenzTable {
    dt: Option<f64>,
    r1: Option<f64>,
    r2: Option<f64>,
    r3: Option<f64>,
    process_gain: Option<f64>,
    obs_gain: Option<f64>,
    action_gain: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnTable {
    sample_interval: Option<f64>,
    omega0: Option<f64>,
    q_pos: Option<f64>,
    q_turn: Option<f64>,
    r_range: Option<f64>,
    r_bearing: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearTable {
    a: Option<f64>,
    c: Option<f64>,
    g: Option<f64>,
    q: Option<f64>,
    r: Option<f64>,
    sigma_eps: Option<f64>,
}

/// `{ kind = "cubature" }`, `{ kind = "gauss_hermite", m = 3 }` or
/// `{ kind = "unscented", kappa = 1.5 }`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleTable {
    kind: String,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    kappa: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MeanSpec {
    Keyword(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CovSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForwardSection {
    true_rule: Option<RuleTable>,
    assumed_rule: Option<RuleTable>,
    mean0: Option<MeanSpec>,
    cov0: Option<CovSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InverseSection {
    rule: Option<RuleTable>,
    mean0: Option<MeanSpec>,
    cov0: Option<CovSpec>,
    replica_cov0: Option<CovSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluationSection {
    horizon: Option<usize>,
    runs: Option<usize>,
    seed: Option<u64>,
    metric: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<String>,
    prefix: Option<String>,
    write_traces: Option<bool>,
}

/// Command-line overrides applied on top of the parsed config.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Fully materialized experiment: the spec to run, harness parameters, and
/// a JSON echo of every resolved value for the summary file.
#[derive(Debug)]
pub struct ResolvedExperiment {
    pub spec: ExperimentSpec,
    pub runs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub prefix: String,
    pub write_traces: bool,
    pub echo: serde_json::Value,
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
}

fn resolve_rule(table: &Option<RuleTable>, default: RuleKind, key: &str) -> CliResult<RuleKind> {
    let Some(rule) = table else {
        return Ok(default);
    };
    match rule.kind.as_str() {
        "cubature" => {
            if rule.m.is_some() || rule.kappa.is_some() {
                return config_err(format!("{key}: cubature takes no parameters"));
            }
            Ok(RuleKind::Cubature)
        }
        "gauss_hermite" | "gh" => {
            if rule.kappa.is_some() {
                return config_err(format!("{key}: gauss_hermite takes `m`, not `kappa`"));
            }
            let m = rule
                .m
                .ok_or_else(|| CliError::Config(format!("{key}: gauss_hermite requires `m`")))?;
            if m == 0 {
                return config_err(format!("{key}: m must be at least 1"));
            }
            Ok(RuleKind::GaussHermite { points_per_axis: m })
        }
        "unscented" => {
            if rule.m.is_some() {
                return config_err(format!("{key}: unscented takes `kappa`, not `m`"));
            }
            let kappa = rule
                .kappa
                .ok_or_else(|| CliError::Config(format!("{key}: unscented requires `kappa`")))?;
            Ok(RuleKind::Unscented { kappa })
        }
        other => config_err(format!("{key}: unknown rule kind `{other}`")),
    }
}

fn rule_echo(kind: RuleKind) -> serde_json::Value {
    match kind {
        RuleKind::Cubature => json!({ "kind": "cubature" }),
        RuleKind::GaussHermite { points_per_axis } => {
            json!({ "kind": "gauss_hermite", "m": points_per_axis })
        }
        RuleKind::Unscented { kappa } => json!({ "kind": "unscented", "kappa": kappa }),
    }
}

fn resolve_cov(
    spec: &Option<CovSpec>,
    default_diag: &[f64],
    n: usize,
    key: &str,
) -> CliResult<DMatrix<f64>> {
    let cov = match spec {
        None => DMatrix::from_diagonal(&DVector::from_row_slice(default_diag)),
        Some(CovSpec::Scalar(s)) => DMatrix::identity(n, n) * *s,
        Some(CovSpec::Diagonal(d)) => {
            if d.len() != n {
                return config_err(format!("{key}: diagonal must have length {n}"));
            }
            DMatrix::from_diagonal(&DVector::from_row_slice(d))
        }
        Some(CovSpec::Full(rows)) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return config_err(format!("{key}: matrix must be {n}x{n}"));
            }
            DMatrix::from_fn(n, n, |i, j| rows[i][j])
        }
    };
    if cov.iter().any(|x| !x.is_finite()) {
        return config_err(format!("{key}: entries must be finite"));
    }
    Ok(cov)
}

fn cov_echo(cov: &DMatrix<f64>) -> serde_json::Value {
    let rows: Vec<Vec<f64>> = (0..cov.nrows())
        .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect())
        .collect();
    json!(rows)
}

struct ModelDefaults {
    model: StateSpaceModel,
    x0: DVector<f64>,
    horizon: usize,
    runs: usize,
    metric: MetricGroup,
    forward_cov_diag: Vec<f64>,
    echo: serde_json::Value,
}

fn resolve_model(section: &ModelSection) -> CliResult<ModelDefaults> {
    let check_tables = |allowed: &str| -> CliResult<()> {
        let present = [
            ("lorenz", section.lorenz.is_some()),
            ("coordinated_turn", section.coordinated_turn.is_some()),
            ("scalar_linear", section.scalar_linear.is_some()),
        ];
        for (name, is_set) in present {
            if is_set && name != allowed {
                return config_err(format!(
                    "model.{name} table does not belong to model kind `{allowed}`"
                ));
            }
        }
        Ok(())
    };

    match section.kind.as_str() {
        "lorenz" => {
            check_tables("lorenz")?;
            let t = section.lorenz.clone().unwrap_or_default();
            let defaults = LorenzParams::default();
            let params = LorenzParams {
                dt: t.dt.unwrap_or(defaults.dt),
                r1: t.r1.unwrap_or(defaults.r1),
                r2: t.r2.unwrap_or(defaults.r2),
                r3: t.r3.unwrap_or(defaults.r3),
                process_gain: t.process_gain.unwrap_or(defaults.process_gain),
                obs_gain: t.obs_gain.unwrap_or(defaults.obs_gain),
                action_gain: t.action_gain.unwrap_or(defaults.action_gain),
            };
            let x0 = match &section.x0 {
                Some(v) if v.len() == 3 => DVector::from_row_slice(v),
                Some(_) => return config_err("model.x0 must have length 3"),
                None => params.default_initial_state(),
            };
            let echo = json!({
                "kind": "lorenz",
                "x0": x0.as_slice(),
                "dt": params.dt, "r1": params.r1, "r2": params.r2, "r3": params.r3,
                "process_gain": params.process_gain,
                "obs_gain": params.obs_gain,
                "action_gain": params.action_gain,
            });
            Ok(ModelDefaults {
                model: lorenz_model(&params),
                x0,
                horizon: 1000,
                runs: 50,
                metric: MetricGroup::FullState,
                forward_cov_diag: vec![0.35; 3],
                echo,
            })
        }
        "coordinated_turn" => {
            check_tables("coordinated_turn")?;
            let t = section.coordinated_turn.clone().unwrap_or_default();
            let defaults = CoordinatedTurnParams::default();
            let params = CoordinatedTurnParams {
                sample_interval: t.sample_interval.unwrap_or(defaults.sample_interval),
                omega0: t.omega0.unwrap_or(defaults.omega0),
                q_pos: t.q_pos.unwrap_or(defaults.q_pos),
                q_turn: t.q_turn.unwrap_or(defaults.q_turn),
                r_range: t.r_range.unwrap_or(defaults.r_range),
                r_bearing: t.r_bearing.unwrap_or(defaults.r_bearing),
            };
            let x0 = match &section.x0 {
                Some(v) if v.len() == 5 => DVector::from_row_slice(v),
                Some(_) => return config_err("model.x0 must have length 5"),
                None => params.default_initial_state(),
            };
            let echo = json!({
                "kind": "coordinated_turn",
                "x0": x0.as_slice(),
                "sample_interval": params.sample_interval,
                "omega0": params.omega0,
                "q_pos": params.q_pos, "q_turn": params.q_turn,
                "r_range": params.r_range, "r_bearing": params.r_bearing,
            });
            Ok(ModelDefaults {
                model: coordinated_turn_model(&params),
                x0,
                horizon: 100,
                runs: 250,
                metric: MetricGroup::Components(vec![1, 3]),
                forward_cov_diag: vec![100.0, 10.0, 100.0, 10.0, 1e-4],
                echo,
            })
        }
        "scalar_linear" => {
            check_tables("scalar_linear")?;
            let t = section.scalar_linear.clone().unwrap_or_default();
            let (a, c, g) = (t.a.unwrap_or(0.9), t.c.unwrap_or(1.0), t.g.unwrap_or(1.0));
            let (q, r, eps) = (
                t.q.unwrap_or(0.04),
                t.r.unwrap_or(0.09),
                t.sigma_eps.unwrap_or(0.04),
            );
            let x0 = match &section.x0 {
                Some(v) if v.len() == 1 => DVector::from_row_slice(v),
                Some(_) => return config_err("model.x0 must have length 1"),
                None => DVector::from_vec(vec![1.0]),
            };
            let scalar = |v: f64| DMatrix::from_vec(1, 1, vec![v]);
            let model = linear_model(
                scalar(a),
                scalar(c),
                scalar(g),
                scalar(q),
                scalar(r),
                scalar(eps),
            )
            .map_err(CliError::Numeric)?;
            let echo = json!({
                "kind": "scalar_linear",
                "x0": x0.as_slice(),
                "a": a, "c": c, "g": g, "q": q, "r": r, "sigma_eps": eps,
            });
            Ok(ModelDefaults {
                model,
                x0,
                horizon: 100,
                runs: 100,
                metric: MetricGroup::FullState,
                forward_cov_diag: vec![0.5],
                echo,
            })
        }
        other => config_err(format!("unknown model kind `{other}`")),
    }
}

pub fn resolve(
    config: &ExperimentConfig,
    overrides: &RunOverrides,
) -> CliResult<ResolvedExperiment> {
    let base = resolve_model(&config.model)?;
    let n_x = base.model.n_x;

    let true_rule = resolve_rule(
        &config.forward.true_rule,
        RuleKind::Cubature,
        "forward.true_rule",
    )?;
    let assumed_rule = resolve_rule(
        &config.forward.assumed_rule,
        true_rule,
        "forward.assumed_rule",
    )?;
    let inverse_rule = resolve_rule(&config.inverse.rule, RuleKind::Cubature, "inverse.rule")?;

    let forward_cov0 = resolve_cov(
        &config.forward.cov0,
        &base.forward_cov_diag,
        n_x,
        "forward.cov0",
    )?;
    let inverse_cov0 = match &config.inverse.cov0 {
        Some(spec) => resolve_cov(
            &Some(spec.clone()),
            &base.forward_cov_diag,
            n_x,
            "inverse.cov0",
        )?,
        None => forward_cov0.clone(),
    };
    let replica_cov0 = match &config.inverse.replica_cov0 {
        Some(spec) => Some(resolve_cov(
            &Some(spec.clone()),
            &base.forward_cov_diag,
            n_x,
            "inverse.replica_cov0",
        )?),
        None => None,
    };

    let forward_mean0 = match &config.forward.mean0 {
        None | Some(MeanSpec::Keyword(_)) => {
            if let Some(MeanSpec::Keyword(word)) = &config.forward.mean0 {
                if word != "sample" {
                    return config_err(format!(
                        "forward.mean0: unknown keyword `{word}` (expected \"sample\" or a vector)"
                    ));
                }
            }
            ForwardInit::SampledFromPrior
        }
        Some(MeanSpec::Vector(v)) => {
            if v.len() != n_x {
                return config_err(format!("forward.mean0 must have length {n_x}"));
            }
            ForwardInit::Fixed(DVector::from_row_slice(v))
        }
    };
    let inverse_mean0 = match &config.inverse.mean0 {
        None => None,
        Some(MeanSpec::Keyword(word)) if word == "truth" => None,
        Some(MeanSpec::Keyword(word)) => {
            return config_err(format!(
                "inverse.mean0: unknown keyword `{word}` (expected \"truth\" or a vector)"
            ))
        }
        Some(MeanSpec::Vector(v)) => {
            if v.len() != n_x {
                return config_err(format!("inverse.mean0 must have length {n_x}"));
            }
            Some(DVector::from_row_slice(v))
        }
    };

    let metric = match config.evaluation.metric.as_deref() {
        None => base.metric,
        Some("full_state") => MetricGroup::FullState,
        Some("velocity") => {
            if n_x != 5 {
                return config_err(
                    "evaluation.metric = \"velocity\" needs the 5-state tracking model",
                );
            }
            MetricGroup::Components(vec![1, 3])
        }
        Some(other) => return config_err(format!(
            "evaluation.metric: unknown value `{other}` (expected \"full_state\" or \"velocity\")"
        )),
    };

    let horizon = overrides
        .horizon
        .or(config.evaluation.horizon)
        .unwrap_or(base.horizon);
    if horizon == 0 {
        return config_err("evaluation.horizon must be at least 1");
    }
    let runs = overrides
        .runs
        .or(config.evaluation.runs)
        .unwrap_or(base.runs);
    if runs == 0 {
        return config_err("evaluation.runs must be at least 1");
    }
    let seed = overrides.seed.or(config.evaluation.seed).unwrap_or(1);
    let out_dir = overrides.out_dir.clone().unwrap_or_else(|| {
        PathBuf::from(config.output.dir.clone().unwrap_or_else(|| "out".into()))
    });
    let prefix = config
        .output
        .prefix
        .clone()
        .unwrap_or_else(|| config.model.kind.clone());
    let write_traces = config.output.write_traces.unwrap_or(false);
    let workers = overrides.workers.unwrap_or(1);

    let spec = ExperimentSpec {
        model: base.model,
        x0: base.x0,
        horizon,
        true_forward: true_rule,
        assumed_forward: assumed_rule,
        inverse_outer: inverse_rule,
        forward_mean0,
        forward_cov0,
        inverse_mean0,
        inverse_cov0,
        replica_cov0,
        metric,
    };

    // guard rule construction early so bad configs fail before any run
    PointRule::new(spec.true_forward, n_x).map_err(CliError::Numeric)?;
    PointRule::new(spec.assumed_forward, n_x).map_err(CliError::Numeric)?;
    PointRule::new(spec.inverse_outer, n_x + spec.model.n_y).map_err(CliError::Numeric)?;

    let echo = json!({
        "model": base.echo,
        "forward": {
            "true_rule": rule_echo(spec.true_forward),
            "assumed_rule": rule_echo(spec.assumed_forward),
            "mean0": match &spec.forward_mean0 {
                ForwardInit::SampledFromPrior => json!("sample"),
                ForwardInit::Fixed(v) => json!(v.as_slice()),
            },
            "cov0": cov_echo(&spec.forward_cov0),
        },
        "inverse": {
            "rule": rule_echo(spec.inverse_outer),
            "mean0": match &spec.inverse_mean0 {
                None => json!("truth"),
                Some(v) => json!(v.as_slice()),
            },
            "cov0": cov_echo(&spec.inverse_cov0),
            "replica_cov0": cov_echo(spec.replica_cov0.as_ref().unwrap_or(&spec.forward_cov0)),
        },
        "evaluation": {
            "horizon": horizon,
            "runs": runs,
            "seed": seed,
            "metric": match &spec.metric {
                MetricGroup::FullState => json!("full_state"),
                MetricGroup::Components(_) => json!("velocity"),
            },
            "workers": workers,
        },
        "output": {
            "dir": out_dir.to_string_lossy(),
            "prefix": prefix,
            "write_traces": write_traces,
        },
    });

    Ok(ResolvedExperiment {
        spec,
        runs,
        seed,
        out_dir,
        prefix,
        write_traces,
        echo,
    })
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn atomic_write(path: &Path, contents: &str) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("cannot rename into {}: {e}", path.display())))
}

fn positive_series(series: &[f64]) -> Vec<f64> {
    series.iter().map(|&v| v.max(1e-300)).collect()
}

fn bound_fit_json(fit: &BoundFit) -> serde_json::Value {
    json!({ "eta": fit.eta, "lambda": fit.lambda, "nu": fit.nu })
}

/// Files produced by a run, plus the in-memory summary.
#[derive(Debug)]
pub struct RunArtifacts {
    pub steps_csv: PathBuf,
    pub summary_json: PathBuf,
    pub summary: MonteCarloSummary,
}

/// Parses, resolves, runs and writes one experiment. Wall time goes to
/// stderr (`INVSPKF_LOG=quiet` silences it); the output files carry no
/// volatile values, so identical config and seed give identical bytes.
pub fn cmd_run(config_path: &Path, overrides: &RunOverrides) -> CliResult<RunArtifacts> {
    let config = load_config(config_path)?;
    let resolved = resolve(&config, overrides)?;
    let workers = overrides.workers.unwrap_or(1);
    let summary = monte_carlo(&resolved.spec, resolved.runs, resolved.seed, workers)?;

    let forward_fit = fit_exponential_bound(&positive_series(&summary.forward.mse));
    let inverse_fit = fit_exponential_bound(&positive_series(&summary.inverse.mse));

    let body = json!({
        "config": resolved.echo,
        "results": {
            "runs_completed": summary.runs_completed,
            "runs_excluded": summary.runs_excluded,
            "forward": {
                "time_avg_rmse": summary.forward.time_avg_rmse,
                "time_avg_rcrlb": summary.forward.time_avg_bound_rmse,
                "bound_fit": bound_fit_json(&forward_fit),
            },
            "inverse": {
                "time_avg_rmse": summary.inverse.time_avg_rmse,
                "time_avg_rcrlb": summary.inverse.time_avg_bound_rmse,
                "bound_fit": bound_fit_json(&inverse_fit),
            },
            "inverse_rcrlb_linearization": "true_attacker_path",
        },
    });

    fs::create_dir_all(&resolved.out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", resolved.out_dir.display())))?;
    let steps_path = resolved
        .out_dir
        .join(format!("{}_steps.csv", resolved.prefix));
    let summary_path = resolved
        .out_dir
        .join(format!("{}_summary.json", resolved.prefix));
    atomic_write(&steps_path, &steps_csv(&summary))?;
    let mut json_text = serde_json::to_string_pretty(&body)
        .map_err(|e| CliError::Io(format!("cannot serialize summary: {e}")))?;
    json_text.push('\n');
    atomic_write(&summary_path, &json_text)?;

    if resolved.write_traces {
        if let Some(first) = &summary.first_run {
            atomic_write(
                &resolved
                    .out_dir
                    .join(format!("{}_forward_trace.csv", resolved.prefix)),
                &forward_trace_csv(&first.forward_trace),
            )?;
            atomic_write(
                &resolved
                    .out_dir
                    .join(format!("{}_inverse_trace.csv", resolved.prefix)),
                &inverse_trace_csv(&first.inverse_trace),
            )?;
        }
    }

    if log_level() >= 2 {
        eprintln!(
            "completed {} of {} runs ({} excluded) in {:.2?}",
            summary.runs_completed, summary.runs_requested, summary.runs_excluded, summary.runtime
        );
    }

    Ok(RunArtifacts {
        steps_csv: steps_path,
        summary_json: summary_path,
        summary,
    })
}

/// Dumps a point rule as CSV: one row per point, weight first, then the
/// standardized components at full round-trip precision.
pub fn cmd_points(
    kind: &str,
    dims: &[usize],
    kappa: Option<f64>,
    m: Option<usize>,
) -> CliResult<String> {
    let rule = match kind {
        "cubature" => {
            let [n] = dims else {
                return config_err("usage: points cubature <n>");
            };
            PointRule::cubature(*n)
        }
        "gauss_hermite" | "gh" => {
            let (m, n) = match (m, dims) {
                (Some(m), [n]) => (m, *n),
                (None, [m, n]) => (*m, *n),
                _ => {
                    return config_err("usage: points gh <m> <n> (or --m <m> with one positional)")
                }
            };
            PointRule::gauss_hermite(m, n).map_err(CliError::Numeric)?
        }
        "unscented" => {
            let [n] = dims else {
                return config_err("usage: points unscented <n> --kappa <kappa>");
            };
            let kappa =
                kappa.ok_or_else(|| CliError::Config("unscented requires --kappa".into()))?;
            PointRule::unscented(*n, kappa).map_err(CliError::Numeric)?
        }
        other => return config_err(format!("unknown rule kind `{other}`")),
    };
    if rule.has_nonpositive_weight() && log_level() >= 1 {
        eprintln!("note: rule has a non-positive weight");
    }
    let set = rule.set();
    let mut out = String::new();
    for (p, w) in set.points.iter().zip(&set.weights) {
        out.push_str(&format!("{w}"));
        for v in p.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Runs the forward bound recursion along one simulated trajectory,
/// without any filtering, and tabulates the per-step bound. The velocity
/// metric emits one column per velocity component; otherwise a single
/// root-trace column.
pub fn cmd_rcrlb(config_path: &Path, overrides: &RunOverrides) -> CliResult<String> {
    let config = load_config(config_path)?;
    let resolved = resolve(&config, overrides)?;
    let spec = &resolved.spec;
    let trajectory = simulate_trajectory(&spec.model, &spec.x0, spec.horizon, resolved.seed)?;
    let mut info = crate::evaluation::FisherInfo::from_prior_cov(&spec.forward_cov0)?;

    let component_indices: Option<Vec<usize>> = match &spec.metric {
        MetricGroup::Components(idx) => Some(idx.clone()),
        MetricGroup::FullState => None,
    };
    let mut out = String::from("k");
    match &component_indices {
        Some(idx) => {
            for i in idx {
                out.push_str(&format!(",rcrlb_x{i}"));
            }
        }
        None => out.push_str(",rcrlb"),
    }
    out.push('\n');

    let emit =
        |out: &mut String, k: usize, info: &crate::evaluation::FisherInfo| -> CliResult<()> {
            let inv = spd_inverse(&info.matrix, crate::numerics::DEFAULT_CHOLESKY_JITTER)
                .map_err(CliError::Numeric)?;
            out.push_str(&k.to_string());
            match &component_indices {
                Some(idx) => {
                    for &i in idx {
                        out.push_str(&format!(",{}", inv[(i, i)].sqrt()));
                    }
                }
                None => out.push_str(&format!(",{}", inv.trace().sqrt())),
            }
            out.push('\n');
            Ok(())
        };

    emit(&mut out, 0, &info)?;
    for k in 1..=spec.horizon {
        let model = &spec.model;
        let f_jac = match &model.state_jacobian {
            Some(j) => j(&trajectory.states[k - 1]),
            None => crate::numerics::numeric_jacobian(
                |p| model.state(p),
                &trajectory.states[k - 1],
                crate::numerics::DEFAULT_JACOBIAN_STEP,
            )?,
        };
        let h_jac = match &model.obs_jacobian {
            Some(j) => j(&trajectory.states[k]),
            None => crate::numerics::numeric_jacobian(
                |p| model.observe(p),
                &trajectory.states[k],
                crate::numerics::DEFAULT_JACOBIAN_STEP,
            )?,
        };
        info = crate::evaluation::rcrlb_forward_step(
            &info,
            &f_jac,
            &h_jac,
            &model.process_cov,
            &model.obs_cov,
        )?;
        emit(&mut out, k, &info)?;
    }
    Ok(out)
}

/// Log verbosity from `INVSPKF_LOG`: 0 quiet, 1 warnings, 2 info (default),
/// 3 debug.
pub fn log_level() -> u8 {
    match std::env::var("INVSPKF_LOG").ok().as_deref() {
        Some("quiet") | Some("off") => 0,
        Some("error") | Some("warn") => 1,
        Some("debug") => 3,
        _ => 2,
    }
}
