//! Policy evaluation and baselines.
//!
//! Every strategy (trained policy, zero-compensation, per-scenario OPF) is
//! swept over a scenario set: forward pass, power-flow solve, record losses
//! and voltages. Scenarios whose solve diverges are reported separately and
//! never silently dropped. Violations are counted strictly outside
//! `[v_min, v_max]` with a 1e-9 guard against boundary flapping.
//!
//! The deterministic OPF baseline minimizes ohmic losses over the inverter
//! box via projected gradient descent on an augmented-Lagrangian voltage
//! penalty, driven by the analytic sensitivities. It stands in for a conic
//! relaxation solver: per scenario it returns a voltage-feasible
//! near-optimum when one exists, else its least-infeasible iterate, flagged.
//!
//! Scenario sweeps fan out across a thread pool capped by the
//! `VOLTPOLICY_THREADS` environment variable; records keep dataset order, so
//! reports are reproducible bit for bit (timing fields aside).

use crate::feeder::FeederModel;
use crate::policy::{PolicyError, PolicyNetwork};
use crate::powerflow::{self, GridConditions, NewtonOptions, Sensitivities};
use crate::scenarios::Scenario;
use crate::training::{embed_controlled, restrict_controlled};
use nalgebra::DVector;
use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("proxy dimension mismatch: dataset provides {dataset}, checkpoint expects {network}")]
    MaskMismatch { dataset: usize, network: usize },
    #[error("network has {outputs} outputs but the feeder has {controlled} controlled inverters")]
    OutputMismatch { outputs: usize, controlled: usize },
    #[error("every scenario in the set diverged")]
    AllDivergent,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Loss and voltages for one converged scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub index: usize,
    pub loss: f64,
    pub voltages: Vec<f64>,
}

/// Sweep results for one control strategy over one scenario set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyReport {
    pub name: String,
    pub records: Vec<ScenarioRecord>,
    /// Indices of scenarios whose power flow diverged.
    pub divergent: Vec<usize>,
    /// OPF only: scenarios where no voltage-feasible point was found.
    pub infeasible: Vec<usize>,
    /// Per-bus sampled probability of under-voltage, denominator = |set|.
    pub violation_low: Vec<f64>,
    /// Per-bus sampled probability of over-voltage, denominator = |set|.
    pub violation_high: Vec<f64>,
    pub mean_loss: f64,
    pub wall_clock_s: f64,
}

impl StrategyReport {
    /// Per-bus probability of violating either limit.
    pub fn violation_any(&self) -> Vec<f64> {
        self.violation_low
            .iter()
            .zip(&self.violation_high)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Mean of the per-bus violation probabilities.
    pub fn mean_violation_probability(&self) -> f64 {
        let any = self.violation_any();
        any.iter().sum::<f64>() / any.len() as f64
    }

    pub fn per_bus_mean_voltage(&self) -> Vec<f64> {
        let n = self.violation_low.len();
        let mut mean = vec![0.0; n];
        for rec in &self.records {
            for (m, v) in mean.iter_mut().zip(&rec.voltages) {
                *m += v;
            }
        }
        let count = self.records.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        mean
    }
}

/// Full evaluation report: one or more strategies over the same set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategies: Vec<StrategyReport>,
    pub scenario_count: usize,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// SHA-256 over the scenario data, for provenance.
    pub dataset_hash: String,
    pub checkpoint_id: String,
    /// How "voltage deviation" extracts are defined (assumption on record).
    pub voltage_deviation_definition: String,
}

impl EvalReport {
    pub fn new(feeder: &FeederModel, dataset: &[Scenario], checkpoint_id: impl Into<String>) -> Self {
        Self {
            strategies: Vec::new(),
            scenario_count: dataset.len(),
            v_min: feeder.v_min(),
            v_max: feeder.v_max(),
            dataset_hash: dataset_hash(dataset),
            checkpoint_id: checkpoint_id.into(),
            voltage_deviation_definition: "v_minus_1pu".to_string(),
        }
    }

    pub fn push(&mut self, report: StrategyReport) {
        self.strategies.push(report);
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// SHA-256 over the little-endian bytes of every scenario's conditions.
pub fn dataset_hash(dataset: &[Scenario]) -> String {
    let mut hasher = Sha256::new();
    for s in dataset {
        hasher.update((s.timestamp_index as u64).to_le_bytes());
        for vec in [&s.theta.p_c, &s.theta.q_c, &s.theta.p_g] {
            for x in vec.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

static EVAL_POOL: OnceCell<rayon::ThreadPool> = OnceCell::new();

/// Thread pool for scenario sweeps, capped by `VOLTPOLICY_THREADS`.
fn eval_pool() -> &'static rayon::ThreadPool {
    EVAL_POOL.get_or_init(|| {
        let threads = std::env::var("VOLTPOLICY_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build evaluation thread pool")
    })
}

enum SweepOutcome {
    Converged { loss: f64, voltages: Vec<f64> },
    Diverged,
    OpfInfeasible { loss: f64, voltages: Vec<f64> },
}

fn sweep<F>(feeder: &FeederModel, dataset: &[Scenario], name: &str, per_scenario: F) -> StrategyReport
where
    F: Fn(&Scenario) -> SweepOutcome + Sync,
{
    use rayon::prelude::*;
    let started = Instant::now();
    let outcomes: Vec<SweepOutcome> = eval_pool().install(|| {
        dataset.par_iter().map(&per_scenario).collect()
    });
    let wall_clock_s = started.elapsed().as_secs_f64();

    let n = feeder.n();
    let v_min = feeder.v_min();
    let v_max = feeder.v_max();
    let mut records = Vec::new();
    let mut divergent = Vec::new();
    let mut infeasible = Vec::new();
    let mut low_counts = vec![0usize; n];
    let mut high_counts = vec![0usize; n];
    for (index, outcome) in outcomes.into_iter().enumerate() {
        let (loss, voltages) = match outcome {
            SweepOutcome::Converged { loss, voltages } => (loss, voltages),
            SweepOutcome::OpfInfeasible { loss, voltages } => {
                infeasible.push(index);
                (loss, voltages)
            }
            SweepOutcome::Diverged => {
                divergent.push(index);
                continue;
            }
        };
        for bus in 0..n {
            if voltages[bus] < v_min[bus] - 1e-9 {
                low_counts[bus] += 1;
            }
            if voltages[bus] > v_max[bus] + 1e-9 {
                high_counts[bus] += 1;
            }
        }
        records.push(ScenarioRecord {
            index,
            loss,
            voltages,
        });
    }
    let total = dataset.len() as f64;
    let mean_loss = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64
    };
    StrategyReport {
        name: name.to_string(),
        records,
        divergent,
        infeasible,
        violation_low: low_counts.iter().map(|&c| c as f64 / total).collect(),
        violation_high: high_counts.iter().map(|&c| c as f64 / total).collect(),
        mean_loss,
        wall_clock_s,
    }
}

fn check_dims(net: &PolicyNetwork, feeder: &FeederModel, dataset: &[Scenario]) -> Result<(), EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let phi_len = dataset[0].phi.len();
    if net.input_dim() != phi_len {
        return Err(EvalError::MaskMismatch {
            dataset: phi_len,
            network: net.input_dim(),
        });
    }
    let controlled = feeder.controlled_buses().len();
    if net.output_dim() != controlled {
        return Err(EvalError::OutputMismatch {
            outputs: net.output_dim(),
            controlled,
        });
    }
    Ok(())
}

/// Sweeps a trained policy over a scenario set.
pub fn evaluate_policy(
    net: &PolicyNetwork,
    feeder: &FeederModel,
    dataset: &[Scenario],
    name: &str,
) -> Result<StrategyReport, EvalError> {
    check_dims(net, feeder, dataset)?;
    let s_max = DVector::from_vec(feeder.s_max_controlled());
    let report = sweep(feeder, dataset, name, |scenario| {
        let p_g_ctrl = restrict_controlled(feeder, &scenario.theta.p_g);
        let cache = match net.forward(&scenario.phi, &p_g_ctrl, &s_max) {
            Ok(c) => c,
            Err(_) => return SweepOutcome::Diverged,
        };
        let q_g = embed_controlled(feeder, &cache.q);
        let sol = powerflow::solve(feeder, &scenario.theta, &q_g);
        if sol.converged {
            SweepOutcome::Converged {
                loss: sol.losses,
                voltages: sol.v.iter().copied().collect(),
            }
        } else {
            SweepOutcome::Diverged
        }
    });
    if report.records.is_empty() {
        return Err(EvalError::AllDivergent);
    }
    Ok(report)
}

/// The no-compensation baseline: every inverter at unit power factor.
pub fn evaluate_zero_policy(
    feeder: &FeederModel,
    dataset: &[Scenario],
    name: &str,
) -> Result<StrategyReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let q_zero = DVector::zeros(feeder.n());
    let report = sweep(feeder, dataset, name, |scenario| {
        let sol = powerflow::solve(feeder, &scenario.theta, &q_zero);
        if sol.converged {
            SweepOutcome::Converged {
                loss: sol.losses,
                voltages: sol.v.iter().copied().collect(),
            }
        } else {
            SweepOutcome::Diverged
        }
    });
    if report.records.is_empty() {
        return Err(EvalError::AllDivergent);
    }
    Ok(report)
}

/// Settings for the per-scenario OPF baseline.
#[derive(Debug, Clone, Copy)]
pub struct OpfOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Initial quadratic penalty weight.
    pub rho0: f64,
    /// Voltage feasibility tolerance in p.u.
    pub v_tol: f64,
    pub newton: NewtonOptions,
}

impl Default for OpfOptions {
    fn default() -> Self {
        Self {
            max_outer: 12,
            max_inner: 40,
            rho0: 50.0,
            v_tol: 1e-4,
            newton: NewtonOptions::default(),
        }
    }
}

/// Result of one deterministic OPF solve.
#[derive(Debug, Clone)]
pub struct OpfResult {
    /// Optimal setpoints per controlled inverter.
    pub q: DVector<f64>,
    pub losses: f64,
    pub v: DVector<f64>,
    /// Voltage limits met within `v_tol`.
    pub feasible: bool,
    /// Power flow diverged at the starting point; result is meaningless.
    pub flagged: bool,
}

struct PenaltyEval {
    objective: f64,
    grad: DVector<f64>,
    warm: DVector<f64>,
}

/// Augmented-Lagrangian value and gradient over the controlled setpoints.
fn penalty_eval(
    feeder: &FeederModel,
    theta: &GridConditions,
    q_ctrl: &DVector<f64>,
    nu_low: &DVector<f64>,
    nu_high: &DVector<f64>,
    rho: f64,
    opts: &OpfOptions,
    warm: Option<&DVector<f64>>,
) -> Option<PenaltyEval> {
    let q_g = embed_controlled(feeder, q_ctrl);
    let sol = powerflow::solve_with(feeder, theta, &q_g, opts.newton, warm);
    if !sol.converged {
        return None;
    }
    let Sensitivities { dv_dq, dl_dq } = powerflow::sensitivities(feeder, &sol).ok()?;
    let v_min = DVector::from_vec(feeder.v_min());
    let v_max = DVector::from_vec(feeder.v_max());
    let n = feeder.n();
    let mut objective = sol.losses;
    let mut weights = DVector::zeros(n);
    for i in 0..n {
        // Rockafellar form: ((max(0, nu + rho c))^2 - nu^2) / (2 rho) per side.
        let c_high = sol.v[i] - v_max[i];
        let w_high = (nu_high[i] + rho * c_high).max(0.0);
        objective += (w_high * w_high - nu_high[i] * nu_high[i]) / (2.0 * rho);
        let c_low = v_min[i] - sol.v[i];
        let w_low = (nu_low[i] + rho * c_low).max(0.0);
        objective += (w_low * w_low - nu_low[i] * nu_low[i]) / (2.0 * rho);
        weights[i] = w_high - w_low;
    }
    let grad_full = &dl_dq + dv_dq.transpose() * weights;
    Some(PenaltyEval {
        objective,
        grad: restrict_controlled(feeder, &grad_full),
        warm: sol.u,
    })
}

fn project_box(q: &DVector<f64>, bound: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(q.len(), |i, _| q[i].clamp(-bound[i], bound[i]))
}

fn max_violation(v: &DVector<f64>, v_min: &[f64], v_max: &[f64]) -> f64 {
    v.iter()
        .enumerate()
        .map(|(i, &x)| (v_min[i] - x).max(x - v_max[i]).max(0.0))
        .fold(0.0, f64::max)
}

/// Projected-gradient descent on the penalized objective at fixed
/// multipliers. Returns the iterate and the accepted-objective trace, which
/// is non-increasing by the line-search contract.
fn penalized_descent(
    feeder: &FeederModel,
    theta: &GridConditions,
    q0: DVector<f64>,
    bound: &DVector<f64>,
    nu_low: &DVector<f64>,
    nu_high: &DVector<f64>,
    rho: f64,
    opts: &OpfOptions,
    warm: &mut Option<DVector<f64>>,
) -> Option<(DVector<f64>, Vec<f64>)> {
    let mut q = q0;
    let mut eval = penalty_eval(feeder, theta, &q, nu_low, nu_high, rho, opts, warm.as_ref())?;
    *warm = Some(eval.warm.clone());
    let mut trace = vec![eval.objective];
    let mut eta = 1.0f64;
    for _ in 0..opts.max_inner {
        // Stationarity on the projected gradient step.
        let candidate_dir = project_box(&(&q - &eval.grad), bound) - &q;
        if candidate_dir.amax() < 1e-8 {
            break;
        }
        let mut accepted = false;
        while eta > 1e-12 {
            let trial = project_box(&(&q - eta * &eval.grad), bound);
            let Some(trial_eval) = penalty_eval(
                feeder,
                theta,
                &trial,
                nu_low,
                nu_high,
                rho,
                opts,
                warm.as_ref(),
            ) else {
                eta *= 0.5;
                continue;
            };
            let decrease = eval.grad.dot(&(&q - &trial));
            if trial_eval.objective <= eval.objective - 1e-4 * decrease.max(0.0) {
                q = trial;
                eval = trial_eval;
                *warm = Some(eval.warm.clone());
                trace.push(eval.objective);
                eta = (eta * 1.5).min(1e3);
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some((q, trace))
}

/// Minimizes ohmic losses over the inverter box subject to voltage limits,
/// via an augmented Lagrangian on the voltage constraints. Returns a
/// feasible near-optimum when found, else the least-infeasible iterate.
pub fn deterministic_opf(
    feeder: &FeederModel,
    theta: &GridConditions,
    opts: &OpfOptions,
) -> OpfResult {
    let c = feeder.controlled_buses().len();
    let n = feeder.n();
    let p_g_ctrl = restrict_controlled(feeder, &theta.p_g);
    let s_max = DVector::from_vec(feeder.s_max_controlled());
    let bound = PolicyNetwork::output_scale(&p_g_ctrl, &s_max);
    let v_min = feeder.v_min();
    let v_max = feeder.v_max();

    let mut q = DVector::zeros(c);
    let mut nu_low = DVector::zeros(n);
    let mut nu_high = DVector::zeros(n);
    let mut rho = opts.rho0;
    let mut warm: Option<DVector<f64>> = None;

    // Feasibility check at the origin also seeds the warm state.
    let q_full = embed_controlled(feeder, &q);
    let sol0 = powerflow::solve_with(feeder, theta, &q_full, opts.newton, None);
    if !sol0.converged {
        return OpfResult {
            q,
            losses: f64::NAN,
            v: DVector::zeros(n),
            feasible: false,
            flagged: true,
        };
    }
    warm = Some(sol0.u.clone());
    let mut best = OpfResult {
        q: q.clone(),
        losses: sol0.losses,
        v: sol0.v.clone(),
        feasible: max_violation(&sol0.v, &v_min, &v_max) <= opts.v_tol,
        flagged: false,
    };
    let mut best_violation = max_violation(&sol0.v, &v_min, &v_max);
    let mut prev_violation = f64::INFINITY;

    for _outer in 0..opts.max_outer {
        let Some((q_new, _trace)) = penalized_descent(
            feeder, theta, q.clone(), &bound, &nu_low, &nu_high, rho, opts, &mut warm,
        ) else {
            break;
        };
        q = q_new;
        let q_full = embed_controlled(feeder, &q);
        let sol = powerflow::solve_with(feeder, theta, &q_full, opts.newton, warm.as_ref());
        if !sol.converged {
            break;
        }
        warm = Some(sol.u.clone());
        let violation = max_violation(&sol.v, &v_min, &v_max);
        let improved = violation < best_violation - 1e-12
            || (violation <= best_violation + 1e-12 && sol.losses < best.losses);
        if improved {
            best = OpfResult {
                q: q.clone(),
                losses: sol.losses,
                v: sol.v.clone(),
                feasible: violation <= opts.v_tol,
                flagged: false,
            };
            best_violation = violation;
        }
        if violation <= opts.v_tol {
            // Feasible and inner-stationary: done.
            break;
        }
        for i in 0..n {
            nu_high[i] = (nu_high[i] + rho * (sol.v[i] - v_max[i])).max(0.0);
            nu_low[i] = (nu_low[i] + rho * (v_min[i] - sol.v[i])).max(0.0);
        }
        if violation > 0.5 * prev_violation {
            rho = (rho * 3.0).min(1e7);
        }
        prev_violation = violation;
    }
    best
}

/// Sweeps the deterministic OPF baseline over a scenario set.
pub fn evaluate_opf(
    feeder: &FeederModel,
    dataset: &[Scenario],
    name: &str,
    opts: &OpfOptions,
) -> Result<StrategyReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let report = sweep(feeder, dataset, name, |scenario| {
        let result = deterministic_opf(feeder, &scenario.theta, opts);
        if result.flagged {
            SweepOutcome::Diverged
        } else if result.feasible {
            SweepOutcome::Converged {
                loss: result.losses,
                voltages: result.v.iter().copied().collect(),
            }
        } else {
            SweepOutcome::OpfInfeasible {
                loss: result.losses,
                voltages: result.v.iter().copied().collect(),
            }
        }
    });
    if report.records.is_empty() {
        return Err(EvalError::AllDivergent);
    }
    Ok(report)
}

/// Wall-clock comparison over the same set: policy forward passes only
/// versus one deterministic OPF per scenario.
pub fn timing_comparison(
    net: &PolicyNetwork,
    feeder: &FeederModel,
    dataset: &[Scenario],
    opts: &OpfOptions,
) -> Result<(f64, f64), EvalError> {
    if dataset.is_empty() {
        return Ok((0.0, 0.0));
    }
    check_dims(net, feeder, dataset)?;
    let s_max = DVector::from_vec(feeder.s_max_controlled());

    let started = Instant::now();
    for scenario in dataset {
        let p_g_ctrl = restrict_controlled(feeder, &scenario.theta.p_g);
        let cache = net.forward(&scenario.phi, &p_g_ctrl, &s_max)?;
        std::hint::black_box(&cache.q);
    }
    let t_dnn = started.elapsed().as_secs_f64();

    let started = Instant::now();
    for scenario in dataset {
        let result = deterministic_opf(feeder, &scenario.theta, opts);
        std::hint::black_box(&result.q);
    }
    let t_opf = started.elapsed().as_secs_f64();
    Ok((t_dnn, t_opf))
}
