//! Stochastic primal-dual trainers.
//!
//! Each iteration consumes a single scenario. The weight update descends the
//! scenario Lagrangian through the power-flow equations: the loss and voltage
//! sensitivities with respect to the inverter setpoints are either the
//! analytic inverse-function-theorem matrices or rank-one zeroth-order
//! estimates from two perturbed solves, and back-propagation pulls the
//! resulting adjoint onto the network weights. Dual variables then ascend
//! with a `mu0 / sqrt(k)` step on constraint values re-evaluated at the
//! *updated* weights, projected onto the nonnegative orthant.
//!
//! Two constraint formulations are supported: the averaged formulation
//! bounds per-bus expected voltages, while the chance-constrained
//! formulation bounds per-bus violation probabilities through a hinge
//! surrogate with one auxiliary variable per bus and side.
//!
//! Scenarios whose power flow fails to converge are skipped (after one
//! warm-start retry from the last converged state); too many consecutive
//! skips abort the run.

use crate::feeder::FeederModel;
use crate::policy::{AdamState, PolicyError, PolicyNetwork, PolicyOptimizer};
use crate::powerflow::{
    self, GridConditions, NewtonOptions, PowerFlowSolution, Sensitivities,
};
use crate::scenarios::Scenario;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("recourse budget exhausted: {consecutive} consecutive failed scenarios in epoch {epoch}")]
    RecourseBudgetExhausted { epoch: usize, consecutive: usize },
    #[error("network parameters became non-finite at step {step}")]
    NonFiniteParameters { step: u64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("training log write failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Which stochastic program the trainer solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Averaged,
    Chance,
}

/// How loss/voltage sensitivities are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    ZerothOrder,
}

/// Which iteration index drives the `mu0 / sqrt(k)` dual decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualDecay {
    PerEpoch,
    PerStep,
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub formulation: Formulation,
    /// Violation probability bound; chance formulation only.
    pub alpha: f64,
    pub epochs: usize,
    /// Adam learning rate for the network weights.
    pub lr_w: f64,
    /// Adam learning rate for the auxiliary hinge variables.
    pub lr_t: f64,
    /// Initial dual step size; decays as `mu0 / sqrt(k)`.
    pub mu_lambda0: f64,
    /// Clock for the dual decay index.
    pub dual_decay: DualDecay,
    pub gradient_mode: GradientMode,
    /// Perturbation scale for zeroth-order estimates.
    pub epsilon: f64,
    /// Standard deviation of the zeroth-order perturbation directions.
    pub sigma_delta: f64,
    /// Perturbation pairs averaged per zeroth-order step.
    pub zeroth_order_samples: usize,
    pub seed: u64,
    /// Newton settings for every solve during training.
    pub pf: NewtonOptionsConfig,
    /// Consecutive failed scenarios tolerated before aborting.
    pub recourse_budget: usize,
}

/// Serializable mirror of [`NewtonOptions`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NewtonOptionsConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptionsConfig {
    fn default() -> Self {
        let d = NewtonOptions::default();
        Self {
            tol: d.tol,
            max_iter: d.max_iter,
        }
    }
}

impl From<NewtonOptionsConfig> for NewtonOptions {
    fn from(c: NewtonOptionsConfig) -> Self {
        Self {
            tol: c.tol,
            max_iter: c.max_iter,
        }
    }
}

impl TrainConfig {
    /// Averaged-formulation defaults: dual step 10, Adam 0.001, 15 epochs.
    pub fn averaged(epochs: usize, seed: u64) -> Self {
        Self {
            formulation: Formulation::Averaged,
            alpha: 0.5,
            epochs,
            lr_w: 0.001,
            lr_t: 0.001,
            mu_lambda0: 10.0,
            dual_decay: DualDecay::PerEpoch,
            gradient_mode: GradientMode::Analytic,
            epsilon: 0.1,
            sigma_delta: 1.0,
            zeroth_order_samples: 1,
            seed,
            pf: NewtonOptionsConfig::default(),
            recourse_budget: 10,
        }
    }

    /// Chance-formulation defaults: dual step 1, Adam 0.001 on weights and
    /// auxiliary variables, 20 epochs.
    pub fn chance(alpha: f64, epochs: usize, seed: u64) -> Self {
        Self {
            formulation: Formulation::Chance,
            alpha,
            mu_lambda0: 1.0,
            ..Self::averaged(epochs, seed)
        }
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.formulation == Formulation::Chance && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("lr_w", self.lr_w),
            ("lr_t", self.lr_t),
            ("mu_lambda0", self.mu_lambda0),
            ("epsilon", self.epsilon),
            ("sigma_delta", self.sigma_delta),
        ] {
            if !(v > 0.0) {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.zeroth_order_samples == 0 {
            return Err(TrainError::BadConfig(
                "zeroth_order_samples must be at least 1".into(),
            ));
        }
        if self.recourse_budget == 0 {
            return Err(TrainError::BadConfig(
                "recourse_budget must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Dual variables and the CVaR auxiliary variables, plus the decay clock.
#[derive(Debug, Clone)]
pub struct DualState {
    pub lambda_low: DVector<f64>,
    pub lambda_high: DVector<f64>,
    pub t_low: DVector<f64>,
    pub t_high: DVector<f64>,
    mu_lambda0: f64,
    /// Completed dual updates; used when the decay clock runs per step.
    k: u64,
    /// Decay clock override: when set, the step size is `mu0 / sqrt(epoch)`.
    epoch_clock: Option<u64>,
}

impl DualState {
    pub fn new(n: usize, mu_lambda0: f64) -> Self {
        Self {
            lambda_low: DVector::zeros(n),
            lambda_high: DVector::zeros(n),
            t_low: DVector::zeros(n),
            t_high: DVector::zeros(n),
            mu_lambda0,
            k: 0,
            epoch_clock: None,
        }
    }

    /// Switches the decay clock to epochs; `epoch` starts at 1.
    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch_clock = Some(epoch.max(1));
    }

    /// Advances the iteration clock and returns the dual step size for this
    /// update: `mu0 / sqrt(k)` with `k` starting at 1, where the clock is
    /// the epoch index when one is set and the step index otherwise.
    fn next_step_size(&mut self) -> f64 {
        self.k += 1;
        let clock = self.epoch_clock.unwrap_or(self.k);
        self.mu_lambda0 / (clock as f64).sqrt()
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn max_lambda_low(&self) -> f64 {
        self.lambda_low.max()
    }

    pub fn max_lambda_high(&self) -> f64 {
        self.lambda_high.max()
    }

    pub fn nonnegative(&self) -> bool {
        self.lambda_low.iter().all(|&x| x >= 0.0) && self.lambda_high.iter().all(|&x| x >= 0.0)
    }
}

/// Everything the trainer mutates besides the network itself.
#[derive(Debug)]
pub struct TrainerState {
    pub dual: DualState,
    pub opt_w: PolicyOptimizer,
    pub opt_t_low: AdamState,
    pub opt_t_high: AdamState,
    pub rng: ChaCha8Rng,
    /// Last converged reduced state, used as a warm-start fallback.
    pub warm_state: Option<DVector<f64>>,
    pub steps: u64,
}

impl TrainerState {
    pub fn new(net: &PolicyNetwork, feeder: &FeederModel, cfg: &TrainConfig) -> Self {
        let n = feeder.n();
        Self {
            dual: DualState::new(n, cfg.mu_lambda0),
            opt_w: PolicyOptimizer::new(net, cfg.lr_w),
            opt_t_low: AdamState::new(n, cfg.lr_t),
            opt_t_high: AdamState::new(n, cfg.lr_t),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED_0F_DE17A)),
            warm_state: None,
            steps: 0,
        }
    }
}

/// Result of one primal-dual step.
#[derive(Debug, Clone, Copy)]
pub enum StepOutcome {
    /// Step applied; carries the post-update loss and violation flag.
    Updated { loss: f64, violated: bool },
    /// Scenario skipped because a solve failed to converge.
    Recourse,
}

/// Indicator 1(x >= 0), applied entrywise. Ties at zero count as active.
pub fn indicator(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Hinge activity pattern for the lower-voltage surrogate: 1(t + v_min - v >= 0).
pub fn active_low(t_low: &DVector<f64>, v: &DVector<f64>, v_min: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| indicator(t_low[i] + v_min[i] - v[i]))
}

/// Hinge activity pattern for the upper-voltage surrogate: 1(t + v - v_max >= 0).
pub fn active_high(t_high: &DVector<f64>, v: &DVector<f64>, v_max: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| indicator(t_high[i] + v[i] - v_max[i]))
}

/// Lower-side hinge constraint values: `[t + v_min - v]_+ - alpha t`.
pub fn hinge_low(
    t_low: &DVector<f64>,
    v: &DVector<f64>,
    v_min: &DVector<f64>,
    alpha: f64,
) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| {
        (t_low[i] + v_min[i] - v[i]).max(0.0) - alpha * t_low[i]
    })
}

/// Upper-side hinge constraint values: `[t + v - v_max]_+ - alpha t`.
pub fn hinge_high(
    t_high: &DVector<f64>,
    v: &DVector<f64>,
    v_max: &DVector<f64>,
    alpha: f64,
) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| {
        (t_high[i] + v[i] - v_max[i]).max(0.0) - alpha * t_high[i]
    })
}

/// Embeds per-inverter setpoints into the length-N reactive injection vector.
pub fn embed_controlled(feeder: &FeederModel, q_ctrl: &DVector<f64>) -> DVector<f64> {
    let mut q = DVector::zeros(feeder.n());
    for (j, &bus) in feeder.controlled_buses().iter().enumerate() {
        q[bus - 1] = q_ctrl[j];
    }
    q
}

/// Restricts a length-N vector to the controlled-inverter coordinates.
pub fn restrict_controlled(feeder: &FeederModel, full: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(feeder.controlled_buses().len(), |j, _| {
        full[feeder.controlled_buses()[j] - 1]
    })
}

/// Solar generation at the controlled buses, in controlled-bus order.
pub fn controlled_solar(feeder: &FeederModel, theta: &GridConditions) -> DVector<f64> {
    restrict_controlled(feeder, &theta.p_g)
}

/// Two-point zeroth-order gradient estimate of a scalar black box:
/// `(f(q + eps d) - f(q - eps d)) / (2 eps) * d`.
pub fn two_point_estimate<F>(
    f: F,
    q: &DVector<f64>,
    epsilon: f64,
    delta: &DVector<f64>,
) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let up = f(&(q + epsilon * delta));
    let dn = f(&(q - epsilon * delta));
    (up - dn) / (2.0 * epsilon) * delta
}

#[derive(Debug, thiserror::Error)]
#[error("zeroth-order probe failed to converge")]
pub struct ZerothOrderDivergence;

/// Rank-one estimates of the loss gradient and voltage Jacobian from two
/// perturbed solves at `q ± eps delta`. Shapes match the analytic
/// [`Sensitivities`] so the estimates drop into the same updates.
pub fn zeroth_order_sensitivities(
    feeder: &FeederModel,
    theta: &GridConditions,
    q_g: &DVector<f64>,
    epsilon: f64,
    delta: &DVector<f64>,
    opts: NewtonOptions,
    warm: Option<&DVector<f64>>,
) -> Result<Sensitivities, ZerothOrderDivergence> {
    let up = powerflow::solve_with(feeder, theta, &(q_g + epsilon * delta), opts, warm);
    if !up.converged {
        return Err(ZerothOrderDivergence);
    }
    let dn = powerflow::solve_with(feeder, theta, &(q_g - epsilon * delta), opts, warm);
    if !dn.converged {
        return Err(ZerothOrderDivergence);
    }
    let dl_dq = (up.losses - dn.losses) / (2.0 * epsilon) * delta;
    let dv_scaled = (&up.v - &dn.v) / (2.0 * epsilon);
    let dv_dq = &dv_scaled * delta.transpose();
    Ok(Sensitivities { dv_dq, dl_dq })
}

fn solve_with_retry(
    feeder: &FeederModel,
    theta: &GridConditions,
    q_g: &DVector<f64>,
    opts: NewtonOptions,
    warm: Option<&DVector<f64>>,
) -> PowerFlowSolution {
    let sol = powerflow::solve_with(feeder, theta, q_g, opts, None);
    if sol.converged {
        return sol;
    }
    match warm {
        Some(w) => powerflow::solve_with(feeder, theta, q_g, opts, Some(w)),
        None => sol,
    }
}

fn any_violation(v: &DVector<f64>, v_min: &DVector<f64>, v_max: &DVector<f64>) -> bool {
    v.iter()
        .zip(v_min.iter().zip(v_max.iter()))
        .any(|(&v, (&lo, &hi))| v < lo - 1e-9 || v > hi + 1e-9)
}

/// Obtains sensitivities per the configured gradient mode, or `None` when a
/// probe solve diverges (a recourse event).
fn step_sensitivities(
    net_sol: &PowerFlowSolution,
    feeder: &FeederModel,
    theta: &GridConditions,
    q_g: &DVector<f64>,
    state: &mut TrainerState,
    cfg: &TrainConfig,
) -> Option<Sensitivities> {
    match cfg.gradient_mode {
        GradientMode::Analytic => powerflow::sensitivities(feeder, net_sol).ok(),
        GradientMode::ZerothOrder => {
            let normal = rand_distr::Normal::new(0.0, cfg.sigma_delta).expect("validated");
            let c = feeder.controlled_buses().len();
            let mut acc: Option<Sensitivities> = None;
            for _ in 0..cfg.zeroth_order_samples {
                let delta_ctrl = DVector::from_fn(c, |_, _| normal.sample(&mut state.rng));
                let delta = embed_controlled(feeder, &delta_ctrl);
                let est = zeroth_order_sensitivities(
                    feeder,
                    theta,
                    q_g,
                    cfg.epsilon,
                    &delta,
                    cfg.pf.into(),
                    state.warm_state.as_ref(),
                )
                .ok()?;
                acc = Some(match acc {
                    None => est,
                    Some(mut a) => {
                        a.dv_dq += est.dv_dq;
                        a.dl_dq += est.dl_dq;
                        a
                    }
                });
            }
            let mut est = acc.expect("at least one sample");
            let scale = 1.0 / cfg.zeroth_order_samples as f64;
            est.dv_dq *= scale;
            est.dl_dq *= scale;
            Some(est)
        }
    }
}

/// One stochastic primal-dual step of the averaged formulation: Adam descent
/// on the weights along `dl_dq + dv_dq' (lambda_high - lambda_low)`, then
/// projected dual ascent on voltages re-solved at the updated weights.
pub fn averaged_step(
    net: &mut PolicyNetwork,
    state: &mut TrainerState,
    feeder: &FeederModel,
    scenario: &Scenario,
    cfg: &TrainConfig,
) -> Result<StepOutcome, TrainError> {
    let s_max = DVector::from_vec(feeder.s_max_controlled());
    let p_g_ctrl = controlled_solar(feeder, &scenario.theta);
    let cache = net.forward(&scenario.phi, &p_g_ctrl, &s_max)?;
    let q_g = embed_controlled(feeder, &cache.q);
    let sol = solve_with_retry(
        feeder,
        &scenario.theta,
        &q_g,
        cfg.pf.into(),
        state.warm_state.as_ref(),
    );
    if !sol.converged {
        return Ok(StepOutcome::Recourse);
    }
    state.warm_state = Some(sol.u.clone());

    let Some(sens) = step_sensitivities(&sol, feeder, &scenario.theta, &q_g, state, cfg) else {
        return Ok(StepOutcome::Recourse);
    };
    let lambda_diff = &state.dual.lambda_high - &state.dual.lambda_low;
    let adjoint_full = &sens.dl_dq + sens.dv_dq.transpose() * lambda_diff;
    let adjoint = restrict_controlled(feeder, &adjoint_full);
    let grad = net.vjp(&cache, &adjoint)?;
    state.opt_w.step(net, &grad)?;
    state.steps += 1;
    if !net.parameters_finite() {
        return Err(TrainError::NonFiniteParameters { step: state.steps });
    }

    // Dual ascent uses voltages at the *updated* weights.
    let cache2 = net.forward(&scenario.phi, &p_g_ctrl, &s_max)?;
    let q_g2 = embed_controlled(feeder, &cache2.q);
    let sol2 = solve_with_retry(
        feeder,
        &scenario.theta,
        &q_g2,
        cfg.pf.into(),
        state.warm_state.as_ref(),
    );
    if !sol2.converged {
        return Ok(StepOutcome::Recourse);
    }
    state.warm_state = Some(sol2.u.clone());

    let v_min = DVector::from_vec(feeder.v_min());
    let v_max = DVector::from_vec(feeder.v_max());
    let mu = state.dual.next_step_size();
    let lo = &state.dual.lambda_low + mu * (&v_min - &sol2.v);
    let hi = &state.dual.lambda_high + mu * (&sol2.v - &v_max);
    state.dual.lambda_low = lo.map(|x| x.max(0.0));
    state.dual.lambda_high = hi.map(|x| x.max(0.0));

    Ok(StepOutcome::Updated {
        loss: sol2.losses,
        violated: any_violation(&sol2.v, &v_min, &v_max),
    })
}

/// One stochastic primal-dual step of the chance-constrained formulation.
/// Subgradients of the hinge surrogates drive Adam updates of the weights
/// and of the per-bus auxiliary variables; dual ascent then uses constraint
/// values re-evaluated at the updated weights and auxiliaries.
pub fn chance_step(
    net: &mut PolicyNetwork,
    state: &mut TrainerState,
    feeder: &FeederModel,
    scenario: &Scenario,
    cfg: &TrainConfig,
) -> Result<StepOutcome, TrainError> {
    let alpha = cfg.alpha;
    let s_max = DVector::from_vec(feeder.s_max_controlled());
    let p_g_ctrl = controlled_solar(feeder, &scenario.theta);
    let cache = net.forward(&scenario.phi, &p_g_ctrl, &s_max)?;
    let q_g = embed_controlled(feeder, &cache.q);
    let sol = solve_with_retry(
        feeder,
        &scenario.theta,
        &q_g,
        cfg.pf.into(),
        state.warm_state.as_ref(),
    );
    if !sol.converged {
        return Ok(StepOutcome::Recourse);
    }
    state.warm_state = Some(sol.u.clone());

    let v_min = DVector::from_vec(feeder.v_min());
    let v_max = DVector::from_vec(feeder.v_max());
    let act_low = active_low(&state.dual.t_low, &sol.v, &v_min);
    let act_high = active_high(&state.dual.t_high, &sol.v, &v_max);

    let Some(sens) = step_sensitivities(&sol, feeder, &scenario.theta, &q_g, state, cfg) else {
        return Ok(StepOutcome::Recourse);
    };
    // d(hinge)/dv is -1(active) on the lower side and +1(active) on the upper.
    let gv = act_high.component_mul(&state.dual.lambda_high)
        - act_low.component_mul(&state.dual.lambda_low);
    let adjoint_full = &sens.dl_dq + sens.dv_dq.transpose() * gv;
    let adjoint = restrict_controlled(feeder, &adjoint_full);
    let grad = net.vjp(&cache, &adjoint)?;
    state.opt_w.step(net, &grad)?;
    state.steps += 1;
    if !net.parameters_finite() {
        return Err(TrainError::NonFiniteParameters { step: state.steps });
    }

    // Auxiliary updates: d(hinge)/dt = 1(active) - alpha, weighted by duals.
    let grad_t_low: Vec<f64> = (0..feeder.n())
        .map(|i| (act_low[i] - alpha) * state.dual.lambda_low[i])
        .collect();
    let grad_t_high: Vec<f64> = (0..feeder.n())
        .map(|i| (act_high[i] - alpha) * state.dual.lambda_high[i])
        .collect();
    state
        .opt_t_low
        .step(state.dual.t_low.as_mut_slice(), &grad_t_low)?;
    state
        .opt_t_high
        .step(state.dual.t_high.as_mut_slice(), &grad_t_high)?;

    // Dual ascent at the updated weights and auxiliaries.
    let cache2 = net.forward(&scenario.phi, &p_g_ctrl, &s_max)?;
    let q_g2 = embed_controlled(feeder, &cache2.q);
    let sol2 = solve_with_retry(
        feeder,
        &scenario.theta,
        &q_g2,
        cfg.pf.into(),
        state.warm_state.as_ref(),
    );
    if !sol2.converged {
        return Ok(StepOutcome::Recourse);
    }
    state.warm_state = Some(sol2.u.clone());

    let g_low = hinge_low(&state.dual.t_low, &sol2.v, &v_min, alpha);
    let g_high = hinge_high(&state.dual.t_high, &sol2.v, &v_max, alpha);
    let mu = state.dual.next_step_size();
    let lo = &state.dual.lambda_low + mu * g_low;
    let hi = &state.dual.lambda_high + mu * g_high;
    state.dual.lambda_low = lo.map(|x| x.max(0.0));
    state.dual.lambda_high = hi.map(|x| x.max(0.0));

    Ok(StepOutcome::Updated {
        loss: sol2.losses,
        violated: any_violation(&sol2.v, &v_min, &v_max),
    })
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    /// Mean post-update loss over the epoch's applied steps.
    pub loss: f64,
    pub max_lambda_low: f64,
    pub max_lambda_high: f64,
    /// Steps whose post-update voltages violated a limit somewhere.
    pub violations: usize,
    pub recourse_events: usize,
}

/// Runs `epochs` passes over the training set, one primal-dual step per
/// scenario, and returns the per-epoch log. The network is updated in place.
pub fn train(
    net: &mut PolicyNetwork,
    feeder: &FeederModel,
    train_set: &[Scenario],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = TrainerState::new(net, feeder, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut consecutive_recourse = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        if cfg.dual_decay == DualDecay::PerEpoch {
            state.dual.set_epoch(epoch as u64 + 1);
        }
        // Fresh scenario order each epoch; a fixed cycle lets the
        // primal-dual pair phase-lock to the data sequence.
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut updated = 0usize;
        let mut violations = 0usize;
        let mut recourse_events = 0usize;
        for &idx in &order {
            let scenario = &train_set[idx];
            let outcome = match cfg.formulation {
                Formulation::Averaged => averaged_step(net, &mut state, feeder, scenario, cfg)?,
                Formulation::Chance => chance_step(net, &mut state, feeder, scenario, cfg)?,
            };
            match outcome {
                StepOutcome::Updated { loss, violated } => {
                    consecutive_recourse = 0;
                    loss_sum += loss;
                    updated += 1;
                    if violated {
                        violations += 1;
                    }
                }
                StepOutcome::Recourse => {
                    recourse_events += 1;
                    consecutive_recourse += 1;
                    if consecutive_recourse > cfg.recourse_budget {
                        return Err(TrainError::RecourseBudgetExhausted {
                            epoch,
                            consecutive: consecutive_recourse,
                        });
                    }
                }
            }
        }
        debug_assert!(state.dual.nonnegative());
        log.push(EpochLog {
            epoch,
            step: state.steps,
            loss: if updated > 0 {
                loss_sum / updated as f64
            } else {
                0.0
            },
            max_lambda_low: state.dual.max_lambda_low(),
            max_lambda_high: state.dual.max_lambda_high(),
            violations,
            recourse_events,
        });
    }
    Ok(log)
}

/// Writes the training log as CSV with one row per epoch.
pub fn write_training_log(writer: impl Write, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "epoch",
        "step",
        "loss",
        "max_lambda_low",
        "max_lambda_high",
        "violations",
        "recourse_events",
    ])?;
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            row.step.to_string(),
            format!("{}", row.loss),
            format!("{}", row.max_lambda_low),
            format!("{}", row.max_lambda_high),
            row.violations.to_string(),
            row.recourse_events.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{Bus, Line};
    use crate::scenarios::MeterMask;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Two-bus feeder with a controlled solar inverter at bus 1.
    fn two_bus() -> FeederModel {
        FeederModel::from_parts(
            vec![
                Bus {
                    id: 0,
                    has_load: false,
                    has_solar: false,
                    has_inverter_control: false,
                    s_max: None,
                    v_min: 0.97,
                    v_max: 1.03,
                },
                Bus {
                    id: 1,
                    has_load: true,
                    has_solar: true,
                    has_inverter_control: true,
                    s_max: Some(1.0),
                    v_min: 0.97,
                    v_max: 1.03,
                },
            ],
            vec![Line {
                from: 0,
                to: 1,
                r: 0.05,
                x: 0.05,
            }],
            1.0,
            4.8,
        )
        .unwrap()
    }

    fn scenario_for(feeder: &FeederModel, p_c: f64, q_c: f64, p_g: f64) -> Scenario {
        let theta = GridConditions::new(
            DVector::from_vec(vec![p_c]),
            DVector::from_vec(vec![q_c]),
            DVector::from_vec(vec![p_g]),
        );
        let phi = MeterMask::full(feeder).build_phi(&theta);
        Scenario {
            theta,
            phi,
            timestamp_index: 0,
        }
    }

    fn small_policy(seed: u64) -> PolicyNetwork {
        let mut net = PolicyNetwork::init(&[3, 4, 1], seed);
        for layer in net.layers_mut() {
            layer.weights *= 0.3;
        }
        net
    }

    #[test]
    fn dual_update_is_inactive_inside_limits() {
        let feeder = two_bus();
        let mut net = small_policy(2);
        let cfg = TrainConfig::averaged(1, 2);
        let mut state = TrainerState::new(&net, &feeder, &cfg);
        // Light load keeps the voltage well inside the band.
        let scenario = scenario_for(&feeder, 0.01, 0.003, 0.01);
        let out = averaged_step(&mut net, &mut state, &feeder, &scenario, &cfg).unwrap();
        assert!(matches!(out, StepOutcome::Updated { violated: false, .. }));
        assert_eq!(state.dual.lambda_low, DVector::zeros(1));
        assert_eq!(state.dual.lambda_high, DVector::zeros(1));
    }

    #[test]
    fn first_dual_step_matches_hand_arithmetic() {
        // v_min = 0.97, v = 0.95, lambda = 0, mu = 10/sqrt(1): new lambda_low = 0.2.
        let mut dual = DualState::new(1, 10.0);
        let v = DVector::from_vec(vec![0.95]);
        let v_min = DVector::from_vec(vec![0.97]);
        let v_max = DVector::from_vec(vec![1.03]);
        let mu = dual.next_step_size();
        assert_eq!(mu, 10.0);
        let lo = &dual.lambda_low + mu * (&v_min - &v);
        let hi = &dual.lambda_high + mu * (&v - &v_max);
        dual.lambda_low = lo.map(|x| x.max(0.0));
        dual.lambda_high = hi.map(|x| x.max(0.0));
        assert_relative_eq!(dual.lambda_low[0], 0.2, epsilon = 1e-15);
        assert_eq!(dual.lambda_high[0], 0.0);
    }

    #[test]
    fn dual_step_size_decays_with_sqrt_k() {
        let mut dual = DualState::new(1, 10.0);
        assert_eq!(dual.next_step_size(), 10.0);
        assert_relative_eq!(dual.next_step_size(), 10.0 / 2f64.sqrt());
        assert_relative_eq!(dual.next_step_size(), 10.0 / 3f64.sqrt());
    }

    #[test]
    fn chance_hinge_arithmetic() {
        // t = 0.01, alpha = 0.5, v_min - v = 0.02: hinge = 0.03 - 0.005 = 0.025,
        // the indicator is active, and the t-subgradient entry is 1 - alpha = 0.5.
        let t = DVector::from_vec(vec![0.01]);
        let v = DVector::from_vec(vec![0.95]);
        let v_min = DVector::from_vec(vec![0.97]);
        let g = hinge_low(&t, &v, &v_min, 0.5);
        assert_relative_eq!(g[0], 0.025, epsilon = 1e-15);
        let act = active_low(&t, &v, &v_min);
        assert_eq!(act[0], 1.0);
        assert_relative_eq!(act[0] - 0.5, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn inactive_hinges_leave_duals_unchanged() {
        let feeder = two_bus();
        let mut net = small_policy(3);
        let cfg = TrainConfig::chance(0.5, 1, 3);
        let mut state = TrainerState::new(&net, &feeder, &cfg);
        let scenario = scenario_for(&feeder, 0.01, 0.003, 0.01);
        let out = chance_step(&mut net, &mut state, &feeder, &scenario, &cfg).unwrap();
        assert!(matches!(out, StepOutcome::Updated { .. }));
        assert_eq!(state.dual.lambda_low[0], 0.0);
        assert_eq!(state.dual.lambda_high[0], 0.0);
        // With zero duals the auxiliary gradients vanish too.
        assert_eq!(state.dual.t_low[0], 0.0);
        assert_eq!(state.dual.t_high[0], 0.0);
    }

    #[test]
    fn indicator_dominated_by_hinge_surrogate() {
        // 1(f) <= [1 + f/t]_+ for all f and t > 0.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100_000 {
            let f = rng.random_range(-5.0..5.0);
            let t = rng.random_range(1e-6..5.0f64);
            let lhs = indicator(f);
            let rhs = (1.0 + f / t).max(0.0);
            assert!(lhs <= rhs, "violated at f={f}, t={t}");
        }
    }

    /// Scenario Lagrangian at fixed duals, evaluated by fresh solves.
    fn lagrangian(
        net: &PolicyNetwork,
        feeder: &FeederModel,
        scenario: &Scenario,
        lambda_low: &DVector<f64>,
        lambda_high: &DVector<f64>,
    ) -> f64 {
        let s_max = DVector::from_vec(feeder.s_max_controlled());
        let p_g_ctrl = controlled_solar(feeder, &scenario.theta);
        let cache = net.forward(&scenario.phi, &p_g_ctrl, &s_max).unwrap();
        let q_g = embed_controlled(feeder, &cache.q);
        let sol = powerflow::solve(feeder, &scenario.theta, &q_g);
        assert!(sol.converged);
        let v_min = DVector::from_vec(feeder.v_min());
        let v_max = DVector::from_vec(feeder.v_max());
        sol.losses
            + lambda_high.dot(&(&sol.v - &v_max))
            + lambda_low.dot(&(&v_min - &sol.v))
    }

    #[test]
    fn averaged_weight_gradient_matches_lagrangian_finite_differences() {
        let feeder = two_bus();
        let net = small_policy(5);
        // Over-voltage pressure: strong solar export, upper dual active.
        let scenario = scenario_for(&feeder, 0.05, 0.01, 0.6);
        let lambda_low = DVector::from_vec(vec![0.0]);
        let lambda_high = DVector::from_vec(vec![2.0]);

        let s_max = DVector::from_vec(feeder.s_max_controlled());
        let p_g_ctrl = controlled_solar(&feeder, &scenario.theta);
        let cache = net.forward(&scenario.phi, &p_g_ctrl, &s_max).unwrap();
        let q_g = embed_controlled(&feeder, &cache.q);
        let sol = powerflow::solve(&feeder, &scenario.theta, &q_g);
        let sens = powerflow::sensitivities(&feeder, &sol).unwrap();
        let adjoint_full = &sens.dl_dq + sens.dv_dq.transpose() * (&lambda_high - &lambda_low);
        let adjoint = restrict_controlled(&feeder, &adjoint_full);
        let analytic = net.vjp(&cache, &adjoint).unwrap();

        let step = 1e-6;
        for l in 0..net.layers().len() {
            for idx in 0..net.layers()[l].weights.len() {
                let mut up = net.clone();
                let mut dn = net.clone();
                up.layers_mut()[l].weights.as_mut_slice()[idx] += step;
                dn.layers_mut()[l].weights.as_mut_slice()[idx] -= step;
                let fd = (lagrangian(&up, &feeder, &scenario, &lambda_low, &lambda_high)
                    - lagrangian(&dn, &feeder, &scenario, &lambda_low, &lambda_high))
                    / (2.0 * step);
                let a = analytic.layers[l].weights.as_slice()[idx];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    ((fd - a) / denom).abs() < 1e-4,
                    "layer {l} weight {idx}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn averaged_step_descends_the_lagrangian() {
        let feeder = two_bus();
        let mut net = small_policy(5);
        let cfg = TrainConfig::averaged(1, 5);
        let mut state = TrainerState::new(&net, &feeder, &cfg);
        state.dual.lambda_high[0] = 2.0;
        let scenario = scenario_for(&feeder, 0.05, 0.01, 0.6);
        let before = lagrangian(
            &net,
            &feeder,
            &scenario,
            &DVector::zeros(1),
            &DVector::from_vec(vec![2.0]),
        );
        averaged_step(&mut net, &mut state, &feeder, &scenario, &cfg).unwrap();
        let after = lagrangian(
            &net,
            &feeder,
            &scenario,
            &DVector::zeros(1),
            &DVector::from_vec(vec![2.0]),
        );
        assert!(after < before, "Lagrangian rose: {before} -> {after}");
    }

    /// Dual updates must consume voltages at the updated weights, not the
    /// weights the step started from.
    #[test]
    fn dual_update_uses_post_update_weights() {
        let feeder = two_bus();
        let cfg = TrainConfig::averaged(1, 7);
        let scenario = scenario_for(&feeder, 0.05, 0.01, 0.6);
        let s_max = DVector::from_vec(feeder.s_max_controlled());
        let p_g_ctrl = controlled_solar(&feeder, &scenario.theta);

        let mut net = small_policy(7);
        let mut state = TrainerState::new(&net, &feeder, &cfg);
        state.dual.lambda_high[0] = 2.0;

        // Replicate the primal half on a clone to predict w^{k+1}.
        let mut replica = net.clone();
        let mut replica_opt = PolicyOptimizer::new(&replica, cfg.lr_w);
        let cache = replica.forward(&scenario.phi, &p_g_ctrl, &s_max).unwrap();
        let q_g = embed_controlled(&feeder, &cache.q);
        let sol = powerflow::solve(&feeder, &scenario.theta, &q_g);
        let sens = powerflow::sensitivities(&feeder, &sol).unwrap();
        let lambda_diff = DVector::from_vec(vec![2.0]);
        let adjoint_full = &sens.dl_dq + sens.dv_dq.transpose() * lambda_diff;
        let adjoint = restrict_controlled(&feeder, &adjoint_full);
        let grad = replica.vjp(&cache, &adjoint).unwrap();
        replica_opt.step(&mut replica, &grad).unwrap();

        let v_old = sol.v.clone();
        let cache_new = replica.forward(&scenario.phi, &p_g_ctrl, &s_max).unwrap();
        let sol_new = powerflow::solve(
            &feeder,
            &scenario.theta,
            &embed_controlled(&feeder, &cache_new.q),
        );
        let v_new = sol_new.v.clone();
        assert!(
            (v_new[0] - v_old[0]).abs() > 1e-9,
            "test needs the update to move the voltage"
        );

        averaged_step(&mut net, &mut state, &feeder, &scenario, &cfg).unwrap();
        let v_max = DVector::from_vec(feeder.v_max());
        let expected_new = (2.0 + 10.0 * (v_new[0] - v_max[0])).max(0.0);
        let expected_old = (2.0 + 10.0 * (v_old[0] - v_max[0])).max(0.0);
        assert_relative_eq!(state.dual.lambda_high[0], expected_new, epsilon = 1e-12);
        assert!((state.dual.lambda_high[0] - expected_old).abs() > 1e-12);
    }

    #[test]
    fn two_point_estimate_is_exact_on_linear_functions() {
        let c = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let f = |q: &DVector<f64>| c.dot(q);
        let q = DVector::from_vec(vec![0.1, 0.2, -0.4]);
        let delta = DVector::from_vec(vec![1.5, -0.3, 0.9]);
        let est = two_point_estimate(f, &q, 0.1, &delta);
        let expected = c.dot(&delta) * &delta;
        assert_relative_eq!(est, expected, epsilon = 1e-12);
    }

    #[test]
    fn two_point_estimate_is_exact_on_quadratics() {
        let f = |q: &DVector<f64>| q.norm_squared();
        let q = DVector::from_vec(vec![0.5, -0.8]);
        let delta = DVector::from_vec(vec![0.6, 1.1]);
        let est = two_point_estimate(f, &q, 0.05, &delta);
        let expected = 2.0 * q.dot(&delta) * &delta;
        assert_relative_eq!(est, expected, epsilon = 1e-10);
    }

    #[test]
    fn zeroth_order_mean_approximates_analytic_loss_gradient() {
        let feeder = two_bus();
        let theta = GridConditions::new(
            DVector::from_vec(vec![0.3]),
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![0.1]),
        );
        let q_g = DVector::from_vec(vec![0.05]);
        let sol = powerflow::solve(&feeder, &theta, &q_g);
        let analytic = powerflow::sensitivities(&feeder, &sol).unwrap().dl_dq;

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut mean = DVector::zeros(1);
        let reps = 200;
        for _ in 0..reps {
            let delta = DVector::from_fn(1, |_, _| normal.sample(&mut rng));
            let est = zeroth_order_sensitivities(
                &feeder,
                &theta,
                &q_g,
                0.1,
                &delta,
                NewtonOptions::default(),
                None,
            )
            .unwrap();
            mean += est.dl_dq;
        }
        mean /= reps as f64;
        let rel = (mean[0] - analytic[0]).abs() / analytic[0].abs();
        assert!(rel < 0.1, "relative error {rel}");
    }

    #[test]
    fn basis_sweep_estimates_converge_with_epsilon() {
        let feeder = two_bus();
        let theta = GridConditions::new(
            DVector::from_vec(vec![0.3]),
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![0.1]),
        );
        let q_g = DVector::from_vec(vec![0.02]);
        let sol = powerflow::solve(&feeder, &theta, &q_g);
        let analytic = powerflow::sensitivities(&feeder, &sol).unwrap();
        let mut errs = Vec::new();
        for eps in [1e-2, 1e-3] {
            // Canonical basis sweep: with delta = e_i the rank-one estimates
            // assemble the plain central-difference gradient.
            let delta = DVector::from_vec(vec![1.0]);
            let est = zeroth_order_sensitivities(
                &feeder,
                &theta,
                &q_g,
                eps,
                &delta,
                NewtonOptions::default(),
                None,
            )
            .unwrap();
            errs.push(
                (est.dl_dq[0] - analytic.dl_dq[0])
                    .abs()
                    .max((est.dv_dq[(0, 0)] - analytic.dv_dq[(0, 0)]).abs()),
            );
        }
        assert!(
            errs[1] < errs[0],
            "error did not shrink with epsilon: {errs:?}"
        );
    }

    #[test]
    fn zeroth_order_diverging_probe_reports_recourse() {
        let feeder = two_bus();
        let theta = GridConditions::new(
            DVector::from_vec(vec![9.0]),
            DVector::from_vec(vec![3.0]),
            DVector::zeros(1),
        );
        let err = zeroth_order_sensitivities(
            &feeder,
            &theta,
            &DVector::zeros(1),
            0.1,
            &DVector::from_vec(vec![1.0]),
            NewtonOptions::default(),
            None,
        );
        assert!(err.is_err());
    }

    fn tiny_dataset(feeder: &FeederModel, count: usize) -> Vec<Scenario> {
        (0..count)
            .map(|i| {
                let x = i as f64 / count as f64;
                scenario_for(feeder, 0.04 + 0.02 * x, 0.01, 0.3 + 0.2 * x)
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leaves_network_untouched() {
        let feeder = two_bus();
        let mut net = small_policy(11);
        let reference = net.clone();
        let cfg = TrainConfig::averaged(0, 11);
        let log = train(&mut net, &feeder, &tiny_dataset(&feeder, 4), &cfg).unwrap();
        assert!(log.is_empty());
        for (a, b) in net.layers().iter().zip(reference.layers()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let feeder = two_bus();
        let data = tiny_dataset(&feeder, 12);
        let cfg = TrainConfig::averaged(2, 13);
        let mut net_a = small_policy(13);
        let log_a = train(&mut net_a, &feeder, &data, &cfg).unwrap();
        let mut net_b = small_policy(13);
        let log_b = train(&mut net_b, &feeder, &data, &cfg).unwrap();
        assert_eq!(log_a, log_b);
        for (a, b) in net_a.layers().iter().zip(net_b.layers()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn recourse_skips_bad_scenarios_and_reports_them() {
        let feeder = two_bus();
        let mut data = tiny_dataset(&feeder, 6);
        // One unsolvable scenario inside an otherwise healthy epoch.
        data[2] = scenario_for(&feeder, 40.0, 15.0, 0.0);
        let mut net = small_policy(19);
        let cfg = TrainConfig::averaged(2, 19);
        let log = train(&mut net, &feeder, &data, &cfg).unwrap();
        assert_eq!(log.len(), 2);
        for row in &log {
            assert_eq!(row.recourse_events, 1);
        }
    }

    #[test]
    fn recourse_budget_exhaustion_aborts() {
        let feeder = two_bus();
        let data: Vec<Scenario> = (0..15)
            .map(|_| scenario_for(&feeder, 40.0, 15.0, 0.0))
            .collect();
        let mut net = small_policy(23);
        let cfg = TrainConfig::averaged(1, 23);
        let err = train(&mut net, &feeder, &data, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::RecourseBudgetExhausted { .. }));
    }

    #[test]
    fn chance_config_requires_valid_alpha() {
        let cfg = TrainConfig::chance(1.5, 1, 1);
        assert!(matches!(cfg.validate(), Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn training_log_csv_layout() {
        let log = vec![EpochLog {
            epoch: 0,
            step: 12,
            loss: 0.5,
            max_lambda_low: 0.0,
            max_lambda_high: 1.25,
            violations: 3,
            recourse_events: 1,
        }];
        let mut buf = Vec::new();
        write_training_log(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,step,loss,max_lambda_low,max_lambda_high,violations,recourse_events"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "0,12,0.5,0,1.25,3,1");
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
