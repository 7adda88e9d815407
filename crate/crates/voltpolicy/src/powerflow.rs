//! AC power flow in rectangular coordinates.
//!
//! The state is the stacked vector `ū = [Re(ṽ); Im(ṽ)]` over all buses; the
//! reduced vector `u` drops the two substation entries, which stay fixed at
//! `1 + j0`. Newton iterations drive the 2N injection residuals
//! `s_i(ū) - s_i_spec` to zero, where each `s_i` is the quadratic form
//! `ū' M_i ū` from [`crate::feeder`]. The same matrices give the injection
//! Jacobian rows `2 ū' M_i` in closed form, which the inverse function
//! theorem turns into voltage and loss sensitivities with respect to the
//! inverter setpoints.

use crate::feeder::FeederModel;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum PowerFlowError {
    #[error("grid conditions have wrong length (expected {expected}, got {got})")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("active load and solar generation must be nonnegative")]
    NegativeInjectionData,
    #[error("sensitivities require a converged power-flow solution")]
    NotConverged,
    #[error("injection Jacobian is singular")]
    SingularJacobian,
}

/// Per-bus grid conditions for one scenario: active/reactive load and active
/// solar generation at buses `1..=N`, in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConditions {
    pub p_c: DVector<f64>,
    pub q_c: DVector<f64>,
    pub p_g: DVector<f64>,
}

impl GridConditions {
    pub fn new(p_c: DVector<f64>, q_c: DVector<f64>, p_g: DVector<f64>) -> Self {
        Self { p_c, q_c, p_g }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            p_c: DVector::zeros(n),
            q_c: DVector::zeros(n),
            p_g: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.p_c.len()
    }

    pub fn validate(&self, n: usize) -> Result<(), PowerFlowError> {
        for v in [&self.p_c, &self.q_c, &self.p_g] {
            if v.len() != n {
                return Err(PowerFlowError::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        if self.p_c.iter().any(|&x| x < 0.0) || self.p_g.iter().any(|&x| x < 0.0) {
            return Err(PowerFlowError::NegativeInjectionData);
        }
        Ok(())
    }
}

/// Why a solve stopped without converging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFailure {
    SingularJacobian,
    MaxIterationsExceeded,
    NonFiniteState,
}

/// Result of a Newton power-flow solve.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Reduced rectangular state (substation entries removed), length 2N.
    pub u: DVector<f64>,
    /// Full rectangular state, length 2N+2.
    pub u_bar: DVector<f64>,
    /// Voltage magnitudes at buses `1..=N`.
    pub v: DVector<f64>,
    /// Total ohmic losses in p.u.
    pub losses: f64,
    /// Newton updates performed.
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<SolveFailure>,
}

/// Analytic sensitivities of voltages and losses to the reactive injections
/// at buses `1..=N`, valid at a converged solution.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    /// `N x N`; entry `(n, m)` is the derivative of `v_n` w.r.t. `q_m`.
    pub dv_dq: DMatrix<f64>,
    /// Length N; derivative of the ohmic losses w.r.t. each `q_m`.
    pub dl_dq: DVector<f64>,
}

/// Newton solver settings.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Convergence threshold on the infinity norm of the injection residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20,
        }
    }
}

/// Stacks real and imaginary parts into the rectangular state layout.
pub fn stack_rectangular(re: &DVector<f64>, im: &DVector<f64>) -> DVector<f64> {
    let nb = re.len();
    let mut u_bar = DVector::zeros(2 * nb);
    u_bar.rows_mut(0, nb).copy_from(re);
    u_bar.rows_mut(nb, nb).copy_from(im);
    u_bar
}

/// Flat-start reduced state: all magnitudes 1, all angles 0.
pub fn flat_start(n: usize) -> DVector<f64> {
    let mut u = DVector::zeros(2 * n);
    u.rows_mut(0, n).fill(1.0);
    u
}

/// Inserts the fixed substation entries (`1 + j0`) into a reduced state.
pub fn expand_state(u: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut u_bar = DVector::zeros(2 * n + 2);
    u_bar[0] = 1.0;
    for i in 0..n {
        u_bar[1 + i] = u[i];
        u_bar[n + 2 + i] = u[n + i];
    }
    u_bar
}

/// Drops the two substation entries from a full-state vector.
pub fn reduce_state(u_bar: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut u = DVector::zeros(2 * n);
    for i in 0..n {
        u[i] = u_bar[1 + i];
        u[n + i] = u_bar[n + 2 + i];
    }
    u
}

/// Specified injections `[p_1..p_N, q_1..q_N]` for given conditions and
/// inverter setpoints.
fn specified_injections(theta: &GridConditions, q_g: &DVector<f64>) -> DVector<f64> {
    let n = theta.n();
    let mut s = DVector::zeros(2 * n);
    for i in 0..n {
        s[i] = theta.p_g[i] - theta.p_c[i];
        s[n + i] = q_g[i] - theta.q_c[i];
    }
    s
}

/// Solves the power flow from a flat start with default Newton options.
pub fn solve(feeder: &FeederModel, theta: &GridConditions, q_g: &DVector<f64>) -> PowerFlowSolution {
    solve_with(feeder, theta, q_g, NewtonOptions::default(), None)
}

/// Solves the power flow, optionally warm-starting from a previous reduced state.
pub fn solve_with(
    feeder: &FeederModel,
    theta: &GridConditions,
    q_g: &DVector<f64>,
    opts: NewtonOptions,
    start: Option<&DVector<f64>>,
) -> PowerFlowSolution {
    let n = feeder.n();
    debug_assert_eq!(theta.n(), n);
    debug_assert_eq!(q_g.len(), n);
    let s_spec = specified_injections(theta, q_g);
    let mut u = start.cloned().unwrap_or_else(|| flat_start(n));
    let mut iterations = 0;

    loop {
        let u_bar = expand_state(&u, n);
        if u_bar.iter().any(|x| !x.is_finite()) {
            return finish(feeder, u, iterations, false, Some(SolveFailure::NonFiniteState));
        }
        // One matrix-vector product per injection row serves both the
        // residual (s_i = ū·w_i) and the Jacobian row (2 w_i').
        let mut residual = DVector::zeros(2 * n);
        let mut products: Vec<DVector<f64>> = Vec::with_capacity(2 * n);
        for i in 0..2 * n {
            let bus = if i < n { i + 1 } else { i - n + 1 };
            let m = if i < n {
                feeder.m_p(bus)
            } else {
                feeder.m_q(bus)
            };
            let w = m * &u_bar;
            residual[i] = u_bar.dot(&w) - s_spec[i];
            products.push(w);
        }
        if residual.amax() < opts.tol {
            return finish(feeder, u, iterations, true, None);
        }
        if iterations >= opts.max_iter {
            return finish(
                feeder,
                u,
                iterations,
                false,
                Some(SolveFailure::MaxIterationsExceeded),
            );
        }
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        for (i, w) in products.iter().enumerate() {
            for k in 0..n {
                jac[(i, k)] = 2.0 * w[1 + k];
                jac[(i, n + k)] = 2.0 * w[n + 2 + k];
            }
        }
        match jac.lu().solve(&(-&residual)) {
            Some(delta) => u += delta,
            None => {
                return finish(
                    feeder,
                    u,
                    iterations,
                    false,
                    Some(SolveFailure::SingularJacobian),
                )
            }
        }
        iterations += 1;
    }
}

fn finish(
    feeder: &FeederModel,
    u: DVector<f64>,
    iterations: usize,
    converged: bool,
    failure: Option<SolveFailure>,
) -> PowerFlowSolution {
    let n = feeder.n();
    let u_bar = expand_state(&u, n);
    let v = DVector::from_fn(n, |i, _| (u[i] * u[i] + u[n + i] * u[n + i]).sqrt());
    let losses = (u_bar.transpose() * feeder.m_loss() * &u_bar)[0];
    PowerFlowSolution {
        u,
        u_bar,
        v,
        losses,
        iterations,
        converged,
        failure,
    }
}

/// Jacobian of the injections `[p_1..p_N, q_1..q_N]` with respect to the
/// reduced state `u`, evaluated at the solution state. Row `i` is `2 ū' M_i`
/// with the substation columns dropped.
pub fn injection_jacobian(feeder: &FeederModel, solution: &PowerFlowSolution) -> DMatrix<f64> {
    let n = feeder.n();
    let u_bar = &solution.u_bar;
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..2 * n {
        let bus = if i < n { i + 1 } else { i - n + 1 };
        let m = if i < n {
            feeder.m_p(bus)
        } else {
            feeder.m_q(bus)
        };
        let w = m * u_bar;
        for k in 0..n {
            jac[(i, k)] = 2.0 * w[1 + k];
            jac[(i, n + k)] = 2.0 * w[n + 2 + k];
        }
    }
    jac
}

/// Voltage and loss sensitivities at a converged solution.
///
/// By the inverse function theorem the state sensitivity is the inverse of
/// the injection Jacobian; only the N columns belonging to the reactive
/// coordinates are extracted, by solving against basis columns with a single
/// LU factorization instead of forming the full inverse.
pub fn sensitivities(
    feeder: &FeederModel,
    solution: &PowerFlowSolution,
) -> Result<Sensitivities, PowerFlowError> {
    if !solution.converged {
        return Err(PowerFlowError::NotConverged);
    }
    let n = feeder.n();
    let jac = injection_jacobian(feeder, solution);
    let lu = jac.lu();
    // Basis columns for the reactive coordinates q_1..q_N.
    let mut rhs = DMatrix::zeros(2 * n, n);
    for m in 0..n {
        rhs[(n + m, m)] = 1.0;
    }
    let du_dq = lu.solve(&rhs).ok_or(PowerFlowError::SingularJacobian)?;

    let u = &solution.u;
    let v = &solution.v;
    let mut dv_dq = DMatrix::zeros(n, n);
    for bus in 0..n {
        let (re, im) = (u[bus] / v[bus], u[n + bus] / v[bus]);
        for m in 0..n {
            dv_dq[(bus, m)] = re * du_dq[(bus, m)] + im * du_dq[(n + bus, m)];
        }
    }

    let grad_l_bar = 2.0 * (feeder.m_loss() * &solution.u_bar);
    let grad_l = reduce_state(&grad_l_bar, n);
    let dl_dq = du_dq.transpose() * grad_l;

    Ok(Sensitivities { dv_dq, dl_dq })
}
