//! In-house smooth constrained nonlinear programming.
//!
//! Two engines share the same problem statement:
//!
//! * [`solve`] — dense SQP with a damped BFGS Hessian, a Goldfarb-Idnani
//!   active-set QP for the step, an l1 merit line search with a trust-region
//!   box, and an augmented-Lagrangian feasibility fallback when the QP's
//!   linearization is inconsistent. The workhorse for identification
//!   problems and small optimal control problems.
//! * [`al::solve_al`] — augmented Lagrangian with a projected L-BFGS inner
//!   solver for large structured programs (thousands of variables) that can
//!   supply weighted-gradient callbacks.

pub mod al;
pub mod fd;
pub mod l1;
pub mod lbfgsb;
mod qp;
mod sqp;

pub use fd::{fd_gradient, fd_jacobian, DerivativeFailure};
pub use l1::L1Split;

use crate::linalg::Mat;

pub type ScalarFn<'f> = dyn Fn(&[f64]) -> f64 + 'f;
pub type VectorFn<'f> = dyn Fn(&[f64]) -> Vec<f64> + 'f;
pub type GradFn<'f> = dyn Fn(&[f64]) -> Vec<f64> + 'f;
pub type JacFn<'f> = dyn Fn(&[f64]) -> Mat + 'f;

/// Smooth nonlinear program over box-bounded variables with equality
/// constraints `c(v) = 0` and inequality constraints `g(v) <= 0`.
/// Derivative callbacks are optional; central finite differences are used
/// when they are absent.
pub struct NlpProblem<'f> {
    pub n_vars: usize,
    pub objective: Box<ScalarFn<'f>>,
    pub objective_grad: Option<Box<GradFn<'f>>>,
    pub eq_constraints: Option<Box<VectorFn<'f>>>,
    pub eq_jacobian: Option<Box<JacFn<'f>>>,
    pub ineq_constraints: Option<Box<VectorFn<'f>>>,
    pub ineq_jacobian: Option<Box<JacFn<'f>>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl<'f> NlpProblem<'f> {
    /// Unconstrained problem skeleton with free bounds.
    pub fn new(n_vars: usize, objective: Box<ScalarFn<'f>>) -> Self {
        NlpProblem {
            n_vars,
            objective,
            objective_grad: None,
            eq_constraints: None,
            eq_jacobian: None,
            ineq_constraints: None,
            ineq_jacobian: None,
            lower: vec![f64::NEG_INFINITY; n_vars],
            upper: vec![f64::INFINITY; n_vars],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_feas: 1e-6,
            tol_opt: 1e-6,
            max_iter: 200,
        }
    }
}

/// Solve an [`NlpProblem`] with the SQP engine. The initial point is clipped
/// into the variable box. `MaxIter` and `Infeasible` are reported statuses,
/// not errors; the caller decides what to do with the final iterate.
pub fn solve(problem: &NlpProblem<'_>, v0: &[f64], opts: &SolveOptions) -> SolveReport {
    sqp::solve_sqp(problem, v0, opts)
}
pub mod test_hooks { pub use super::qp::solve_qp as solve_qp_public; pub use super::qp::{QpError, QpSolution}; }
