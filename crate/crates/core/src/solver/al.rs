//! Augmented Lagrangian outer loop over the projected L-BFGS inner solver.
//!
//! Large structured programs implement [`SmoothProgram`] so that the
//! augmented-Lagrangian gradient can be assembled in one weighted reverse
//! sweep instead of one gradient per constraint.

use super::lbfgsb::{minimize_box, BoxOptions, BoxStatus};
use super::{NlpProblem, SolveStatus};
use crate::solver::fd;

pub struct ProgramEval {
    pub f: f64,
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

/// A smooth program exposing a combined evaluation and a weighted-gradient
/// callback: `grad(w_f * f + w_eq . c + w_ineq . g)`.
pub trait SmoothProgram {
    fn n_vars(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn eval(&self, x: &[f64]) -> ProgramEval;
    fn grad_weighted(&self, x: &[f64], w_f: f64, w_eq: &[f64], w_ineq: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct AlOptions {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_outer: usize,
    pub inner_iters: usize,
    pub rho0: f64,
    pub rho_max: f64,
}

impl Default for AlOptions {
    fn default() -> Self {
        AlOptions {
            tol_feas: 1e-6,
            tol_opt: 1e-5,
            max_outer: 30,
            inner_iters: 300,
            rho0: 10.0,
            rho_max: 1e9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlReport {
    pub x: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub lambda_eq: Vec<f64>,
    pub mu_ineq: Vec<f64>,
}

fn violation(eq: &[f64], ineq: &[f64]) -> f64 {
    let ve = eq.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let vi = ineq.iter().fold(0.0_f64, |m, g| m.max(g.max(0.0)));
    ve.max(vi)
}

/// Solve a [`SmoothProgram`] by the method of multipliers. `warm` optionally
/// carries multiplier estimates from a previous, structurally identical
/// solve.
pub fn solve_al(
    prog: &dyn SmoothProgram,
    x0: &[f64],
    warm: Option<(&[f64], &[f64])>,
    opts: &AlOptions,
) -> AlReport {
    let (lb, ub) = prog.bounds();
    let probe = prog.eval(x0);
    let m_eq = probe.eq.len();
    let m_in = probe.ineq.len();
    let mut lambda = vec![0.0; m_eq];
    let mut mu = vec![0.0; m_in];
    if let Some((l0, m0)) = warm {
        if l0.len() == m_eq && m0.len() == m_in {
            lambda.copy_from_slice(l0);
            mu.copy_from_slice(m0);
        }
    }
    let mut rho = opts.rho0;
    let mut x = x0.to_vec();
    let mut viol_prev = f64::INFINITY;
    let mut inner_total = 0;
    // Stationarity thresholds are relative to the objective's gradient scale.
    let grad_scale = {
        let g0 = prog.grad_weighted(&x, 1.0, &vec![0.0; m_eq], &vec![0.0; m_in]);
        1.0 + g0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    };
    let tol_opt = opts.tol_opt * grad_scale;
    let mut inner_tol = (tol_opt * 100.0).max(1e-4);
    let mut status = SolveStatus::MaxIter;
    let mut outer_done = 0;

    for outer in 0..opts.max_outer {
        outer_done = outer + 1;
        let al_value = |x: &[f64], lambda: &[f64], mu: &[f64], rho: f64| -> f64 {
            let e = prog.eval(x);
            let mut v = e.f;
            for i in 0..m_eq {
                v += lambda[i] * e.eq[i] + 0.5 * rho * e.eq[i] * e.eq[i];
            }
            for i in 0..m_in {
                let t = (mu[i] + rho * e.ineq[i]).max(0.0);
                v += (t * t - mu[i] * mu[i]) / (2.0 * rho);
            }
            v
        };
        let lam = lambda.clone();
        let muc = mu.clone();
        let mut value = |x: &[f64]| al_value(x, &lam, &muc, rho);
        let lam2 = lambda.clone();
        let muc2 = mu.clone();
        let mut value_grad = |x: &[f64], g: &mut [f64]| -> f64 {
            let e = prog.eval(x);
            let mut v = e.f;
            let mut w_eq = vec![0.0; m_eq];
            for i in 0..m_eq {
                v += lam2[i] * e.eq[i] + 0.5 * rho * e.eq[i] * e.eq[i];
                w_eq[i] = lam2[i] + rho * e.eq[i];
            }
            let mut w_in = vec![0.0; m_in];
            for i in 0..m_in {
                let t = (muc2[i] + rho * e.ineq[i]).max(0.0);
                v += (t * t - muc2[i] * muc2[i]) / (2.0 * rho);
                w_in[i] = t;
            }
            let grad = prog.grad_weighted(x, 1.0, &w_eq, &w_in);
            g.copy_from_slice(&grad);
            v
        };
        let box_opts = BoxOptions {
            max_iter: opts.inner_iters,
            tol_pg: inner_tol,
            ..Default::default()
        };
        let res = minimize_box(&mut value, &mut value_grad, &x, &lb, &ub, &box_opts);
        inner_total += res.iterations;
        x = res.x;
        if std::env::var_os("RDMPC_AL_TRACE").is_some() {
            let e = prog.eval(&x);
            eprintln!(
                "al outer {outer}: rho {rho:.1e} inner {} ({:?}) pg {:.3e}/{inner_tol:.1e} viol {:.3e} f {:.6e}",
                res.iterations,
                res.status,
                res.pg_norm,
                violation(&e.eq, &e.ineq),
                e.f
            );
        }

        let e = prog.eval(&x);
        let viol = violation(&e.eq, &e.ineq);
        if viol <= opts.tol_feas
            && res.pg_norm <= tol_opt
            && res.status != BoxStatus::LineSearchFailed
        {
            status = SolveStatus::Converged;
            break;
        }
        if viol <= opts.tol_feas && res.status == BoxStatus::LineSearchFailed {
            // Feasible but the inner solver stalled: accept as converged to
            // line-search precision.
            status = SolveStatus::Converged;
            break;
        }

        if viol <= 0.5 * viol_prev || viol <= 10.0 * opts.tol_feas {
            // Near-feasible stagnation is a resolution problem, not a
            // penalty problem: update multipliers and tighten the inner
            // solve instead of escalating rho.
            for i in 0..m_eq {
                lambda[i] += rho * e.eq[i];
            }
            for i in 0..m_in {
                mu[i] = (mu[i] + rho * e.ineq[i]).max(0.0);
            }
            inner_tol = (inner_tol * 0.2).max(tol_opt);
        } else {
            rho *= 5.0;
            if rho > opts.rho_max {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        viol_prev = viol.min(viol_prev);
    }

    let e = prog.eval(&x);
    AlReport {
        objective: e.f,
        max_violation: violation(&e.eq, &e.ineq),
        x,
        status,
        outer_iterations: outer_done,
        inner_iterations: inner_total,
        lambda_eq: lambda,
        mu_ineq: mu,
    }
}

/// Adapter exposing an [`NlpProblem`] as a [`SmoothProgram`]; weighted
/// gradients come from finite differences of the weighted sum, which keeps
/// the adapter suitable for small problems and tests.
pub struct NlpAsProgram<'a> {
    pub problem: &'a NlpProblem<'a>,
}

impl SmoothProgram for NlpAsProgram<'_> {
    fn n_vars(&self) -> usize {
        self.problem.n_vars
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.problem.lower.clone(), self.problem.upper.clone())
    }

    fn eval(&self, x: &[f64]) -> ProgramEval {
        ProgramEval {
            f: (self.problem.objective)(x),
            eq: self.problem.eq_constraints.as_ref().map(|c| c(x)).unwrap_or_default(),
            ineq: self.problem.ineq_constraints.as_ref().map(|c| c(x)).unwrap_or_default(),
        }
    }

    fn grad_weighted(&self, x: &[f64], w_f: f64, w_eq: &[f64], w_ineq: &[f64]) -> Vec<f64> {
        let weighted = |v: &[f64]| -> f64 {
            let mut s = w_f * (self.problem.objective)(v);
            if let Some(c) = &self.problem.eq_constraints {
                for (i, ci) in c(v).iter().enumerate() {
                    s += w_eq[i] * ci;
                }
            }
            if let Some(g) = &self.problem.ineq_constraints {
                for (i, gi) in g(v).iter().enumerate() {
                    s += w_ineq[i] * gi;
                }
            }
            s
        };
        fd::fd_gradient(&weighted, x, fd::DEFAULT_FD_STEP).unwrap_or_else(|_| vec![0.0; x.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equality_constrained_projection() {
        // min ||x||^2 s.t. x0 + x1 = 2 -> (1, 1).
        let mut p = NlpProblem::new(2, Box::new(|v| v[0] * v[0] + v[1] * v[1]));
        p.eq_constraints = Some(Box::new(|v| vec![v[0] + v[1] - 2.0]));
        let prog = NlpAsProgram { problem: &p };
        let r = solve_al(&prog, &[0.0, 0.0], None, &AlOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!((r.x[1] - 1.0).abs() < 1e-4);
        assert!(r.max_violation < 1e-6);
    }

    #[test]
    fn inequality_and_box() {
        // min (x0-3)^2 + (x1-4)^2 s.t. x0 + x1 <= 5, x >= 0 -> (2, 3).
        let mut p = NlpProblem::new(
            2,
            Box::new(|v| (v[0] - 3.0).powi(2) + (v[1] - 4.0).powi(2)),
        );
        p.ineq_constraints = Some(Box::new(|v| vec![v[0] + v[1] - 5.0]));
        p.lower = vec![0.0, 0.0];
        p.upper = vec![10.0, 10.0];
        let prog = NlpAsProgram { problem: &p };
        let r = solve_al(&prog, &[0.0, 0.0], None, &AlOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.x[0] - 2.0).abs() < 1e-4, "{:?}", r.x);
        assert!((r.x[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn detects_infeasible_equalities() {
        let mut p = NlpProblem::new(1, Box::new(|v| v[0] * v[0]));
        p.eq_constraints = Some(Box::new(|v| vec![v[0], v[0] - 1.0]));
        let prog = NlpAsProgram { problem: &p };
        let r = solve_al(&prog, &[0.3], None, &AlOptions::default());
        assert_eq!(r.status, SolveStatus::Infeasible);
    }
}
