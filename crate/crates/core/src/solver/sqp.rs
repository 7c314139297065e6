//! Sequential quadratic programming with a damped BFGS Hessian, a
//! trust-region box on the step, an l1 merit line search, and an
//! augmented-Lagrangian feasibility restoration when the QP linearization is
//! inconsistent.

use super::fd;
use super::lbfgsb::{minimize_box, BoxOptions};
use super::qp::{solve_qp, QpError};
use super::{NlpProblem, SolveOptions, SolveReport, SolveStatus};
use crate::linalg::{dot, norm_inf, Mat};

struct Evaluation {
    f: f64,
    grad: Vec<f64>,
    c_eq: Vec<f64>,
    j_eq: Mat,
    c_in: Vec<f64>,
    j_in: Mat,
}

fn evaluate(p: &NlpProblem, v: &[f64]) -> Option<Evaluation> {
    let f = (p.objective)(v);
    let grad = match &p.objective_grad {
        Some(g) => g(v),
        None => fd::fd_gradient(p.objective.as_ref(), v, fd::DEFAULT_FD_STEP).ok()?,
    };
    let (c_eq, j_eq) = match &p.eq_constraints {
        Some(c) => {
            let val = c(v);
            let jac = match &p.eq_jacobian {
                Some(j) => j(v),
                None => fd::fd_jacobian(c.as_ref(), v, fd::DEFAULT_FD_STEP).ok()?,
            };
            (val, jac)
        }
        None => (Vec::new(), Mat::zeros(0, p.n_vars)),
    };
    let (c_in, j_in) = match &p.ineq_constraints {
        Some(c) => {
            let val = c(v);
            let jac = match &p.ineq_jacobian {
                Some(j) => j(v),
                None => fd::fd_jacobian(c.as_ref(), v, fd::DEFAULT_FD_STEP).ok()?,
            };
            (val, jac)
        }
        None => (Vec::new(), Mat::zeros(0, p.n_vars)),
    };
    if !f.is_finite() || grad.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(Evaluation {
        f,
        grad,
        c_eq,
        j_eq,
        c_in,
        j_in,
    })
}

fn violation_l1(c_eq: &[f64], c_in: &[f64]) -> f64 {
    c_eq.iter().map(|c| c.abs()).sum::<f64>() + c_in.iter().map(|g| g.max(0.0)).sum::<f64>()
}

fn violation_inf(c_eq: &[f64], c_in: &[f64]) -> f64 {
    let ve = c_eq.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let vi = c_in.iter().fold(0.0_f64, |m, g| m.max(g.max(0.0)));
    ve.max(vi)
}

fn merit(p: &NlpProblem, v: &[f64], nu: f64) -> f64 {
    let f = (p.objective)(v);
    let ceq = p.eq_constraints.as_ref().map(|c| c(v)).unwrap_or_default();
    let cin = p.ineq_constraints.as_ref().map(|c| c(v)).unwrap_or_default();
    f + nu * violation_l1(&ceq, &cin)
}

/// Stationarity of the Lagrangian with bound multipliers eliminated:
/// components pinned at a bound may carry the corresponding sign.
fn stationarity(
    v: &[f64],
    grad_lag: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..v.len() {
        let at_lower = v[i] <= lower[i] + 1e-10;
        let at_upper = v[i] >= upper[i] - 1e-10;
        let r = if at_lower && grad_lag[i] > 0.0 {
            0.0
        } else if at_upper && grad_lag[i] < 0.0 {
            0.0
        } else {
            grad_lag[i]
        };
        m = m.max(r.abs());
    }
    m
}

/// Powell-damped BFGS update keeping B positive definite.
fn bfgs_update(b: &mut Mat, s: &[f64], y: &[f64]) {
    let n = s.len();
    let bs = b.matvec(s);
    let sbs = dot(s, &bs);
    let sy = dot(s, y);
    if sbs <= 0.0 {
        return;
    }
    let theta = if sy >= 0.2 * sbs {
        1.0
    } else {
        0.8 * sbs / (sbs - sy)
    };
    let r: Vec<f64> = (0..n).map(|i| theta * y[i] + (1.0 - theta) * bs[i]).collect();
    let sr = dot(s, &r);
    if sr <= 1e-14 * sbs {
        return;
    }
    for i in 0..n {
        for j in 0..n {
            let upd = -bs[i] * bs[j] / sbs + r[i] * r[j] / sr;
            b.add_at(i, j, upd);
        }
    }
}

/// Feasibility restoration: descend on the squared constraint violation over
/// the variable box (the augmented-Lagrangian fallback with zero
/// multipliers).
fn restore_feasibility(p: &NlpProblem, v: &[f64], iters: usize) -> Vec<f64> {
    let phi = |x: &[f64]| -> f64 {
        let mut s = 0.0;
        if let Some(c) = &p.eq_constraints {
            for ci in c(x) {
                s += ci * ci;
            }
        }
        if let Some(c) = &p.ineq_constraints {
            for gi in c(x) {
                let gp = gi.max(0.0);
                s += gp * gp;
            }
        }
        0.5 * s
    };
    let mut value = |x: &[f64]| phi(x);
    let mut value_grad = |x: &[f64], g: &mut [f64]| -> f64 {
        let gr = fd::fd_gradient(&phi, x, fd::DEFAULT_FD_STEP).unwrap_or_else(|_| vec![0.0; x.len()]);
        g.copy_from_slice(&gr);
        phi(x)
    };
    let opts = BoxOptions {
        max_iter: iters,
        tol_pg: 1e-10,
        ..Default::default()
    };
    minimize_box(&mut value, &mut value_grad, v, &p.lower, &p.upper, &opts).x
}

pub fn solve_sqp(p: &NlpProblem, v0: &[f64], opts: &SolveOptions) -> SolveReport {
    let n = p.n_vars;
    let mut v: Vec<f64> = v0
        .iter()
        .enumerate()
        .map(|(i, &x)| x.max(p.lower[i]).min(p.upper[i]))
        .collect();

    // Scale the initial quasi-Newton matrix to the objective gradient so the
    // first QP steps are O(1) even for badly scaled objectives.
    let scaled_identity = |v: &[f64]| -> Mat {
        let gamma = fd::fd_gradient(p.objective.as_ref(), v, fd::DEFAULT_FD_STEP)
            .map(|g| norm_inf(&g))
            .unwrap_or(1.0)
            .clamp(1.0, 1e12);
        let mut m = Mat::identity(n);
        for i in 0..n {
            m.set(i, i, gamma);
        }
        m
    };
    let mut b = scaled_identity(&v);
    let mut b_fresh = true;
    let mut delta = 1e3_f64; // trust-region half width
    let mut nu = 1.0_f64; // merit penalty
    let mut lambda: Vec<f64> = Vec::new();
    let mut mu: Vec<f64> = Vec::new();
    let mut restorations = 0;

    let report = |v: &[f64], status: SolveStatus, iterations: usize| -> SolveReport {
        let f = (p.objective)(v);
        let ceq = p.eq_constraints.as_ref().map(|c| c(v)).unwrap_or_default();
        let cin = p.ineq_constraints.as_ref().map(|c| c(v)).unwrap_or_default();
        SolveReport {
            solution: v.to_vec(),
            objective: f,
            max_violation: violation_inf(&ceq, &cin),
            iterations,
            status,
        }
    };

    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let Some(eval) = evaluate(p, &v) else {
            return report(&v, SolveStatus::MaxIter, iterations);
        };
        let viol = violation_inf(&eval.c_eq, &eval.c_in);

        // KKT check with multipliers from the previous QP.
        if viol <= opts.tol_feas && (lambda.len() == eval.c_eq.len() && mu.len() == eval.c_in.len()) {
            let mut grad_lag = eval.grad.clone();
            for (i, l) in lambda.iter().enumerate() {
                for k in 0..n {
                    grad_lag[k] += l * eval.j_eq.at(i, k);
                }
            }
            for (i, m) in mu.iter().enumerate() {
                for k in 0..n {
                    grad_lag[k] += m * eval.j_in.at(i, k);
                }
            }
            let stat_scale = 1.0 + norm_inf(&eval.grad);
            if stationarity(&v, &grad_lag, &p.lower, &p.upper) <= opts.tol_opt * stat_scale {
                return report(&v, SolveStatus::Converged, iterations);
            }
        }

        // QP subproblem over the step d, with the variable box and trust
        // region folded into inequality rows.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for i in 0..eval.c_in.len() {
            rows.push(eval.j_in.row(i).to_vec());
            rhs.push(-eval.c_in[i]);
        }
        for i in 0..n {
            let up = (p.upper[i] - v[i]).min(delta);
            let lo = (p.lower[i] - v[i]).max(-delta);
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            rows.push(r.clone());
            rhs.push(up.max(0.0));
            r[i] = -1.0;
            rows.push(r);
            rhs.push((-lo).max(0.0));
        }
        let a_in = Mat::from_rows(&rows);
        let b_eq: Vec<f64> = eval.c_eq.iter().map(|c| -c).collect();

        let qp = solve_qp(&b, &eval.grad, &eval.j_eq, &b_eq, &a_in, &rhs);
        if std::env::var_os("RDMPC_SQP_TRACE").is_some() {
            eprintln!(
                "sqp it {iterations}: f {:.6e} viol {viol:.3e} delta {delta:.2e} qp {:?}",
                eval.f,
                qp.as_ref().map(|s| norm_inf(&s.d)).map_err(|e| format!("{e:?}"))
            );
        }
        let (d, lam_new, mu_new) = match qp {
            Ok(sol) => {
                let mu_rows = sol.mu_in[..eval.c_in.len()].to_vec();
                (sol.d, sol.lambda_eq, mu_rows)
            }
            Err(QpError::NotPosDef) => {
                b = scaled_identity(&v);
                b_fresh = true;
                continue;
            }
            Err(QpError::Infeasible | QpError::IterationLimit) => {
                // First recourse: recondition the quasi-Newton matrix and
                // shrink the trust region (degenerate or badly scaled QP).
                if !b_fresh {
                    b = scaled_identity(&v);
                    b_fresh = true;
                    delta = (delta * 0.25).max(1e-6);
                    continue;
                }
                // Augmented-Lagrangian fallback: restore feasibility, reset
                // curvature, and try again from the restored point.
                restorations += 1;
                if restorations > 3 {
                    let status = if viol <= opts.tol_feas {
                        SolveStatus::MaxIter
                    } else {
                        SolveStatus::Infeasible
                    };
                    return report(&v, status, iterations);
                }
                let restored = restore_feasibility(p, &v, 200);
                let ceq = p.eq_constraints.as_ref().map(|c| c(&restored)).unwrap_or_default();
                let cin = p.ineq_constraints.as_ref().map(|c| c(&restored)).unwrap_or_default();
                let new_viol = violation_inf(&ceq, &cin);
                if new_viol > (viol - 1e-12).max(10.0 * opts.tol_feas) && viol > opts.tol_feas {
                    return report(&v, SolveStatus::Infeasible, iterations);
                }
                v = restored;
                b = scaled_identity(&v);
                b_fresh = true;
                delta = (delta * 0.25).max(1e-6);
                lambda.clear();
                mu.clear();
                continue;
            }
        };

        lambda = lam_new;
        mu = mu_new;

        let step_norm = norm_inf(&d);
        if step_norm <= 1e-12 && viol <= opts.tol_feas {
            return report(&v, SolveStatus::Converged, iterations);
        }

        // l1 merit line search.
        let mult_inf = lambda
            .iter()
            .chain(mu.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()));
        nu = nu.max(1.1 * mult_inf + 1e-3);
        let viol1 = violation_l1(&eval.c_eq, &eval.c_in);
        let mut dir_deriv = dot(&eval.grad, &d) - nu * viol1;
        if dir_deriv >= 0.0 && viol1 > 0.0 {
            nu = (dot(&eval.grad, &d).abs() / viol1 + 1.0) * 2.0;
            dir_deriv = dot(&eval.grad, &d) - nu * viol1;
        }
        let phi0 = eval.f + nu * viol1;
        if std::env::var_os("RDMPC_SQP_TRACE").is_some() {
            let mut probe = v.clone();
            for i in 0..n {
                probe[i] = (v[i] + d[i]).max(p.lower[i]).min(p.upper[i]);
            }
            let mut lin_eq = 0.0_f64;
            for i in 0..eval.c_eq.len() {
                lin_eq = lin_eq.max((dot(eval.j_eq.row(i), &d) + eval.c_eq[i]).abs());
            }
            let (clip_i, clip) = (0..n)
                .map(|i| (i, (v[i] + d[i] - probe[i]).abs()))
                .fold((0, 0.0_f64), |acc, x| if x.1 > acc.1 { x } else { acc });
            eprintln!(
                "  qp step: lin_eq_resid {lin_eq:.3e} clip {clip:.3e} at {clip_i} (v {:.3e} d {:.3e} lb {:.3e} ub {:.3e})",
                v[clip_i], d[clip_i], p.lower[clip_i], p.upper[clip_i]
            );
            let f1 = (p.objective)(&probe);
            let ceq1 = p.eq_constraints.as_ref().map(|c| c(&probe)).unwrap_or_default();
            let cin1 = p.ineq_constraints.as_ref().map(|c| c(&probe)).unwrap_or_default();
            eprintln!(
                "  ls: nu {nu:.3e} phi0 {phi0:.6e} phi(1) {:.6e} D {dir_deriv:.3e} mult {mult_inf:.3e} f1 {f1:.4e} eq1 {:.3e} in1 {:.3e}",
                merit(p, &probe, nu),
                violation_l1(&ceq1, &[]),
                violation_l1(&[], &cin1)
            );
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut v_new = v.clone();
        for _ in 0..30 {
            for i in 0..n {
                v_new[i] = (v[i] + alpha * d[i]).max(p.lower[i]).min(p.upper[i]);
            }
            let phi = merit(p, &v_new, nu);
            if phi.is_finite() && phi <= phi0 + 1e-4 * alpha * dir_deriv.min(0.0) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            delta = (delta * 0.25).max(1e-12);
            if delta <= 1e-11 {
                // No progress possible at the smallest trust region.
                let status = if viol <= opts.tol_feas {
                    SolveStatus::Converged
                } else {
                    SolveStatus::MaxIter
                };
                return report(&v, status, iterations);
            }
            continue;
        }

        // BFGS on the Lagrangian gradient difference.
        if let Some(eval_new) = evaluate(p, &v_new) {
            let grad_lag = |e: &Evaluation| -> Vec<f64> {
                let mut g = e.grad.clone();
                for (i, l) in lambda.iter().enumerate() {
                    for k in 0..n {
                        g[k] += l * e.j_eq.at(i, k);
                    }
                }
                for (i, m) in mu.iter().enumerate() {
                    for k in 0..n {
                        g[k] += m * e.j_in.at(i, k);
                    }
                }
                g
            };
            let s: Vec<f64> = (0..n).map(|i| v_new[i] - v[i]).collect();
            let y: Vec<f64> = {
                let g0 = grad_lag(&eval);
                let g1 = grad_lag(&eval_new);
                (0..n).map(|i| g1[i] - g0[i]).collect()
            };
            if norm_inf(&s) > 0.0 {
                bfgs_update(&mut b, &s, &y);
                b_fresh = false;
            }
        }

        v = v_new;
        if alpha >= 0.99 {
            delta = (delta * 2.0).min(1e6);
        } else if alpha < 0.1 {
            delta = (delta * 0.5).max(1e-9);
        }
    }

    report(&v, SolveStatus::MaxIter, opts.max_iter)
}

#[cfg(test)]
mod tests {
    use super::super::{solve, NlpProblem, SolveOptions, SolveStatus};

    #[test]
    fn active_bound_scalar() {
        // min v^2 s.t. v >= 1.
        let mut p = NlpProblem::new(1, Box::new(|v| v[0] * v[0]));
        p.lower = vec![1.0];
        p.upper = vec![f64::INFINITY];
        let r = solve(&p, &[3.0], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.solution[0] - 1.0).abs() < 1e-8, "{:?}", r.solution);
    }

    #[test]
    fn projection_with_linear_inequality() {
        // min ||v-(3,4)||^2 s.t. v1+v2 <= 5 -> (2,3) by hand KKT.
        let mut p = NlpProblem::new(
            2,
            Box::new(|v| (v[0] - 3.0).powi(2) + (v[1] - 4.0).powi(2)),
        );
        p.ineq_constraints = Some(Box::new(|v| vec![v[0] + v[1] - 5.0]));
        let r = solve(&p, &[0.0, 0.0], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.solution[0] - 2.0).abs() < 1e-6);
        assert!((r.solution[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_equalities_reported() {
        // v = 0 and v = 1 simultaneously.
        let mut p = NlpProblem::new(1, Box::new(|v| v[0] * v[0]));
        p.eq_constraints = Some(Box::new(|v| vec![v[0], v[0] - 1.0]));
        let r = solve(&p, &[0.5], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn nonlinear_equality_circle() {
        // min x + y s.t. x^2 + y^2 = 2 -> (-1, -1).
        let mut p = NlpProblem::new(2, Box::new(|v| v[0] + v[1]));
        p.eq_constraints = Some(Box::new(|v| vec![v[0] * v[0] + v[1] * v[1] - 2.0]));
        let r = solve(&p, &[1.5, 0.1], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.solution[0] + 1.0).abs() < 1e-5, "{:?}", r.solution);
        assert!((r.solution[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn nonlinear_inequality_ball() {
        // min -x - 2y s.t. x^2 + y^2 <= 5, x,y >= 0 -> (1, 2).
        let mut p = NlpProblem::new(2, Box::new(|v| -v[0] - 2.0 * v[1]));
        p.ineq_constraints = Some(Box::new(|v| vec![v[0] * v[0] + v[1] * v[1] - 5.0]));
        p.lower = vec![0.0, 0.0];
        p.upper = vec![10.0, 10.0];
        let r = solve(&p, &[0.1, 0.1], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.solution[0] - 1.0).abs() < 1e-5, "{:?}", r.solution);
        assert!((r.solution[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn converged_implies_feasible_on_random_qps() {
        // 100 random inequality-constrained QPs; every Converged report must
        // satisfy its constraints to tolerance.
        let mut state = 0x243f6a8885a308d3_u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let opts = SolveOptions::default();
        for _ in 0..100 {
            let a = next() * 4.0 - 2.0;
            let bq = next() * 4.0 - 2.0;
            let cap = next() * 2.0 - 1.0;
            let mut p = NlpProblem::new(
                2,
                Box::new(move |v| (v[0] - a).powi(2) + 2.0 * (v[1] - bq).powi(2)),
            );
            p.ineq_constraints = Some(Box::new(move |v| vec![v[0] + v[1] - cap]));
            let r = solve(&p, &[0.0, 0.0], &opts);
            if r.status == SolveStatus::Converged {
                assert!(r.max_violation <= opts.tol_feas * 1.001, "viol {}", r.max_violation);
            } else {
                panic!("random convex QP failed to converge");
            }
        }
    }
}
