//! Projected limited-memory BFGS for smooth box-constrained minimization.
//!
//! Used as the inner solver of the augmented-Lagrangian engine and as the
//! feasibility-restoration workhorse. Active bound handling is the simple
//! gradient-projection variant: coordinates pinned at a bound with an
//! outward-pushing gradient are frozen out of the quasi-Newton subspace, and
//! the line search projects trial points back into the box.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxStatus {
    Converged,
    MaxIter,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct BoxResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub pg_norm: f64,
    pub iterations: usize,
    pub status: BoxStatus,
}

#[derive(Debug, Clone, Copy)]
pub struct BoxOptions {
    pub max_iter: usize,
    pub tol_pg: f64,
    pub memory: usize,
    pub max_line_search: usize,
}

impl Default for BoxOptions {
    fn default() -> Self {
        BoxOptions {
            max_iter: 400,
            tol_pg: 1e-8,
            memory: 30,
            max_line_search: 40,
        }
    }
}

#[inline]
fn clamp_into(x: &mut [f64], lb: &[f64], ub: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].max(lb[i]).min(ub[i]);
    }
}

/// Inf-norm of the projected gradient `x - proj(x - g)`.
fn projected_gradient_norm(x: &[f64], g: &[f64], lb: &[f64], ub: &[f64]) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).max(lb[i]).min(ub[i]) - x[i];
        m = m.max(step.abs());
    }
    m
}

/// Minimize `f` over the box `[lb, ub]`. `value` is used for line-search
/// probes; `value_grad` on accepted points.
pub fn minimize_box(
    value: &mut dyn FnMut(&[f64]) -> f64,
    value_grad: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    x0: &[f64],
    lb: &[f64],
    ub: &[f64],
    opts: &BoxOptions,
) -> BoxResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    clamp_into(&mut x, lb, ub);
    let mut g = vec![0.0; n];
    let mut f = value_grad(&x, &mut g);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    let mut status = BoxStatus::MaxIter;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it;
        let pg = projected_gradient_norm(&x, &g, lb, ub);
        if pg <= opts.tol_pg {
            status = BoxStatus::Converged;
            break;
        }

        // Freeze coordinates at active bounds with outward gradients.
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (x[i] <= lb[i] + 1e-14 && g[i] > 0.0) || (x[i] >= ub[i] - 1e-14 && g[i] < 0.0)
            })
            .collect();
        let gm: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, &v)| if active[i] { 0.0 } else { v })
            .collect();

        // Two-loop recursion on the masked gradient.
        let mut d = {
            let mut q = gm.clone();
            let mut alphas = Vec::with_capacity(mem.len());
            for (s, y, rho) in mem.iter().rev() {
                let a = rho * crate::linalg::dot(s, &q);
                alphas.push(a);
                crate::linalg::axpy(&mut q, -a, y);
            }
            if let Some((s, y, _)) = mem.back() {
                let sy = crate::linalg::dot(s, y);
                let yy = crate::linalg::dot(y, y);
                if yy > 0.0 && sy > 0.0 {
                    let gamma = sy / yy;
                    for v in q.iter_mut() {
                        *v *= gamma;
                    }
                }
            }
            for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
                let b = rho * crate::linalg::dot(y, &q);
                crate::linalg::axpy(&mut q, a - b, s);
            }
            for v in q.iter_mut() {
                *v = -*v;
            }
            q
        };
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        if crate::linalg::dot(&d, &gm) > -1e-14 {
            // Not a descent direction: fall back to projected steepest descent.
            mem.clear();
            let gnorm = crate::linalg::norm_inf(&gm).max(1e-30);
            d = gm.iter().map(|&v| -v / gnorm).collect();
        }

        // Projected Armijo backtracking.
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut x_new = x.clone();
        let mut f_new = f;
        for _ in 0..opts.max_line_search {
            for i in 0..n {
                x_new[i] = (x[i] + alpha * d[i]).max(lb[i]).min(ub[i]);
            }
            let disp: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
            let gd = crate::linalg::dot(&g, &disp);
            if crate::linalg::norm_inf(&disp) < 1e-16 {
                break;
            }
            f_new = value(&x_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * gd.min(0.0) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // One last try along the raw projected gradient.
            mem.clear();
            let mut ok = false;
            let mut beta = 1.0 / crate::linalg::norm_inf(&gm).max(1.0);
            for _ in 0..opts.max_line_search {
                for i in 0..n {
                    x_new[i] = (x[i] - beta * gm[i]).max(lb[i]).min(ub[i]);
                }
                f_new = value(&x_new);
                if f_new.is_finite() && f_new < f {
                    ok = true;
                    break;
                }
                beta *= 0.5;
            }
            if !ok {
                status = BoxStatus::LineSearchFailed;
                break;
            }
        }

        let mut g_new = vec![0.0; n];
        let f_check = value_grad(&x_new, &mut g_new);
        // value and value_grad agree by construction; keep the graded value.
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let yv: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = crate::linalg::dot(&s, &yv);
        let ss = crate::linalg::norm2(&s);
        let yy = crate::linalg::norm2(&yv);
        if sy > 1e-10 * ss * yy && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, yv, 1.0 / sy));
        }
        x = x_new.clone();
        g = g_new;
        f = f_check.min(f_new);
    }

    let pg_norm = projected_gradient_norm(&x, &g, lb, ub);
    BoxResult {
        x,
        f,
        pg_norm,
        iterations,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let mut value = |x: &[f64]| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
        let mut vg = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 1.0);
            g[1] = 20.0 * (x[1] + 2.0);
            (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2)
        };
        let r = minimize_box(
            &mut value,
            &mut vg,
            &[5.0, 5.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            &BoxOptions::default(),
        );
        assert_eq!(r.status, BoxStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6);
        assert!((r.x[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn bound_becomes_active() {
        // Minimum of (x+3)^2 over x >= 0 sits at the bound.
        let mut value = |x: &[f64]| (x[0] + 3.0).powi(2);
        let mut vg = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] + 3.0);
            (x[0] + 3.0).powi(2)
        };
        let r = minimize_box(
            &mut value,
            &mut vg,
            &[4.0],
            &[0.0],
            &[10.0],
            &BoxOptions::default(),
        );
        assert_eq!(r.status, BoxStatus::Converged);
        assert!(r.x[0].abs() < 1e-10);
    }

    #[test]
    fn rosenbrock_in_box() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let mut value = |x: &[f64]| rosen(x);
        let mut vg = |x: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 200.0 * (x[1] - x[0] * x[0]);
            rosen(x)
        };
        let opts = BoxOptions {
            max_iter: 2000,
            ..Default::default()
        };
        let r = minimize_box(&mut value, &mut vg, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-5, "{:?}", r.x);
        assert!((r.x[1] - 1.0).abs() < 1e-5);
    }
}
