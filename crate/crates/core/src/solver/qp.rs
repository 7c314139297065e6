//! Dense convex quadratic programming by the Goldfarb-Idnani dual active-set
//! method.
//!
//! Solves `min 1/2 d'Bd + g'd` subject to `A_eq d = b_eq` and `A_in d <= b_in`
//! for symmetric positive definite `B`. Equalities are activated first and
//! never dropped; inequalities enter one at a time, with ties broken toward
//! the lowest constraint index. The dual method needs no feasible starting
//! point and detects inconsistent constraints.

use crate::linalg::{cholesky, chol_solve, dot, Mat};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QpError {
    /// Hessian not numerically positive definite.
    NotPosDef,
    /// Constraints inconsistent (dual unbounded).
    Infeasible,
    /// Safety cap on active-set changes reached.
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: Vec<f64>,
    /// Multipliers of the equality rows (free sign).
    pub lambda_eq: Vec<f64>,
    /// Multipliers of the inequality rows (nonnegative).
    pub mu_in: Vec<f64>,
    pub iterations: usize,
}

struct Workspace {
    n: usize,
    /// J = L^{-T} with columns rotated so the first `q` span the active set.
    j: Mat,
    /// Upper-triangular factors of the active constraint normals.
    r: Mat,
    r_norm: f64,
    active: Vec<usize>,
    u: Vec<f64>,
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

impl Workspace {
    fn q(&self) -> usize {
        self.active.len()
    }

    /// d = J^T np
    fn project(&self, np: &[f64]) -> Vec<f64> {
        self.j.tr_matvec(np)
    }

    /// z = J_2 d_2 (step direction in the null space of the active set).
    fn null_step(&self, d: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut z = vec![0.0; self.n];
        for col in q..self.n {
            let dc = d[col];
            if dc != 0.0 {
                for row in 0..self.n {
                    z[row] += self.j.at(row, col) * dc;
                }
            }
        }
        z
    }

    /// r = R^{-1} d_1 (dual step direction for active constraints).
    fn dual_step(&self, d: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut s = d[i];
            for k in i + 1..q {
                s -= self.r.at(i, k) * r[k];
            }
            r[i] = s / self.r.at(i, i);
        }
        r
    }

    /// Rotate `d`'s tail to the active-set frame and append it as a new R
    /// column. Returns false when the normal is linearly dependent on the
    /// active set.
    fn add_constraint(&mut self, d: &mut [f64]) -> bool {
        let q = self.q();
        for jcol in ((q + 1)..self.n).rev() {
            // Nothing to annihilate: leave d (and J) untouched. Computing a
            // Givens pair here anyway can produce a pure reflection whose d
            // update would silently fall out of sync with J.
            if d[jcol] == 0.0 {
                continue;
            }
            let (c, s, h) = givens(d[jcol - 1], d[jcol]);
            d[jcol - 1] = h;
            d[jcol] = 0.0;
            for row in 0..self.n {
                let a = self.j.at(row, jcol - 1);
                let b = self.j.at(row, jcol);
                self.j.set(row, jcol - 1, c * a + s * b);
                self.j.set(row, jcol, -s * a + c * b);
            }
        }
        if d[q].abs() <= 1e-12 * self.r_norm {
            return false;
        }
        for row in 0..=q {
            self.r.set(row, q, d[row]);
        }
        self.r_norm = self.r_norm.max(d[q].abs());
        true
    }

    /// Remove the active constraint at position `pos` and re-triangularize.
    fn delete_constraint(&mut self, pos: usize) {
        let q = self.q();
        self.active.remove(pos);
        self.u.remove(pos);
        for col in pos..q - 1 {
            for row in 0..q {
                let v = self.r.at(row, col + 1);
                self.r.set(row, col, v);
            }
        }
        let q_new = q - 1;
        for jcol in pos..q_new {
            let a = self.r.at(jcol, jcol);
            let b = self.r.at(jcol + 1, jcol);
            let (c, s, h) = givens(a, b);
            if s == 0.0 {
                continue;
            }
            self.r.set(jcol, jcol, h);
            self.r.set(jcol + 1, jcol, 0.0);
            for col in jcol + 1..q_new {
                let x = self.r.at(jcol, col);
                let y = self.r.at(jcol + 1, col);
                self.r.set(jcol, col, c * x + s * y);
                self.r.set(jcol + 1, col, -s * x + c * y);
            }
            for row in 0..self.n {
                let x = self.j.at(row, jcol);
                let y = self.j.at(row, jcol + 1);
                self.j.set(row, jcol, c * x + s * y);
                self.j.set(row, jcol + 1, -s * x + c * y);
            }
        }
        // Clear the now-unused last column.
        for row in 0..self.n {
            self.r.set(row, q_new, 0.0);
        }
    }
}

/// Solve the QP. Rows of `a_eq` / `a_in` are constraint normals.
pub fn solve_qp(
    b_mat: &Mat,
    g: &[f64],
    a_eq: &Mat,
    b_eq: &[f64],
    a_in: &Mat,
    b_in: &[f64],
) -> Result<QpSolution, QpError> {
    let n = g.len();
    let meq = a_eq.rows();
    let min = a_in.rows();
    let l = cholesky(b_mat).ok_or(QpError::NotPosDef)?;

    // J = L^{-T}: solve L^T J = I column by column.
    let mut j = Mat::zeros(n, n);
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = crate::linalg::backward_solve(&l, &e);
        for row in 0..n {
            j.set(row, col, x[row]);
        }
    }

    let mut ws = Workspace {
        n,
        j,
        r: Mat::zeros(n, n),
        r_norm: 1.0,
        active: Vec::new(),
        u: Vec::new(),
    };

    // Unconstrained minimizer.
    let mut x = chol_solve(&l, g);
    for v in x.iter_mut() {
        *v = -*v;
    }

    let scale = 1.0 + crate::linalg::norm_inf(g);
    // Feasibility tolerances scale with the constraint rows, never with the
    // objective gradient.
    let row_tol = |row: &[f64], b: f64| 1e-10 * (1.0 + b.abs() + crate::linalg::norm_inf(row));
    let mut iterations = 0;
    let cap = 20 * (n + meq + min) + 50;

    // Activate equalities unconditionally.
    for i in 0..meq {
        let np = a_eq.row(i).to_vec();
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(QpError::IterationLimit);
            }
            let mut d = ws.project(&np);
            let z = ws.null_step(&d);
            let s_i = dot(&np, &x) - b_eq[i];
            let ztnp = dot(&z, &np);
            // The normal is dependent on the active set when its null-space
            // component vanishes relative to its full projection.
            let dd = dot(&d, &d);
            if ztnp.abs() <= 1e-13 * dd.max(1e-300) {
                if s_i.abs() <= 1e-8 * (1.0 + b_eq[i].abs()) {
                    break; // redundant but consistent equality
                }
                return Err(QpError::Infeasible);
            }
            let t = -s_i / ztnp;
            let r = ws.dual_step(&d);
            for (k, rk) in r.iter().enumerate() {
                ws.u[k] -= t * rk;
            }
            crate::linalg::axpy(&mut x, t, &z);
            if !ws.add_constraint(&mut d) {
                return Err(QpError::Infeasible);
            }
            ws.active.push(i);
            ws.u.push(t);
            if std::env::var_os("RDMPC_QP_CHECK").is_some() {
                let mut worst = 0.0_f64;
                for &cidx in &ws.active {
                    let npv = a_eq.row(cidx);
                    for col in ws.q()..n {
                        let mut s = 0.0;
                        for row in 0..n {
                            s += ws.j.at(row, col) * npv[row];
                        }
                        worst = worst.max(s.abs());
                    }
                }
                eprintln!(
                    "qp eq add {i}: q {} t {t:.3e} ztnp {ztnp:.3e} N'J2 {worst:.3e}",
                    ws.q()
                );
            }
            break;
        }
    }

    if std::env::var_os("RDMPC_QP_CHECK").is_some() {
        // Null-space invariant: active normals must be orthogonal to the
        // trailing columns of J.
        let mut worst = 0.0_f64;
        for &cidx in &ws.active {
            let np = a_eq.row(cidx);
            for col in ws.q()..n {
                let mut s = 0.0;
                for row in 0..n {
                    s += ws.j.at(row, col) * np[row];
                }
                worst = worst.max(s.abs());
            }
        }
        eprintln!("qp post-eq: N' J2 max {worst:.3e}, q {}", ws.q());
    }

    // Inequality loop.
    loop {
        iterations += 1;
        if iterations > cap {
            return Err(QpError::IterationLimit);
        }
        // Most violated inactive inequality, lowest index on ties.
        let mut ip = None;
        let mut worst = 0.0_f64;
        for i in 0..min {
            let idx = meq + i;
            if ws.active.contains(&idx) {
                continue;
            }
            let row = a_in.row(i);
            let s = b_in[i] - dot(row, &x);
            if s < -row_tol(row, b_in[i]) && s < worst {
                worst = s;
                ip = Some(i);
            }
        }
        let Some(ip) = ip else { break };
        // Internal normals are >=-form: a x <= b becomes -a x >= -b.
        let np: Vec<f64> = a_in.row(ip).iter().map(|v| -v).collect();
        let bi = -b_in[ip];
        // Maximize over the dual for this constraint (u_plus is its
        // multiplier-in-progress).
        let mut u_plus = 0.0;
        let mut s_ip = dot(&np, &x) - bi;
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(QpError::IterationLimit);
            }
            let mut d = ws.project(&np);
            let z = ws.null_step(&d);
            let r = ws.dual_step(&d);

            // Partial step: first active inequality whose multiplier hits 0.
            let mut t1 = f64::INFINITY;
            let mut drop_pos = None;
            for (pos, &cidx) in ws.active.iter().enumerate() {
                if cidx < meq {
                    continue;
                }
                if r[pos] > 1e-14 {
                    let cand = ws.u[pos] / r[pos];
                    if cand < t1 {
                        t1 = cand;
                        drop_pos = Some(pos);
                    }
                }
            }

            let ztnp = dot(&z, &np);
            let dd = dot(&d, &d);
            let t2 = if ztnp > 1e-13 * dd.max(1e-300) {
                -s_ip / ztnp
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                if std::env::var_os("RDMPC_QP_TRACE").is_some() {
                    eprintln!(
                        "qp: infeasible at ineq {ip}: s_ip {s_ip:.3e}, ztnp {ztnp:.3e}, q {}, active {:?}, r {:?}, u {:?}",
                        ws.q(),
                        ws.active,
                        r,
                        ws.u
                    );
                }
                return Err(QpError::Infeasible);
            }

            if t2.is_infinite() {
                // Dual-only step.
                for (pos, rk) in r.iter().enumerate() {
                    ws.u[pos] -= t * rk;
                }
                u_plus += t;
                ws.delete_constraint(drop_pos.expect("finite t1"));
                continue;
            }

            crate::linalg::axpy(&mut x, t, &z);
            for (pos, rk) in r.iter().enumerate() {
                ws.u[pos] -= t * rk;
            }
            u_plus += t;
            s_ip = dot(&np, &x) - bi;
            // Exploding multipliers mean the active set has degenerated
            // numerically; bail out and let the caller recondition.
            if ws.u.iter().any(|v| v.abs() > 1e13 * scale) || u_plus.abs() > 1e13 * scale {
                return Err(QpError::IterationLimit);
            }
            if std::env::var_os("RDMPC_QP_CHECK").is_some() {
                let mut worst = 0.0_f64;
                let mut worst_c = 0;
                for (pos, &cidx) in ws.active.iter().enumerate() {
                    let resid = if cidx < meq {
                        (dot(a_eq.row(cidx), &x) - b_eq[cidx]).abs()
                    } else {
                        (dot(a_in.row(cidx - meq), &x) - b_in[cidx - meq]).abs()
                    };
                    if resid > worst {
                        worst = resid;
                        worst_c = pos;
                    }
                }
                if worst > 1e-8 {
                    eprintln!(
                        "qp invariant: active residual {worst:.3e} at pos {worst_c} (cidx {}), q {}, after adding ineq {ip}",
                        ws.active[worst_c],
                        ws.q()
                    );
                }
            }

            if (t - t2).abs() <= 1e-14 * (1.0 + t2.abs()) {
                if !ws.add_constraint(&mut d) {
                    return Err(QpError::IterationLimit);
                }
                ws.active.push(meq + ip);
                ws.u.push(u_plus);
                break;
            }
            ws.delete_constraint(drop_pos.expect("partial step has a blocker"));
        }
    }

    // Multiplier signs for the Lagrangian grad(f) + A_eq' lambda + A_in' mu:
    // the internal >=-form normals flip both conventions.
    let mut lambda_eq = vec![0.0; meq];
    let mut mu_in = vec![0.0; min];
    for (pos, &cidx) in ws.active.iter().enumerate() {
        if cidx < meq {
            lambda_eq[cidx] = -ws.u[pos];
        } else {
            mu_in[cidx - meq] = ws.u[pos].max(0.0);
        }
    }
    Ok(QpSolution {
        d: x,
        lambda_eq,
        mu_in,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_inf;

    fn empty(n: usize) -> Mat {
        Mat::zeros(0, n)
    }

    #[test]
    fn unconstrained_quadratic() {
        let b = Mat::identity(2);
        let sol = solve_qp(&b, &[-2.0, 4.0], &empty(2), &[], &empty(2), &[]).unwrap();
        assert!(norm_inf(&crate::linalg::sub(&sol.d, &[2.0, -4.0])) < 1e-12);
    }

    #[test]
    fn active_bound() {
        // min v^2 s.t. v >= 1, i.e. -v <= -1.
        let b = Mat::from_rows(&[vec![2.0]]);
        let a_in = Mat::from_rows(&[vec![-1.0]]);
        let sol = solve_qp(&b, &[0.0], &empty(1), &[], &a_in, &[-1.0]).unwrap();
        assert!((sol.d[0] - 1.0).abs() < 1e-10);
        assert!(sol.mu_in[0] > 0.0);
    }

    #[test]
    fn projection_onto_halfspace() {
        // min ||v - (3,4)||^2 s.t. v1 + v2 <= 5 -> (2,3).
        let b = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let g = [-6.0, -8.0];
        let a_in = Mat::from_rows(&[vec![1.0, 1.0]]);
        let sol = solve_qp(&b, &g, &empty(2), &[], &a_in, &[5.0]).unwrap();
        assert!((sol.d[0] - 2.0).abs() < 1e-10);
        assert!((sol.d[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn equality_and_inequality() {
        // min ||v||^2 s.t. v1 + v2 = 2, v1 <= 0.5 -> (0.5, 1.5).
        let b = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let a_eq = Mat::from_rows(&[vec![1.0, 1.0]]);
        let a_in = Mat::from_rows(&[vec![1.0, 0.0]]);
        let sol = solve_qp(&b, &[0.0, 0.0], &a_eq, &[2.0], &a_in, &[0.5]).unwrap();
        assert!((sol.d[0] - 0.5).abs() < 1e-10);
        assert!((sol.d[1] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn inconsistent_equalities() {
        // v = 0 and v = 1 cannot both hold.
        let b = Mat::from_rows(&[vec![1.0]]);
        let a_eq = Mat::from_rows(&[vec![1.0], vec![1.0]]);
        let err = solve_qp(&b, &[0.0], &a_eq, &[0.0, 1.0], &empty(1), &[]).unwrap_err();
        assert_eq!(err, QpError::Infeasible);
    }

    #[test]
    fn inconsistent_inequalities() {
        // v <= 0 and -v <= -1.
        let b = Mat::from_rows(&[vec![1.0]]);
        let a_in = Mat::from_rows(&[vec![1.0], vec![-1.0]]);
        let err = solve_qp(&b, &[0.0], &empty(1), &[], &a_in, &[0.0, -1.0]).unwrap_err();
        assert_eq!(err, QpError::Infeasible);
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        // Deterministic pseudo-random box QPs; verify feasibility and
        // stationarity of every solution.
        let mut state = 0x9e3779b97f4a7c15_u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _case in 0..100 {
            let n = 2 + (next() * 4.0) as usize;
            // SPD B = M M^T + I.
            let mut b = Mat::identity(n);
            let m: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| next() * 2.0 - 1.0).collect())
                .collect();
            for i in 0..n {
                for jj in 0..n {
                    let mut s = if i == jj { 1.0 } else { 0.0 };
                    for k in 0..n {
                        s += m[i][k] * m[jj][k];
                    }
                    b.set(i, jj, s);
                }
            }
            let g: Vec<f64> = (0..n).map(|_| next() * 4.0 - 2.0).collect();
            // Box -1 <= d <= 1 as inequality rows.
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for i in 0..n {
                let mut up = vec![0.0; n];
                up[i] = 1.0;
                rows.push(up.clone());
                rhs.push(1.0);
                let mut lo = vec![0.0; n];
                lo[i] = -1.0;
                rows.push(lo);
                rhs.push(1.0);
            }
            let a_in = Mat::from_rows(&rows);
            let sol = solve_qp(&b, &g, &Mat::zeros(0, n), &[], &a_in, &rhs).unwrap();
            // Feasibility.
            for (i, row) in rows.iter().enumerate() {
                assert!(dot(row, &sol.d) <= rhs[i] + 1e-8);
            }
            // Stationarity: B d + g + A^T mu = 0.
            let mut resid = b.matvec(&sol.d);
            for i in 0..n {
                resid[i] += g[i];
            }
            for (i, row) in rows.iter().enumerate() {
                for k in 0..n {
                    resid[k] += row[k] * sol.mu_in[i];
                }
            }
            assert!(norm_inf(&resid) < 1e-7, "KKT residual {}", norm_inf(&resid));
        }
    }
}
