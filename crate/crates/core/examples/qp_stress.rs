// scratch: stress the dual active-set QP against brute-force active-set
// enumeration on small random problems with equalities and inequalities.
use rdmpc::linalg::{cholesky, chol_solve, dot, Mat};

fn brute_force(b: &Mat, g: &[f64], a_eq: &Mat, b_eq: &[f64], a_in: &Mat, b_in: &[f64]) -> Option<Vec<f64>> {
    let n = g.len();
    let m = a_in.rows();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0..(1u32 << m) {
        // KKT solve with active set = equalities + masked inequalities.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for i in 0..a_eq.rows() {
            rows.push(a_eq.row(i).to_vec());
            rhs.push(b_eq[i]);
        }
        for i in 0..m {
            if mask & (1 << i) != 0 {
                rows.push(a_in.row(i).to_vec());
                rhs.push(b_in[i]);
            }
        }
        let k = rows.len();
        if k > n { continue; }
        // Solve [B A'; A 0][x; y] = [-g; rhs] via dense LU (naive Gauss).
        let dim = n + k;
        let mut m2 = vec![vec![0.0; dim + 1]; dim];
        for i in 0..n {
            for j in 0..n { m2[i][j] = b.at(i, j); }
            for (r, row) in rows.iter().enumerate() { m2[i][n + r] = row[i]; }
            m2[i][dim] = -g[i];
        }
        for (r, row) in rows.iter().enumerate() {
            for j in 0..n { m2[n + r][j] = row[j]; }
            m2[n + r][dim] = rhs[r];
        }
        // Gaussian elimination with partial pivoting.
        let mut ok = true;
        for col in 0..dim {
            let mut piv = col;
            for r in col + 1..dim {
                if m2[r][col].abs() > m2[piv][col].abs() { piv = r; }
            }
            if m2[piv][col].abs() < 1e-12 { ok = false; break; }
            m2.swap(col, piv);
            for r in 0..dim {
                if r != col && m2[r][col] != 0.0 {
                    let f = m2[r][col] / m2[col][col];
                    for c in col..=dim { m2[r][c] -= f * m2[col][c]; }
                }
            }
        }
        if !ok { continue; }
        let x: Vec<f64> = (0..n).map(|i| m2[i][dim] / m2[i][i]).collect();
        let y: Vec<f64> = (0..k).map(|r| m2[n + r][dim] / m2[n + r][n + r]).collect();
        // Check primal feasibility and multiplier signs on active ineqs.
        let mut feasible = true;
        for i in 0..a_eq.rows() {
            if (dot(a_eq.row(i), &x) - b_eq[i]).abs() > 1e-7 { feasible = false; }
        }
        for i in 0..m {
            let v = dot(a_in.row(i), &x) - b_in[i];
            if mask & (1 << i) != 0 {
                // active: multiplier for <= row must be >= 0 in our sign
                // convention: grad f + A_eq' l + A_in' mu = 0, mu >= 0.
                let mu = y[a_eq.rows() + (0..i).filter(|j| mask & (1 << j) != 0).count()];
                if mu < -1e-9 { feasible = false; }
            } else if v > 1e-9 {
                feasible = false;
            }
        }
        if feasible {
            let obj = 0.5 * dot(&x, &b.matvec(&x)) + dot(g, &x);
            if best.as_ref().map(|(o, _)| obj < o - 1e-12).unwrap_or(true) {
                best = Some((obj, x));
            }
        }
    }
    best.map(|(_, x)| x)
}

fn main() {
    use rdmpc::solver::test_hooks::solve_qp_public as solve_qp;
    let mut state = 0xdeadbeef_u64;
    let mut next = move || {
        state ^= state << 13; state ^= state >> 7; state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut failures = 0;
    for case in 0..3000 {
        let n = 2 + (next() * 3.0) as usize;
        let meq = (next() * 2.0) as usize;
        let min = 1 + (next() * 4.0) as usize;
        let mut b = Mat::identity(n);
        for i in 0..n { for j in 0..n {
            let base: f64 = if i == j { 1.0 } else { 0.0 };
            b.set(i, j, base);
        }}
        // SPD via M M' + I
        let mvals: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| next() * 2.0 - 1.0).collect()).collect();
        for i in 0..n { for j in 0..n {
            let mut s = if i == j { 0.5 } else { 0.0 };
            for k in 0..n { s += mvals[i][k] * mvals[j][k]; }
            b.set(i, j, s);
        }}
        let scale = if case % 3 == 0 { 1e5 } else { 1.0 };
        let g: Vec<f64> = (0..n).map(|_| (next() * 4.0 - 2.0) * scale).collect();
        let a_eq = Mat::from_rows(&(0..meq).map(|_| (0..n).map(|_| next() * 2.0 - 1.0).collect()).collect::<Vec<_>>());
        let b_eq: Vec<f64> = (0..meq).map(|_| next() - 0.5).collect();
        let a_in = Mat::from_rows(&(0..min).map(|_| (0..n).map(|_| next() * 2.0 - 1.0).collect()).collect::<Vec<_>>());
        let b_in: Vec<f64> = (0..min).map(|_| next() * 2.0).collect();

        let reference = brute_force(&b, &g, &a_eq, &b_eq, &a_in, &b_in);
        let ours = solve_qp(&b, &g, &a_eq, &b_eq, &a_in, &b_in);
        match (reference, ours) {
            (Some(xref), Ok(sol)) => {
                let oref = 0.5 * dot(&xref, &b.matvec(&xref)) + dot(&g, &xref);
                let ours_obj = 0.5 * dot(&sol.d, &b.matvec(&sol.d)) + dot(&g, &sol.d);
                let mut viol: f64 = 0.0;
                for i in 0..meq { viol = viol.max((dot(a_eq.row(i), &sol.d) - b_eq[i]).abs()); }
                for i in 0..min { viol = viol.max(dot(a_in.row(i), &sol.d) - b_in[i]); }
                if viol > 1e-8 * (1.0 + scale * 1e-4) || (ours_obj - oref).abs() > 1e-6 * (1.0 + oref.abs()) {
                    failures += 1;
                    println!("case {case}: ours obj {ours_obj} viol {viol:.2e} ref {oref} (n={n} meq={meq} min={min})");
                    if failures > 4 { return; }
                }
            }
            (Some(_), Err(e)) => {
                failures += 1;
                println!("case {case}: ours failed {e:?} but reference solvable (n={n} meq={meq} min={min} scale={scale})");
                if failures > 4 { return; }
            }
            (None, _) => {}
        }
    }
    println!("stress done, {failures} failures");
}
