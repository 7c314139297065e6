// scratch: replay a dumped QP through the dual active-set solver.
use rdmpc::linalg::Mat;
use rdmpc::solver::test_hooks::solve_qp_public as solve_qp;

fn main() {
    let text = std::fs::read_to_string("/tmp/qp_dump.json").unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rows = |key: &str| -> Vec<Vec<f64>> {
        v[key].as_array().unwrap().iter()
            .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
            .collect()
    };
    let nums = |key: &str| -> Vec<f64> {
        v[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
    };
    let b = Mat::from_rows(&rows("b"));
    let g = nums("g");
    let n = g.len();
    let a_eq_rows = rows("a_eq");
    let a_eq = if a_eq_rows.is_empty() { Mat::zeros(0, n) } else { Mat::from_rows(&a_eq_rows) };
    let b_eq = nums("b_eq");
    let a_in = Mat::from_rows(&rows("a_in"));
    let b_in = nums("b_in");
    match solve_qp(&b, &g, &a_eq, &b_eq, &a_in, &b_in) {
        Ok(sol) => {
            let mut viol: f64 = 0.0;
            for i in 0..a_eq.rows() {
                viol = viol.max((rdmpc::linalg::dot(a_eq.row(i), &sol.d) - b_eq[i]).abs());
            }
            for i in 0..a_in.rows() {
                viol = viol.max(rdmpc::linalg::dot(a_in.row(i), &sol.d) - b_in[i]);
            }
            println!("solved: |d|inf {} viol {viol:.3e} iters {}", rdmpc::linalg::norm_inf(&sol.d), sol.iterations);
        }
        Err(e) => println!("failed: {e:?}"),
    }
}
