// scratch: minimal equality-pair probe of the active-set factorization.
use rdmpc::linalg::{dot, Mat};
use rdmpc::solver::test_hooks::solve_qp_public as solve_qp;

fn main() {
    // min 1/2||x||^2 - c'x s.t. two coupled equalities; then check both hold.
    let b = Mat::identity(3);
    let g = [-1.0, 2.0, -0.5];
    let a_eq = Mat::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]);
    let b_eq = [1.0, -1.0];
    let a_in = Mat::zeros(0, 3);
    let sol = solve_qp(&b, &g, &a_eq, &b_eq, &a_in, &[]).unwrap();
    println!("x = {:?}", sol.d);
    for i in 0..2 {
        println!("eq {i} resid {:.3e}", dot(a_eq.row(i), &sol.d) - b_eq[i]);
    }
    // With an inequality that must go active after the equalities.
    let a_in2 = Mat::from_rows(&[vec![1.0, 0.0, 0.0]]);
    let sol2 = solve_qp(&b, &g, &a_eq, &b_eq, &a_in2, &[-2.0]).unwrap();
    println!("x2 = {:?}", sol2.d);
    for i in 0..2 {
        println!("eq {i} resid2 {:.3e}", dot(a_eq.row(i), &sol2.d) - b_eq[i]);
    }
    println!("ineq resid2 {:.3e}", dot(a_in2.row(0), &sol2.d) + 2.0);
}
