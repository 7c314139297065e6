//! Central finite differences for gradients and Jacobians.

use thiserror::Error;

use crate::linalg::Mat;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("derivative evaluation produced a non-finite value at coordinate {coord}")]
pub struct DerivativeFailure {
    pub coord: usize,
}

/// Per-coordinate step: `h * max(1, |v_i|)`.
#[inline]
fn step(h: f64, v: f64) -> f64 {
    h * v.abs().max(1.0)
}

/// Central-difference Jacobian `J[i][j] ~ d f_i / d v_j`.
pub fn fd_jacobian(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    v: &[f64],
    h: f64,
) -> Result<Mat, DerivativeFailure> {
    assert!(h > 0.0, "step must be positive");
    let n = v.len();
    let mut point = v.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut rows = 0;
    for j in 0..n {
        let hj = step(h, v[j]);
        point[j] = v[j] + hj;
        let fp = f(&point);
        point[j] = v[j] - hj;
        let fm = f(&point);
        point[j] = v[j];
        if fp.iter().chain(fm.iter()).any(|x| !x.is_finite()) {
            return Err(DerivativeFailure { coord: j });
        }
        rows = fp.len();
        cols.push(
            fp.iter()
                .zip(&fm)
                .map(|(p, m)| (p - m) / (2.0 * hj))
                .collect(),
        );
    }
    let mut jac = Mat::zeros(rows, n);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..rows {
            jac.set(i, j, col[i]);
        }
    }
    Ok(jac)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(
    f: &dyn Fn(&[f64]) -> f64,
    v: &[f64],
    h: f64,
) -> Result<Vec<f64>, DerivativeFailure> {
    assert!(h > 0.0, "step must be positive");
    let n = v.len();
    let mut point = v.to_vec();
    let mut g = vec![0.0; n];
    for j in 0..n {
        let hj = step(h, v[j]);
        point[j] = v[j] + hj;
        let fp = f(&point);
        point[j] = v[j] - hj;
        let fm = f(&point);
        point[j] = v[j];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DerivativeFailure { coord: j });
        }
        g[j] = (fp - fm) / (2.0 * hj);
    }
    Ok(g)
}

pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let f = |v: &[f64]| vec![2.0 * v[0] - v[1], 0.5 * v[1]];
        let j = fd_jacobian(&f, &[0.3, -0.7], 1e-6).unwrap();
        assert!((j.at(0, 0) - 2.0).abs() < 1e-9);
        assert!((j.at(0, 1) + 1.0).abs() < 1e-9);
        assert!((j.at(1, 0)).abs() < 1e-9);
        assert!((j.at(1, 1) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn sine_matches_cosine() {
        let f = |v: &[f64]| vec![v[0].sin()];
        let j = fd_jacobian(&f, &[0.3], 1e-6).unwrap();
        assert!((j.at(0, 0) - 0.3_f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn quadratic_gradient() {
        let f = |v: &[f64]| v[0] * v[0];
        let g = fd_gradient(&f, &[2.0], 1e-6).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn non_finite_reports_failure() {
        let f = |v: &[f64]| vec![if v[0] > 0.5 { f64::NAN } else { v[0] }];
        assert!(fd_jacobian(&f, &[0.5], 1e-2).is_err());
    }
}
