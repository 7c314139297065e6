//! Generic distributed discrete-time system abstraction.
//!
//! A plant is a set of subsystems coupled through coupling variables
//! `z_I = h_I(x_I)`. Each subsystem advances by integrating a continuous-time
//! right-hand side `f_I(x, u + a, z_N, w)` over one control interval while the
//! neighbor couplings are held at their exchanged coefficients (zero-order
//! hold for the default single-basis parameterization).

use thiserror::Error;

/// Subsystem identifier (index into the system's subsystem list).
pub type SubsystemId = usize;

pub type RhsFn = dyn Fn(&[f64], &[f64], &[f64], &[f64]) -> Vec<f64>;
pub type MapFn = dyn Fn(&[f64]) -> Vec<f64>;
pub type ConstraintFn = dyn Fn(&[f64], &[f64], &[f64], &[f64]) -> Vec<f64>;
/// Discrete one-step prediction override: (x, u_plus_a, z_n, w, dt) -> x_next.
pub type PredictFn = dyn Fn(&[f64], &[f64], &[f64], &[f64], f64) -> Vec<f64>;
/// Prediction override with analytic Jacobians:
/// (x, u_plus_a, z_n, w, dt) -> (x_next, d x_next/d x, d x_next/d u).
pub type PredictJacFn =
    dyn Fn(&[f64], &[f64], &[f64], &[f64], f64) -> (Vec<f64>, crate::linalg::Mat, crate::linalg::Mat);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("integration diverged in subsystem {subsystem}: non-finite state component")]
    IntegrationDiverged { subsystem: SubsystemId },
    #[error("missing neighbor data for subsystem {subsystem} (neighbor {neighbor})")]
    MissingNeighborData {
        subsystem: SubsystemId,
        neighbor: SubsystemId,
    },
    #[error("dimension mismatch in subsystem {subsystem}: {what}")]
    DimensionMismatch {
        subsystem: SubsystemId,
        what: &'static str,
    },
}

/// Callbacks and dimensions for one subsystem.
///
/// `rhs` is the continuous-time model; `coupling_fn` (`h_I`), `output_fn`
/// (`c_I`) and `constraint_fn` (`g_I`) act on states / step arguments. The
/// attack enters additively on the input, so `n_a == n_u` always.
pub struct SubsystemModel {
    pub id: SubsystemId,
    pub n_x: usize,
    pub n_u: usize,
    pub n_a: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub n_w: usize,
    pub n_g: usize,
    /// Neighbor ids in the order used for stacked neighbor-coupling vectors.
    pub neighbors: Vec<SubsystemId>,
    /// Coupling dimension of each neighbor, in `neighbors` order.
    pub neighbor_nz: Vec<usize>,
    pub rhs: Box<RhsFn>,
    pub coupling_fn: Box<MapFn>,
    pub output_fn: Box<MapFn>,
    pub constraint_fn: Option<Box<ConstraintFn>>,
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    /// RK4 substeps per control interval.
    pub n_sub: usize,
    /// Optional cheap one-step map used by predictive controllers in place of
    /// full RK4 integration. Plant simulation and identification never use it.
    pub predict_fn: Option<Box<PredictFn>>,
    /// Optional analytic Jacobian companion of `predict_fn`.
    pub predict_jac_fn: Option<Box<PredictJacFn>>,
}

impl SubsystemModel {
    /// Length of the stacked neighbor-coupling vector `z_{N_I}`.
    pub fn n_zn(&self) -> usize {
        self.neighbor_nz.iter().sum()
    }

    /// Offset of neighbor `pos` (position in the neighbor list) within the
    /// stacked neighbor-coupling vector.
    pub fn zn_offset(&self, pos: usize) -> usize {
        self.neighbor_nz[..pos].iter().sum()
    }

    /// Basic structural checks: attack dimension matches the input dimension
    /// and the callback output lengths agree with the declared dimensions.
    pub fn validate(&self, x: &[f64], u: &[f64], z_n: &[f64], w: &[f64]) -> Result<(), DynamicsError> {
        if self.n_a != self.n_u {
            return Err(DynamicsError::DimensionMismatch {
                subsystem: self.id,
                what: "n_a must equal n_u",
            });
        }
        if (self.coupling_fn)(x).len() != self.n_z {
            return Err(DynamicsError::DimensionMismatch {
                subsystem: self.id,
                what: "coupling_fn output length != n_z",
            });
        }
        if (self.output_fn)(x).len() != self.n_y {
            return Err(DynamicsError::DimensionMismatch {
                subsystem: self.id,
                what: "output_fn output length != n_y",
            });
        }
        if (self.rhs)(x, u, z_n, w).len() != self.n_x {
            return Err(DynamicsError::DimensionMismatch {
                subsystem: self.id,
                what: "rhs output length != n_x",
            });
        }
        Ok(())
    }

    /// One-step prediction map: the cheap override when present, otherwise
    /// full RK4 integration. Used by scenario-tree controllers; falls back to
    /// zeros-on-error only through the caller.
    pub fn predict_step(&self, x: &[f64], u_plus_a: &[f64], z_n: &[f64], w: &[f64], dt: f64) -> Vec<f64> {
        match &self.predict_fn {
            Some(f) => f(x, u_plus_a, z_n, w, dt),
            None => integrate_step(self, x, u_plus_a, z_n, w, dt).unwrap_or_else(|_| vec![f64::NAN; self.n_x]),
        }
    }
}

/// Parameterization of couplings over a sampling interval as a linear
/// combination of `n_hat` basis functions. The default is a single
/// piecewise-constant basis (zero-order hold), which is all the closed loop
/// exercises; richer bases plug in through `basis`.
pub struct CouplingParameterization {
    pub n_hat: usize,
    /// (j, t, t_k, t_k1) -> basis weight of basis function j at time t.
    pub basis: Box<dyn Fn(usize, f64, f64, f64) -> f64>,
}

impl CouplingParameterization {
    pub fn piecewise_constant() -> Self {
        CouplingParameterization {
            n_hat: 1,
            basis: Box::new(|_, _, _, _| 1.0),
        }
    }

    /// z(t) from the coefficient matrix (n_z x n_hat, column-major by basis).
    pub fn evaluate(&self, coeffs: &[f64], n_z: usize, t: f64, t_k: f64, t_k1: f64) -> Vec<f64> {
        let mut z = vec![0.0; n_z];
        for j in 0..self.n_hat {
            let w = (self.basis)(j + 1, t, t_k, t_k1);
            for i in 0..n_z {
                z[i] += coeffs[j * n_z + i] * w;
            }
        }
        z
    }
}

impl Default for CouplingParameterization {
    fn default() -> Self {
        Self::piecewise_constant()
    }
}

/// Nominal and measured coupling coefficients of one subsystem at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub subsystem: SubsystemId,
    pub stage: usize,
    pub nominal: Vec<f64>,
    pub measured: Vec<f64>,
}

impl CouplingBlock {
    /// Deviation from nominal, elementwise `measured - nominal`.
    pub fn deviation(&self) -> Vec<f64> {
        self.measured
            .iter()
            .zip(&self.nominal)
            .map(|(m, n)| m - n)
            .collect()
    }
}

/// Advance one subsystem over a control interval of `dt` hours with fixed
/// inputs, neighbor couplings and parameters (zero-order hold), using
/// classical fourth-order Runge-Kutta with `model.n_sub` substeps.
pub fn integrate_step(
    model: &SubsystemModel,
    x: &[f64],
    u_plus_a: &[f64],
    z_n: &[f64],
    w: &[f64],
    dt: f64,
) -> Result<Vec<f64>, DynamicsError> {
    assert!(dt > 0.0, "dt must be positive");
    let n = model.n_x;
    let h = dt / model.n_sub as f64;
    let mut state = x.to_vec();
    let mut k2_in = vec![0.0; n];
    for _ in 0..model.n_sub {
        let k1 = (model.rhs)(&state, u_plus_a, z_n, w);
        for i in 0..n {
            k2_in[i] = state[i] + 0.5 * h * k1[i];
        }
        let k2 = (model.rhs)(&k2_in, u_plus_a, z_n, w);
        for i in 0..n {
            k2_in[i] = state[i] + 0.5 * h * k2[i];
        }
        let k3 = (model.rhs)(&k2_in, u_plus_a, z_n, w);
        for i in 0..n {
            k2_in[i] = state[i] + h * k3[i];
        }
        let k4 = (model.rhs)(&k2_in, u_plus_a, z_n, w);
        for i in 0..n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::IntegrationDiverged { subsystem: model.id });
        }
    }
    Ok(state)
}

/// Propagate the nominal coupling one step: `h_I` applied to the integrated
/// state with zero attack and zero parameter uncertainty, neighbors held at
/// their transmitted nominal coefficients.
pub fn nominal_coupling_step(
    model: &SubsystemModel,
    x: &[f64],
    u: &[f64],
    neighbor_nominals: &[Option<&[f64]>],
    dt: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let mut z_n = Vec::with_capacity(model.n_zn());
    for (pos, maybe) in neighbor_nominals.iter().enumerate() {
        match maybe {
            Some(v) => z_n.extend_from_slice(v),
            None => {
                return Err(DynamicsError::MissingNeighborData {
                    subsystem: model.id,
                    neighbor: model.neighbors[pos],
                })
            }
        }
    }
    let w = vec![0.0; model.n_w];
    let x_next = integrate_step(model, x, u, &z_n, &w, dt)?;
    Ok((model.coupling_fn)(&x_next))
}

/// Chained output `eta_I = c_I ∘ f_I`: the measured output one step ahead.
pub fn chained_output(
    model: &SubsystemModel,
    x: &[f64],
    u_plus_a: &[f64],
    z_n: &[f64],
    w: &[f64],
    dt: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let x_next = integrate_step(model, x, u_plus_a, z_n, w, dt)?;
    Ok((model.output_fn)(&x_next))
}

/// Chained coupling `zeta_I = h_I ∘ f_I`: next-step coupling values.
pub fn chained_coupling(
    model: &SubsystemModel,
    x: &[f64],
    u_plus_a: &[f64],
    z_n: &[f64],
    w: &[f64],
    dt: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let x_next = integrate_step(model, x, u_plus_a, z_n, w, dt)?;
    Ok((model.coupling_fn)(&x_next))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar first-order lag: dx/dt = (v - x) / tau, z = x, y = x.
    fn lag_model(tau: f64, n_sub: usize) -> SubsystemModel {
        SubsystemModel {
            id: 0,
            n_x: 1,
            n_u: 1,
            n_a: 1,
            n_y: 1,
            n_z: 1,
            n_w: 0,
            n_g: 0,
            neighbors: vec![],
            neighbor_nz: vec![],
            rhs: Box::new(move |x, v, _z, _w| vec![(v[0] - x[0]) / tau]),
            coupling_fn: Box::new(|x| x.to_vec()),
            output_fn: Box::new(|x| x.to_vec()),
            constraint_fn: None,
            x_lower: vec![f64::NEG_INFINITY],
            x_upper: vec![f64::INFINITY],
            u_lower: vec![f64::NEG_INFINITY],
            u_upper: vec![f64::INFINITY],
            n_sub,
            predict_fn: None,
            predict_jac_fn: None,
        }
    }

    #[test]
    fn steady_state_is_fixed_point() {
        let m = lag_model(0.1, 4);
        let x1 = integrate_step(&m, &[5.0], &[5.0], &[], &[], 0.25).unwrap();
        assert_eq!(x1, vec![5.0]);
    }

    #[test]
    fn first_order_response_matches_closed_form() {
        // Generator-style lag with tau = 0.1 h driven by 10 kW from rest.
        // At the substep count the microgrid uses, RK4 should be well within
        // 1e-3 of the exact 10 (1 - e^{-2.5}).
        let m = lag_model(0.1, 100);
        let x1 = integrate_step(&m, &[0.0], &[10.0], &[], &[], 0.25).unwrap();
        let exact = 10.0 * (1.0 - (-2.5_f64).exp());
        assert!((x1[0] - exact).abs() < 1e-3, "err {}", (x1[0] - exact).abs());
        assert!((exact - 9.179).abs() < 1e-3);
    }

    #[test]
    fn rk4_order_check() {
        // Halving the step size shrinks the error vs the closed form by ~2^4.
        let exact = 10.0 * (1.0 - (-2.5_f64).exp());
        let err = |n_sub: usize| {
            let m = lag_model(0.1, n_sub);
            let x1 = integrate_step(&m, &[0.0], &[10.0], &[], &[], 0.25).unwrap();
            (x1[0] - exact).abs()
        };
        let ratio = err(16) / err(32);
        assert!(
            (12.0..=22.0).contains(&ratio),
            "expected ~16 for fourth order, got {ratio}"
        );
    }

    #[test]
    fn nan_rhs_reports_divergence() {
        let mut m = lag_model(0.1, 4);
        m.rhs = Box::new(|_, _, _, _| vec![f64::NAN]);
        let err = integrate_step(&m, &[0.0], &[10.0], &[], &[], 0.25).unwrap_err();
        assert_eq!(err, DynamicsError::IntegrationDiverged { subsystem: 0 });
    }

    #[test]
    fn nominal_step_ignores_attack_and_requires_neighbors() {
        // One-neighbor chain: rhs couples to the neighbor value, nominal step
        // must equal direct h(f(...)) composition.
        let mut m = lag_model(0.2, 8);
        m.neighbors = vec![1];
        m.neighbor_nz = vec![1];
        m.rhs = Box::new(move |x, v, z, _w| vec![(v[0] + 0.5 * z[0] - x[0]) / 0.2]);
        let zn = [2.0];
        let nominal = nominal_coupling_step(&m, &[1.0], &[3.0], &[Some(&zn[..])], 0.25).unwrap();
        let direct = chained_coupling(&m, &[1.0], &[3.0], &[2.0], &[], 0.25).unwrap();
        assert_eq!(nominal, direct);

        let missing = nominal_coupling_step(&m, &[1.0], &[3.0], &[None], 0.25).unwrap_err();
        assert_eq!(
            missing,
            DynamicsError::MissingNeighborData { subsystem: 0, neighbor: 1 }
        );
    }

    #[test]
    fn chained_output_composes() {
        let m = lag_model(0.1, 16);
        let y = chained_output(&m, &[0.0], &[10.0], &[], &[], 0.25).unwrap();
        let x1 = integrate_step(&m, &[0.0], &[10.0], &[], &[], 0.25).unwrap();
        assert_eq!(y, x1);
    }

    #[test]
    fn piecewise_constant_basis_is_one() {
        let p = CouplingParameterization::piecewise_constant();
        for t in [0.0, 0.1, 0.2499] {
            assert_eq!((p.basis)(1, t, 0.0, 0.25), 1.0);
        }
        let z = p.evaluate(&[3.5, -1.0], 2, 0.1, 0.0, 0.25);
        assert_eq!(z, vec![3.5, -1.0]);
    }

    #[test]
    fn coupling_block_deviation() {
        let b = CouplingBlock {
            subsystem: 2,
            stage: 7,
            nominal: vec![1.0, -2.0],
            measured: vec![1.5, -2.5],
        };
        assert_eq!(b.deviation(), vec![0.5, -0.5]);
    }
}
