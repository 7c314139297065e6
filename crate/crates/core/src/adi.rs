//! Distributed attack detection and identification.
//!
//! Detection thresholds the infinity norm of coupling deviations against the
//! transmitted nominals. Identification solves a local sparse-recovery
//! problem per subsystem: minimize the l1 norm of a hypothetical attack
//! subject to the measured output being reproduced by the one-step output
//! map within a tolerance. Version 1 consumes the neighbors' transmitted
//! coupling deviations; version 2 instead consumes their numeric sensitivity
//! matrices and additionally estimates neighbor attacks and second-hop
//! coupling deviations.

use std::cell::RefCell;

use thiserror::Error;

use crate::dynamics::{chained_coupling, chained_output, DynamicsError, SubsystemId, SubsystemModel};
use crate::linalg::{norm2, norm_inf, Mat};
use crate::solver::{self, fd_jacobian, DerivativeFailure, L1Split, NlpProblem, SolveOptions, SolveStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdiError {
    #[error("identification infeasible for subsystem {subsystem} (residual tolerance {eps})")]
    IdentificationFailed { subsystem: SubsystemId, eps: f64 },
    #[error("sensitivity computation failed: {0}")]
    Derivative(#[from] DerivativeFailure),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Detection threshold and identification residual tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    /// Coupling-deviation threshold (strict inequality), in coupling units.
    pub tau_d: f64,
    /// Identification residual tolerance per subsystem.
    pub eps_i: f64,
}

impl DetectionConfig {
    pub fn new(tau_d: f64, eps_i: f64) -> Self {
        assert!(tau_d > 0.0, "detection threshold must be positive");
        assert!(eps_i >= 0.0, "residual tolerance must be nonnegative");
        DetectionConfig { tau_d, eps_i }
    }
}

impl Default for DetectionConfig {
    fn default() -> Self {
        // Far above integration error, far below the attack magnitudes of
        // interest.
        DetectionConfig {
            tau_d: 1e-2,
            eps_i: 1e-3,
        }
    }
}

/// True iff any deviation component strictly exceeds the threshold.
pub fn detect(deviation: &[f64], cfg: &DetectionConfig) -> bool {
    norm_inf(deviation) > cfg.tau_d
}

/// Identified suspicion about the local (and, for version 2, neighborhood)
/// attack situation.
#[derive(Debug, Clone)]
pub struct Suspicion {
    pub a_star: Vec<f64>,
    pub a_star_neighbors: Option<Vec<f64>>,
    pub dz_star_nn: Option<Vec<f64>>,
    pub residual_norm: f64,
    pub status: SolveStatus,
}

impl Suspicion {
    pub fn zeros(n_u: usize) -> Self {
        Suspicion {
            a_star: vec![0.0; n_u],
            a_star_neighbors: None,
            dz_star_nn: None,
            residual_norm: 0.0,
            status: SolveStatus::Converged,
        }
    }
}

fn residual_constraint(r2: f64, eps: f64) -> f64 {
    // Squared and normalized: equivalent feasible set, smooth at r = 0, and
    // scaled so the solver's feasibility tolerance maps onto a relative
    // overshoot of the residual norm.
    if eps > 0.0 {
        r2 / (eps * eps) - 1.0
    } else {
        r2
    }
}

/// Version-1 local identification: sparsest local attack explaining the
/// measured output, with neighbors at their transmitted actual couplings
/// (nominal plus deviation), zero parameter uncertainty.
pub fn identify_v1(
    model: &SubsystemModel,
    x_k: &[f64],
    u_k: &[f64],
    y_k1: &[f64],
    nominal_n: &[f64],
    deviation_n: &[f64],
    dt: f64,
    cfg: &DetectionConfig,
) -> Result<Suspicion, AdiError> {
    let z_actual: Vec<f64> = nominal_n
        .iter()
        .zip(deviation_n)
        .map(|(n, d)| n + d)
        .collect();
    let w = vec![0.0; model.n_w];
    let split = L1Split::new(model.n_u);
    let y_meas = y_k1.to_vec();

    let residual = {
        let z = z_actual.clone();
        let w = w.clone();
        move |a: &[f64]| -> Vec<f64> {
            let v: Vec<f64> = u_k.iter().zip(a).map(|(u, ai)| u + ai).collect();
            match chained_output(model, x_k, &v, &z, &w, dt) {
                Ok(eta) => y_meas.iter().zip(&eta).map(|(y, e)| y - e).collect(),
                Err(_) => vec![f64::NAN; y_meas.len()],
            }
        }
    };

    let eps = cfg.eps_i;
    let res = residual.clone();
    let constraint = move |v: &[f64]| -> Vec<f64> {
        let a = split.to_signed(v);
        let r = res(&a);
        vec![residual_constraint(r.iter().map(|x| x * x).sum(), eps)]
    };

    let (lower, upper) = split.bounds();
    let problem = NlpProblem {
        n_vars: split.dim(),
        objective: Box::new(move |v: &[f64]| split.objective(v)),
        objective_grad: Some(Box::new(move |_v: &[f64]| split.objective_grad())),
        eq_constraints: None,
        eq_jacobian: None,
        ineq_constraints: Some(Box::new(constraint)),
        ineq_jacobian: None,
        lower,
        upper,
    };

    let report = solver::solve(&problem, &vec![0.0; split.dim()], &SolveOptions::default());
    if report.status == SolveStatus::Infeasible {
        return Err(AdiError::IdentificationFailed {
            subsystem: model.id,
            eps,
        });
    }
    let a_star = split.to_signed(&report.solution);
    let r = residual(&a_star);
    Ok(Suspicion {
        a_star,
        a_star_neighbors: None,
        dz_star_nn: None,
        residual_norm: norm2(&r),
        status: report.status,
    })
}

/// Jacobian of the one-step output map with respect to the stacked neighbor
/// couplings, at the given local attack hypothesis and nominal couplings.
pub fn local_sensitivity(
    model: &SubsystemModel,
    x_k: &[f64],
    u_k: &[f64],
    a: &[f64],
    nominal_n: &[f64],
    dt: f64,
) -> Result<Mat, AdiError> {
    let v: Vec<f64> = u_k.iter().zip(a).map(|(u, ai)| u + ai).collect();
    let w = vec![0.0; model.n_w];
    let eta = move |z: &[f64]| -> Vec<f64> {
        chained_output(model, x_k, &v, z, &w, dt).unwrap_or_else(|_| vec![f64::NAN; model.n_y])
    };
    Ok(fd_jacobian(&eta, nominal_n, 1e-6)?)
}

/// The pair of sensitivity matrices one subsystem computes about itself and
/// transmits on request: Jacobians of its chained coupling map with respect
/// to its own attack input and to its neighbors' coupling coefficients, both
/// at the nominal point.
pub fn coupling_sensitivities(
    model: &SubsystemModel,
    x_k: &[f64],
    u_k: &[f64],
    nominal_n: &[f64],
    dt: f64,
) -> Result<(Mat, Mat), AdiError> {
    let w = vec![0.0; model.n_w];
    let zeta_of_a = {
        let w = w.clone();
        move |a: &[f64]| -> Vec<f64> {
            let v: Vec<f64> = u_k.iter().zip(a).map(|(u, ai)| u + ai).collect();
            chained_coupling(model, x_k, &v, nominal_n, &w, dt)
                .unwrap_or_else(|_| vec![f64::NAN; model.n_z])
        }
    };
    let s_a = fd_jacobian(&zeta_of_a, &vec![0.0; model.n_u], 1e-6)?;
    let v0 = u_k.to_vec();
    let zeta_of_z = move |z: &[f64]| -> Vec<f64> {
        chained_coupling(model, x_k, &v0, z, &w, dt).unwrap_or_else(|_| vec![f64::NAN; model.n_z])
    };
    let s_z = fd_jacobian(&zeta_of_z, nominal_n, 1e-6)?;
    Ok((s_a, s_z))
}

/// Sensitivity information received from one neighbor.
#[derive(Debug, Clone)]
pub struct NeighborSensitivityPart {
    pub id: SubsystemId,
    pub s_a: Mat,
    pub s_z: Mat,
    /// (owner, coordinate) of each `s_z` column (the neighbor's neighbors).
    pub z_cols: Vec<(SubsystemId, usize)>,
}

/// Stacked neighborhood sensitivities consumed by version-2 identification.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    /// Block-diagonal over neighbors: rows are stacked neighbor couplings,
    /// columns stacked neighbor attack channels.
    pub s_hat_a: Mat,
    /// Rows as above, columns the stacked second-hop coupling coordinates.
    pub s_hat_z: Mat,
    pub a_cols: Vec<(SubsystemId, usize)>,
    pub z_cols: Vec<(SubsystemId, SubsystemId, usize)>,
}

/// Combine per-neighbor sensitivity parts (in neighbor-list order) into the
/// stacked bundle.
pub fn neighbor_sensitivities(parts: &[NeighborSensitivityPart]) -> SensitivityBundle {
    let rows: usize = parts.iter().map(|p| p.s_a.rows()).sum();
    let a_total: usize = parts.iter().map(|p| p.s_a.cols()).sum();
    let z_total: usize = parts.iter().map(|p| p.s_z.cols()).sum();
    let mut s_hat_a = Mat::zeros(rows, a_total);
    let mut s_hat_z = Mat::zeros(rows, z_total);
    let mut a_cols = Vec::with_capacity(a_total);
    let mut z_cols = Vec::with_capacity(z_total);
    let (mut r0, mut a0, mut z0) = (0, 0, 0);
    for p in parts {
        for r in 0..p.s_a.rows() {
            for c in 0..p.s_a.cols() {
                s_hat_a.set(r0 + r, a0 + c, p.s_a.at(r, c));
            }
            for c in 0..p.s_z.cols() {
                s_hat_z.set(r0 + r, z0 + c, p.s_z.at(r, c));
            }
        }
        for c in 0..p.s_a.cols() {
            a_cols.push((p.id, c));
        }
        for &(owner, coord) in &p.z_cols {
            z_cols.push((p.id, owner, coord));
        }
        r0 += p.s_a.rows();
        a0 += p.s_a.cols();
        z0 += p.s_z.cols();
    }
    SensitivityBundle {
        s_hat_a,
        s_hat_z,
        a_cols,
        z_cols,
    }
}

/// Version-2 local identification: jointly sparsest local attack, neighbor
/// attacks, and second-hop coupling deviations explaining the measured
/// output through the first-order neighborhood model. The local output
/// sensitivity is re-differenced whenever the local attack hypothesis
/// changes (`freeze_sensitivity` pins it at zero instead).
#[allow(clippy::too_many_arguments)]
pub fn identify_v2(
    model: &SubsystemModel,
    x_k: &[f64],
    u_k: &[f64],
    y_k1: &[f64],
    nominal_n: &[f64],
    bundle: &SensitivityBundle,
    dt: f64,
    cfg: &DetectionConfig,
    freeze_sensitivity: bool,
) -> Result<Suspicion, AdiError> {
    let n_u = model.n_u;
    let n_an = bundle.a_cols.len();
    let n_znn = bundle.z_cols.len();
    let total = n_u + n_an + n_znn;
    let split = L1Split::new(total);
    let w = vec![0.0; model.n_w];
    let y_meas = y_k1.to_vec();

    let frozen = if freeze_sensitivity {
        Some(local_sensitivity(model, x_k, u_k, &vec![0.0; n_u], nominal_n, dt)?)
    } else {
        None
    };
    let cache: RefCell<Option<(Vec<f64>, Mat)>> = RefCell::new(None);

    let residual = move |vars: &[f64]| -> Vec<f64> {
        let a_i = &vars[..n_u];
        let a_n = &vars[n_u..n_u + n_an];
        let dz_nn = &vars[n_u + n_an..];
        let v: Vec<f64> = u_k.iter().zip(a_i).map(|(u, ai)| u + ai).collect();
        let eta = match chained_output(model, x_k, &v, nominal_n, &w, dt) {
            Ok(e) => e,
            Err(_) => return vec![f64::NAN; y_meas.len()],
        };
        let s_z = if let Some(f) = &frozen {
            f.clone()
        } else {
            let mut cached = cache.borrow_mut();
            let hit = cached
                .as_ref()
                .map(|(key, _)| key.as_slice() == a_i)
                .unwrap_or(false);
            if !hit {
                let fresh = match local_sensitivity(model, x_k, u_k, a_i, nominal_n, dt) {
                    Ok(m) => m,
                    Err(_) => return vec![f64::NAN; y_meas.len()],
                };
                *cached = Some((a_i.to_vec(), fresh));
            }
            cached.as_ref().unwrap().1.clone()
        };
        // Reconstructed first-hop deviation from the neighbors' first-order
        // model, mapped into the local output.
        let mut dz_n = bundle.s_hat_a.matvec(a_n);
        let dz_z = bundle.s_hat_z.matvec(dz_nn);
        for (a, b) in dz_n.iter_mut().zip(&dz_z) {
            *a += b;
        }
        let correction = s_z.matvec(&dz_n);
        y_meas
            .iter()
            .zip(eta.iter().zip(&correction))
            .map(|(y, (e, c))| y - e - c)
            .collect()
    };

    let eps = cfg.eps_i;
    let res_for_constraint = residual.clone();
    let constraint = move |v: &[f64]| -> Vec<f64> {
        let signed = split.to_signed(v);
        let r = res_for_constraint(&signed);
        vec![residual_constraint(r.iter().map(|x| x * x).sum(), eps)]
    };

    let (lower, upper) = split.bounds();
    let problem = NlpProblem {
        n_vars: split.dim(),
        objective: Box::new(move |v: &[f64]| split.objective(v)),
        objective_grad: Some(Box::new(move |_v: &[f64]| split.objective_grad())),
        eq_constraints: None,
        eq_jacobian: None,
        ineq_constraints: Some(Box::new(constraint)),
        ineq_jacobian: None,
        lower,
        upper,
    };
    let report = solver::solve(&problem, &vec![0.0; split.dim()], &SolveOptions::default());
    if report.status == SolveStatus::Infeasible {
        return Err(AdiError::IdentificationFailed {
            subsystem: model.id,
            eps,
        });
    }
    let signed = split.to_signed(&report.solution);
    let r = residual(&signed);
    Ok(Suspicion {
        a_star: signed[..n_u].to_vec(),
        a_star_neighbors: Some(signed[n_u..n_u + n_an].to_vec()),
        dz_star_nn: Some(signed[n_u + n_an..].to_vec()),
        residual_norm: norm2(&r),
        status: report.status,
    })
}

/// Per-subsystem measurements and exchanged data for one detection and
/// identification pass.
pub struct SubsystemSnapshot<'a> {
    pub model: &'a SubsystemModel,
    pub x_k: Vec<f64>,
    pub u_k: Vec<f64>,
    pub y_k1: Vec<f64>,
    pub nominal_n: Vec<f64>,
    pub deviation_n: Vec<f64>,
    /// Own coupling deviation used by detection.
    pub deviation_self: Vec<f64>,
    pub bundle: Option<SensitivityBundle>,
}

/// One full distributed detection-and-identification pass: detection over
/// all subsystems, then (on detection) every subsystem solves its local
/// problem of the selected version. Per-subsystem failures are recorded in
/// the suspicion's status, never fatal.
pub fn run_distributed_adi(
    snapshots: &[SubsystemSnapshot<'_>],
    version: u8,
    dt: f64,
    cfg: &DetectionConfig,
) -> (bool, Vec<Suspicion>) {
    let mut detected = false;
    for snap in snapshots {
        if detect(&snap.deviation_self, cfg) {
            detected = true;
            break;
        }
    }
    if !detected {
        return (
            false,
            snapshots
                .iter()
                .map(|s| Suspicion::zeros(s.model.n_u))
                .collect(),
        );
    }
    let suspicions = snapshots
        .iter()
        .map(|snap| {
            let result = if version == 1 {
                identify_v1(
                    snap.model,
                    &snap.x_k,
                    &snap.u_k,
                    &snap.y_k1,
                    &snap.nominal_n,
                    &snap.deviation_n,
                    dt,
                    cfg,
                )
            } else {
                match &snap.bundle {
                    Some(bundle) => identify_v2(
                        snap.model,
                        &snap.x_k,
                        &snap.u_k,
                        &snap.y_k1,
                        &snap.nominal_n,
                        bundle,
                        dt,
                        cfg,
                        false,
                    ),
                    None => Err(AdiError::IdentificationFailed {
                        subsystem: snap.model.id,
                        eps: cfg.eps_i,
                    }),
                }
            };
            result.unwrap_or_else(|_| {
                let mut s = Suspicion::zeros(snap.model.n_u);
                s.status = SolveStatus::Infeasible;
                s
            })
        })
        .collect();
    (true, suspicions)
}
