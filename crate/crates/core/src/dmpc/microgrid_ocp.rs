//! Microgrid economics for the tree OCP.
//!
//! Two formulations of the piecewise-linear trade terms:
//!
//! * [`MicrogridStageCost`] smooths each kink with a narrow quadratic blend
//!   (C^1), which keeps the closed-loop OCP a plain smooth program in the
//!   input groups. Realized costs are always reported with the exact kinks.
//! * [`assemble_microgrid_split_ocp`] keeps the kinks exact via nonnegative
//!   import/export split variables tied to the simulated states by equality
//!   constraints (single-scenario trees; exercised by the deterministic MPC
//!   tests).

use super::ocp::{OcpOptions, StageCost};
use super::{DmpcError, ScenarioTree};
use crate::dynamics::SubsystemModel;
use crate::microgrid::{
    neg_part, pos_part, stage_cost_q, storage_power, MicrogridParams, PriceSchedule, IDX_PM,
    IDX_S, IDX_TR0,
};
use crate::solver::NlpProblem;

/// `c_pos * (v)_+ + c_neg * (v)_-`, optionally with a C^1 quadratic blend of
/// half-width `tau` around the kink.
pub fn pwl(v: f64, c_pos: f64, c_neg: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return c_pos * pos_part(v) + c_neg * neg_part(v);
    }
    if v >= tau {
        c_pos * v
    } else if v <= -tau {
        c_neg * v
    } else {
        c_neg * v + (c_pos - c_neg) * (v + tau) * (v + tau) / (4.0 * tau)
    }
}

/// Smoothed economic stage and terminal costs of one microgrid.
pub struct MicrogridStageCost {
    pub params: MicrogridParams,
    pub schedule: PriceSchedule,
    /// Offsets of the inbound transfers within the stacked neighbor vector.
    pub inbound_offsets: Vec<usize>,
    /// Kink half-width for the trade terms (kW). Zero disables smoothing.
    pub smoothing_kw: f64,
    /// Kink half-width for the terminal discharge hinge (SoC units).
    pub terminal_smoothing: f64,
}

impl MicrogridStageCost {
    pub fn new(params: MicrogridParams, schedule: PriceSchedule, inbound_offsets: Vec<usize>) -> Self {
        MicrogridStageCost {
            params,
            schedule,
            inbound_offsets,
            smoothing_kw: 0.05,
            terminal_smoothing: 1e-4,
        }
    }
}

impl StageCost for MicrogridStageCost {
    fn stage(&self, t_hours: f64, dt: f64, x_next: &[f64], _u: &[f64], z_n: &[f64]) -> f64 {
        let inbound: Vec<f64> = self.inbound_offsets.iter().map(|&o| z_n[o]).collect();
        let p_st = storage_power(x_next, &inbound, self.params.p_load);
        let q = stage_cost_q(x_next[1], &x_next[IDX_TR0..], p_st, &self.params.cost);
        let (c_im, c_ex) = self.schedule.price_at(t_hours);
        let mut l = pwl(x_next[IDX_PM], c_im, c_ex, self.smoothing_kw);
        for (j, &z) in inbound.iter().enumerate() {
            let flow_in = z - x_next[IDX_TR0 + j];
            l += pwl(
                flow_in,
                self.params.cost.c_flow_im,
                self.params.cost.c_flow_ex,
                self.smoothing_kw,
            );
        }
        dt * (q + l)
    }

    fn terminal(&self, x_first: &[f64], x_last: &[f64]) -> f64 {
        self.params.cost.c_dis
            * self.params.q_st
            * pwl(
                x_first[IDX_S] - x_last[IDX_S],
                1.0,
                0.0,
                self.terminal_smoothing,
            )
    }

    fn terminal_hinge(&self, x_first: &[f64], x_last: &[f64]) -> Option<(f64, f64)> {
        Some((
            self.params.cost.c_dis * self.params.q_st,
            x_first[IDX_S] - x_last[IDX_S],
        ))
    }
}

/// Variable layout of the split-form problem.
#[derive(Debug, Clone)]
pub struct SplitLayout {
    pub n_u_vars: usize,
    pub n_p: usize,
    pub n_nbr: usize,
    pub n_vars: usize,
}

impl SplitLayout {
    pub fn m_im(&self, l: usize) -> usize {
        self.n_u_vars + 2 * l
    }
    pub fn m_ex(&self, l: usize) -> usize {
        self.n_u_vars + 2 * l + 1
    }
    pub fn flow_im(&self, l: usize, j: usize) -> usize {
        self.n_u_vars + 2 * self.n_p + 2 * (l * self.n_nbr + j)
    }
    pub fn flow_ex(&self, l: usize, j: usize) -> usize {
        self.flow_im(l, j) + 1
    }
    pub fn hinge(&self) -> usize {
        self.n_vars - 1
    }
}

/// Exact-kink formulation over a deterministic (single-scenario) tree:
/// decision variables are the stage inputs plus nonnegative split variables
/// for main-grid trade, neighbor flows, and the terminal discharge hinge.
/// Split variables are tied to simulated states by equality constraints and
/// enter the objective linearly, so the kinks disappear from the program.
pub fn assemble_microgrid_split_ocp<'a>(
    tree: &'a ScenarioTree,
    model: &'a SubsystemModel,
    params: &'a MicrogridParams,
    schedule: &'a PriceSchedule,
    inbound_offsets: &'a [usize],
    opts: &OcpOptions,
) -> Result<(NlpProblem<'a>, SplitLayout), DmpcError> {
    if tree.n_scenarios() != 1 {
        return Err(DmpcError::AssemblyError(
            "split formulation covers deterministic (single-scenario) trees".into(),
        ));
    }
    let n_p = tree.n_p;
    let n_u = model.n_u;
    let n_nbr = model.n_z;
    let n_u_vars = tree.groups.len() * n_u;
    let n_vars = n_u_vars + 2 * n_p + 2 * n_p * n_nbr + 1;
    let layout = SplitLayout {
        n_u_vars,
        n_p,
        n_nbr,
        n_vars,
    };
    let dt = opts.dt;
    let t0 = tree.start_step as f64 * dt;
    let s_lo = model.x_lower[IDX_S] + opts.state_margin[IDX_S];
    let s_hi = model.x_upper[IDX_S] - opts.state_margin[IDX_S];

    let rollout = move |v: &[f64]| -> Vec<Vec<f64>> {
        let mut path = Vec::with_capacity(n_p + 1);
        path.push(tree.x0.clone());
        for l in 0..n_p {
            let g = tree.group_of[0][l];
            let u = &v[g * n_u..(g + 1) * n_u];
            let attack = tree.attack_at(0, l);
            let vin: Vec<f64> = u.iter().zip(attack).map(|(a, b)| a + b).collect();
            let x_next = model.predict_step(
                &path[l],
                &vin,
                tree.coupling_at(0, l),
                tree.w_at(0, l),
                dt,
            );
            path.push(x_next);
        }
        path
    };

    let lay_obj = layout.clone();
    let objective = move |v: &[f64]| -> f64 {
        let path = rollout(v);
        let mut total = 0.0;
        for l in 0..n_p {
            let x_next = &path[l + 1];
            let inbound: Vec<f64> = inbound_offsets
                .iter()
                .map(|&o| tree.coupling_at(0, l)[o])
                .collect();
            let p_st = storage_power(x_next, &inbound, params.p_load);
            let q = stage_cost_q(x_next[1], &x_next[IDX_TR0..], p_st, &params.cost);
            let (c_im, c_ex) = schedule.price_at(t0 + l as f64 * dt);
            let mut lin = c_im * v[lay_obj.m_im(l)] - c_ex * v[lay_obj.m_ex(l)];
            for j in 0..n_nbr {
                lin += params.cost.c_flow_im * v[lay_obj.flow_im(l, j)]
                    - params.cost.c_flow_ex * v[lay_obj.flow_ex(l, j)];
            }
            total += dt * (q + lin);
        }
        total + params.cost.c_dis * params.q_st * v[lay_obj.hinge()]
    };

    let lay_eq = layout.clone();
    let eq = move |v: &[f64]| -> Vec<f64> {
        let path = rollout(v);
        let mut c = Vec::with_capacity(n_p * (1 + n_nbr));
        for l in 0..n_p {
            let x_next = &path[l + 1];
            c.push(v[lay_eq.m_im(l)] - v[lay_eq.m_ex(l)] - x_next[IDX_PM]);
            for j in 0..n_nbr {
                let z_in = tree.coupling_at(0, l)[inbound_offsets[j]];
                let flow_in = z_in - x_next[IDX_TR0 + j];
                c.push(v[lay_eq.flow_im(l, j)] - v[lay_eq.flow_ex(l, j)] - flow_in);
            }
        }
        c
    };

    let lay_in = layout.clone();
    let ineq = move |v: &[f64]| -> Vec<f64> {
        let path = rollout(v);
        let mut g = Vec::with_capacity(2 * n_p + 1);
        for l in 0..n_p {
            let s = path[l + 1][IDX_S];
            g.push(s - s_hi);
            g.push(s_lo - s);
        }
        g.push(path[0][IDX_S] - path[n_p][IDX_S] - v[lay_in.hinge()]);
        g
    };

    let mut lower = Vec::with_capacity(n_vars);
    let mut upper = Vec::with_capacity(n_vars);
    for _ in 0..tree.groups.len() {
        lower.extend_from_slice(&model.u_lower);
        upper.extend_from_slice(&model.u_upper);
    }
    lower.resize(n_vars, 0.0);
    upper.resize(n_vars, f64::INFINITY);

    let nlp = NlpProblem {
        n_vars,
        objective: Box::new(objective),
        objective_grad: None,
        eq_constraints: Some(Box::new(eq)),
        eq_jacobian: None,
        ineq_constraints: Some(Box::new(ineq)),
        ineq_jacobian: None,
        lower,
        upper,
    };
    Ok((nlp, layout))
}
