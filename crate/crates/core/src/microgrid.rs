//! Nonlinear microgrid model: per-grid power states with first-order
//! actuation lags, battery state of charge with open-circuit voltage and
//! ohmic losses, a storage buffer that closes the power balance, and the
//! economic cost function (quadratic wear, piecewise-linear trade, terminal
//! discharge penalty).
//!
//! State layout per grid: `x = [s, p_g, p_m, p_tr_1, .., p_tr_n]` with one
//! transfer state per neighbor; inputs `u = [u_g, u_m, u_tr_1, .., u_tr_n]`.
//! Couplings are the own transfer states, `z = p_tr`; the neighbor vector
//! `z_{N}` consumed by the dynamics holds the inbound transfers `p_tr_{LI}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{SubsystemId, SubsystemModel};

pub const IDX_S: usize = 0;
pub const IDX_PG: usize = 1;
pub const IDX_PM: usize = 2;
pub const IDX_TR0: usize = 3;

pub const IDX_UG: usize = 0;
pub const IDX_UM: usize = 1;
pub const IDX_UTR0: usize = 2;

/// Guard below which the OCV logarithm is considered out of range.
pub const SOC_EPS: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicrogridError {
    #[error("state of charge {soc} below the evaluable range (>= {SOC_EPS})")]
    SocOutOfRange { soc: f64 },
    #[error("charging power {p_st} kW below the physical envelope of the battery quadratic")]
    InfeasibleChargePower { p_st: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid price schedule: {0}")]
    InvalidPriceSchedule(String),
}

/// Open-circuit-voltage shape parameters (volts / dimensionless exponents).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcvParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub log_exp: f64,
    pub exp_rate: f64,
}

impl OcvParams {
    /// Lithium-titanate cell shape used throughout the benchmark.
    pub fn lithium_titanate() -> Self {
        OcvParams {
            alpha: 2.23,
            beta: -0.001,
            gamma: -0.35,
            delta: 0.6851,
            log_exp: 3.0,
            exp_rate: 1.6,
        }
    }
}

/// Per-unit cost coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub c_g: f64,
    pub c_tr: f64,
    pub c_st: f64,
    pub c_dis: f64,
    pub c_flow_im: f64,
    pub c_flow_ex: f64,
}

/// Box bounds for one grid's states and inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub soc: (f64, f64),
    pub p_g: (f64, f64),
    pub p_m: (f64, f64),
    pub p_tr: (f64, f64),
    pub u_g: (f64, f64),
    pub u_m: (f64, f64),
    pub u_tr: (f64, f64),
}

impl Default for GridBounds {
    fn default() -> Self {
        // The tabulated SoC upper bound of 0.1 contradicts the initial values
        // and the stated maximum state of charge of 1.0; 1.0 is used.
        GridBounds {
            soc: (0.0, 1.0),
            p_g: (0.0, 1000.0),
            p_m: (-1000.0, 2000.0),
            p_tr: (-100.0, 100.0),
            u_g: (0.0, 1000.0),
            u_m: (-1000.0, 2000.0),
            u_tr: (-100.0, 100.0),
        }
    }
}

/// Model and cost parameters of one microgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridParams {
    /// Generation delay (hours).
    pub t_g: f64,
    /// Main-grid exchange delay (hours).
    pub t_m: f64,
    /// Transfer delay (hours).
    pub t_tr: f64,
    /// Battery capacity (kAh).
    pub q_st: f64,
    /// Ohmic loss coefficient of the battery quadratic, in kW per kA^2
    /// (numerically milliohms at cell level).
    pub r_st: f64,
    pub ocv: OcvParams,
    /// Constant aggregated load (kW, <= 0).
    pub p_load: f64,
    pub bounds: GridBounds,
    pub cost: CostParams,
}

impl MicrogridParams {
    pub fn validate(&self) -> Result<(), MicrogridError> {
        if self.t_g <= 0.0 || self.t_m <= 0.0 || self.t_tr <= 0.0 {
            return Err(MicrogridError::InvalidParameter(
                "delay time constants must be positive".into(),
            ));
        }
        if self.q_st <= 0.0 || self.r_st <= 0.0 {
            return Err(MicrogridError::InvalidParameter(
                "battery capacity and resistance must be positive".into(),
            ));
        }
        if self.p_load > 0.0 {
            return Err(MicrogridError::InvalidParameter(
                "loads consume power: p_load must be <= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Tabulated per-grid values of the three-microgrid benchmark.
pub const TABLE_Q_ST_KAH: [f64; 3] = [100.0, 200.0, 100.0];
pub const TABLE_R_ST_MOHM: [f64; 3] = [1.5, 2.0, 3.0];
pub const TABLE_C_G: [f64; 3] = [0.2, 3.0, 2.0];
pub const TABLE_SOC0: [f64; 3] = [0.9, 0.5, 0.6];

/// Scale from the tabulated cell-level milliohm value to the effective pack
/// coefficient used in the kW/kA battery quadratic. The tabulated cell
/// resistance paired with kA pack currents would cap charging near 1 kW and
/// dissipate half of a 10 kW discharge, which contradicts the multi-kW
/// storage flows of the benchmark; a pack built from ~1e3 parallel strings
/// realizes the same cell at this fraction of the resistance.
pub const PACK_RESISTANCE_SCALE: f64 = 1e-3;

/// Benchmark defaults for grid `idx` (0-based).
pub fn table_params(idx: usize) -> MicrogridParams {
    MicrogridParams {
        t_g: 0.1,
        t_m: 0.001,
        t_tr: 0.001,
        q_st: TABLE_Q_ST_KAH[idx],
        r_st: TABLE_R_ST_MOHM[idx] * PACK_RESISTANCE_SCALE,
        ocv: OcvParams::lithium_titanate(),
        p_load: -2.0,
        bounds: GridBounds::default(),
        cost: CostParams {
            c_g: TABLE_C_G[idx],
            c_tr: 4.0,
            c_st: 1.0,
            c_dis: 2000.0,
            c_flow_im: 4.0,
            c_flow_ex: 0.04,
        },
    }
}

// ---------------------------------------------------------------------------
// Battery
// ---------------------------------------------------------------------------

/// Open circuit voltage at state of charge `s`.
pub fn ocv(s: f64, p: &OcvParams) -> Result<f64, MicrogridError> {
    if s < SOC_EPS {
        return Err(MicrogridError::SocOutOfRange { soc: s });
    }
    Ok(ocv_unchecked(s, p))
}

#[inline]
fn ocv_unchecked(s: f64, p: &OcvParams) -> f64 {
    // The tabulated shape uses an integer log exponent; keep powf off the
    // hot path for it.
    let log_term = if p.log_exp == 3.0 {
        let l = -s.ln();
        l * l * l
    } else {
        (-s.ln()).powf(p.log_exp)
    };
    p.alpha + p.beta * log_term + p.gamma * s + p.delta * (p.exp_rate * (s - 1.0)).exp()
}

/// Battery current (kA) delivering terminal power `p_st` (kW, discharge > 0)
/// at state of charge `s`. Selects the quadratic root that is continuous in
/// `p_st` with `I(0) = 0`, so `sign(I) = sign(p_st)`.
pub fn battery_current(s: f64, p_st: f64, params: &MicrogridParams) -> Result<f64, MicrogridError> {
    let u = ocv(s, &params.ocv)?;
    let disc = u * u + 4.0 * params.r_st * p_st;
    if disc < 0.0 {
        return Err(MicrogridError::InfeasibleChargePower { p_st });
    }
    Ok((-u + disc.sqrt()) / (2.0 * params.r_st))
}

/// Rate of change of the state of charge (per hour): discharge lowers it.
pub fn soc_rate(s: f64, p_st: f64, params: &MicrogridParams) -> Result<f64, MicrogridError> {
    Ok(-battery_current(s, p_st, params)? / params.q_st)
}

/// Total-evaluation variant used inside integrators and predictive rollouts:
/// clamps the SoC into the evaluable range and saturates the quadratic at its
/// envelope instead of erroring, so exploratory iterates stay finite. Inside
/// the operating region it coincides with `soc_rate`.
#[inline]
pub fn soc_rate_guarded(s: f64, p_st: f64, params: &MicrogridParams) -> f64 {
    let s = s.max(SOC_EPS);
    let u = ocv_unchecked(s, &params.ocv);
    let disc = (u * u + 4.0 * params.r_st * p_st).max(0.0);
    let current = (-u + disc.sqrt()) / (2.0 * params.r_st);
    -current / params.q_st
}

// ---------------------------------------------------------------------------
// Power balance and dynamics
// ---------------------------------------------------------------------------

/// Storage power closing the balance; `z_inbound` holds the neighbor
/// transfers `p_tr_{LI}` in neighbor-list order.
pub fn storage_power(x: &[f64], z_inbound: &[f64], p_load: f64) -> f64 {
    let n = x.len() - IDX_TR0;
    debug_assert_eq!(z_inbound.len(), n);
    let mut p_st = -x[IDX_PG] - x[IDX_PM] - p_load;
    for j in 0..n {
        p_st -= z_inbound[j] - x[IDX_TR0 + j];
    }
    p_st
}

/// Continuous-time right-hand side of one microgrid.
pub fn microgrid_rhs(x: &[f64], u_plus_a: &[f64], z_inbound: &[f64], params: &MicrogridParams) -> Vec<f64> {
    let n = x.len() - IDX_TR0;
    let mut dx = vec![0.0; x.len()];
    dx[IDX_PG] = (u_plus_a[IDX_UG] - x[IDX_PG]) / params.t_g;
    dx[IDX_PM] = (u_plus_a[IDX_UM] - x[IDX_PM]) / params.t_m;
    for j in 0..n {
        dx[IDX_TR0 + j] = (u_plus_a[IDX_UTR0 + j] - x[IDX_TR0 + j]) / params.t_tr;
    }
    let p_st = storage_power(x, z_inbound, params.p_load);
    dx[IDX_S] = soc_rate_guarded(x[IDX_S], p_st, params);
    dx
}

// ---------------------------------------------------------------------------
// Costs
// ---------------------------------------------------------------------------

#[inline]
pub fn pos_part(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
pub fn neg_part(v: f64) -> f64 {
    if v < 0.0 {
        v
    } else {
        0.0
    }
}

/// Quadratic wear cost of generation, transfers and storage use.
pub fn stage_cost_q(p_g: f64, p_tr: &[f64], p_st: f64, cost: &CostParams) -> f64 {
    let mut q = cost.c_g * p_g * p_g + cost.c_st * p_st * p_st;
    for &p in p_tr {
        q += cost.c_tr * p * p;
    }
    q
}

/// Piecewise-linear trade cost. `p_flow_in` holds the net inflow from each
/// neighbor (`p_tr_{LI} - p_tr_{IL}`); positive inflow is an import charged
/// at `c_flow_im`, negative an export credited at `c_flow_ex`. Main-grid
/// import/export is priced by the time-varying `(c_m_im, c_m_ex)` pair.
pub fn trade_cost_l(p_flow_in: &[f64], p_m: f64, prices: (f64, f64), cost: &CostParams) -> f64 {
    let (c_m_im, c_m_ex) = prices;
    let mut l = c_m_ex * neg_part(p_m) + c_m_im * pos_part(p_m);
    for &f in p_flow_in {
        l += cost.c_flow_ex * neg_part(f) + cost.c_flow_im * pos_part(f);
    }
    l
}

/// Terminal battery degradation cost over a window from `s_0` to `s_t`.
pub fn terminal_cost_m(s_0: f64, s_t: f64, params: &MicrogridParams) -> f64 {
    params.cost.c_dis * pos_part(s_0 - s_t) * params.q_st
}

// ---------------------------------------------------------------------------
// Prices
// ---------------------------------------------------------------------------

/// Piecewise-constant daily import/export prices keyed on time of day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSchedule {
    /// (start_h, end_h, value) bands covering [0, 24).
    pub import: Vec<(f64, f64, f64)>,
    pub export: Vec<(f64, f64, f64)>,
}

impl PriceSchedule {
    /// The benchmark's fictitious German-market-style schedule.
    pub fn benchmark() -> Self {
        PriceSchedule {
            import: vec![
                (0.0, 6.0, 100.0),
                (6.0, 9.0, 200.0),
                (9.0, 15.0, 150.0),
                (15.0, 20.0, 275.0),
                (20.0, 22.0, 200.0),
                (22.0, 24.0, 150.0),
            ],
            export: vec![
                (0.0, 6.0, 0.0),
                (6.0, 9.0, 10.0),
                (9.0, 15.0, 0.0),
                (15.0, 20.0, 15.0),
                (20.0, 22.0, 10.0),
                (22.0, 24.0, 0.0),
            ],
        }
    }

    /// Bands must cover [0, 24) without gaps or overlaps, and the import
    /// price must dominate the export price at all times (this is what makes
    /// the import/export split exact).
    pub fn validate(&self) -> Result<(), MicrogridError> {
        for (name, bands) in [("import", &self.import), ("export", &self.export)] {
            let mut sorted = bands.clone();
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut t = 0.0;
            for (s, e, _) in &sorted {
                if (*s - t).abs() > 1e-9 {
                    return Err(MicrogridError::InvalidPriceSchedule(format!(
                        "{name} bands leave a gap or overlap at {t} h"
                    )));
                }
                if *e <= *s {
                    return Err(MicrogridError::InvalidPriceSchedule(format!(
                        "{name} band ({s},{e}) is empty"
                    )));
                }
                t = *e;
            }
            if (t - 24.0).abs() > 1e-9 {
                return Err(MicrogridError::InvalidPriceSchedule(format!(
                    "{name} bands must cover up to 24 h, end at {t}"
                )));
            }
        }
        let mut t = 0.0;
        while t < 24.0 {
            let (im, ex) = self.price_at(t);
            if im < ex {
                return Err(MicrogridError::InvalidPriceSchedule(format!(
                    "import price {im} below export price {ex} at {t} h"
                )));
            }
            t += 0.25;
        }
        Ok(())
    }

    /// `(C_m_im, C_m_ex)` at time `t` hours (folded into the day).
    pub fn price_at(&self, t: f64) -> (f64, f64) {
        let tau = t.rem_euclid(24.0);
        let find = |bands: &[(f64, f64, f64)]| {
            bands
                .iter()
                .find(|(s, e, _)| tau >= *s && tau < *e)
                .map(|(_, _, v)| *v)
                .unwrap_or(0.0)
        };
        (find(&self.import), find(&self.export))
    }
}

// ---------------------------------------------------------------------------
// Subsystem model construction
// ---------------------------------------------------------------------------

/// Neighbor structure of the whole system (index = grid, entry = its
/// neighbor ids in stacking order).
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub neighbor_lists: Vec<Vec<usize>>,
}

impl Topology {
    pub fn fully_connected(n: usize) -> Self {
        Topology {
            neighbor_lists: (0..n)
                .map(|i| (0..n).filter(|j| *j != i).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), MicrogridError> {
        for (i, nbrs) in self.neighbor_lists.iter().enumerate() {
            for &l in nbrs {
                if l >= self.neighbor_lists.len() || l == i {
                    return Err(MicrogridError::InvalidParameter(format!(
                        "grid {i} lists invalid neighbor {l}"
                    )));
                }
                if !self.neighbor_lists[l].contains(&i) {
                    return Err(MicrogridError::InvalidParameter(format!(
                        "neighbor relation {i}->{l} is not symmetric"
                    )));
                }
            }
        }
        Ok(())
    }

    /// For grid `idx`: offsets of the inbound transfer components within the
    /// stacked neighbor-coupling vector (one per neighbor, in list order).
    pub fn inbound_offsets(&self, idx: usize) -> Vec<usize> {
        let nbrs = &self.neighbor_lists[idx];
        let mut offsets = Vec::with_capacity(nbrs.len());
        let mut base = 0;
        for &l in nbrs {
            let inner = self.neighbor_lists[l]
                .iter()
                .position(|&m| m == idx)
                .expect("validated topology");
            offsets.push(base + inner);
            base += self.neighbor_lists[l].len();
        }
        offsets
    }
}

/// Substep count keeping fixed-step RK4 stable and accurate on the stiffest
/// lag (`t_m = t_tr = 0.001 h`) over a `dt`-hour control interval.
pub fn rk4_substeps(dt_h: f64, t_min: f64) -> usize {
    ((dt_h / (1.9 * t_min)).ceil() as usize).max(8)
}

fn extract_inbound(z_n: &[f64], offsets: &[usize]) -> Vec<f64> {
    offsets.iter().map(|&o| z_n[o]).collect()
}

/// Smooth floor at zero with a quadratic blend on `|v| <= tau`.
#[inline]
fn smooth_max0(v: f64, tau: f64) -> f64 {
    if v >= tau {
        v
    } else if v <= -tau {
        0.0
    } else {
        (v + tau) * (v + tau) / (4.0 * tau)
    }
}

/// Build the `SubsystemModel` of grid `idx`, including the cheap one-step
/// prediction map used by the scenario-tree controller.
pub fn subsystem_model(idx: SubsystemId, params: &MicrogridParams, topo: &Topology, dt_h: f64) -> SubsystemModel {
    let neighbors = topo.neighbor_lists[idx].clone();
    let n_nbr = neighbors.len();
    let n_x = IDX_TR0 + n_nbr;
    let n_u = IDX_UTR0 + n_nbr;
    let neighbor_nz: Vec<usize> = neighbors.iter().map(|&l| topo.neighbor_lists[l].len()).collect();
    let offsets = topo.inbound_offsets(idx);
    let n_sub = rk4_substeps(dt_h, params.t_m.min(params.t_tr));

    let p_rhs = params.clone();
    let off_rhs = offsets.clone();
    let rhs = Box::new(move |x: &[f64], v: &[f64], z_n: &[f64], _w: &[f64]| {
        let inbound = extract_inbound(z_n, &off_rhs);
        microgrid_rhs(x, v, &inbound, &p_rhs)
    });

    let coupling_fn = Box::new(move |x: &[f64]| x[IDX_TR0..].to_vec());
    // Partially observable output: SoC, generation and main-grid exchange;
    // the transfer states are not measured by identification.
    let output_fn = Box::new(move |x: &[f64]| vec![x[IDX_S], x[IDX_PG], x[IDX_PM]]);

    let predict = build_predict_fn(params.clone(), offsets.clone(), n_nbr, dt_h);
    let predict_jac = build_predict_jac_fn(params.clone(), offsets, n_nbr, dt_h);

    let b = &params.bounds;
    let mut x_lower = vec![b.soc.0, b.p_g.0, b.p_m.0];
    let mut x_upper = vec![b.soc.1, b.p_g.1, b.p_m.1];
    let mut u_lower = vec![b.u_g.0, b.u_m.0];
    let mut u_upper = vec![b.u_g.1, b.u_m.1];
    for _ in 0..n_nbr {
        x_lower.push(b.p_tr.0);
        x_upper.push(b.p_tr.1);
        u_lower.push(b.u_tr.0);
        u_upper.push(b.u_tr.1);
    }

    SubsystemModel {
        id: idx,
        n_x,
        n_u,
        n_a: n_u,
        n_y: 3,
        n_z: n_nbr,
        n_w: 0,
        n_g: 0,
        neighbors,
        neighbor_nz,
        rhs,
        coupling_fn,
        output_fn,
        constraint_fn: None,
        x_lower,
        x_upper,
        u_lower,
        u_upper,
        n_sub,
        predict_fn: Some(predict),
        predict_jac_fn: Some(predict_jac),
    }
}

const PREDICT_SUBSTEPS: usize = 8;
/// Half-width of the smooth generator floor (kW).
const GEN_FLOOR_TAU: f64 = 1e-2;

/// Precomputed exponential tables of the prediction map for one control
/// interval.
struct PredictTables {
    params: MicrogridParams,
    offsets: Vec<usize>,
    n_nbr: usize,
    dt_h: f64,
    h: f64,
    decay_g: Vec<f64>,
    decay_m: Vec<f64>,
    decay_tr: Vec<f64>,
    e_g: f64,
    e_m: f64,
    e_tr: f64,
}

impl PredictTables {
    fn new(params: MicrogridParams, offsets: Vec<usize>, n_nbr: usize, dt_h: f64) -> Self {
        let h = dt_h / PREDICT_SUBSTEPS as f64;
        let n_samples = 2 * PREDICT_SUBSTEPS + 1;
        let mut decay_g = Vec::with_capacity(n_samples);
        let mut decay_m = Vec::with_capacity(n_samples);
        let mut decay_tr = Vec::with_capacity(n_samples);
        for q in 0..n_samples {
            let tau = q as f64 * h / 2.0;
            decay_g.push((-tau / params.t_g).exp());
            decay_m.push((-tau / params.t_m).exp());
            decay_tr.push((-tau / params.t_tr).exp());
        }
        PredictTables {
            e_g: (-dt_h / params.t_g).exp(),
            e_m: (-dt_h / params.t_m).exp(),
            e_tr: (-dt_h / params.t_tr).exp(),
            params,
            offsets,
            n_nbr,
            dt_h,
            h,
            decay_g,
            decay_m,
            decay_tr,
        }
    }

    /// SoC drift and its partial derivatives at (s, p_st): value, d/ds,
    /// d/dp. Derivatives are zeroed where the guards saturate, matching the
    /// guarded value exactly.
    fn soc_rate_jac(&self, s: f64, p_st: f64) -> (f64, f64, f64) {
        let p = &self.params;
        let clamped = s < SOC_EPS;
        let s_eff = s.max(SOC_EPS);
        let u = ocv_unchecked(s_eff, &p.ocv);
        let disc = u * u + 4.0 * p.r_st * p_st;
        let inv_q = 1.0 / p.q_st;
        if disc <= 0.0 {
            // Saturated envelope: current frozen at -U / 2R.
            let du = if clamped { 0.0 } else { ocv_slope(s_eff, &p.ocv) };
            let di_ds = -du / (2.0 * p.r_st);
            return (u / (2.0 * p.r_st) * inv_q, -di_ds * inv_q, 0.0);
        }
        let sq = disc.sqrt();
        let current = (-u + sq) / (2.0 * p.r_st);
        let du = if clamped { 0.0 } else { ocv_slope(s_eff, &p.ocv) };
        let di_ds = du * (-1.0 + u / sq) / (2.0 * p.r_st);
        let di_dp = 1.0 / sq;
        (-current * inv_q, -di_ds * inv_q, -di_dp * inv_q)
    }

    /// Primal map; `grad` additionally fills the SoC-row gradient w.r.t.
    /// theta = (x, v) when provided.
    fn step(&self, x: &[f64], v: &[f64], z_n: &[f64], grad: Option<&mut [f64]>) -> Vec<f64> {
        let n_nbr = self.n_nbr;
        let n_x = IDX_TR0 + n_nbr;
        let n_u = IDX_UTR0 + n_nbr;
        let n_samples = 2 * PREDICT_SUBSTEPS + 1;
        let v_g = smooth_max0(v[IDX_UG], GEN_FLOOR_TAU);
        let v_m = v[IDX_UM];
        let p_g0 = x[IDX_PG];
        let p_m0 = x[IDX_PM];
        let mut z_sum = 0.0;
        for &o in &self.offsets {
            z_sum += z_n[o];
        }

        let mut p_st = [0.0_f64; 2 * PREDICT_SUBSTEPS + 1];
        for q in 0..n_samples {
            let p_g = v_g + (p_g0 - v_g) * self.decay_g[q];
            let p_m = v_m + (p_m0 - v_m) * self.decay_m[q];
            let mut tr_sum = 0.0;
            for j in 0..n_nbr {
                let vt = v[IDX_UTR0 + j];
                tr_sum += vt + (x[IDX_TR0 + j] - vt) * self.decay_tr[q];
            }
            p_st[q] = -p_g - p_m - self.params.p_load - z_sum + tr_sum;
        }

        let h = self.h;
        let mut s = x[IDX_S];
        match grad {
            None => {
                for j in 0..PREDICT_SUBSTEPS {
                    let (pa, pb, pc) = (p_st[2 * j], p_st[2 * j + 1], p_st[2 * j + 2]);
                    let k1 = soc_rate_guarded(s, pa, &self.params);
                    let k2 = soc_rate_guarded(s + 0.5 * h * k1, pb, &self.params);
                    let k3 = soc_rate_guarded(s + 0.5 * h * k2, pb, &self.params);
                    let k4 = soc_rate_guarded(s + h * k3, pc, &self.params);
                    s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
            }
            Some(grad) => {
                // theta layout: [x (n_x), v (n_u)]; dP[q] rows are affine
                // coefficients of the sampled storage power.
                let nt = n_x + n_u;
                debug_assert_eq!(grad.len(), nt);
                let sigma_g = smooth_max0_slope(v[IDX_UG], GEN_FLOOR_TAU);
                let mut ds = vec![0.0; nt];
                ds[IDX_S] = 1.0;
                let dp_of = |q: usize, out: &mut [f64]| {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    out[IDX_PG] = -self.decay_g[q];
                    out[IDX_PM] = -self.decay_m[q];
                    out[n_x + IDX_UG] = -(1.0 - self.decay_g[q]) * sigma_g;
                    out[n_x + IDX_UM] = -(1.0 - self.decay_m[q]);
                    for j in 0..n_nbr {
                        out[IDX_TR0 + j] = self.decay_tr[q];
                        out[n_x + IDX_UTR0 + j] = 1.0 - self.decay_tr[q];
                    }
                };
                let mut dpa = vec![0.0; nt];
                let mut dpb = vec![0.0; nt];
                let mut dpc = vec![0.0; nt];
                let mut dk = vec![vec![0.0; nt]; 4];
                for j in 0..PREDICT_SUBSTEPS {
                    let (pa, pb, pc) = (p_st[2 * j], p_st[2 * j + 1], p_st[2 * j + 2]);
                    dp_of(2 * j, &mut dpa);
                    dp_of(2 * j + 1, &mut dpb);
                    dp_of(2 * j + 2, &mut dpc);

                    let (k1, f1s, f1p) = self.soc_rate_jac(s, pa);
                    let s2 = s + 0.5 * h * k1;
                    let (k2, f2s, f2p) = self.soc_rate_jac(s2, pb);
                    let s3 = s + 0.5 * h * k2;
                    let (k3, f3s, f3p) = self.soc_rate_jac(s3, pb);
                    let s4 = s + h * k3;
                    let (k4, f4s, f4p) = self.soc_rate_jac(s4, pc);

                    for t in 0..nt {
                        dk[0][t] = f1s * ds[t] + f1p * dpa[t];
                    }
                    for t in 0..nt {
                        dk[1][t] = f2s * (ds[t] + 0.5 * h * dk[0][t]) + f2p * dpb[t];
                    }
                    for t in 0..nt {
                        dk[2][t] = f3s * (ds[t] + 0.5 * h * dk[1][t]) + f3p * dpb[t];
                    }
                    for t in 0..nt {
                        dk[3][t] = f4s * (ds[t] + h * dk[2][t]) + f4p * dpc[t];
                    }
                    for t in 0..nt {
                        ds[t] += h / 6.0 * (dk[0][t] + 2.0 * dk[1][t] + 2.0 * dk[2][t] + dk[3][t]);
                    }
                    s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
                grad.copy_from_slice(&ds);
            }
        }

        let mut x_next = vec![0.0; n_x];
        x_next[IDX_S] = s;
        x_next[IDX_PG] = v_g + (p_g0 - v_g) * self.e_g;
        x_next[IDX_PM] = v_m + (p_m0 - v_m) * self.e_m;
        for j in 0..n_nbr {
            let vt = v[IDX_UTR0 + j];
            x_next[IDX_TR0 + j] = vt + (x[IDX_TR0 + j] - vt) * self.e_tr;
        }
        x_next
    }
}

#[inline]
fn smooth_max0_slope(v: f64, tau: f64) -> f64 {
    if v >= tau {
        1.0
    } else if v <= -tau {
        0.0
    } else {
        (v + tau) / (2.0 * tau)
    }
}

/// Slope of the open-circuit voltage in the state of charge.
fn ocv_slope(s: f64, p: &OcvParams) -> f64 {
    let log_term = if p.log_exp == 3.0 {
        let l = -s.ln();
        3.0 * l * l
    } else {
        p.log_exp * (-s.ln()).powf(p.log_exp - 1.0)
    };
    p.beta * log_term * (-1.0 / s) + p.gamma + p.delta * p.exp_rate * (p.exp_rate * (s - 1.0)).exp()
}

/// Exact-exponential prediction map: the lag states relax analytically and
/// the SoC is integrated by scalar RK4 along the exact power trajectories.
fn build_predict_fn(
    params: MicrogridParams,
    offsets: Vec<usize>,
    n_nbr: usize,
    dt_h: f64,
) -> Box<crate::dynamics::PredictFn> {
    let tables = PredictTables::new(params, offsets, n_nbr, dt_h);
    Box::new(move |x: &[f64], v: &[f64], z_n: &[f64], _w: &[f64], dt: f64| {
        debug_assert!((dt - tables.dt_h).abs() < 1e-12, "prediction map built for fixed dt");
        tables.step(x, v, z_n, None)
    })
}

/// Prediction map with analytic Jacobians: the lag rows are exact
/// exponentials; the SoC row's gradient is propagated through the scalar RK4
/// chain with closed-form battery derivatives.
fn build_predict_jac_fn(
    params: MicrogridParams,
    offsets: Vec<usize>,
    n_nbr: usize,
    dt_h: f64,
) -> Box<crate::dynamics::PredictJacFn> {
    let tables = PredictTables::new(params, offsets, n_nbr, dt_h);
    Box::new(move |x: &[f64], v: &[f64], z_n: &[f64], _w: &[f64], dt: f64| {
        debug_assert!((dt - tables.dt_h).abs() < 1e-12, "prediction map built for fixed dt");
        let n_x = IDX_TR0 + tables.n_nbr;
        let n_u = IDX_UTR0 + tables.n_nbr;
        let mut soc_grad = vec![0.0; n_x + n_u];
        let x_next = tables.step(x, v, z_n, Some(&mut soc_grad));
        let mut fx = crate::linalg::Mat::zeros(n_x, n_x);
        let mut fu = crate::linalg::Mat::zeros(n_x, n_u);
        for t in 0..n_x {
            fx.set(IDX_S, t, soc_grad[t]);
        }
        for t in 0..n_u {
            fu.set(IDX_S, t, soc_grad[n_x + t]);
        }
        let sigma_g = smooth_max0_slope(v[IDX_UG], GEN_FLOOR_TAU);
        fx.set(IDX_PG, IDX_PG, tables.e_g);
        fu.set(IDX_PG, IDX_UG, (1.0 - tables.e_g) * sigma_g);
        fx.set(IDX_PM, IDX_PM, tables.e_m);
        fu.set(IDX_PM, IDX_UM, 1.0 - tables.e_m);
        for j in 0..tables.n_nbr {
            fx.set(IDX_TR0 + j, IDX_TR0 + j, tables.e_tr);
            fu.set(IDX_TR0 + j, IDX_UTR0 + j, 1.0 - tables.e_tr);
        }
        (x_next, fx, fu)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate_step;

    fn params1() -> MicrogridParams {
        table_params(0)
    }

    /// Parameters with the tabulated cell-level resistance, as the battery
    /// operation examples state them.
    fn cell_params() -> MicrogridParams {
        let mut p = table_params(0);
        p.r_st = 1.5;
        p
    }

    #[test]
    fn ocv_at_full_charge() {
        let v = ocv(1.0, &OcvParams::lithium_titanate()).unwrap();
        assert!((v - 2.5651).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn ocv_at_half_charge() {
        let v = ocv(0.5, &OcvParams::lithium_titanate()).unwrap();
        let expected = 2.23 - 0.001 * (0.5_f64.ln().abs()).powi(3) - 0.35 * 0.5
            + 0.6851 * (-0.8_f64).exp();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 2.3625).abs() < 1e-4, "got {v}");
    }

    #[test]
    fn ocv_rejects_zero_soc() {
        assert!(matches!(
            ocv(0.0, &OcvParams::lithium_titanate()),
            Err(MicrogridError::SocOutOfRange { .. })
        ));
    }

    #[test]
    fn ocv_rises_with_soc() {
        // Finite-difference sign check on a 100-point grid. The tabulated
        // shape rises with the state of charge overall and is strictly
        // increasing above the plateau; inside the plateau (s around 0.2)
        // it is flat to a few 1e-4 V, so only bound the dip there.
        let p = OcvParams::lithium_titanate();
        let mut prev = ocv(0.05, &p).unwrap();
        let mut max_dip = 0.0_f64;
        for i in 1..=100 {
            let s = 0.05 + 0.95 * i as f64 / 100.0;
            let v = ocv(s, &p).unwrap();
            if s > 0.35 {
                assert!(v > prev, "OCV not increasing at s = {s}");
            } else {
                max_dip = max_dip.max(prev - v);
            }
            prev = v;
        }
        assert!(max_dip < 5e-4, "plateau dip {max_dip} too deep");
        let net = ocv(1.0, &p).unwrap() - ocv(0.05, &p).unwrap();
        assert!(net > 0.2, "net rise {net}");
    }

    #[test]
    fn battery_current_zero_power() {
        assert_eq!(battery_current(0.5, 0.0, &cell_params()).unwrap(), 0.0);
    }

    #[test]
    fn battery_current_discharge_oracle() {
        // Quadratic-root oracle at s = 0.5, 10 kW discharge, R = 1.5.
        let p = cell_params();
        let u = ocv(0.5, &p.ocv).unwrap();
        let i = battery_current(0.5, 10.0, &p).unwrap();
        let oracle = (-u + (u * u + 4.0 * p.r_st * 10.0).sqrt()) / (2.0 * p.r_st);
        assert_eq!(i, oracle);
        assert!((i - 1.9119).abs() < 1e-4, "got {i}");
        assert!((u * i + p.r_st * i * i - 10.0).abs() < 1e-9);
    }

    #[test]
    fn battery_current_charging_residual() {
        // Charging within the quadratic's envelope: negative current and an
        // exact power residual.
        let p = cell_params();
        let i = battery_current(0.5, -0.5, &p).unwrap();
        assert!(i < 0.0);
        let u = ocv(0.5, &p.ocv).unwrap();
        assert!((u * i + p.r_st * i * i - (-0.5)).abs() < 1e-9);
    }

    #[test]
    fn battery_current_envelope() {
        // At cell-level resistance the quadratic cannot absorb 10 kW.
        assert!(matches!(
            battery_current(0.5, -10.0, &cell_params()),
            Err(MicrogridError::InfeasibleChargePower { .. })
        ));
        // At the effective pack coefficient it can.
        let i = battery_current(0.5, -10.0, &params1()).unwrap();
        assert!(i < 0.0);
    }

    #[test]
    fn soc_rate_examples() {
        let p = cell_params();
        assert_eq!(soc_rate(0.5, 0.0, &p).unwrap(), 0.0);
        let r = soc_rate(0.5, 10.0, &p).unwrap();
        assert!((r - (-0.019119)).abs() < 1e-6, "got {r}");
        assert!(soc_rate(0.5, -0.5, &p).unwrap() > 0.0);
    }

    #[test]
    fn storage_power_examples() {
        // All powers zero, 2 kW load served from storage.
        let x = [0.9, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(storage_power(&x, &[0.0, 0.0], -2.0), 2.0);
        // Balanced generation.
        let x = [0.9, 2.0, 0.0, 0.0, 0.0];
        assert_eq!(storage_power(&x, &[0.0, 0.0], -2.0), 0.0);
        // Export absorbs the surplus.
        let x = [0.9, 12.0, -10.0, 0.0, 0.0];
        assert_eq!(storage_power(&x, &[0.0, 0.0], -2.0), 0.0);
    }

    #[test]
    fn power_balance_holds_by_construction() {
        let x = [0.7, 5.0, -1.0, 0.5, -0.25];
        let z = [0.1, 0.3];
        let p_st = storage_power(&x, &z, -2.0);
        let residual = x[IDX_PG] + x[IDX_PM] + (-2.0) + (z[0] - x[3]) + (z[1] - x[4]) + p_st;
        assert!(residual.abs() < 1e-12);
    }

    #[test]
    fn rhs_fixed_point() {
        let p = params1();
        // p = u componentwise and p_st = 0 => derivative = 0.
        let x = [0.9, 2.0, 0.0, 0.0, 0.0];
        let u = [2.0, 0.0, 0.0, 0.0];
        let dx = microgrid_rhs(&x, &u, &[0.0, 0.0], &p);
        for d in dx {
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn attack_drives_generation() {
        let p = params1();
        let topo = Topology::fully_connected(3);
        let model = subsystem_model(0, &p, &topo, 0.25);
        let x0 = vec![0.9, 0.0, 0.0, 0.0, 0.0];
        // u_g = 0, a_g = 10 kW: generation heads to 10 kW.
        let v = vec![10.0, 0.0, 0.0, 0.0];
        let z_n = vec![0.0; 4];
        let x1 = integrate_step(&model, &x0, &v, &z_n, &[], 0.25).unwrap();
        let exact = 10.0 * (1.0 - (-2.5_f64).exp());
        assert!((x1[IDX_PG] - exact).abs() < 1e-3);
    }

    #[test]
    fn main_grid_tracks_within_one_step() {
        let p = params1();
        let topo = Topology::fully_connected(3);
        let model = subsystem_model(0, &p, &topo, 0.25);
        let x0 = vec![0.9, 0.0, 0.0, 0.0, 0.0];
        let v = vec![0.0, 5.0, 0.0, 0.0];
        let z_n = vec![0.0; 4];
        let x1 = integrate_step(&model, &x0, &v, &z_n, &[], 0.25).unwrap();
        assert!(((x1[IDX_PM] - 5.0) / 5.0).abs() < 1e-10);
    }

    #[test]
    fn stage_cost_examples() {
        let c = params1().cost;
        assert_eq!(stage_cost_q(0.0, &[0.0, 0.0], 0.0, &c), 0.0);
        assert_eq!(stage_cost_q(10.0, &[0.0, 0.0], 0.0, &c), 0.2 * 100.0);
        assert_eq!(stage_cost_q(0.0, &[], -3.0, &c), 9.0);
    }

    #[test]
    fn trade_cost_examples() {
        let c = params1().cost;
        let sched = PriceSchedule::benchmark();
        assert_eq!(trade_cost_l(&[], -10.0, sched.price_at(16.0), &c), 15.0 * -10.0);
        assert_eq!(trade_cost_l(&[], 10.0, sched.price_at(2.0), &c), 100.0 * 10.0);
        assert_eq!(trade_cost_l(&[0.0, 0.0], 0.0, sched.price_at(2.0), &c), 0.0);
    }

    #[test]
    fn flow_antisymmetry() {
        let p_tr_il = 1.5;
        let p_tr_li = 0.4;
        let flow_il = p_tr_il - p_tr_li;
        let flow_li = p_tr_li - p_tr_il;
        assert_eq!(flow_il, -flow_li);
    }

    #[test]
    fn terminal_cost_examples() {
        let p = params1();
        assert_eq!(terminal_cost_m(0.8, 0.9, &p), 0.0);
        assert_eq!(terminal_cost_m(0.9, 0.9, &p), 0.0);
        let mut p2 = p.clone();
        p2.cost.c_dis = 2000.0;
        p2.q_st = 100.0;
        assert!((terminal_cost_m(0.9, 0.8, &p2) - 20000.0).abs() < 1e-9);
    }

    #[test]
    fn price_schedule_examples() {
        let s = PriceSchedule::benchmark();
        s.validate().unwrap();
        assert_eq!(s.price_at(16.0), (275.0, 15.0));
        assert_eq!(s.price_at(2.0), (100.0, 0.0));
        assert_eq!(s.price_at(40.0), (275.0, 15.0));
    }

    #[test]
    fn price_schedule_rejects_import_below_export() {
        let mut s = PriceSchedule::benchmark();
        s.export[0].2 = 500.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn predict_map_matches_integration() {
        let p = params1();
        let topo = Topology::fully_connected(3);
        let model = subsystem_model(0, &p, &topo, 0.25);
        let x0 = vec![0.82, 3.0, -4.0, 0.5, -0.2];
        let v = vec![6.0, -2.0, 0.3, 0.1];
        let z_n = vec![0.2, -0.1, 0.05, 0.3];
        let rk4 = integrate_step(&model, &x0, &v, &z_n, &[], 0.25).unwrap();
        let fast = model.predict_step(&x0, &v, &z_n, &[], 0.25);
        for i in [IDX_PG, IDX_PM, IDX_TR0, IDX_TR0 + 1] {
            assert!((rk4[i] - fast[i]).abs() < 1e-9, "lag state {i}");
        }
        assert!((rk4[IDX_S] - fast[IDX_S]).abs() < 5e-5, "soc {} vs {}", rk4[IDX_S], fast[IDX_S]);
    }

    #[test]
    fn predict_jacobian_matches_finite_differences() {
        let p = params1();
        let topo = Topology::fully_connected(3);
        let model = subsystem_model(0, &p, &topo, 0.25);
        let x0 = vec![0.82, 3.0, -4.0, 0.5, -0.2];
        let v = vec![6.0, -2.0, 0.3, 0.1];
        let z_n = vec![0.2, -0.1, 0.05, 0.3];
        let jac = model.predict_jac_fn.as_ref().unwrap();
        let (x_next, fx, fu) = jac(&x0, &v, &z_n, &[], 0.25);
        let base = model.predict_step(&x0, &v, &z_n, &[], 0.25);
        for i in 0..5 {
            assert!((x_next[i] - base[i]).abs() < 1e-12);
        }
        let h = 1e-6;
        for col in 0..5 {
            let mut xp = x0.clone();
            xp[col] += h;
            let fp = model.predict_step(&xp, &v, &z_n, &[], 0.25);
            xp[col] = x0[col] - h;
            let fm = model.predict_step(&xp, &v, &z_n, &[], 0.25);
            for row in 0..5 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!(
                    (fx.at(row, col) - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                    "fx[{row}][{col}] analytic {} fd {fd}",
                    fx.at(row, col)
                );
            }
        }
        for col in 0..4 {
            let mut vp = v.clone();
            vp[col] += h;
            let fp = model.predict_step(&x0, &vp, &z_n, &[], 0.25);
            vp[col] = v[col] - h;
            let fm = model.predict_step(&x0, &vp, &z_n, &[], 0.25);
            for row in 0..5 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!(
                    (fu.at(row, col) - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                    "fu[{row}][{col}] analytic {} fd {fd}",
                    fu.at(row, col)
                );
            }
        }
    }

    #[test]
    fn topology_symmetry_enforced() {
        let topo = Topology {
            neighbor_lists: vec![vec![1], vec![]],
        };
        assert!(topo.validate().is_err());
        Topology::fully_connected(3).validate().unwrap();
    }
}
