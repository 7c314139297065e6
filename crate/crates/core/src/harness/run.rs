//! Closed-loop simulation of the three-microgrid benchmark.
//!
//! Per control step: (1) coupling deviations are posted, (2) every grid
//! builds its scenario tree from the identified attack statistics and the
//! neighbors' contracts, solves its tree OCP, derives and transmits a new
//! contract, (3) the plant advances globally with the true attack injected,
//! clamping the state of charge into [0, 1] and flagging violations, (4)
//! nominal couplings are propagated and exchanged, (5) every grid solves its
//! local identification problem and folds the suspicion into its attack
//! statistics. Nonrobust mode skips contracts, identification and
//! adaptation, predicting neighbors at their transmitted nominals.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;

use thiserror::Error;

use crate::adapt::{attack_scenarios, update_stats, AttackStats};
use crate::adi::{
    coupling_sensitivities, detect, identify_v1, identify_v2, neighbor_sensitivities,
    DetectionConfig, NeighborSensitivityPart, Suspicion,
};
use crate::dmpc::{
    assemble_ocp, build_tree, derive_contracts, solve_ocp, Contract, MicrogridStageCost,
    OcpOptions, OcpSolveOptions, TreeOptions,
};
use crate::dynamics::{integrate_step, nominal_coupling_step, DynamicsError, SubsystemModel};
use crate::exchange::{Bus, ExchangeError, Message, Payload, PayloadKind, SensitivityMsg};
use crate::microgrid::{
    stage_cost_q, storage_power, subsystem_model, terminal_cost_m, trade_cost_l, MicrogridParams,
    IDX_PM, IDX_S, IDX_TR0,
};
use crate::solver::SolveStatus;

use super::config::{
    AttackKind, AttackSpec, ConfigError, ControllerMode, ExperimentConfig, Tunables,
};
use super::rng::CounterRng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Dmpc(#[from] crate::dmpc::DmpcError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything recorded about one grid over one step.
#[derive(Debug, Clone)]
pub struct GridStepRecord {
    /// Post-clamp state at the end of the step.
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub attack_true: Vec<f64>,
    pub a_star: Vec<f64>,
    pub mu_g: f64,
    pub sigma_g: f64,
    pub detected: bool,
    pub stage_cost: f64,
    pub cumulative_cost: f64,
    pub violation: bool,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time_h: f64,
    pub grids: Vec<GridStepRecord>,
}

#[derive(Debug, Clone)]
pub struct GridSummary {
    pub grid: usize,
    pub total_cost: f64,
    pub violations: usize,
    pub detections: usize,
    pub final_mu_g: f64,
    pub final_sigma_g: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunEvents {
    pub controller_fallbacks: usize,
    pub identification_failures: usize,
    pub contract_widenings: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: Vec<GridSummary>,
    pub records: Vec<StepRecord>,
    pub events: RunEvents,
}

/// Attack vector injected at one step: constant magnitude, optionally with a
/// fresh Gaussian draw, truncated on the generator channel so the total
/// generator input stays nonnegative.
pub fn inject_attack(
    spec: &AttackSpec,
    channel: usize,
    _t: f64,
    rng: &mut CounterRng,
    u: &[f64],
) -> Vec<f64> {
    let mut a = vec![0.0; u.len()];
    match spec.kind {
        AttackKind::None => {}
        AttackKind::Constant => {
            a[channel] = spec.magnitude_kw;
        }
        AttackKind::ConstantPlusGaussian => {
            let mut v = spec.magnitude_kw + spec.stddev_kw * rng.next_gaussian();
            if channel == 0 {
                v = v.max(-u[channel]);
            }
            a[channel] = v;
        }
    }
    a
}

struct GridRuntime {
    model: SubsystemModel,
    params: MicrogridParams,
    cost: MicrogridStageCost,
    x: Vec<f64>,
    soc0: f64,
    stats: AttackStats,
    own_contract: Contract,
    neighbor_contracts: BTreeMap<usize, Contract>,
    /// Own nominal coupling coefficient for the current interval.
    nominal_self: Vec<f64>,
    /// Latest received neighbor nominal sequences (start step, stages).
    neighbor_nominals: BTreeMap<usize, (usize, Vec<Vec<f64>>)>,
    /// Planned input sequence from the last solve; stage 0 = current step.
    plan: Vec<Vec<f64>>,
    warm_multipliers: Option<Vec<f64>>,
    cumulative: f64,
    inbound_offsets: Vec<usize>,
}

impl GridRuntime {
    /// Neighbor nominal coefficient for interval `step` (clamped to the last
    /// transmitted stage).
    fn neighbor_nominal_at(&self, nbr: usize, step: usize) -> Vec<f64> {
        let (start, stages) = &self.neighbor_nominals[&nbr];
        let idx = step.saturating_sub(*start).min(stages.len() - 1);
        stages[idx].clone()
    }
}

fn round_contracts(step: usize) -> u64 {
    2 * step as u64
}

fn round_data(step: usize) -> u64 {
    2 * step as u64 + 1
}

/// Run the configured experiment; optionally write trace and summary CSVs.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<RunResult, HarnessError> {
    config.validate()?;
    let tun = Tunables::default();
    let n = config.n_grids();
    let dt = config.dt_h;
    let n_p = config.horizon_steps();
    let n_steps = config.n_steps();
    let topo = config.topology();
    let schedule = config.price_schedule();
    let det_cfg = DetectionConfig::new(config.tau_d_kw, config.eps_i);
    let robust = config.controller == ControllerMode::Robust;
    let mut rng = CounterRng::new(config.seed);
    let mut events = RunEvents::default();

    // Attack specs per grid with resolved channel indices.
    let mut attacks_by_grid: Vec<Vec<(AttackSpec, usize)>> = vec![Vec::new(); n];
    for spec in &config.attacks {
        let ch = config.channel_index(spec)?;
        attacks_by_grid[spec.grid].push((spec.clone(), ch));
    }

    let mut grids: Vec<GridRuntime> = (0..n)
        .map(|i| {
            let params = config.grid_params(i);
            let model = subsystem_model(i, &params, &topo, dt);
            let inbound_offsets = topo.inbound_offsets(i);
            let mut x = vec![0.0; model.n_x];
            x[IDX_S] = config.grids[i].soc0;
            let z0 = vec![0.0; model.n_z];
            let n_u = model.n_u;
            GridRuntime {
                cost: MicrogridStageCost {
                    params: params.clone(),
                    schedule: schedule.clone(),
                    inbound_offsets: inbound_offsets.clone(),
                    smoothing_kw: tun.smoothing_kw,
                    terminal_smoothing: 1e-4,
                },
                stats: AttackStats::new(n_u),
                own_contract: Contract::degenerate(i, 0, &z0, n_p + 1, dt),
                neighbor_contracts: BTreeMap::new(),
                nominal_self: z0,
                neighbor_nominals: BTreeMap::new(),
                plan: vec![vec![0.0; n_u]; n_p],
                warm_multipliers: None,
                cumulative: 0.0,
                soc0: config.grids[i].soc0,
                inbound_offsets,
                params,
                model,
                x,
            }
        })
        .collect();

    // Bootstrap exchange: initial degenerate contracts and steady-state
    // nominal sequences, as if posted before step 0.
    let mut bus = Bus::new(topo.neighbor_lists.clone());
    for i in 0..n {
        let contract = grids[i].own_contract.clone();
        let stages = vec![vec![0.0; grids[i].model.n_z]; n_p];
        for &nbr in &topo.neighbor_lists[i] {
            bus.post(Message {
                sender: i,
                receiver: nbr,
                round: round_contracts(0),
                payload: Payload::ContractMsg(contract.clone()),
            })?;
            bus.post(Message {
                sender: i,
                receiver: nbr,
                round: round_data(0),
                payload: Payload::NominalCoeffs {
                    start_step: 0,
                    stages: stages.clone(),
                },
            })?;
        }
    }

    let ocp_solve_opts = OcpSolveOptions::default();
    let mut records: Vec<StepRecord> = Vec::with_capacity(n_steps);
    let timing = std::env::var_os("RDMPC_TIMING").is_some();
    let mut t_ocp = std::time::Duration::ZERO;
    let mut t_plant = std::time::Duration::ZERO;
    let mut t_nominal = std::time::Duration::ZERO;
    let mut t_ident = std::time::Duration::ZERO;
    let mut ocp_inner_iters = 0usize;

    for step in 0..n_steps {
        let t = step as f64 * dt;

        // --- Phase 1: post interval deviations (identification input). ---
        if robust {
            for i in 0..n {
                let measured = (grids[i].model.coupling_fn)(&grids[i].x);
                let deviation: Vec<f64> = measured
                    .iter()
                    .zip(&grids[i].nominal_self)
                    .map(|(m, z)| m - z)
                    .collect();
                for &nbr in &topo.neighbor_lists[i] {
                    bus.post(Message {
                        sender: i,
                        receiver: nbr,
                        round: round_data(step),
                        payload: Payload::Deviation(deviation.clone()),
                    })?;
                }
            }
        }

        // --- Phase 2: collect exchanged data, solve controllers. ---
        for i in 0..n {
            for msg in bus.collect(i, round_data(step), &[PayloadKind::NominalCoeffs])? {
                if let Payload::NominalCoeffs { start_step, stages } = msg.payload {
                    grids[i].neighbor_nominals.insert(msg.sender, (start_step, stages));
                }
            }
            if robust {
                for msg in bus.collect(i, round_contracts(step), &[PayloadKind::ContractMsg])? {
                    if let Payload::ContractMsg(c) = msg.payload {
                        grids[i].neighbor_contracts.insert(msg.sender, c);
                    }
                }
            }
        }

        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut new_contracts: Vec<Option<Contract>> = vec![None; n];
        let clock = std::time::Instant::now();
        for i in 0..n {
            let grid = &grids[i];
            let attack_set = if robust {
                attack_scenarios(&grid.stats, tun.scenario_sigma_tol)
            } else {
                vec![vec![0.0; grid.model.n_u]]
            };

            // Coupling corridors: neighbors' contracts in robust mode, their
            // transmitted nominal sequences (zero width) otherwise.
            let corridor_contracts: Vec<Contract> = topo.neighbor_lists[i]
                .iter()
                .map(|&nbr| {
                    if robust {
                        grid.neighbor_contracts[&nbr].clone()
                    } else {
                        let stages: Vec<Vec<(f64, f64)>> = (0..n_p)
                            .map(|l| {
                                grid.neighbor_nominal_at(nbr, step + l)
                                    .iter()
                                    .map(|&v| (v, v))
                                    .collect()
                            })
                            .collect();
                        Contract {
                            subsystem: nbr,
                            first_stage: step,
                            stages,
                            dt_h: dt,
                        }
                    }
                })
                .collect();
            let contract_refs: Vec<&Contract> = corridor_contracts.iter().collect();

            let mut tree_opts = TreeOptions::new(n_p, config.robust_horizon);
            tree_opts.coupling_dedup_tol = 2.2 * tun.contract_margin;
            let tree = build_tree(
                &grid.x,
                step,
                &attack_set,
                &contract_refs,
                &[vec![]],
                &tree_opts,
            )?;

            let mut ocp_opts = OcpOptions::new(dt, grid.model.n_x);
            ocp_opts.state_margin[IDX_S] = tun.soc_margin;
            let prev_contract = if robust { Some(&grid.own_contract) } else { None };
            let program = assemble_ocp(&tree, &grid.model, &grid.cost, prev_contract, ocp_opts);

            // Warm start: previous plan shifted by one stage.
            let shifted: Vec<Vec<f64>> = (0..n_p)
                .map(|l| grid.plan[(l + 1).min(n_p - 1)].clone())
                .collect();
            let warm = program.warm_start_from_plan(&shifted);
            let solution = solve_ocp(
                &program,
                Some(&warm),
                grid.warm_multipliers.as_deref(),
                &ocp_solve_opts,
            );
            ocp_inner_iters += solution.iterations;
            if timing && solution.iterations > 600 {
                eprintln!(
                    "  slow ocp: step {step} grid {i} vars {} iters {} status {:?} viol {:.2e}",
                    program.n_vars(),
                    solution.iterations,
                    solution.status,
                    solution.max_violation
                );
            }

            let usable = solution.status == SolveStatus::Converged
                || (solution.status == SolveStatus::MaxIter && solution.max_violation <= 1e-4);
            let grid = &mut grids[i];
            if usable {
                // Reference plan: scenario 0's stage inputs.
                grid.plan = (0..n_p)
                    .map(|l| solution.inputs[tree.group_of[0][l]].clone())
                    .collect();
                grid.warm_multipliers = Some(solution.multipliers.clone());
                if robust {
                    let (contract, widened) = derive_contracts(
                        &solution,
                        &tree,
                        &grid.model,
                        tun.contract_margin,
                        Some(&grid.own_contract),
                        dt,
                    );
                    events.contract_widenings += widened;
                    new_contracts[i] = Some(contract);
                }
            } else {
                // Hold the shifted previous plan; re-promise the old corridor.
                events.controller_fallbacks += 1;
                grid.plan = shifted;
                grid.warm_multipliers = None;
                if robust {
                    new_contracts[i] = Some(grid.own_contract.clone());
                }
            }
            let u: Vec<f64> = grid.plan[0]
                .iter()
                .enumerate()
                .map(|(j, &v)| v.max(grid.model.u_lower[j]).min(grid.model.u_upper[j]))
                .collect();
            inputs.push(u);
        }

        if robust {
            for i in 0..n {
                let contract = new_contracts[i].take().expect("robust mode derives contracts");
                grids[i].own_contract = contract.clone();
                for &nbr in &topo.neighbor_lists[i] {
                    bus.post(Message {
                        sender: i,
                        receiver: nbr,
                        round: round_contracts(step + 1),
                        payload: Payload::ContractMsg(contract.clone()),
                    })?;
                }
            }
        }

        t_ocp += clock.elapsed();

        // --- Phase 3: inject attacks, advance the plant globally. ---
        let clock = std::time::Instant::now();
        let mut attacks: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut a = vec![0.0; grids[i].model.n_u];
            for (spec, ch) in &attacks_by_grid[i] {
                let one = inject_attack(spec, *ch, t, &mut rng, &inputs[i]);
                for (acc, v) in a.iter_mut().zip(&one) {
                    *acc += v;
                }
            }
            attacks.push(a);
        }

        let pre_states: Vec<Vec<f64>> = grids.iter().map(|g| g.x.clone()).collect();
        let mut violations = vec![false; n];
        for i in 0..n {
            let v: Vec<f64> = inputs[i]
                .iter()
                .zip(&attacks[i])
                .map(|(u, a)| u + a)
                .collect();
            let z_n: Vec<f64> = topo.neighbor_lists[i]
                .iter()
                .flat_map(|&l| pre_states[l][IDX_TR0..].to_vec())
                .collect();
            let mut x_next = integrate_step(&grids[i].model, &pre_states[i], &v, &z_n, &[], dt)?;
            if x_next[IDX_S] > 1.0 || x_next[IDX_S] < 0.0 {
                violations[i] = true;
                x_next[IDX_S] = x_next[IDX_S].clamp(0.0, 1.0);
            }
            grids[i].x = x_next;
        }

        t_plant += clock.elapsed();

        // --- Phase 4: nominal propagation and data posts for this step. ---
        let clock = std::time::Instant::now();
        let mut detected = vec![false; n];
        let mut sens_inputs: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; n];
        for i in 0..n {
            let nominal_n: Vec<Option<Vec<f64>>> = topo.neighbor_lists[i]
                .iter()
                .map(|&nbr| Some(grids[i].neighbor_nominal_at(nbr, step)))
                .collect();
            let nominal_refs: Vec<Option<&[f64]>> =
                nominal_n.iter().map(|o| o.as_deref()).collect();
            let nominal_next = nominal_coupling_step(
                &grids[i].model,
                &pre_states[i],
                &inputs[i],
                &nominal_refs,
                dt,
            )?;
            let measured_next = (grids[i].model.coupling_fn)(&grids[i].x);
            let dz_next: Vec<f64> = measured_next
                .iter()
                .zip(&nominal_next)
                .map(|(m, z)| m - z)
                .collect();
            if robust {
                detected[i] = detect(&dz_next, &det_cfg);
            }

            // Predicted nominal tail with the planned inputs, neighbors held
            // at their transmitted sequences.
            let mut stages: Vec<Vec<f64>> = Vec::with_capacity(n_p);
            stages.push(nominal_next.clone());
            let mut x_bar = {
                // State reached under zero attack is not measured; continue
                // the rollout from the measured state (receding horizon
                // refreshes this every step).
                grids[i].x.clone()
            };
            for j in 1..n_p {
                let u_plan = grids[i].plan[j.min(n_p - 1)].clone();
                let z_nom: Vec<f64> = topo.neighbor_lists[i]
                    .iter()
                    .flat_map(|&nbr| grids[i].neighbor_nominal_at(nbr, step + j))
                    .collect();
                x_bar = grids[i]
                    .model
                    .predict_step(&x_bar, &u_plan, &z_nom, &[], dt);
                stages.push((grids[i].model.coupling_fn)(&x_bar));
            }
            let stacked_nominal: Vec<f64> = topo.neighbor_lists[i]
                .iter()
                .flat_map(|&nbr| grids[i].neighbor_nominal_at(nbr, step))
                .collect();
            sens_inputs[i] = Some((stacked_nominal, inputs[i].clone()));

            for &nbr in &topo.neighbor_lists[i] {
                bus.post(Message {
                    sender: i,
                    receiver: nbr,
                    round: round_data(step + 1),
                    payload: Payload::NominalCoeffs {
                        start_step: step + 1,
                        stages: stages.clone(),
                    },
                })?;
            }
            grids[i].nominal_self = nominal_next;
        }

        if robust && config.adi_version == 2 {
            for i in 0..n {
                let (stacked_nominal, u_i) = sens_inputs[i].as_ref().unwrap();
                let (s_a, s_z) =
                    coupling_sensitivities(&grids[i].model, &pre_states[i], u_i, stacked_nominal, dt)
                        .map_err(|_| ExchangeError::TopologyViolation { sender: i, receiver: i })
                        .unwrap_or_else(|_| {
                            let nz = grids[i].model.n_z;
                            (
                                crate::linalg::Mat::zeros(nz, grids[i].model.n_u),
                                crate::linalg::Mat::zeros(nz, grids[i].model.n_zn()),
                            )
                        });
                let z_cols: Vec<(usize, usize)> = topo.neighbor_lists[i]
                    .iter()
                    .flat_map(|&m| (0..grids[m].model.n_z).map(move |c| (m, c)))
                    .collect();
                for &nbr in &topo.neighbor_lists[i] {
                    bus.post(Message {
                        sender: i,
                        receiver: nbr,
                        round: round_data(step),
                        payload: Payload::Sensitivities(SensitivityMsg {
                            s_a: s_a.clone(),
                            s_z: s_z.clone(),
                            z_cols: z_cols.clone(),
                        }),
                    })?;
                }
            }
        }

        t_nominal += clock.elapsed();

        // --- Phase 5: identification and statistics update. ---
        let clock = std::time::Instant::now();
        let mut suspicions: Vec<Suspicion> = Vec::with_capacity(n);
        for i in 0..n {
            if !robust {
                suspicions.push(Suspicion::zeros(grids[i].model.n_u));
                continue;
            }
            let deviations = bus.collect(i, round_data(step), &[PayloadKind::Deviation])?;
            let mut dev_by_sender: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for msg in deviations {
                if let Payload::Deviation(d) = msg.payload {
                    dev_by_sender.insert(msg.sender, d);
                }
            }
            let nominal_n: Vec<f64> = topo.neighbor_lists[i]
                .iter()
                .flat_map(|&nbr| grids[i].neighbor_nominal_at(nbr, step))
                .collect();
            let deviation_n: Vec<f64> = topo.neighbor_lists[i]
                .iter()
                .flat_map(|&nbr| dev_by_sender[&nbr].clone())
                .collect();
            let y_next = (grids[i].model.output_fn)(&grids[i].x);

            let result = if config.adi_version == 1 {
                identify_v1(
                    &grids[i].model,
                    &pre_states[i],
                    &inputs[i],
                    &y_next,
                    &nominal_n,
                    &deviation_n,
                    dt,
                    &det_cfg,
                )
            } else {
                let msgs = bus.collect(i, round_data(step), &[PayloadKind::Sensitivities])?;
                let parts: Vec<NeighborSensitivityPart> = msgs
                    .into_iter()
                    .map(|m| {
                        let sender = m.sender;
                        match m.payload {
                            Payload::Sensitivities(s) => NeighborSensitivityPart {
                                id: sender,
                                s_a: s.s_a,
                                s_z: s.s_z,
                                z_cols: s.z_cols,
                            },
                            _ => unreachable!("kind filter"),
                        }
                    })
                    .collect();
                let bundle = neighbor_sensitivities(&parts);
                identify_v2(
                    &grids[i].model,
                    &pre_states[i],
                    &inputs[i],
                    &y_next,
                    &nominal_n,
                    &bundle,
                    dt,
                    &det_cfg,
                    false,
                )
            };
            let suspicion = match result {
                Ok(s) => s,
                Err(_) => {
                    events.identification_failures += 1;
                    let mut s = Suspicion::zeros(grids[i].model.n_u);
                    s.status = SolveStatus::Infeasible;
                    s
                }
            };
            if suspicion.status == SolveStatus::Converged {
                update_stats(&mut grids[i].stats, &suspicion.a_star);
            } else if suspicion.status == SolveStatus::MaxIter {
                events.identification_failures += 1;
            }
            suspicions.push(suspicion);
        }

        t_ident += clock.elapsed();

        // --- Record the step. ---
        let post_states: Vec<Vec<f64>> = grids.iter().map(|g| g.x.clone()).collect();
        let mut grid_records = Vec::with_capacity(n);
        for i in 0..n {
            let x = &post_states[i];
            let z_in: Vec<f64> = grids[i]
                .inbound_offsets
                .iter()
                .zip(topo.neighbor_lists[i].iter())
                .map(|(_, &l)| {
                    let pos_in_l = topo.neighbor_lists[l]
                        .iter()
                        .position(|&m| m == i)
                        .expect("symmetric topology");
                    post_states[l][IDX_TR0 + pos_in_l]
                })
                .collect();
            let p_st = storage_power(x, &z_in, grids[i].params.p_load);
            let q = stage_cost_q(x[1], &x[IDX_TR0..], p_st, &grids[i].params.cost);
            let flows: Vec<f64> = z_in
                .iter()
                .zip(&x[IDX_TR0..])
                .map(|(zi, own)| zi - own)
                .collect();
            let l_cost = trade_cost_l(&flows, x[IDX_PM], schedule.price_at(t), &grids[i].params.cost);
            let stage_cost = dt * (q + l_cost);
            grids[i].cumulative += stage_cost;
            let mu = grids[i].stats.mean().to_vec();
            let sigma = grids[i].stats.std();
            grid_records.push(GridStepRecord {
                state: x.clone(),
                input: inputs[i].clone(),
                attack_true: attacks[i].clone(),
                a_star: suspicions[i].a_star.clone(),
                mu_g: mu[0],
                sigma_g: sigma[0],
                detected: detected[i],
                stage_cost,
                cumulative_cost: grids[i].cumulative,
                violation: violations[i],
            });
        }
        records.push(StepRecord {
            step,
            time_h: t,
            grids: grid_records,
        });

        bus.discard_before(round_contracts(step + 1));
    }

    if timing {
        eprintln!(
            "timing: ocp {t_ocp:.1?} ({ocp_inner_iters} inner iters), plant {t_plant:.1?}, nominal {t_nominal:.1?}, ident {t_ident:.1?}"
        );
    }

    // Terminal adjustment: battery discharge penalty over the whole run.
    for (i, grid) in grids.iter_mut().enumerate() {
        let s_final = grid.x[IDX_S];
        let terminal = terminal_cost_m(grid.soc0, s_final, &grid.params);
        grid.cumulative += terminal;
        if let Some(last) = records.last_mut() {
            last.grids[i].cumulative_cost = grid.cumulative;
        }
    }

    let summary = summarize_internal(&records, &grids);
    if let Some(dir) = out_dir {
        write_outputs(dir, config, &records, &summary)?;
    }
    Ok(RunResult {
        summary,
        records,
        events,
    })
}

fn summarize_internal(records: &[StepRecord], grids: &[GridRuntime]) -> Vec<GridSummary> {
    grids
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let violations = records.iter().filter(|r| r.grids[i].violation).count();
            let detections = records.iter().filter(|r| r.grids[i].detected).count();
            let (mu, sig) = records
                .last()
                .map(|r| (r.grids[i].mu_g, r.grids[i].sigma_g))
                .unwrap_or((0.0, 0.0));
            GridSummary {
                grid: i,
                total_cost: g.cumulative,
                violations,
                detections,
                final_mu_g: mu,
                final_sigma_g: sig,
            }
        })
        .collect()
}

/// Per-grid totals recomputed from a record trace: realized cost over the
/// run (stage costs plus the terminal battery adjustment), violation and
/// detection counts, final identified statistics.
pub fn summarize(records: &[StepRecord], config: &ExperimentConfig) -> Vec<GridSummary> {
    let n = config.n_grids();
    (0..n)
        .map(|i| {
            if records.is_empty() {
                return GridSummary {
                    grid: i,
                    total_cost: 0.0,
                    violations: 0,
                    detections: 0,
                    final_mu_g: 0.0,
                    final_sigma_g: 0.0,
                };
            }
            let stage_sum: f64 = records.iter().map(|r| r.grids[i].stage_cost).sum();
            let s_final = records.last().unwrap().grids[i].state[IDX_S];
            let params = config.grid_params(i);
            let terminal = terminal_cost_m(config.grids[i].soc0, s_final, &params);
            GridSummary {
                grid: i,
                total_cost: stage_sum + terminal,
                violations: records.iter().filter(|r| r.grids[i].violation).count(),
                detections: records.iter().filter(|r| r.grids[i].detected).count(),
                final_mu_g: records.last().unwrap().grids[i].mu_g,
                final_sigma_g: records.last().unwrap().grids[i].sigma_g,
            }
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    records: &[StepRecord],
    summary: &[GridSummary],
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    for (i, gc) in config.grids.iter().enumerate() {
        let path = dir.join(format!("trace_{}.csv", gc.id));
        let mut f = std::fs::File::create(path)?;
        let nbrs = &gc.neighbors;
        let mut header = String::from("step,time_h,soc,p_g,p_m");
        for nb in nbrs {
            header.push_str(&format!(",p_tr_{nb}"));
        }
        header.push_str(",u_g,u_m");
        for nb in nbrs {
            header.push_str(&format!(",u_tr_{nb}"));
        }
        header.push_str(",a_true_g,a_true_m");
        for nb in nbrs {
            header.push_str(&format!(",a_true_tr_{nb}"));
        }
        header.push_str(",a_star_g,a_star_m");
        for nb in nbrs {
            header.push_str(&format!(",a_star_tr_{nb}"));
        }
        header.push_str(",mu_g,sigma_g,detected,stage_cost,violation\n");
        f.write_all(header.as_bytes())?;
        for r in records {
            let g = &r.grids[i];
            let mut line = format!("{},{}", r.step, fmt(r.time_h));
            for v in &g.state {
                line.push(',');
                line.push_str(&fmt(*v));
            }
            for v in &g.input {
                line.push(',');
                line.push_str(&fmt(*v));
            }
            for v in &g.attack_true {
                line.push(',');
                line.push_str(&fmt(*v));
            }
            for v in &g.a_star {
                line.push(',');
                line.push_str(&fmt(*v));
            }
            line.push_str(&format!(
                ",{},{},{},{},{}\n",
                fmt(g.mu_g),
                fmt(g.sigma_g),
                u8::from(g.detected),
                fmt(g.stage_cost),
                u8::from(g.violation)
            ));
            f.write_all(line.as_bytes())?;
        }
    }
    let mut f = std::fs::File::create(dir.join("summary.csv"))?;
    f.write_all(b"grid,total_cost,violations,detections,final_mu_g,final_sigma_g\n")?;
    for s in summary {
        f.write_all(
            format!(
                "{},{},{},{},{},{}\n",
                s.grid,
                fmt(s.total_cost),
                s.violations,
                s.detections,
                fmt(s.final_mu_g),
                fmt(s.final_sigma_g)
            )
            .as_bytes(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inject_constant_attack() {
        let spec = AttackSpec {
            grid: 0,
            kind: AttackKind::Constant,
            channel: "g".into(),
            magnitude_kw: 10.0,
            stddev_kw: 0.0,
        };
        let mut rng = CounterRng::new(0);
        let a = inject_attack(&spec, 0, 3.0, &mut rng, &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a, vec![10.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_attack_truncates_against_input() {
        let spec = AttackSpec {
            grid: 0,
            kind: AttackKind::ConstantPlusGaussian,
            channel: "g".into(),
            magnitude_kw: -5.0,
            stddev_kw: 0.0,
        };
        let mut rng = CounterRng::new(0);
        let a = inject_attack(&spec, 0, 0.0, &mut rng, &[3.0, 0.0, 0.0, 0.0]);
        assert_eq!(a[0], -3.0);
    }

    #[test]
    fn gaussian_attack_statistics() {
        let spec = AttackSpec {
            grid: 0,
            kind: AttackKind::ConstantPlusGaussian,
            channel: "g".into(),
            magnitude_kw: 0.0,
            stddev_kw: 8.0,
        };
        let mut rng = CounterRng::new(17);
        let u = [1000.0, 0.0, 0.0, 0.0]; // effectively no truncation
        let draws: Vec<f64> = (0..192)
            .map(|_| inject_attack(&spec, 0, 0.0, &mut rng, &u)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!(mean.abs() < 2.0, "mean {mean}");
        assert!((var.sqrt() - 8.0).abs() < 1.5, "std {}", var.sqrt());
    }

    #[test]
    fn summarize_empty_records_is_zero() {
        let cfg = ExperimentConfig::default();
        let s = summarize(&[], &cfg);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].total_cost, 0.0);
        assert_eq!(s[0].violations, 0);
    }
}
