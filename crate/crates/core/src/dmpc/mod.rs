//! Contract-based multi-stage robust NMPC per subsystem: scenario-tree
//! construction over attack / neighbor-coupling / parameter realizations,
//! optimal control problem assembly with non-anticipativity and contract
//! constraints, solution, and contract derivation.

mod microgrid_ocp;
mod ocp;

pub use microgrid_ocp::{assemble_microgrid_split_ocp, MicrogridStageCost, SplitLayout};
pub use ocp::{
    assemble_ocp, solve_ocp, OcpOptions, OcpProgram, OcpSolution, OcpSolveOptions, StageCost,
};

use thiserror::Error;

use crate::dynamics::SubsystemId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmpcError {
    #[error("scenario tree would have {leaves} leaves, over the cap of {cap}")]
    TreeTooLarge { leaves: usize, cap: usize },
    #[error("assembly error: {0}")]
    AssemblyError(String),
}

/// Per-stage interval corridor for one subsystem's coupling variables.
///
/// Entry `stages[i]` bounds the couplings attained at absolute step
/// `first_stage + i` (the image of the chained coupling map evaluated on the
/// preceding stage's node).
#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    pub subsystem: SubsystemId,
    pub first_stage: usize,
    pub stages: Vec<Vec<(f64, f64)>>,
    pub dt_h: f64,
}

impl Contract {
    /// Zero-width corridor pinned at `values` for `n_stages` stages.
    pub fn degenerate(
        subsystem: SubsystemId,
        first_stage: usize,
        values: &[f64],
        n_stages: usize,
        dt_h: f64,
    ) -> Self {
        Contract {
            subsystem,
            first_stage,
            stages: vec![values.iter().map(|&v| (v, v)).collect(); n_stages],
            dt_h,
        }
    }

    pub fn n_coords(&self) -> usize {
        self.stages.first().map(|s| s.len()).unwrap_or(0)
    }

    /// Corridor at absolute step index, clamped to the last known stage when
    /// the horizon has outrun the corridor (receding-horizon padding).
    pub fn bounds_at(&self, step: usize) -> &Vec<(f64, f64)> {
        let i = step.saturating_sub(self.first_stage).min(self.stages.len() - 1);
        &self.stages[i]
    }

    /// Exact lookup without padding.
    pub fn bounds_at_exact(&self, step: usize) -> Option<&Vec<(f64, f64)>> {
        if step < self.first_stage {
            return None;
        }
        self.stages.get(step - self.first_stage)
    }

    /// Timestamp (hours) of each corridor stage.
    pub fn stage_times(&self) -> Vec<f64> {
        (0..self.stages.len())
            .map(|i| (self.first_stage + i) as f64 * self.dt_h)
            .collect()
    }

    pub fn validate(&self) -> Result<(), DmpcError> {
        for stage in &self.stages {
            for &(lo, hi) in stage {
                if lo > hi {
                    return Err(DmpcError::AssemblyError(format!(
                        "contract interval [{lo}, {hi}] inverted"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One uncertainty realization a tree stage can branch on.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub attack: Vec<f64>,
    /// Index into the tree's coupling-choice table.
    pub coupling_choice: usize,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Realization index taken at each branching stage; stages past the
    /// robust horizon continue with the last entry.
    pub path: Vec<usize>,
    pub weight: f64,
}

/// Node-indexed scenario structure over the prediction horizon.
///
/// With robust horizon `n_r`, the tree branches over the realization set at
/// stages `0..n_r` and each branch then continues without further branching.
/// Inputs at stage `l` are shared by all scenarios whose realization prefix
/// up to `min(l, n_r)` coincides (non-anticipativity).
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    pub x0: Vec<f64>,
    pub start_step: usize,
    pub n_p: usize,
    pub robust_horizon: usize,
    pub realizations: Vec<Realization>,
    pub scenarios: Vec<Scenario>,
    /// `coupling_values[choice][stage]` is the stacked neighbor-coupling
    /// vector used over that stage.
    pub coupling_values: Vec<Vec<Vec<f64>>>,
    pub groups: Vec<InputGroup>,
    /// groups index per (scenario, stage).
    pub group_of: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputGroup {
    pub stage: usize,
    pub key: Vec<usize>,
    pub scenarios: Vec<usize>,
}

impl ScenarioTree {
    pub fn n_scenarios(&self) -> usize {
        self.scenarios.len()
    }

    fn realization_at(&self, scenario: usize, stage: usize) -> &Realization {
        let path = &self.scenarios[scenario].path;
        &self.realizations[path[stage.min(path.len() - 1)]]
    }

    pub fn attack_at(&self, scenario: usize, stage: usize) -> &[f64] {
        &self.realization_at(scenario, stage).attack
    }

    pub fn w_at(&self, scenario: usize, stage: usize) -> &[f64] {
        &self.realization_at(scenario, stage).w
    }

    pub fn coupling_at(&self, scenario: usize, stage: usize) -> &[f64] {
        let choice = self.realization_at(scenario, stage).coupling_choice;
        &self.coupling_values[choice][stage]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeOptions {
    pub n_p: usize,
    pub robust_horizon: usize,
    pub leaf_cap: usize,
    pub dedup_tol: f64,
    /// Coupling choices whose stage values all agree within this tolerance
    /// merge into one scenario. Callers that inflate contracts by a fixed
    /// margin pass (a bit over twice) that margin here so the artificial
    /// inflation alone does not triple the tree.
    pub coupling_dedup_tol: f64,
}

impl TreeOptions {
    pub fn new(n_p: usize, robust_horizon: usize) -> Self {
        TreeOptions {
            n_p,
            robust_horizon: robust_horizon.max(1),
            leaf_cap: 729,
            dedup_tol: 1e-9,
            coupling_dedup_tol: 1e-9,
        }
    }
}

/// Build the scenario tree for the current step.
///
/// Branches on the cartesian product of attack scenarios, neighbor-coupling
/// scenarios (`lo`/`mid`/`hi` of the stacked contract corridor) and parameter
/// scenarios. Duplicate realizations are merged before branching; scenario
/// weights are uniform.
pub fn build_tree(
    x0: &[f64],
    start_step: usize,
    attack_set: &[Vec<f64>],
    neighbor_contracts: &[&Contract],
    param_set: &[Vec<f64>],
    opts: &TreeOptions,
) -> Result<ScenarioTree, DmpcError> {
    if attack_set.is_empty() {
        return Err(DmpcError::AssemblyError(
            "attack scenario set must be nonempty (use the zero vector before identification)".into(),
        ));
    }
    if param_set.is_empty() {
        return Err(DmpcError::AssemblyError(
            "parameter scenario set must be nonempty".into(),
        ));
    }

    // Stacked corridor per stage: [stage][coord] -> (lo, hi).
    let n_p = opts.n_p;
    let mut stacked: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_p];
    for contract in neighbor_contracts {
        for (l, row) in stacked.iter_mut().enumerate() {
            row.extend_from_slice(contract.bounds_at(start_step + l));
        }
    }

    // Three coupling choices over the corridor.
    let pick = |which: usize| -> Vec<Vec<f64>> {
        stacked
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&(lo, hi)| match which {
                        0 => lo,
                        1 => 0.5 * (lo + hi),
                        _ => hi,
                    })
                    .collect()
            })
            .collect()
    };
    let coupling_values: Vec<Vec<Vec<f64>>> = (0..3).map(pick).collect();

    // Candidate realizations, deduplicated on resolved values.
    let mut realizations: Vec<Realization> = Vec::new();
    for attack in attack_set {
        for choice in 0..3 {
            for w in param_set {
                let cand = Realization {
                    attack: attack.clone(),
                    coupling_choice: choice,
                    w: w.clone(),
                };
                let coupling_tol = opts.dedup_tol.max(opts.coupling_dedup_tol);
                let duplicate = realizations.iter().any(|r| {
                    vec_close(&r.attack, &cand.attack, opts.dedup_tol)
                        && vec_close(&r.w, &cand.w, opts.dedup_tol)
                        && coupling_close(
                            &coupling_values[r.coupling_choice],
                            &coupling_values[cand.coupling_choice],
                            coupling_tol,
                        )
                });
                if !duplicate {
                    realizations.push(cand);
                }
            }
        }
    }

    let b = realizations.len();
    let n_r = opts.robust_horizon.min(n_p);
    let leaves = b.checked_pow(n_r as u32).unwrap_or(usize::MAX);
    if leaves > opts.leaf_cap {
        return Err(DmpcError::TreeTooLarge {
            leaves,
            cap: opts.leaf_cap,
        });
    }

    // Scenario paths: all realization sequences over the branching stages.
    let mut paths: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..n_r {
        let mut next = Vec::with_capacity(paths.len() * b);
        for p in &paths {
            for r in 0..b {
                let mut q = p.clone();
                q.push(r);
                next.push(q);
            }
        }
        paths = next;
    }
    let weight = 1.0 / paths.len() as f64;
    let scenarios: Vec<Scenario> = paths
        .into_iter()
        .map(|path| Scenario { path, weight })
        .collect();

    // Non-anticipativity groups: shared realization prefix up to min(l, n_r).
    let mut groups: Vec<InputGroup> = Vec::new();
    let mut group_of = vec![vec![0usize; n_p]; scenarios.len()];
    for stage in 0..n_p {
        let plen = stage.min(n_r);
        let mut seen: Vec<(Vec<usize>, usize)> = Vec::new();
        for (si, sc) in scenarios.iter().enumerate() {
            let key = sc.path[..plen].to_vec();
            let gi = match seen.iter().find(|(k, _)| *k == key) {
                Some(&(_, gi)) => gi,
                None => {
                    let gi = groups.len();
                    groups.push(InputGroup {
                        stage,
                        key: key.clone(),
                        scenarios: Vec::new(),
                    });
                    seen.push((key, gi));
                    gi
                }
            };
            groups[gi].scenarios.push(si);
            group_of[si][stage] = gi;
        }
    }

    Ok(ScenarioTree {
        x0: x0.to_vec(),
        start_step,
        n_p,
        robust_horizon: n_r,
        realizations,
        scenarios,
        coupling_values,
        groups,
        group_of,
    })
}

fn vec_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn coupling_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| vec_close(x, y, tol))
}

/// Derive the updated contract from a solved tree: per stage, the min/max of
/// the chained coupling over all scenario nodes, inflated by `margin`.
///
/// Nesting into the previous contract is enforced softly: the consistency
/// constraint inside the OCP already keeps non-tail predictions inside the
/// old corridor, so the freshly derived corridor is published as is and rows
/// that escaped the old bounds (the free tail stage, adaptive attack-set
/// changes, solver tolerance) are only counted. Folding the old corridor in
/// instead would ratchet the corridor wider every step.
pub fn derive_contracts(
    solution: &OcpSolution,
    tree: &ScenarioTree,
    model: &crate::dynamics::SubsystemModel,
    margin: f64,
    prev: Option<&Contract>,
    dt_h: f64,
) -> (Contract, usize) {
    let n_p = tree.n_p;
    let n_z = model.n_z;
    let mut stages: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n_p);
    for l in 0..n_p {
        let mut row = vec![(f64::INFINITY, f64::NEG_INFINITY); n_z];
        for s in 0..tree.n_scenarios() {
            let zeta = (model.coupling_fn)(&solution.states[s][l + 1]);
            for (c, &v) in zeta.iter().enumerate() {
                row[c].0 = row[c].0.min(v);
                row[c].1 = row[c].1.max(v);
            }
        }
        for r in row.iter_mut() {
            r.0 -= margin;
            r.1 += margin;
        }
        stages.push(row);
    }

    let first_stage = tree.start_step + 1;
    let mut escaped = 0;
    if let Some(prev) = prev {
        for (i, row) in stages.iter().enumerate() {
            if let Some(prev_row) = prev.bounds_at_exact(first_stage + i) {
                for (c, r) in row.iter().enumerate() {
                    let (plo, phi) = prev_row[c];
                    if r.0 < plo - margin - 1e-12 || r.1 > phi + margin + 1e-12 {
                        escaped += 1;
                    }
                }
            }
        }
    }

    (
        Contract {
            subsystem: model.id,
            first_stage,
            stages,
            dt_h,
        },
        escaped,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate_contract(n_stages: usize) -> Contract {
        Contract::degenerate(1, 0, &[0.0], n_stages, 0.25)
    }

    #[test]
    fn singleton_sets_give_single_path() {
        let c = degenerate_contract(4);
        let tree = build_tree(
            &[0.0],
            0,
            &[vec![0.0]],
            &[&c],
            &[vec![]],
            &TreeOptions::new(4, 1),
        )
        .unwrap();
        assert_eq!(tree.n_scenarios(), 1);
        assert_eq!(tree.groups.len(), 4);
    }

    #[test]
    fn branching_counts_and_dedup() {
        // 3 attack values x 3 coupling choices on a widened corridor, with a
        // duplicated attack vector that must merge, robust horizon 2.
        let mut c = degenerate_contract(6);
        for row in c.stages.iter_mut() {
            row[0] = (-1.0, 1.0);
        }
        let attacks = vec![vec![0.0], vec![1.0], vec![-1.0], vec![1.0]];
        let tree = build_tree(
            &[0.0],
            0,
            &attacks,
            &[&c],
            &[vec![]],
            &TreeOptions::new(6, 2),
        )
        .unwrap();
        assert_eq!(tree.realizations.len(), 9);
        assert_eq!(tree.n_scenarios(), 81);
    }

    #[test]
    fn tree_cap_enforced() {
        let mut c = degenerate_contract(4);
        for row in c.stages.iter_mut() {
            row[0] = (-1.0, 1.0);
        }
        let attacks: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let mut opts = TreeOptions::new(4, 2);
        opts.leaf_cap = 100;
        let err = build_tree(&[0.0], 0, &attacks, &[&c], &[vec![]], &opts).unwrap_err();
        assert!(matches!(err, DmpcError::TreeTooLarge { leaves: 900, cap: 100 }));
    }

    #[test]
    fn group_structure_single_branch_horizon() {
        let mut c = degenerate_contract(3);
        for row in c.stages.iter_mut() {
            row[0] = (0.0, 2.0);
        }
        let tree = build_tree(
            &[0.0],
            0,
            &[vec![0.0]],
            &[&c],
            &[vec![]],
            &TreeOptions::new(3, 1),
        )
        .unwrap();
        assert_eq!(tree.n_scenarios(), 3);
        // Stage 0: one shared group; stages 1, 2: one group per scenario.
        let stage0: Vec<_> = tree.groups.iter().filter(|g| g.stage == 0).collect();
        assert_eq!(stage0.len(), 1);
        assert_eq!(stage0[0].scenarios.len(), 3);
        for stage in 1..3 {
            let gs: Vec<_> = tree.groups.iter().filter(|g| g.stage == stage).collect();
            assert_eq!(gs.len(), 3);
        }
        // Weights sum to one.
        let total: f64 = tree.scenarios.iter().map(|s| s.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contract_padding_holds_last_stage() {
        let c = Contract {
            subsystem: 0,
            first_stage: 5,
            stages: vec![vec![(0.0, 1.0)], vec![(2.0, 3.0)]],
            dt_h: 0.25,
        };
        assert_eq!(c.bounds_at(5), &vec![(0.0, 1.0)]);
        assert_eq!(c.bounds_at(6), &vec![(2.0, 3.0)]);
        assert_eq!(c.bounds_at(9), &vec![(2.0, 3.0)]);
        assert_eq!(c.bounds_at_exact(7), None);
        assert_eq!(c.bounds_at_exact(4), None);
    }
}
