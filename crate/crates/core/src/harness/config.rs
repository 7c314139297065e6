//! Experiment configuration: JSON schema, defaults matching the benchmark
//! tables, and validation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microgrid::{
    table_params, MicrogridParams, PriceSchedule, Topology, PACK_RESISTANCE_SCALE, TABLE_C_G,
    TABLE_Q_ST_KAH, TABLE_R_ST_MOHM, TABLE_SOC0,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::microgrid::MicrogridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerMode {
    Robust,
    Nonrobust,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub id: usize,
    pub q_st_kah: f64,
    pub r_st_mohm: f64,
    pub c_g: f64,
    pub soc0: f64,
    pub neighbors: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Constant,
    ConstantPlusGaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub grid: usize,
    pub kind: AttackKind,
    /// "g", "m", or "tr<pos>" (transfer slot by neighbor-list position).
    #[serde(default = "default_channel")]
    pub channel: String,
    #[serde(default)]
    pub magnitude_kw: f64,
    #[serde(default)]
    pub stddev_kw: f64,
}

fn default_channel() -> String {
    "g".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    /// (start_h, end_h, value) bands covering a day.
    pub import: Vec<(f64, f64, f64)>,
    pub export: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_duration")]
    pub duration_h: f64,
    #[serde(default = "default_dt")]
    pub dt_h: f64,
    #[serde(default = "default_horizon")]
    pub horizon_h: f64,
    #[serde(default = "default_robust_horizon")]
    pub robust_horizon: usize,
    #[serde(default = "default_controller")]
    pub controller: ControllerMode,
    #[serde(default = "default_adi_version")]
    pub adi_version: u8,
    #[serde(default = "default_tau_d")]
    pub tau_d_kw: f64,
    #[serde(default = "default_eps_i")]
    pub eps_i: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grids")]
    pub grids: Vec<GridConfig>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_prices")]
    pub prices: PriceConfig,
}

fn default_duration() -> f64 {
    48.0
}
fn default_dt() -> f64 {
    0.25
}
fn default_horizon() -> f64 {
    6.0
}
fn default_robust_horizon() -> usize {
    1
}
fn default_controller() -> ControllerMode {
    ControllerMode::Robust
}
fn default_adi_version() -> u8 {
    1
}
fn default_tau_d() -> f64 {
    1e-2
}
fn default_eps_i() -> f64 {
    1e-3
}

fn default_grids() -> Vec<GridConfig> {
    (0..3)
        .map(|i| GridConfig {
            id: i,
            q_st_kah: TABLE_Q_ST_KAH[i],
            r_st_mohm: TABLE_R_ST_MOHM[i],
            c_g: TABLE_C_G[i],
            soc0: TABLE_SOC0[i],
            neighbors: (0..3).filter(|j| *j != i).collect(),
        })
        .collect()
}

fn default_prices() -> PriceConfig {
    let s = PriceSchedule::benchmark();
    PriceConfig {
        import: s.import,
        export: s.export,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// Internal tuning knobs, deliberately outside the JSON schema.
#[derive(Debug, Clone, Copy)]
pub struct Tunables {
    /// Channel spread below which the attack scenario set collapses the
    /// channel to its mean (kW).
    pub scenario_sigma_tol: f64,
    /// SoC tightening inside the OCP bounds.
    pub soc_margin: f64,
    /// Contract interval inflation (kW).
    pub contract_margin: f64,
    /// Trade-kink smoothing half-width in the OCP (kW).
    pub smoothing_kw: f64,
}

impl Default for Tunables {
    fn default() -> Self {
        Tunables {
            scenario_sigma_tol: 1e-3,
            soc_margin: 2e-3,
            contract_margin: 1e-3,
            smoothing_kw: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn experiment1() -> Self {
        let mut c = ExperimentConfig::default();
        c.attacks = vec![AttackSpec {
            grid: 0,
            kind: AttackKind::Constant,
            channel: "g".into(),
            magnitude_kw: 10.0,
            stddev_kw: 0.0,
        }];
        c
    }

    pub fn experiment2(seed: u64) -> Self {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.attacks = vec![AttackSpec {
            grid: 0,
            kind: AttackKind::ConstantPlusGaussian,
            channel: "g".into(),
            magnitude_kw: 10.0,
            stddev_kw: 8.0,
        }];
        c
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn n_steps(&self) -> usize {
        (self.duration_h / self.dt_h).round() as usize
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon_h / self.dt_h).round() as usize
    }

    pub fn n_grids(&self) -> usize {
        self.grids.len()
    }

    pub fn topology(&self) -> Topology {
        Topology {
            neighbor_lists: self.grids.iter().map(|g| g.neighbors.clone()).collect(),
        }
    }

    pub fn price_schedule(&self) -> PriceSchedule {
        PriceSchedule {
            import: self.prices.import.clone(),
            export: self.prices.export.clone(),
        }
    }

    /// Model parameters of grid `idx`, combining the per-grid config values
    /// with the global table defaults.
    pub fn grid_params(&self, idx: usize) -> MicrogridParams {
        let g = &self.grids[idx];
        let mut p = table_params(idx.min(2));
        p.q_st = g.q_st_kah;
        p.r_st = g.r_st_mohm * PACK_RESISTANCE_SCALE;
        p.cost.c_g = g.c_g;
        p
    }

    /// Attack channel index within the input vector of its grid.
    pub fn channel_index(&self, spec: &AttackSpec) -> Result<usize, ConfigError> {
        let n_tr = self.grids[spec.grid].neighbors.len();
        match spec.channel.as_str() {
            "g" => Ok(0),
            "m" => Ok(1),
            other => {
                if let Some(pos) = other.strip_prefix("tr") {
                    let j: usize = pos.parse().map_err(|_| {
                        ConfigError::Invalid(format!("bad attack channel '{other}'"))
                    })?;
                    if j < n_tr {
                        return Ok(2 + j);
                    }
                }
                Err(ConfigError::Invalid(format!(
                    "attack channel '{other}' not in grid {}",
                    spec.grid
                )))
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let steps = self.duration_h / self.dt_h;
        if self.dt_h <= 0.0 || (steps - steps.round()).abs() > 1e-9 || steps < 1.0 {
            return Err(ConfigError::Invalid(
                "duration_h must be a positive integer multiple of dt_h".into(),
            ));
        }
        let horizon = self.horizon_h / self.dt_h;
        if (horizon - horizon.round()).abs() > 1e-9 || horizon < 1.0 {
            return Err(ConfigError::Invalid(
                "horizon_h must be a positive integer multiple of dt_h".into(),
            ));
        }
        if self.robust_horizon < 1 || self.robust_horizon > 2 {
            return Err(ConfigError::Invalid(
                "robust_horizon must be 1 or 2".into(),
            ));
        }
        if !(self.adi_version == 1 || self.adi_version == 2) {
            return Err(ConfigError::Invalid("adi_version must be 1 or 2".into()));
        }
        if self.tau_d_kw <= 0.0 || self.eps_i < 0.0 {
            return Err(ConfigError::Invalid(
                "tau_d_kw must be positive, eps_i nonnegative".into(),
            ));
        }
        if self.grids.is_empty() {
            return Err(ConfigError::Invalid("at least one grid".into()));
        }
        for (i, g) in self.grids.iter().enumerate() {
            if g.id != i {
                return Err(ConfigError::Invalid(format!(
                    "grid ids must be 0..n in order, found {} at {i}",
                    g.id
                )));
            }
            if !(0.0..=1.0).contains(&g.soc0) {
                return Err(ConfigError::Invalid(format!(
                    "grid {i} initial SoC {} outside [0, 1]",
                    g.soc0
                )));
            }
            self.grid_params(i).validate()?;
        }
        self.topology().validate()?;
        for a in &self.attacks {
            if a.grid >= self.grids.len() {
                return Err(ConfigError::Invalid(format!(
                    "attack targets unknown grid {}",
                    a.grid
                )));
            }
            self.channel_index(a)?;
        }
        self.price_schedule().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_benchmark() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_steps(), 192);
        assert_eq!(c.horizon_steps(), 24);
        assert_eq!(c.grids.len(), 3);
        assert_eq!(c.grids[1].q_st_kah, 200.0);
        assert_eq!(c.grids[2].c_g, 2.0);
        assert_eq!(c.grids[0].soc0, 0.9);
    }

    #[test]
    fn json_roundtrip_with_exact_keys() {
        let text = r#"{
            "duration_h": 12.0,
            "dt_h": 0.25,
            "horizon_h": 6.0,
            "robust_horizon": 1,
            "controller": "robust",
            "adi_version": 1,
            "tau_d_kw": 0.01,
            "eps_i": 0.001,
            "seed": 7,
            "grids": [
                {"id": 0, "q_st_kah": 100.0, "r_st_mohm": 1.5, "c_g": 0.2, "soc0": 0.9, "neighbors": [1]},
                {"id": 1, "q_st_kah": 200.0, "r_st_mohm": 2.0, "c_g": 3.0, "soc0": 0.5, "neighbors": [0]}
            ],
            "attacks": [
                {"grid": 0, "kind": "constant", "channel": "g", "magnitude_kw": 10.0, "stddev_kw": 0.0}
            ],
            "prices": {
                "import": [[0.0, 24.0, 100.0]],
                "export": [[0.0, 24.0, 0.0]]
            }
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.n_steps(), 48);
        assert_eq!(c.channel_index(&c.attacks[0]).unwrap(), 0);
        let round = serde_json::to_string(&c).unwrap();
        let c2 = ExperimentConfig::from_json(&round).unwrap();
        assert_eq!(c2.grids.len(), 2);
    }

    #[test]
    fn rejects_nonintegral_step_counts() {
        let mut c = ExperimentConfig::default();
        c.duration_h = 48.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json(r#"{"no_such_key": 1}"#).is_err());
    }

    #[test]
    fn rejects_bad_attack_channel() {
        let mut c = ExperimentConfig::default();
        c.attacks = vec![AttackSpec {
            grid: 0,
            kind: AttackKind::Constant,
            channel: "tr9".into(),
            magnitude_kw: 1.0,
            stddev_kw: 0.0,
        }];
        assert!(c.validate().is_err());
    }
}
