//! CLI-facing orchestration: configuration, deterministic RNG, the closed
//! loop over the benchmark, metrics, and CSV emission.

pub mod config;
pub mod rng;
pub mod run;

pub use config::{
    AttackKind, AttackSpec, ConfigError, ControllerMode, ExperimentConfig, GridConfig,
    PriceConfig, Tunables,
};
pub use rng::CounterRng;
pub use run::{
    inject_attack, run_experiment, summarize, GridStepRecord, GridSummary, HarnessError,
    RunEvents, RunResult, StepRecord,
};
