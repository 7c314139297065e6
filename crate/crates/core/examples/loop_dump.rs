// scratch: dump selected trajectories of a full run.
use rdmpc::harness::{run_experiment, ControllerMode, ExperimentConfig};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "exp1".into());
    let grid: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut config = match mode.as_str() {
        "exp1" => ExperimentConfig::experiment1(),
        "exp1n" => { let mut c = ExperimentConfig::experiment1(); c.controller = ControllerMode::Nonrobust; c }
        "exp2" => ExperimentConfig::experiment2(42),
        _ => ExperimentConfig::default(),
    };
    config.duration_h = 48.0;
    let r = run_experiment(&config, None).unwrap();
    println!("grid {grid} summary: {:?}", r.summary[grid]);
    for rec in r.records.iter().step_by(8) {
        let g = &rec.grids[grid];
        println!(
            "step {:>3} t {:>5.2}: soc {:.4} p_g {:>8.3} p_m {:>9.3} p_tr {:>7.3} {:>7.3} u_g {:>7.2} cost {:>10.2} cum {:>11.1}",
            rec.step, rec.time_h, g.state[0], g.state[1], g.state[2], g.state[3], g.state[4], g.input[0], g.stage_cost, g.cumulative_cost
        );
    }
}
