// scratch: short closed-loop runs for development.
use rdmpc::harness::{run_experiment, ControllerMode, ExperimentConfig};
use std::time::Instant;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "nominal".into());
    let hours: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let mut config = match mode.as_str() {
        "exp1" => ExperimentConfig::experiment1(),
        "exp1n" => {
            let mut c = ExperimentConfig::experiment1();
            c.controller = ControllerMode::Nonrobust;
            c
        }
        "exp2" => ExperimentConfig::experiment2(42),
        _ => ExperimentConfig::default(),
    };
    config.duration_h = hours;
    let t0 = Instant::now();
    match run_experiment(&config, None) {
        Ok(r) => {
            println!("{} steps in {:.1?}", r.records.len(), t0.elapsed());
            for s in &r.summary {
                println!(
                    "grid {}: cost {:.2} viol {} det {} mu_g {:.5} sig_g {:.5}",
                    s.grid, s.total_cost, s.violations, s.detections, s.final_mu_g, s.final_sigma_g
                );
            }
            println!(
                "events: fallbacks {} ident-fail {} widenings {}",
                r.events.controller_fallbacks,
                r.events.identification_failures,
                r.events.contract_widenings
            );
            // Identification and SoC trajectory of grid 0 for a quick look.
            for rec in r.records.iter().step_by((r.records.len() / 8).max(1)) {
                let g = &rec.grids[0];
                println!(
                    "  step {:>3}: soc {:.4} p_g {:>7.3} p_m {:>8.3} u_g {:>7.3} a_true {:>7.3} a* {:>7.3} cost {:>9.2}",
                    rec.step, g.state[0], g.state[1], g.state[2], g.input[0], g.attack_true[0], g.a_star[0], g.stage_cost
                );
            }
        }
        Err(e) => println!("run failed: {e}"),
    }
}
