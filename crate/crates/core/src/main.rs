//! Command-line front end: run closed-loop experiments and print summaries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rdmpc::harness::{run_experiment, ControllerMode, ExperimentConfig};

const USAGE: &str = "\
usage:
  rdmpc simulate --config <path> [--controller robust|nonrobust] [--adi-version 1|2] [--seed N] [--out <dir>]
  rdmpc report --in <dir>

simulate runs the configured closed loop and writes trace_<grid>.csv and
summary.csv into the output directory (default ./out). report pretty-prints
an existing summary.csv.";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("simulate") => simulate(&args[1..]),
        Some("report") => report(&args[1..]),
        _ => {
            eprintln!("{USAGE}");
            ExitCode::from(2)
        }
    }
}

fn flag_value<'a>(args: &'a [String], name: &str) -> Option<&'a str> {
    args.iter()
        .position(|a| a == name)
        .and_then(|i| args.get(i + 1))
        .map(String::as_str)
}

fn simulate(args: &[String]) -> ExitCode {
    let Some(config_path) = flag_value(args, "--config") else {
        eprintln!("simulate: --config <path> is required\n{USAGE}");
        return ExitCode::from(2);
    };
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("simulate: cannot read {config_path}: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut config = match ExperimentConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("simulate: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(mode) = flag_value(args, "--controller") {
        config.controller = match mode {
            "robust" => ControllerMode::Robust,
            "nonrobust" => ControllerMode::Nonrobust,
            other => {
                eprintln!("simulate: unknown controller mode '{other}'");
                return ExitCode::from(2);
            }
        };
    }
    if let Some(v) = flag_value(args, "--adi-version") {
        config.adi_version = match v {
            "1" => 1,
            "2" => 2,
            other => {
                eprintln!("simulate: adi version must be 1 or 2, got '{other}'");
                return ExitCode::from(2);
            }
        };
    }
    if let Some(seed) = flag_value(args, "--seed") {
        match seed.parse() {
            Ok(s) => config.seed = s,
            Err(_) => {
                eprintln!("simulate: bad seed '{seed}'");
                return ExitCode::from(2);
            }
        }
    }
    let out: PathBuf = flag_value(args, "--out").unwrap_or("out").into();

    match run_experiment(&config, Some(&out)) {
        Ok(result) => {
            println!(
                "simulated {} steps over {} grids -> {}",
                result.records.len(),
                result.summary.len(),
                out.display()
            );
            print_summary_rows(
                result
                    .summary
                    .iter()
                    .map(|s| {
                        (
                            s.grid.to_string(),
                            s.total_cost,
                            s.violations,
                            s.detections,
                            s.final_mu_g,
                            s.final_sigma_g,
                        )
                    })
                    .collect(),
            );
            if result.events.controller_fallbacks > 0 || result.events.identification_failures > 0 {
                println!(
                    "events: {} controller fallbacks, {} identification failures, {} contract widenings",
                    result.events.controller_fallbacks,
                    result.events.identification_failures,
                    result.events.contract_widenings
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("simulate: {e}");
            ExitCode::FAILURE
        }
    }
}

fn report(args: &[String]) -> ExitCode {
    let Some(dir) = flag_value(args, "--in") else {
        eprintln!("report: --in <dir> is required\n{USAGE}");
        return ExitCode::from(2);
    };
    let path = Path::new(dir).join("summary.csv");
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("report: cannot read {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            eprintln!("report: malformed line '{line}'");
            return ExitCode::FAILURE;
        }
        let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        rows.push((
            cols[0].to_string(),
            parse(cols[1]),
            cols[2].parse().unwrap_or(0),
            cols[3].parse().unwrap_or(0),
            parse(cols[4]),
            parse(cols[5]),
        ));
    }
    print_summary_rows(rows);
    ExitCode::SUCCESS
}

fn print_summary_rows(rows: Vec<(String, f64, usize, usize, f64, f64)>) {
    println!(
        "{:>4} {:>14} {:>10} {:>10} {:>12} {:>12}",
        "grid", "total_cost", "violations", "detections", "final_mu_g", "final_sig_g"
    );
    for (grid, cost, viol, det, mu, sigma) in rows {
        println!("{grid:>4} {cost:>14.2} {viol:>10} {det:>10} {mu:>12.4} {sigma:>12.4}");
    }
}
