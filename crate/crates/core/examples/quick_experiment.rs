//! Runs an experiment config (or the default chain setup) into a temporary
//! directory and prints the metrics summary.
//!
//! cargo run --release -p patient0 --example quick_experiment -- [config.toml]

use std::time::Instant;

use patient0::config::ExperimentConfig;
use patient0::eval::run_experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let dir = std::env::temp_dir().join(format!("patient0-quick-{}", std::process::id()));
    let started = Instant::now();
    let out = run_experiment(&cfg, &dir, 1, &|m| eprintln!("{m}"))?;
    println!("{}", out.summary.to_json());
    eprintln!(
        "{:.1}s, artifacts in {}",
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}
