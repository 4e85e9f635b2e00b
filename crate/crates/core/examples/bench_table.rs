//! The standard table at the minimum repetition count. The `hab bench`
//! command exposes sizes, repetitions and output files.

use std::time::Duration;

use hab::bench::{self, BenchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = bench::run_bench(&BenchConfig {
        sizes: bench::STANDARD_SIZES.to_vec(),
        reps: bench::MIN_REPS,
        cloud_delay: Duration::from_millis(1),
        ..BenchConfig::default()
    })?;
    print!("{}", report.render_text());
    Ok(())
}
