use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use hab::api::{ApiConfig, Service};
use hab::bench::{self, BenchConfig};

#[derive(Parser)]
#[command(name = "hab", version, about = "Health Access Broker service and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        /// TOML configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time split, encrypt, upload, revocation and policy update.
    Bench {
        #[arg(long, default_value = "1k,10k,100k,500k,1m")]
        sizes: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// Text report destination; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Newline-delimited JSON rows.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Simulated per-request cloud latency in milliseconds.
        #[arg(long, default_value_t = 2)]
        cloud_delay_ms: u64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve { config } => serve(config),
        Command::Bench {
            sizes,
            reps,
            out,
            json,
            cloud_delay_ms,
            seed,
        } => run_bench(&sizes, reps, out, json, cloud_delay_ms, seed),
    }
}

fn serve(path: Option<PathBuf>) -> ExitCode {
    let config = match path.map(ApiConfig::load).unwrap_or_else(|| Ok(ApiConfig::default())) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let config = match config.with_env_overrides() {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let service = match Service::build(config) {
        Ok(s) => Arc::new(s),
        Err(e) => return fail(&e),
    };
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match runtime.block_on(service.serve(shutdown)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn run_bench(
    sizes: &str,
    reps: usize,
    out: Option<PathBuf>,
    json: Option<PathBuf>,
    cloud_delay_ms: u64,
    seed: u64,
) -> ExitCode {
    let sizes = match bench::parse_sizes(sizes) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let config = BenchConfig {
        sizes,
        reps,
        cloud_delay: Duration::from_millis(cloud_delay_ms),
        seed,
        ..BenchConfig::default()
    };
    let report = match bench::run_bench(&config) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let text = report.render_text();
    print!("{text}");
    for (path, body) in [(out, text), (json, report.render_jsonl())] {
        if let Some(path) = path {
            if let Err(e) = std::fs::write(&path, body) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        }
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: structural checks failed");
        ExitCode::from(2)
    }
}

fn fail(e: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::FAILURE
}
