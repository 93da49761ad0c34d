use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use flowskel::bench::{run_example, BenchConfig, Mode};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Hello,
    Sieve,
    Farm,
    FarmNoc,
    Broadcast,
    Map,
    Accel,
    Speedup,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hello => Mode::Hello,
            ModeArg::Sieve => Mode::Sieve,
            ModeArg::Farm => Mode::Farm,
            ModeArg::FarmNoc => Mode::FarmNoc,
            ModeArg::Broadcast => Mode::Broadcast,
            ModeArg::Map => Mode::Map,
            ModeArg::Accel => Mode::Accel,
            ModeArg::Speedup => Mode::Speedup,
        }
    }
}

/// Runs the example topologies and the speedup benchmark.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Cli {
    mode: ModeArg,
    /// Workers (farm modes), sieve stages (sieve), or stages and workers (speedup).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[arg(long, default_value_t = 10)]
    stream_len: u64,
    /// Synthetic cost per task in microseconds (speedup).
    #[arg(long, default_value_t = 200)]
    task_cost_us: u64,
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    queue_capacity: u64,
    /// Collect per-node statistics.
    #[arg(long)]
    trace: bool,
    /// Write key=value results to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Matrix dimension (map).
    #[arg(long, default_value_t = 16)]
    dim: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = BenchConfig {
        mode: cli.mode.into(),
        workers: cli.workers as usize,
        stream_len: cli.stream_len,
        task_cost_us: cli.task_cost_us,
        queue_capacity: cli.queue_capacity as usize,
        trace: cli.trace,
        report: cli.report,
        dim: cli.dim,
    };
    let report = match run_example(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bench {}: {e}", cfg.mode);
            return ExitCode::from(1);
        }
    };
    let mut out = io::stdout().lock();
    let _ = report.write_human(&mut out);
    let _ = out.flush();
    if let Some(path) = &cfg.report {
        let written = File::create(path).and_then(|mut f| report.write_key_values(&mut f));
        if let Err(e) = written {
            eprintln!("bench: cannot write report {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        eprintln!("bench {}: self-check failed", cfg.mode);
        ExitCode::from(1)
    }
}
