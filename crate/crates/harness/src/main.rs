use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lmpc_harness::compare::{compare, load_run_set};
use lmpc_harness::config::{load, parse_override, Ablation};
use lmpc_harness::replay::{replay, ReplayOptions};
use lmpc_harness::run::{output_root, run_dir, run_experiment};
use lmpc_harness::selftest;

#[derive(Parser)]
#[command(name = "lmpc", about = "Latent MPC experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write one directory per seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, repeatable; applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        ablation: Option<String>,
        /// Output root; defaults to $LMPC_OUT, then ./out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare run sets; the first is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "return")]
        metric: String,
        #[arg(long, default_value = "eval")]
        phase: String,
        /// Average each seed over this many final grid points.
        #[arg(long, default_value_t = 1)]
        last: usize,
        /// Write the aggregated curves here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run acting from a checkpoint without learning.
    Replay {
        /// A `seed_*` directory written by `run`.
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        env_seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_plan: bool,
        #[arg(long)]
        eval: bool,
        /// NDJSON dump destination; stdout by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

fn run_cmd(config: PathBuf, overrides: Vec<String>, ablation: Option<String>, out: Option<PathBuf>) -> ExitCode {
    let parsed: Result<Vec<_>, _> = overrides.iter().map(|s| parse_override(s)).collect();
    let ablation = match ablation.map(|a| a.parse::<Ablation>()).transpose() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cfg = match parsed.and_then(|o| load(&config, &o, ablation)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let root = output_root(out.as_deref());
    println!("config {} -> {}", cfg.hash, run_dir(&root, &cfg).display());
    match run_experiment(&cfg, &root) {
        Ok(outcomes) => {
            let mut ok = true;
            for o in outcomes {
                match &o.error {
                    None => println!("seed {}: complete", o.seed),
                    Some(e) => {
                        ok = false;
                        println!("seed {}: incomplete ({e})", o.seed);
                    }
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, overrides, ablation, out } => run_cmd(config, overrides, ablation, out),
        Command::Compare { runs, metric, phase, last, csv } => {
            let sets: Result<Vec<_>, _> = runs.iter().map(|r| load_run_set(r, &metric, &phase)).collect();
            match sets.and_then(|s| compare(s, &metric, last)) {
                Ok(report) => {
                    print!("{}", report.table());
                    if let Some(p) = csv {
                        if let Err(e) = std::fs::write(&p, report.aggregated_csv()) {
                            eprintln!("error: {}: {e}", p.display());
                            return ExitCode::FAILURE;
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Replay { run, checkpoint, env_seed, episodes, steps, no_plan, eval, out } => {
            let opts = ReplayOptions { checkpoint, env_seed, episodes, max_steps: steps, no_plan, eval };
            let result = replay(&run, &opts).map_err(|e| e.to_string()).and_then(|r| {
                let written = match &out {
                    Some(p) => std::fs::File::create(p).and_then(|f| r.write_ndjson(std::io::BufWriter::new(f))),
                    None => r.write_ndjson(std::io::stdout().lock()),
                };
                written.map(|_| r).map_err(|e| e.to_string())
            });
            match result {
                Ok(r) => {
                    for (i, e) in r.episodes.iter().enumerate() {
                        eprintln!("episode {i}: return {:.4}, {} steps", e.ret, e.records.len());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Selftest => {
            let mut ok = true;
            for c in selftest::run_all() {
                ok &= c.passed;
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
