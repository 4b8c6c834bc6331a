//! `subflow` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime abort, 2 config error, 3 capability error
//! (the environment is too large to enumerate).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use subflow::checkpoint::Checkpoint;
use subflow::config::Config;
use subflow::env::State;
use subflow::oracle::theorems::{run_suite, SuiteConfig};
use subflow::oracle::{
    dp_forward_terminal_dist, dp_target_dist, dp_true_flow, dp_v_dagger, dp_w_dagger, PolicyTable, StateSpace,
};
use subflow::trainer::{evaluate, MetricsRow, Trainer};
use subflow::Error;

#[derive(Parser, Debug)]
#[command(name = "subflow", version, about = "Train and verify generative flow networks")]
struct Cli {
    /// Print progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured workflow and populate a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print one metrics row for a checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to `config.json` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump an exact table as CSV.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        what: Table,
        /// Policies to tabulate; uniform policies when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run the exact balance checks on random policies.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Add this amount to the evaluation function at one state.
        #[arg(long, requires = "perturb_at")]
        perturb_v: Option<f64>,
        /// Comma-separated cells of the perturbed state, e.g. `1,1`.
        #[arg(long, requires = "perturb_v")]
        perturb_at: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Table {
    Zstar,
    Flow,
    Pstar,
    Pf,
    Vdagger,
    Wdagger,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::NotEnumerable(_)) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    thread_cap()?;
    match cli.command {
        Command::Train { config, out, seed } => train(&config, &out, seed, cli.verbose),
        Command::Evaluate { ckpt, config, seed } => cmd_evaluate(&ckpt, config.as_deref(), seed),
        Command::Oracle { config, what, ckpt } => oracle(&config, what, ckpt.as_deref()),
        Command::Verify {
            config,
            seed,
            perturb_v,
            perturb_at,
        } => verify(&config, seed, perturb_v.zip(perturb_at), cli.verbose),
    }
}

/// `SUBFLOW_THREADS` must be a positive integer when set. The library runs
/// on the calling thread, so any positive cap is already satisfied.
fn thread_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var("SUBFLOW_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config {
                path: "SUBFLOW_THREADS".into(),
                message: format!("{v:?} is not a positive integer"),
            }
            .into()),
        },
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<Config> {
    let mut config = Config::from_path(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn train(config: &Path, out: &Path, seed: Option<u64>, verbose: bool) -> anyhow::Result<ExitCode> {
    let config = load_config(config, seed)?;
    let mut trainer = Trainer::new(&config)?;
    let summary = trainer.run_with(Some(out), |row| {
        if verbose {
            eprintln!("{}", row.to_csv_line());
        }
    })?;
    if verbose {
        eprintln!(
            "finished {} iterations ({} skipped) in {}",
            trainer.iteration(),
            summary.skipped,
            out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(ckpt_path: &Path, config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.json"),
    };
    let config = load_config(&config_path, seed)?;
    let row = evaluate(&ckpt, &config)?;
    println!("{}", MetricsRow::CSV_HEADER);
    println!("{}", row.to_csv_line());
    Ok(ExitCode::SUCCESS)
}

fn state_table(space: &StateSpace, column: &str, values: &[(usize, f64)]) {
    let d = space.states.first().map_or(0, |s| s.cells().len());
    let mut header: Vec<String> = (0..d).map(|i| format!("cell_{i}")).collect();
    header.push(column.to_string());
    println!("{}", header.join(","));
    for &(i, v) in values {
        let mut fields: Vec<String> = space.states[i].cells().iter().map(|c| c.to_string()).collect();
        fields.push(format!("{v:.16e}"));
        println!("{}", fields.join(","));
    }
}

fn oracle(config: &Path, what: Table, ckpt: Option<&Path>) -> anyhow::Result<ExitCode> {
    let config = load_config(config, None)?;
    let env = config.build_env()?;
    let env = env.as_ref();
    let space = StateSpace::new(env, config.train.state_cap)?;
    let (table, log_z) = match ckpt {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.fingerprint != env.fingerprint() {
                return Err(Error::Config {
                    path: "env".into(),
                    message: format!("checkpoint was trained on {}", ck.fingerprint),
                }
                .into());
            }
            ck.bundle.check_env(env)?;
            (PolicyTable::from_model(&space, env, &ck.bundle)?, ck.bundle.log_z)
        }
        None => (PolicyTable::uniform(&space, env)?, None),
    };
    let flow = dp_true_flow(&space, &table);
    let all = |v: &[f64]| -> Vec<(usize, f64)> { v.iter().copied().enumerate().collect() };
    match what {
        Table::Zstar => println!("{:.16e}", flow.log_z_star.exp()),
        Table::Flow => state_table(&space, "log_flow", &all(&flow.log_flow)),
        Table::Pstar | Table::Pf => {
            let dist = if what == Table::Pstar {
                dp_target_dist(&space)
            } else {
                dp_forward_terminal_dist(&space, &table)
            };
            let rows: Vec<(usize, f64)> = dist.terminals.iter().copied().zip(dist.probs.iter().copied()).collect();
            state_table(&space, "prob", &rows);
        }
        Table::Vdagger => {
            let v = dp_v_dagger(&space, &table, log_z.unwrap_or(0.0));
            state_table(&space, "v_dagger", &all(&v.values));
        }
        Table::Wdagger => {
            let w = dp_w_dagger(&space, &table, log_z.unwrap_or(flow.log_z_star));
            state_table(&space, "w_dagger", &all(&w.values));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_cells(text: &str) -> anyhow::Result<Vec<i32>> {
    text.split(',')
        .map(|c| {
            c.trim().parse::<i32>().map_err(|_| {
                Error::Config {
                    path: "--perturb-at".into(),
                    message: format!("{text:?} is not a comma-separated list of integers"),
                }
                .into()
            })
        })
        .collect()
}

fn verify(
    config: &Path,
    seed: Option<u64>,
    perturb: Option<(f64, String)>,
    verbose: bool,
) -> anyhow::Result<ExitCode> {
    let config = load_config(config, seed)?;
    let env = config.build_env()?;
    let env = env.as_ref();
    let space = StateSpace::new(env, config.train.state_cap)?;
    let perturb_v = match perturb {
        None => None,
        Some((delta, at)) => {
            let state = State::new(parse_cells(&at)?, 0);
            let idx = space.index_of(&state).map_err(|_| Error::Config {
                path: "--perturb-at".into(),
                message: format!("{state} is not a state of {}", env.fingerprint()),
            })?;
            Some((idx, delta))
        }
    };
    let suite = SuiteConfig {
        seed: config.seed,
        perturb_v,
        ..SuiteConfig::default()
    };
    if verbose {
        eprintln!("{} states, {} trials", space.len(), suite.trials);
    }
    let lines = run_suite(env, &space, &suite)?;
    let mut ok = true;
    for line in &lines {
        let pass = line.passed();
        ok &= pass;
        let op = if line.above { ">" } else { "<" };
        println!(
            "{} {}: max {:.3e} at {} ({op} {:.0e})",
            if pass { "PASS" } else { "FAIL" },
            line.name,
            line.value,
            line.at,
            line.bound
        );
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
