use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fsdt_core::fed::Algo;
use fsdt_core::harness::{
    check_reference_counts, collect_client_data, eval_algo, report, train_algo, Layout, RunConfig, SplitTable,
};
use fsdt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fsdt", version, about = "Federated split decision transformer for multi-RAT MEC VR streaming")]
struct Cli {
    /// TOML run configuration; defaults apply to omitted fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the configuration
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Communication rounds, overriding the configuration
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Output directory, overriding the configuration
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect offline training and held-out corpora for every client
    Collect,
    /// Train one method
    Train {
        #[arg(long, value_parser = parse_algo)]
        algo: Algo,
    },
    /// Evaluate trained checkpoints on the test split
    Eval {
        /// Evaluate only this method; by default every trained one
        #[arg(long, value_parser = parse_algo)]
        algo: Option<Algo>,
    },
    /// Write plot-ready summaries of all evaluated runs
    Report,
    /// Print subnetwork parameter counts
    Params,
}

fn parse_algo(s: &str) -> std::result::Result<Algo, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !cli.seed.is_empty() {
        run.seeds = cli.seed.clone();
    }
    if let Some(r) = cli.rounds {
        run.fed.rounds = r;
    }
    if let Some(out) = &cli.out {
        run.out = out.clone();
    }
    run.validate()?;
    Ok(run)
}

fn run(cli: &Cli) -> Result<()> {
    let run = load_config(cli)?;
    match &cli.command {
        Command::Collect => {
            for &seed in &run.seeds {
                for d in collect_client_data(&run, seed)? {
                    println!(
                        "seed {seed} {}: {} training and {} held-out episodes",
                        d.client,
                        d.train.len(),
                        d.heldout.len()
                    );
                }
            }
        }
        Command::Train { algo } => {
            for &seed in &run.seeds {
                let out = train_algo(&run, *algo, seed)?;
                let curve = out.heldout_curve();
                println!(
                    "seed {seed} {algo}: held-out loss {:.5} -> {:.5}, {} scalars exchanged",
                    curve.first().copied().unwrap_or(f64::NAN),
                    curve.last().copied().unwrap_or(f64::NAN),
                    out.ledger.total()
                );
            }
        }
        Command::Eval { algo } => {
            let layout = Layout::new(&run.out);
            for &seed in &run.seeds {
                let algos: Vec<Algo> = match algo {
                    Some(a) => vec![*a],
                    None => Algo::ALL
                        .into_iter()
                        .filter(|a| layout.algo_dir(seed, *a).join("checkpoints").exists())
                        .collect(),
                };
                if algos.is_empty() {
                    return Err(Error::Usage(format!("nothing trained for seed {seed}; run train first")));
                }
                for a in algos {
                    let rec = eval_algo(&run, a, seed)?;
                    let mean = rec.episodes.iter().map(|e| e.episode_return).sum::<f64>() / rec.episodes.len() as f64;
                    println!("seed {seed} {a}: mean return {mean:.3} over {} episodes", rec.episodes.len());
                }
            }
        }
        Command::Report => {
            for path in report(&run)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Params => {
            print!("{}", SplitTable::new(&run.model).render());
            check_reference_counts()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Contract(_) => 3,
                _ => 1,
            })
        }
    }
}
