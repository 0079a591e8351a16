use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use perprompt::corpus::{synth_generate, SynthSpec};
use perprompt::evaluation::Strategy;
use perprompt::experiment::{analyze_out, compare_runs, run_manifest, write_analysis, write_json, Analysis, Manifest, RunOptions};
use perprompt::Error;

#[derive(Parser)]
#[command(name = "perprompt", version, about = "Writer-personalized prompting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a TOML spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every stage of an experiment manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First run seed; combined with --seeds gives seed, seed+1, ...
        #[arg(long)]
        seed: Option<u64>,
        /// Number of run seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Recompute stages even when their outputs are current.
        #[arg(long)]
        force: bool,
        /// Writers fine-tuned individually on top of fine_tuning runs.
        #[arg(long)]
        writers_subset: Option<usize>,
        /// Unknown-writer strategy (repeatable): no_prompt, zero_shot, approx.
        #[arg(long)]
        strategy: Vec<String>,
        /// Parallel runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Consistency groups and unknown-writer tables from finished runs.
    Analyze {
        /// Experiment directory to scan, or where to write a pairwise report.
        #[arg(long)]
        out: PathBuf,
        /// Explicit run directory and its baseline run directory.
        #[arg(num_args = 0..=2)]
        runs: Vec<PathBuf>,
        /// Bootstrap seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_spec(path: &Path, seed: Option<u64>) -> Result<SynthSpec, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut spec: SynthSpec = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let spec = read_spec(&config, seed)?;
            let corpus = synth_generate(&spec)?;
            corpus.write_to(&out)?;
            println!(
                "wrote {} sentiment, {} hashtag and {} history records to {}",
                corpus.sentiment.len(),
                corpus.hashtag.len(),
                corpus.histories.len(),
                out.display()
            );
        }
        Command::Run {
            config,
            out,
            seed,
            seeds,
            force,
            writers_subset,
            strategy,
            jobs,
        } => {
            let text = fs::read_to_string(&config)
                .map_err(|e| Error::config(format!("cannot read manifest {}: {e}", config.display())))?;
            let mut m = Manifest::from_toml(&text)?;
            if seed.is_some() || seeds.is_some() {
                let first = seed.unwrap_or(m.seeds[0]);
                let n = seeds.unwrap_or(m.seeds.len());
                if n == 0 {
                    return Err(Error::config("--seeds must be positive"));
                }
                m.seeds = (first..first + n as u64).collect();
            }
            if writers_subset.is_some() {
                m.writers_subset = writers_subset;
            }
            if !strategy.is_empty() {
                m.unknown_strategies = strategy.iter().map(|s| Strategy::parse(s)).collect::<Result<_, _>>()?;
            }
            m.validate()?;
            let summary = run_manifest(&m, &text, &out, &RunOptions { force, jobs })?;
            print!("{}", summary.to_table(&m.method_rows()));
        }
        Command::Analyze { out, runs, seed } => {
            let analysis = match runs.as_slice() {
                [] => analyze_out(&out, seed)?,
                [a, b] => Analysis {
                    consistency: vec![compare_runs(a, b, seed)?],
                    unknown: Vec::new(),
                },
                _ => return Err(Error::config("analyze takes either no run directories or a run and its baseline")),
            };
            let dir = if runs.is_empty() { out.join("analysis") } else { out.clone() };
            write_analysis(&analysis, &dir)?;
            write_json(&dir.join("analysis.json"), &analysis)?;
            for r in &analysis.consistency {
                println!(
                    "{} vs {}: Ga {:.1}% Gb {:.1}% Gc {:.1}%",
                    r.run, r.baseline, r.pct_a, r.pct_b, r.pct_c
                );
            }
            for r in &analysis.unknown {
                println!(
                    "{} {}{} {}: {:.4} ± {:.4}",
                    r.task.as_str(),
                    r.method.as_str(),
                    if r.intermediate { "+inter" } else { "" },
                    r.strategy.as_str(),
                    r.mean,
                    r.std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
