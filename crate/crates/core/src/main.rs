use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ugd::dataset::save_features;
use ugd::error::{Result, UgdError};
use ugd::harness::{
    base_dataset, emit_report, load_results, method_seed, point_episode, prepare, run_episode, run_sweep,
    synthetic_data, write_jsonl, ExperimentConfig,
};
use ugd::stats::{compute_base_stats, save_stats};

#[derive(Parser)]
#[command(name = "ugd", version, about = "Few-shot partial multi-view classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for episode evaluation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write per-episode records (and traces for `run`).
    #[arg(long)]
    per_episode: bool,
    /// Config override, e.g. `--set k=4` or `--set data.noise=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic base and novel pools as feature containers.
    Synth(Common),
    /// Compute base-class statistics and write them to the output directory.
    Stats(Common),
    /// Evaluate every method at the first η of the config.
    Run(Common),
    /// Evaluate every method over the η grid.
    Sweep(Common),
    /// Re-render the report files from an existing results.json.
    Report {
        /// Path to results.json.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let base = match &c.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut config = base.with_overrides(&c.set)?;
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn print_points(result: &ugd::SweepResult) {
    for p in &result.points {
        println!(
            "{:<24} eta={:<4} acc={:.4} ± {:.4} (n={})",
            p.method, p.eta, p.mean_acc, p.std, p.n
        );
    }
}

fn sweep(c: &Common, config: ExperimentConfig) -> Result<()> {
    let bench = prepare(&config)?;
    let out = run_sweep(&config, &bench, c.jobs)?;
    let records = c.per_episode.then_some(out.episodes.as_slice());
    emit_report(&out.result, records, &c.out)?;
    print_points(&out.result);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let config = load_config(&c)?;
            let (base, novel) = synthetic_data(&config)?
                .ok_or_else(|| UgdError::Config("synth needs a synthetic data source".into()))?;
            std::fs::create_dir_all(&c.out).map_err(|e| UgdError::Io { path: c.out.clone(), source: e })?;
            for (set, name) in [(&base, "base"), (&novel, "novel")] {
                let path = save_features(set, &c.out, name)?;
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Stats(c) => {
            let config = load_config(&c)?;
            let base = base_dataset(&config)?
                .ok_or_else(|| UgdError::Config("stats needs base features".into()))?;
            let stats = compute_base_stats(&base)?;
            save_stats(&stats, &c.out)?;
            println!("{} base classes -> {}", stats.class_count(), c.out.display());
            Ok(())
        }
        Command::Run(c) => {
            let mut config = load_config(&c)?;
            config.etas.truncate(1);
            if c.per_episode && config.methods.contains(&ugd::Method::Ugd) {
                // traces of the first episode, one file per enabled stage
                let bench = prepare(&config)?;
                let eta = config.etas[0];
                let ep = point_episode(&config, &bench.novel, eta, 0)?;
                let outcome = run_episode(&config, &ep, &bench.stats, ugd::Method::Ugd, method_seed(&config, eta, 0))?;
                std::fs::create_dir_all(&c.out).map_err(|e| UgdError::Io { path: c.out.clone(), source: e })?;
                if let Some(t) = &outcome.aggregation_trace {
                    write_jsonl(&c.out.join("aggregation_trace.jsonl"), t)?;
                }
                if let Some(t) = &outcome.rectify_trace {
                    write_jsonl(&c.out.join("rectify_trace.jsonl"), t)?;
                }
            }
            sweep(&c, config)
        }
        Command::Sweep(c) => {
            let config = load_config(&c)?;
            sweep(&c, config)
        }
        Command::Report { input, out } => {
            let result = load_results(&input)?;
            emit_report(&result, None, &out)?;
            print_points(&result);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
