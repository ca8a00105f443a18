use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use selfspec::config::Config;
use selfspec::cost::{speedup, CostModelParams, SpecConfig};
use selfspec::engine::{greedy_decode, Request, SpecEngine};
use selfspec::numerics::{Token, ToyModel};
use selfspec::selftest::run_selftest;
use selfspec::sim::{generate_workload, random_prompts, run_cost_sim, run_token_sim};
use selfspec::{Error, Result};

#[derive(Parser)]
#[command(name = "selfspec", version, about = "Sparse self-speculative decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one prompt on the toy model and check it against greedy decoding.
    Decode {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated token ids; a random prompt from the workload seed otherwise.
        #[arg(long, value_delimiter = ',')]
        prompt: Option<Vec<Token>>,
        #[arg(long, default_value_t = 128)]
        max_output: usize,
        /// Per-round acceptance CSV.
        #[arg(long)]
        rounds_csv: Option<PathBuf>,
    },
    /// Run the serving simulation and write `<stem>.csv` and `<stem>.json`.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "sim")]
        stem: String,
        /// Run the toy model for every request instead of sampling acceptance.
        #[arg(long)]
        tokens: bool,
    },
    /// Cost-level runs over the grid k x s x alpha x batch, one CSV row each.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        s: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        /// Admission limits.
        #[arg(long, value_delimiter = ',', required = true)]
        batch: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form speedup for one operating point.
    Speedup {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        batch: f64,
        /// Total KV bytes of the batch.
        #[arg(long)]
        kv_bytes: f64,
        /// Takes the `[cost]` section from this file; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run the invariant suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    s: f64,
    alpha: f64,
    batch: usize,
    tokens_per_second: f64,
    eta: f64,
    total_ms: f64,
    mean_batch: f64,
    recomputation_ratio: f64,
}

fn decode(config: &Path, prompt: Option<Vec<Token>>, max_output: usize, rounds_csv: Option<PathBuf>) -> Result<()> {
    let cfg = Config::load(config)?;
    let model = ToyModel::init(cfg.model_config())?;
    let prompt = match prompt {
        Some(p) => p,
        None => {
            let first = generate_workload(&cfg.workload)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Config("workload has no requests".into()))?;
            random_prompts(&[first], model.config().vocab_size, cfg.sim.seed).remove(0).prompt
        }
    };
    let engine = SpecEngine::new(&model, cfg.spec_params())?;
    let out = engine.decode(&Request { id: 0, prompt: prompt.clone(), max_output })?;
    if out.tokens != greedy_decode(&model, &prompt, max_output, cfg.spec.eos)? {
        return Err(Error::Invariant("speculative output differs from greedy decoding".into()));
    }
    if let Some(path) = rounds_csv {
        out.stats.write_csv(std::fs::File::create(path)?)?;
    }
    let tokens: Vec<String> = out.tokens.iter().map(|t| t.to_string()).collect();
    println!("tokens: {}", tokens.join(","));
    println!(
        "rounds: {}  realized alpha: {:.4}  matches greedy decoding",
        out.stats.rounds.len(),
        out.stats.realized_alpha()
    );
    Ok(())
}

fn simulate(config: &Path, out: &Path, stem: &str, tokens: bool) -> Result<()> {
    let cfg = Config::load(config)?;
    let sim = cfg.sim_config();
    let workload = generate_workload(&cfg.workload)?;
    let report = if tokens {
        let model = ToyModel::init(cfg.model_config())?;
        let requests = random_prompts(&workload, model.config().vocab_size, cfg.sim.seed);
        run_token_sim(&sim, &model, &requests)?
    } else {
        run_cost_sim(&sim, &workload)?
    };
    std::fs::create_dir_all(out)?;
    report.emit(out, stem)?;
    report.write_json(io::stdout().lock())
}

fn sweep(config: &Path, ks: &[usize], ss: &[f64], alphas: &[f64], batches: &[usize], out: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let workload = generate_workload(&cfg.workload)?;
    let mut grid = Vec::new();
    for &k in ks {
        for &s in ss {
            for &alpha in alphas {
                for &batch in batches {
                    grid.push((k, s, alpha, batch));
                }
            }
        }
    }
    let rows: Vec<SweepRow> = grid
        .into_par_iter()
        .map(|(k, s, alpha, batch)| {
            let mut sim = cfg.sim_config();
            (sim.k, sim.s, sim.alpha, sim.max_batch) = (k, s, alpha, batch);
            sim.validate()?;
            let r = run_cost_sim(&sim, &workload)?;
            Ok(SweepRow {
                k,
                s,
                alpha,
                batch,
                tokens_per_second: r.tokens_per_second,
                eta: r.eta,
                total_ms: r.total_ms(),
                mean_batch: r.mean_batch,
                recomputation_ratio: r.recomputation_ratio(),
            })
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(out).map_err(Error::from)?;
    for row in &rows {
        w.serialize(row).map_err(Error::from)?;
    }
    w.flush()?;
    println!("{} grid points written to {}", rows.len(), out.display());
    Ok(())
}

fn speedup_cmd(c: SpecConfig, config: Option<PathBuf>, json: bool) -> Result<()> {
    let params = match config {
        Some(path) => Config::load(&path)?.cost,
        None => CostModelParams::default(),
    };
    let r = speedup(&params, &c)?;
    let mut stdout = io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut stdout, &r)?;
        writeln!(stdout)?;
    } else {
        let mut w = csv::Writer::from_writer(stdout);
        w.serialize(r)?;
        w.flush()?;
    }
    Ok(())
}

fn selftest(seed: u64) -> Result<()> {
    let report = run_selftest(seed);
    for c in &report.checks {
        println!("{:<4} {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }
    report.into_result().map(|_| ())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode { config, prompt, max_output, rounds_csv } => decode(&config, prompt, max_output, rounds_csv),
        Command::Simulate { config, out, stem, tokens } => simulate(&config, &out, &stem, tokens),
        Command::Sweep { config, k, s, alpha, batch, out } => sweep(&config, &k, &s, &alpha, &batch, &out),
        Command::Speedup { k, alpha, s, batch, kv_bytes, config, json } => {
            speedup_cmd(SpecConfig { k, alpha, s, batch, kv_bytes }, config, json)
        }
        Command::Selftest { seed } => selftest(seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Invariant(_) => 3,
                _ => 1,
            })
        }
    }
}
