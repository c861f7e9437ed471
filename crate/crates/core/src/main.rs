use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use apm_brb::harness::experiments::{self, SuiteOptions};
use apm_brb::harness::{cost_report, run, ExperimentConfig, ProtocolKind};
use apm_brb::sampling::{param_table, write_param_csv};

#[derive(Parser)]
#[command(name = "apm-brb", version, about = "APM-BRB simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seeds to run, overriding the config (comma separated).
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration and check every invariant.
    Run(Common),
    /// Print the derived (n_c, phi) table as CSV.
    Params {
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000,10000")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.01")]
        epsilon: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit per-round cost and the amortized C(r)/r series.
    Amortize(Common),
    /// The adversarial-scheduler demonstration.
    Impossibility {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Accept {
        /// Criteria to run (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
        #[arg(long, default_value_t = 200)]
        seeds_per_point: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn seeds_and_out(c: &Common) -> anyhow::Result<(ExperimentConfig, Vec<u64>, Option<PathBuf>)> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let seeds = if c.seed.is_empty() { cfg.seeds.clone() } else { c.seed.clone() };
    let out = c.out.clone().or_else(|| cfg.out.clone());
    if let Some(dir) = &out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok((cfg, seeds, out))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn lag(cfg: &ExperimentConfig) -> anyhow::Result<u64> {
    Ok(match cfg.protocol {
        ProtocolKind::Apm => cfg.params()?.phi,
        ProtocolKind::Bracha => 0,
    })
}

fn cmd_run(c: &Common) -> anyhow::Result<bool> {
    let (cfg, seeds, out) = seeds_and_out(c)?;
    let lag = lag(&cfg)?;
    let mut clean = true;
    for seed in seeds {
        let res = run(&cfg, seed)?;
        let rep = cost_report(&res.transcript, lag);
        let ok = res.invariants.ok();
        clean &= ok;
        println!(
            "seed {seed}: {} steps, {} honest bits, {} deliveries, invariants {}",
            res.transcript.outcome.steps,
            rep.total_bits,
            rep.deliveries_by_path.values().sum::<u64>(),
            if ok { "ok".to_string() } else { format!("VIOLATED ({})", res.invariants.first().cloned().unwrap_or_default()) }
        );
        if let Some(dir) = &out {
            res.transcript.write_json(&dir.join(format!("transcript-{seed}.json")))?;
            write_json(&dir.join(format!("report-{seed}.json")), &serde_json::json!({
                "params": res.params, "faults": res.faults, "invariants": res.invariants,
                "stats": res.stats, "cost": rep,
            }))?;
        }
    }
    Ok(clean)
}

fn cmd_amortize(c: &Common) -> anyhow::Result<bool> {
    let (cfg, seeds, out) = seeds_and_out(c)?;
    let lag = lag(&cfg)?;
    if cfg.rounds <= lag {
        eprintln!("warning: rounds ({}) <= phi ({lag}); amortization is unobservable", cfg.rounds);
    }
    let mut clean = true;
    for seed in seeds {
        let res = run(&cfg, seed)?;
        clean &= res.invariants.ok();
        let rep = cost_report(&res.transcript, lag);
        match &out {
            Some(dir) => {
                let file = fs::File::create(dir.join(format!("amortize-{seed}.csv")))?;
                rep.write_csv(file)?;
                write_json(&dir.join(format!("cost-{seed}.json")), &rep)?;
            }
            None => rep.write_csv(std::io::stdout())?,
        }
        eprintln!(
            "seed {seed}: steady round cost {:.0} bits, C(r)/r at r={} is {:.0}",
            rep.steady_round_bits,
            rep.amortized.len(),
            rep.amortized.last().copied().unwrap_or(0.0)
        );
    }
    Ok(clean)
}

fn cmd_params(n: &[usize], epsilon: &[f64], out: Option<&Path>) -> anyhow::Result<bool> {
    let points: Vec<(usize, usize, f64)> =
        n.iter().flat_map(|&n| epsilon.iter().map(move |&e| (n, n.saturating_sub(1) / 3, e))).collect();
    let rows = param_table(&points)?;
    match out {
        Some(path) => write_param_csv(&rows, fs::File::create(path)?)?,
        None => write_param_csv(&rows, std::io::stdout())?,
    }
    Ok(true)
}

fn cmd_accept(criteria: &[u8], seeds_per_point: u64, out: Option<&Path>) -> anyhow::Result<bool> {
    let ids: Vec<u8> = if criteria.is_empty() { experiments::ALL.to_vec() } else { criteria.to_vec() };
    let opts = SuiteOptions { seeds_per_point, ..SuiteOptions::default() };
    let mut results = Vec::new();
    for id in ids {
        let Some(r) = experiments::run_criterion(id, &opts) else {
            anyhow::bail!("unknown criterion {id}");
        };
        println!("{}", r.line());
        results.push(r);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("acceptance.json"), &results)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Amortize(c) => cmd_amortize(c),
        Command::Params { n, epsilon, out } => cmd_params(n, epsilon, out.as_deref()),
        Command::Impossibility { out } => {
            experiments::run_criterion(8, &SuiteOptions::default()).map_or(Ok(false), |r| {
                println!("{}", r.line());
                if let Some(path) = out {
                    write_json(path, &r)?;
                }
                Ok(r.passed)
            })
        }
        Command::Accept { criteria, seeds_per_point, out } => cmd_accept(criteria, *seeds_per_point, out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
