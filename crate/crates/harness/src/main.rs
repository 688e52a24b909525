use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dedup_core::{ServerId, Strategy};
use dedup_harness::report::emit_csv;
use dedup_harness::{
    failure_and_addition_scenario, generate_workload, run_experiment, threshold_adaptation, AdaptationConfig,
    Deployment, WorkloadConfig,
};

#[derive(Parser)]
#[command(name = "harness", about = "Run load-distribution experiments on synthetic correlated tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare strategies and write a metrics CSV.
    Run {
        /// Strategy name, or `all`.
        #[arg(long, default_value = "all")]
        strategy: String,
        /// Comma-separated server counts.
        #[arg(long, value_delimiter = ',', default_value = "3")]
        servers: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Scripted run that adds a server and later fails one.
    Scenario {
        #[arg(value_parser = ["add-fail"])]
        name: String,
        #[arg(long, default_value = "reuse-adaptive")]
        strategy: Strategy,
        #[arg(long, default_value_t = 3)]
        servers: usize,
        /// Server to fail.
        #[arg(long, default_value_t = 2)]
        fail: u32,
        /// Write the event log here as JSON.
        #[arg(long)]
        events: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Tune the similarity threshold towards a target reuse accuracy.
    AdaptThreshold {
        #[arg(long, default_value = "reuse-adaptive")]
        strategy: Strategy,
        #[arg(long, default_value_t = 3)]
        servers: usize,
        #[arg(long, default_value_t = 90.0)]
        target: f64,
        #[arg(long, default_value_t = 5.0)]
        margin: f64,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 25)]
        group_size: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 16)]
    bits: u32,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    #[arg(long, default_value_t = 0.95)]
    intra_sim: f64,
    #[arg(long, default_value_t = 1.1)]
    zipf: f64,
    #[arg(long, default_value_t = 10_000)]
    tasks: usize,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, default_value_t = 8)]
    services: usize,
    #[arg(long, default_value_t = 100)]
    clients: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Tasks per second of simulated time.
    #[arg(long, default_value_t = 100.0)]
    arrival_rate: f64,
    /// Seconds between slice redistributions.
    #[arg(long, default_value_t = 5.0)]
    redistribution_interval: f64,
    /// Whitespace bytes appended to each request body.
    #[arg(long, default_value_t = 0)]
    padding: usize,
    /// Clients send precomputed signatures.
    #[arg(long)]
    user_assisted: bool,
    #[arg(long)]
    orthogonal: bool,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn workload(&self) -> WorkloadConfig {
        WorkloadConfig {
            dim: self.dim,
            clusters: self.clusters,
            intra_similarity: self.intra_sim,
            zipf_s: self.zipf,
            tasks: self.tasks,
            services: (0..self.services).map(|i| format!("svc-{i}")).collect(),
            threshold: self.threshold,
            seed: self.seed,
            clients: self.clients,
            orthogonal: self.orthogonal,
            payload_padding: self.padding,
            user_assisted: self.user_assisted,
        }
    }

    fn deployment(&self, servers: usize) -> Deployment {
        Deployment {
            servers,
            bits: self.bits,
            reps: self.reps,
            arrival_rate: self.arrival_rate,
            redistribution_secs: self.redistribution_interval,
        }
    }

    fn output(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => Box::new(File::create(path).with_context(|| format!("creating {}", path.display()))?),
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { strategy, servers, common } => {
            let strategies: Vec<Strategy> = if strategy == "all" {
                Strategy::ALL.to_vec()
            } else {
                vec![strategy.parse()?]
            };
            let cfg = common.workload();
            let mut reports = Vec::new();
            for &n in &servers {
                for &s in &strategies {
                    let r = run_experiment(s, &common.deployment(n), &cfg)?;
                    eprintln!("{s:>20} n={n}: reuse {:.2}%", r.percent_reuse);
                    reports.push(r);
                }
            }
            emit_csv(&reports, common.output()?)?;
        }
        Command::Scenario { name: _, strategy, servers, fail, events, common } => {
            if fail == 0 || fail as usize > servers {
                bail!("--fail must name one of the {servers} initial servers");
            }
            let workload = generate_workload(&common.workload())?;
            let outcome = failure_and_addition_scenario(strategy, &common.deployment(servers), &workload, ServerId(fail))?;
            if let Some(path) = events {
                serde_json::to_writer_pretty(File::create(&path)?, &outcome.events)?;
            }
            emit_csv(&[outcome.report], common.output()?)?;
        }
        Command::AdaptThreshold { strategy, servers, target, margin, step, iterations, groups, group_size, common } => {
            let workload = generate_workload(&common.workload())?;
            let acfg = AdaptationConfig { target, margin, step, iterations, groups, group_size };
            let steps = threshold_adaptation(strategy, &common.deployment(servers), &workload, common.threshold, &acfg)?;
            let mut w = csv::Writer::from_writer(common.output()?);
            w.write_record(["iteration", "threshold", "estimated_accuracy", "percent_reuse"])?;
            for s in steps {
                w.write_record([
                    s.iteration.to_string(),
                    format!("{:.4}", s.threshold),
                    s.estimated_accuracy.map_or_else(|| "NA".into(), |a| format!("{a:.2}")),
                    format!("{:.4}", s.percent_reuse),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
