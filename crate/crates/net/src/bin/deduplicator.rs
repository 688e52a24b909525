use std::time::Duration;

use anyhow::{Context, Result};
use clap::Parser;
use tokio::net::TcpListener;

use dedup_core::{DedupConfig, Deduplicator, LshConfig, RegistrationMessage, ServerId, Strategy};
use dedup_net::proxy::{serve, ProxyState};

/// Reuse-aware load-balancing proxy.
#[derive(Parser)]
#[command(name = "deduplicator")]
struct Cli {
    #[arg(long, default_value = "reuse-adaptive")]
    strategy: Strategy,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    /// Feature vector dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Seconds between slice redistributions.
    #[arg(long, default_value_t = 5.0)]
    redistribution_interval: f64,
    #[arg(long, default_value_t = 64)]
    group_count: u32,
    #[arg(long, default_value_t = 1)]
    min_slice: u64,
    /// Seeds the hyperplanes; edge servers must use the same value.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    cpu_threshold: f64,
    #[arg(long, default_value_t = 0.9)]
    mem_threshold: f64,
    #[arg(long, default_value_t = 2.0)]
    response_timeout: f64,
    #[arg(long, default_value_t = 1.0)]
    notification_interval: f64,
    #[arg(long, default_value_t = 3)]
    k_missed: u32,
    /// Servers known at start, as `id=host:port`. More can register later.
    #[arg(long = "server", value_parser = parse_server)]
    servers: Vec<RegistrationMessage>,
}

fn parse_server(s: &str) -> Result<RegistrationMessage, String> {
    let (id, address) = s.split_once('=').ok_or("expected id=host:port")?;
    let id = id.trim_start_matches('S').parse().map_err(|e| format!("server id: {e}"))?;
    Ok(RegistrationMessage { server: ServerId(id), address: address.to_owned() })
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let mut cfg = DedupConfig::new(cli.strategy, LshConfig::new(cli.bits, cli.dim, cli.seed)?);
    cfg.slices.group_count = cli.group_count;
    cfg.slices.min_slice = cli.min_slice;
    cfg.cpu_threshold = cli.cpu_threshold;
    cfg.mem_threshold = cli.mem_threshold;
    cfg.redistribution_interval = Duration::from_secs_f64(cli.redistribution_interval);
    cfg.response_timeout = Duration::from_secs_f64(cli.response_timeout);
    cfg.notification_interval = Duration::from_secs_f64(cli.notification_interval);
    cfg.k_missed = cli.k_missed;

    let state = ProxyState::new(Deduplicator::new(cfg, &cli.servers)?);
    state.spawn_background();
    let listener = TcpListener::bind(&cli.listen).await.with_context(|| format!("binding {}", cli.listen))?;
    tracing::info!(address = %listener.local_addr()?, strategy = %cli.strategy, "deduplicator listening");
    serve(listener, state).await?;
    Ok(())
}
