use std::time::Duration;

use anyhow::{Context, Result};
use clap::Parser;
use tokio::net::TcpListener;

use dedup_core::edge::{synthetic_centroids, DEFAULT_CAPACITY, DEFAULT_COST_MS};
use dedup_core::{EdgeConfig, EdgeServer, Hasher, LshConfig, ServerId, ServiceDef};
use dedup_net::edge::{serve, EdgeState};

/// Emulated edge server with a reuse cache.
#[derive(Parser)]
#[command(name = "edge-server")]
struct Cli {
    #[arg(long)]
    id: u32,
    #[arg(long, default_value = "127.0.0.1:9001")]
    listen: String,
    /// Address the proxy should use to reach this server; defaults to the bound address.
    #[arg(long)]
    advertise: Option<String>,
    /// Proxy to register with and report to.
    #[arg(long)]
    proxy: Option<String>,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Must match the proxy's seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of services, named svc-0, svc-1, ...
    #[arg(long, default_value_t = 8)]
    services: usize,
    /// Classes per service.
    #[arg(long, default_value_t = 50)]
    classes: usize,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
    #[arg(long, default_value_t = DEFAULT_COST_MS)]
    cost_ms: f64,
    #[arg(long, default_value_t = 1.0)]
    notification_interval: f64,
    /// Piggyback per-group counts on responses.
    #[arg(long)]
    piggyback_groups: bool,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let hasher = Hasher::new(LshConfig::new(cli.bits, cli.dim, cli.seed)?)?;
    let centroids = synthetic_centroids(cli.dim, cli.classes, cli.seed, false)?;
    let services = (0..cli.services)
        .map(|i| ServiceDef::new(format!("svc-{i}"), centroids.clone(), cli.cost_ms))
        .collect::<dedup_core::Result<Vec<_>>>()?;
    let config = EdgeConfig { capacity: cli.capacity, piggyback_groups: cli.piggyback_groups, ..EdgeConfig::default() };
    let state = EdgeState::new(EdgeServer::new(ServerId(cli.id), hasher, services, config)?);

    let listener = TcpListener::bind(&cli.listen).await.with_context(|| format!("binding {}", cli.listen))?;
    let address = cli.advertise.clone().unwrap_or(listener.local_addr()?.to_string());
    tracing::info!(id = cli.id, %address, "edge server listening");
    let serving = tokio::spawn(serve(listener, state.clone()));
    if let Some(proxy) = cli.proxy {
        state.register(&proxy, &address).await.context("registering with the proxy")?;
        state.spawn_notifier(proxy, Duration::from_secs_f64(cli.notification_interval));
    }
    serving.await??;
    Ok(())
}
